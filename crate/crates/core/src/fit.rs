//! Table-based fitting in two phases: Gaussian parameters against color
//! targets, then per-point feature descriptors against feature targets with
//! the geometry frozen.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffer::Image;
use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::grad::{render_backward, ParamGradients};
use crate::losses::{l1_loss, l1_loss_grad, psnr};
use crate::primitives::{logit, ParamGroup, ParamTable, PointCloud, Scene, DEFAULT_FEATURE_DIM};
use crate::raster::{render, PayloadSelect, RasterConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub feature: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            feature: 2.5e-3,
        }
    }
}

impl LearningRates {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Position => self.position,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Scale => self.scale,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Color => self.color,
            ParamGroup::Feature => self.feature,
        }
    }

    fn only(group: ParamGroup, lr: f64) -> Self {
        let mut out = Self {
            position: 0.0,
            rotation: 0.0,
            scale: 0.0,
            opacity: 0.0,
            color: 0.0,
            feature: 0.0,
        };
        match group {
            ParamGroup::Position => out.position = lr,
            ParamGroup::Rotation => out.rotation = lr,
            ParamGroup::Scale => out.scale = lr,
            ParamGroup::Opacity => out.opacity = lr,
            ParamGroup::Color => out.color = lr,
            ParamGroup::Feature => out.feature = lr,
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub steps: usize,
    pub learning_rates: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Evaluate every N steps; 0 evaluates only before the first and after the last step.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rates: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Domain("steps must be at least 1".into()));
        }
        for g in ParamGroup::ALL {
            let lr = self.learning_rates.get(g);
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::Domain(format!("learning rate for {} must be ≥ 0", g.name())));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Domain("optimizer betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Domain("optimizer epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates of the adaptive optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: ParamTable,
    pub second_moment: ParamTable,
}

impl AdamState {
    pub fn new(scene: &Scene) -> Self {
        Self {
            step: 0,
            first_moment: scene.zeros_like(),
            second_moment: scene.zeros_like(),
        }
    }
}

/// Resolved per-group step sizes and moment decay rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rates: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// One bias-corrected adaptive-moment update. Groups with a zero learning
/// rate are left untouched.
pub fn optimizer_step(
    params: &mut Scene,
    grads: &ParamGradients,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len()
        || grads.feature_dim() != params.feature_dim()
        || state.first_moment.len() != params.len()
        || state.first_moment.feature_dim() != params.feature_dim()
    {
        return Err(Error::ShapeMismatch(format!(
            "optimizer step on {} gaussians (D={}) with gradients for {} (D={})",
            params.len(),
            params.feature_dim(),
            grads.len(),
            grads.feature_dim()
        )));
    }
    for group in ParamGroup::ALL {
        if let Some(i) = grads.group(group).iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                index: i,
                group: group.name(),
                value: grads.group(group)[i],
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    let (b1, b2, eps) = (config.beta1, config.beta2, config.epsilon);
    for group in ParamGroup::ALL {
        let lr = config.learning_rates.get(group);
        let g = grads.group(group);
        let m = state.first_moment.group_mut(group);
        for (m, g) in m.iter_mut().zip(g) {
            *m = b1 * *m + (1.0 - b1) * g;
        }
        let v = state.second_moment.group_mut(group);
        for (v, g) in v.iter_mut().zip(g) {
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
        if lr == 0.0 {
            continue;
        }
        let m = state.first_moment.group(group).to_vec();
        let v = state.second_moment.group(group);
        for ((p, m), v) in params.group_mut(group).iter_mut().zip(&m).zip(v) {
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A camera and the image it should see.
#[derive(Debug, Clone)]
pub struct View {
    pub camera: CameraModel,
    pub target: Image,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    /// Number of optimizer steps taken before this evaluation.
    pub step: usize,
    pub psnr: Vec<f64>,
    pub l1: Vec<f64>,
}

impl EvalRecord {
    pub fn mean_psnr(&self) -> f64 {
        self.psnr.iter().sum::<f64>() / self.psnr.len() as f64
    }

    pub fn mean_l1(&self) -> f64 {
        self.l1.iter().sum::<f64>() / self.l1.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub loss_trace: Vec<f64>,
    pub view_trace: Vec<usize>,
    pub evals: Vec<EvalRecord>,
    pub step_seconds: Vec<f64>,
}

impl FitReport {
    pub fn initial_eval(&self) -> &EvalRecord {
        self.evals.first().expect("fit always evaluates before the first step")
    }

    pub fn final_eval(&self) -> &EvalRecord {
        self.evals.last().expect("fit always evaluates after the last step")
    }

    /// Everything but wall-clock timings, for reproducibility comparisons.
    pub fn same_numbers(&self, other: &FitReport) -> bool {
        self.loss_trace == other.loss_trace && self.view_trace == other.view_trace && self.evals == other.evals
    }

    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        if window == 0 || self.loss_trace.len() < window {
            return Vec::new();
        }
        self.loss_trace
            .windows(window)
            .map(|w| w.iter().sum::<f64>() / window as f64)
            .collect()
    }
}

/// Largest distance of any point from the cloud centroid (1 for degenerate clouds).
pub fn scene_extent(positions: &[[f64; 3]]) -> f64 {
    if positions.is_empty() {
        return 1.0;
    }
    let n = positions.len() as f64;
    let mut c = [0.0; 3];
    for p in positions {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    let r = positions
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

/// Mean distance from each point to its nearest neighbour (brute force).
pub fn mean_nearest_neighbor_distance(positions: &[[f64; 3]]) -> Option<f64> {
    if positions.len() < 2 {
        return None;
    }
    let total: f64 = positions
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            positions
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Some(total / positions.len() as f64)
}

/// Raw parameters for a point cloud: near-identity rotations, isotropic scale
/// at half the mean nearest-neighbour spacing, opacity 0.1, point colors and
/// small random features (or the cloud's own features when present).
pub fn initialize_from_cloud(cloud: &PointCloud, feature_dim: usize, seed: u64) -> Result<Scene> {
    cloud.validate()?;
    if cloud.is_empty() {
        return Err(Error::Validation("point cloud is empty".into()));
    }
    if let Some(features) = &cloud.features {
        if features.first().map(Vec::len) != Some(feature_dim) {
            return Err(Error::ShapeMismatch(format!(
                "cloud features have {} channels, scene uses {feature_dim}",
                features.first().map(Vec::len).unwrap_or(0)
            )));
        }
    }
    let positions: Vec<[f64; 3]> = cloud.points.iter().map(|p| p.position).collect();
    let extent = scene_extent(&positions);
    let spacing = mean_nearest_neighbor_distance(&positions)
        .filter(|d| *d > 0.0)
        .unwrap_or(0.01 * extent);
    let raw_scale = (0.5 * spacing).ln();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot_noise = Normal::new(0.0, 1e-3).expect("valid normal");
    let feat_noise = Normal::new(0.0, 0.01).expect("valid normal");
    let mut scene = ParamTable::zeros(cloud.len(), feature_dim);
    for (i, p) in cloud.points.iter().enumerate() {
        scene.row_mut(ParamGroup::Position, i).copy_from_slice(&p.position);
        let q = scene.row_mut(ParamGroup::Rotation, i);
        q[0] = 1.0 + rot_noise.sample(&mut rng);
        for v in &mut q[1..] {
            *v = rot_noise.sample(&mut rng);
        }
        scene.row_mut(ParamGroup::Scale, i).fill(raw_scale);
        scene.row_mut(ParamGroup::Opacity, i)[0] = logit(0.1);
        scene.row_mut(ParamGroup::Color, i).copy_from_slice(&p.color);
        let f = scene.row_mut(ParamGroup::Feature, i);
        match &cloud.features {
            Some(features) => f.copy_from_slice(&features[i]),
            None => f.iter_mut().for_each(|v| *v = feat_noise.sample(&mut rng)),
        }
    }
    Ok(scene)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Gaussians,
    Features,
}

impl Phase {
    fn payload(self) -> PayloadSelect {
        match self {
            Phase::Gaussians => PayloadSelect::Color,
            Phase::Features => PayloadSelect::Feature,
        }
    }
}

fn check_views(views: &[View], channels: usize) -> Result<()> {
    if views.is_empty() {
        return Err(Error::Validation("fitting needs at least one view".into()));
    }
    for (i, v) in views.iter().enumerate() {
        let expected = (v.camera.height(), v.camera.width(), channels);
        if v.target.shape() != expected {
            return Err(Error::ShapeMismatch(format!(
                "view {i}: target is {:?}, camera expects {expected:?} (H, W, C)",
                v.target.shape()
            )));
        }
    }
    Ok(())
}

fn evaluate(
    scene: &Scene,
    views: &[View],
    raster: &RasterConfig,
    payload: PayloadSelect,
    step: usize,
) -> Result<EvalRecord> {
    let gaussians = scene.activate()?;
    let mut record = EvalRecord {
        step,
        psnr: Vec::with_capacity(views.len()),
        l1: Vec::with_capacity(views.len()),
    };
    for v in views {
        let out = render(&gaussians, &v.camera, raster, payload)?;
        record.psnr.push(psnr(&out.payload, &v.target)?);
        record.l1.push(l1_loss(&out.payload, &v.target)?);
    }
    Ok(record)
}

/// Steps a loss must stay above 10× its initial value before the fit aborts.
pub const DIVERGENCE_PATIENCE: usize = 50;

fn run_fit(
    mut scene: Scene,
    views: &[View],
    config: &FitConfig,
    raster: &RasterConfig,
    phase: Phase,
    learning_rates: LearningRates,
) -> Result<(Scene, FitReport)> {
    config.validate()?;
    let payload = phase.payload();
    check_views(views, payload.channels(scene.feature_dim()))?;
    if phase == Phase::Gaussians {
        scene.validate()?;
    }

    let adam = AdamConfig {
        learning_rates,
        beta1: config.beta1,
        beta2: config.beta2,
        epsilon: config.epsilon,
    };
    let mut state = AdamState::new(&scene);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = FitReport {
        loss_trace: Vec::with_capacity(config.steps),
        view_trace: Vec::with_capacity(config.steps),
        evals: vec![evaluate(&scene, views, raster, payload, 0)?],
        step_seconds: Vec::with_capacity(config.steps),
    };
    let mut above = 0usize;

    for step in 0..config.steps {
        let started = Instant::now();
        let view_index = rng.random_range(0..views.len());
        let view = &views[view_index];
        let gaussians = scene.activate()?;
        let out = render(&gaussians, &view.camera, raster, payload)?;
        let loss = l1_loss(&out.payload, &view.target)?;
        let upstream = l1_loss_grad(&out.payload, &view.target)?;
        let grads = render_backward(&scene, &view.camera, raster, payload, &upstream)?;
        optimizer_step(&mut scene, &grads, &mut state, &adam)?;
        if phase == Phase::Gaussians {
            scene.clamp_colors();
        }
        report.loss_trace.push(loss);
        report.view_trace.push(view_index);
        report.step_seconds.push(started.elapsed().as_secs_f64());

        let threshold = (10.0 * report.loss_trace[0]).max(1e-9);
        above = if loss > threshold { above + 1 } else { 0 };
        if above >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged {
                step,
                loss,
                initial: report.loss_trace[0],
                report: Box::new(report),
            });
        }

        let done = step + 1;
        if done == config.steps || (config.eval_every > 0 && done % config.eval_every == 0) {
            report.evals.push(evaluate(&scene, views, raster, payload, done)?);
        }
    }
    if report.final_eval().mean_l1() > report.initial_eval().mean_l1() {
        log::warn!(
            "fit ended with higher mean L1 ({:.6}) than it started with ({:.6})",
            report.final_eval().mean_l1(),
            report.initial_eval().mean_l1()
        );
    }
    Ok((scene, report))
}

fn resolved_rates(scene: &Scene, config: &FitConfig) -> LearningRates {
    let positions: Vec<[f64; 3]> = (0..scene.len())
        .map(|i| {
            let p = scene.row(ParamGroup::Position, i);
            [p[0], p[1], p[2]]
        })
        .collect();
    let mut lr = config.learning_rates;
    lr.position *= scene_extent(&positions);
    lr
}

/// Fits every Gaussian parameter of `scene` to color targets.
pub fn fit_scene(
    scene: Scene,
    views: &[View],
    config: &FitConfig,
    raster: &RasterConfig,
) -> Result<(Scene, FitReport)> {
    let rates = resolved_rates(&scene, config);
    run_fit(scene, views, config, raster, Phase::Gaussians, rates)
}

/// Phase one: initializes a scene from `cloud` and fits it to color targets.
pub fn fit_gaussians(
    cloud: &PointCloud,
    views: &[View],
    config: &FitConfig,
    raster: &RasterConfig,
) -> Result<(Scene, FitReport)> {
    let feature_dim = cloud
        .features
        .as_ref()
        .and_then(|f| f.first().map(Vec::len))
        .unwrap_or(DEFAULT_FEATURE_DIM);
    let scene = initialize_from_cloud(cloud, feature_dim, config.seed)?;
    fit_scene(scene, views, config, raster)
}

/// Phase two: fits only the feature table against D-channel targets; every
/// other parameter is returned bit-for-bit unchanged.
pub fn fit_features(
    scene: &Scene,
    views: &[View],
    config: &FitConfig,
    raster: &RasterConfig,
) -> Result<(Scene, FitReport)> {
    let rates = LearningRates::only(ParamGroup::Feature, config.learning_rates.feature);
    run_fit(scene.clone(), views, config, raster, Phase::Features, rates)
}
