//! Gaussian primitives, point clouds and the activation heads that turn raw
//! (unconstrained) parameters into valid Gaussian properties.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{normalize_quat, Quat};

/// Feature channels per point unless configured otherwise.
pub const DEFAULT_FEATURE_DIM: usize = 9;

/// One Gaussian with raw, pre-activation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub position: [f64; 3],
    pub raw_rotation: Quat,
    /// Log-space scale.
    pub raw_scale: [f64; 3],
    /// Logit-space opacity.
    pub raw_opacity: f64,
    pub color: [f64; 3],
    pub feature: Vec<f64>,
}

/// A Gaussian after the activation heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivatedGaussian {
    pub position: [f64; 3],
    pub rotation: Quat,
    pub scale: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub feature: Vec<f64>,
}

impl GaussianPrimitive {
    pub fn activate(&self) -> Result<ActivatedGaussian> {
        let (rotation, scale, opacity) =
            activate_params(&self.raw_rotation, &self.raw_scale, self.raw_opacity)?;
        Ok(ActivatedGaussian {
            position: self.position,
            rotation,
            scale,
            opacity,
            color: self.color,
            feature: self.feature.clone(),
        })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // Keep strictly inside (0, 1) even where the logistic saturates in f64.
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Normalized quaternion, exponentiated scale and sigmoid opacity.
pub fn activate_params(raw_q: &Quat, raw_s: &[f64; 3], raw_o: f64) -> Result<(Quat, [f64; 3], f64)> {
    let q = normalize_quat(raw_q)?;
    let s = [raw_s[0].exp(), raw_s[1].exp(), raw_s[2].exp()];
    Ok((q, s, sigmoid(raw_o)))
}

/// Parameter groups, in the order they are laid out in flat tables and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Position,
    Rotation,
    Scale,
    Opacity,
    Color,
    Feature,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Position,
        ParamGroup::Rotation,
        ParamGroup::Scale,
        ParamGroup::Opacity,
        ParamGroup::Color,
        ParamGroup::Feature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Rotation => "raw_rotation",
            ParamGroup::Scale => "raw_scale",
            ParamGroup::Opacity => "raw_opacity",
            ParamGroup::Color => "color",
            ParamGroup::Feature => "feature",
        }
    }

    /// Values per Gaussian.
    pub fn width(self, feature_dim: usize) -> usize {
        match self {
            ParamGroup::Position => 3,
            ParamGroup::Rotation => 4,
            ParamGroup::Scale => 3,
            ParamGroup::Opacity => 1,
            ParamGroup::Color => 3,
            ParamGroup::Feature => feature_dim,
        }
    }
}

/// Per-Gaussian parameter arrays, one contiguous row-major array per group.
///
/// Used for raw scene parameters, their gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTable {
    count: usize,
    feature_dim: usize,
    positions: Vec<f64>,
    rotations: Vec<f64>,
    scales: Vec<f64>,
    opacities: Vec<f64>,
    colors: Vec<f64>,
    features: Vec<f64>,
}

/// Raw parameters of a whole scene.
pub type Scene = ParamTable;

impl ParamTable {
    pub fn zeros(count: usize, feature_dim: usize) -> Self {
        Self {
            count,
            feature_dim,
            positions: vec![0.0; 3 * count],
            rotations: vec![0.0; 4 * count],
            scales: vec![0.0; 3 * count],
            opacities: vec![0.0; count],
            colors: vec![0.0; 3 * count],
            features: vec![0.0; feature_dim * count],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.count, self.feature_dim)
    }

    pub fn from_primitives(gaussians: &[GaussianPrimitive], feature_dim: usize) -> Result<Self> {
        let mut table = Self::zeros(gaussians.len(), feature_dim);
        for (i, g) in gaussians.iter().enumerate() {
            if g.feature.len() != feature_dim {
                return Err(Error::ShapeMismatch(format!(
                    "gaussian {i} has {} feature channels, scene uses {feature_dim}",
                    g.feature.len()
                )));
            }
            table.positions[3 * i..3 * i + 3].copy_from_slice(&g.position);
            table.rotations[4 * i..4 * i + 4].copy_from_slice(&g.raw_rotation);
            table.scales[3 * i..3 * i + 3].copy_from_slice(&g.raw_scale);
            table.opacities[i] = g.raw_opacity;
            table.colors[3 * i..3 * i + 3].copy_from_slice(&g.color);
            table.features[feature_dim * i..feature_dim * (i + 1)].copy_from_slice(&g.feature);
        }
        Ok(table)
    }

    /// Builds a table from group arrays laid out as in [`ParamGroup::ALL`].
    pub fn from_groups(count: usize, feature_dim: usize, groups: [Vec<f64>; 6]) -> Result<Self> {
        for (group, values) in ParamGroup::ALL.iter().zip(groups.iter()) {
            let expected = group.width(feature_dim) * count;
            if values.len() != expected {
                return Err(Error::ShapeMismatch(format!(
                    "{} array has {} values, expected {expected} ({count} gaussians)",
                    group.name(),
                    values.len()
                )));
            }
        }
        let [positions, rotations, scales, opacities, colors, features] = groups;
        Ok(Self {
            count,
            feature_dim,
            positions,
            rotations,
            scales,
            opacities,
            colors,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn group(&self, group: ParamGroup) -> &[f64] {
        match group {
            ParamGroup::Position => &self.positions,
            ParamGroup::Rotation => &self.rotations,
            ParamGroup::Scale => &self.scales,
            ParamGroup::Opacity => &self.opacities,
            ParamGroup::Color => &self.colors,
            ParamGroup::Feature => &self.features,
        }
    }

    pub fn group_mut(&mut self, group: ParamGroup) -> &mut [f64] {
        match group {
            ParamGroup::Position => &mut self.positions,
            ParamGroup::Rotation => &mut self.rotations,
            ParamGroup::Scale => &mut self.scales,
            ParamGroup::Opacity => &mut self.opacities,
            ParamGroup::Color => &mut self.colors,
            ParamGroup::Feature => &mut self.features,
        }
    }

    /// Values of `group` belonging to Gaussian `index`.
    pub fn row(&self, group: ParamGroup, index: usize) -> &[f64] {
        let w = group.width(self.feature_dim);
        &self.group(group)[w * index..w * (index + 1)]
    }

    pub fn row_mut(&mut self, group: ParamGroup, index: usize) -> &mut [f64] {
        let w = group.width(self.feature_dim);
        &mut self.group_mut(group)[w * index..w * (index + 1)]
    }

    pub fn primitive(&self, i: usize) -> GaussianPrimitive {
        let arr3 = |g| {
            let r = self.row(g, i);
            [r[0], r[1], r[2]]
        };
        let q = self.row(ParamGroup::Rotation, i);
        GaussianPrimitive {
            position: arr3(ParamGroup::Position),
            raw_rotation: [q[0], q[1], q[2], q[3]],
            raw_scale: arr3(ParamGroup::Scale),
            raw_opacity: self.opacities[i],
            color: arr3(ParamGroup::Color),
            feature: self.row(ParamGroup::Feature, i).to_vec(),
        }
    }

    pub fn primitives(&self) -> Vec<GaussianPrimitive> {
        (0..self.count).map(|i| self.primitive(i)).collect()
    }

    pub fn activate(&self) -> Result<Vec<ActivatedGaussian>> {
        (0..self.count).map(|i| self.primitive(i).activate()).collect()
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        ParamGroup::ALL.iter().flat_map(move |g| self.group(*g).iter().copied())
    }

    pub fn all_finite(&self) -> bool {
        self.iter_values().all(f64::is_finite)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.all_finite() {
            return Err(Error::Validation("scene contains non-finite parameters".into()));
        }
        if let Some(i) = self.colors.iter().position(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Validation(format!(
                "gaussian {} has a color component outside [0, 1]",
                i / 3
            )));
        }
        Ok(())
    }

    pub fn clamp_colors(&mut self) {
        for c in &mut self.colors {
            *c = c.clamp(0.0, 1.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: [f64; 3],
    /// RGB in `[0, 1]`.
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
    /// Optional per-point descriptors, one row per point.
    pub features: Option<Vec<Vec<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<CloudPoint>) -> Self {
        Self {
            points,
            features: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("point {i} has non-finite coordinates")));
            }
            if p.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Validation(format!("point {i} has a color outside [0, 1]")));
            }
        }
        if let Some(features) = &self.features {
            if features.len() != self.points.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} feature rows for {} points",
                    features.len(),
                    self.points.len()
                )));
            }
            if let Some(first) = features.first() {
                if features.iter().any(|f| f.len() != first.len()) {
                    return Err(Error::ShapeMismatch("ragged feature table".into()));
                }
            }
        }
        Ok(())
    }

    fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            features: self
                .features
                .as_ref()
                .map(|f| indices.iter().map(|&i| f[i].clone()).collect()),
        }
    }
}

/// Keeps `⌊rate·N⌋` points, picked at a uniform stride over a seeded shuffle.
/// Survivors keep their input order, so `rate = 1` returns the cloud unchanged.
pub fn downsample_uniform(cloud: &PointCloud, rate: f64, seed: u64) -> Result<PointCloud> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Domain(format!("downsampling rate must be in (0, 1], got {rate}")));
    }
    let n = cloud.len();
    // Guard against 0.3 * 1000 landing a hair under 300.
    let keep = ((rate * n as f64) + 1e-9).floor() as usize;
    let keep = keep.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut picked: Vec<usize> = (0..keep).map(|k| order[k * n / keep.max(1)]).collect();
    picked.sort_unstable();
    Ok(cloud.select(&picked))
}
