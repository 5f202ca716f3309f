//! Forward splatting.
//!
//! Gaussians are projected once, sorted by `(camera depth, input index)` and
//! binned into square tiles. Each pixel blends the Gaussians of its tile whose
//! Mahalanobis distance is within `cutoff_sigmas`, front to back. The same
//! projection and per-pixel footprint test back [`render_reference`], which
//! evaluates every Gaussian at every pixel with no tiling, and the backward
//! pass in [`crate::grad`].

use std::cmp::Ordering;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::buffer::Image;
use crate::error::{Error, Result};
use crate::geometry::{
    covariance_from_rotation_scale, project_covariance, project_point, unit_quat_to_rotation,
    CameraModel, Covariance2,
};
use crate::primitives::{ActivatedGaussian, DEFAULT_FEATURE_DIM};

/// Per-contribution opacity ceiling; keeps `1 − α ≥ 1e-3`.
pub const ALPHA_MAX: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadSelect {
    Color,
    Feature,
    Joint,
}

impl PayloadSelect {
    pub fn channels(self, feature_dim: usize) -> usize {
        match self {
            PayloadSelect::Color => 3,
            PayloadSelect::Feature => feature_dim,
            PayloadSelect::Joint => 3 + feature_dim,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "color" => Some(PayloadSelect::Color),
            "feature" => Some(PayloadSelect::Feature),
            "joint" => Some(PayloadSelect::Joint),
            _ => None,
        }
    }

    pub(crate) fn write(self, g: &ActivatedGaussian, out: &mut Vec<f64>) {
        match self {
            PayloadSelect::Color => out.extend_from_slice(&g.color),
            PayloadSelect::Feature => out.extend_from_slice(&g.feature),
            PayloadSelect::Joint => {
                out.extend_from_slice(&g.color);
                out.extend_from_slice(&g.feature);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterConfig {
    pub tile_size: usize,
    pub cutoff_sigmas: f64,
    /// Per-channel background; `None` means all zeros.
    pub background: Option<Vec<f64>>,
    pub max_contributors_per_pixel: Option<usize>,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            cutoff_sigmas: 3.0,
            background: None,
            max_contributors_per_pixel: None,
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::Domain("tile_size must be at least 1".into()));
        }
        if !(self.cutoff_sigmas > 0.0) || !self.cutoff_sigmas.is_finite() {
            return Err(Error::Domain(format!(
                "cutoff_sigmas must be positive, got {}",
                self.cutoff_sigmas
            )));
        }
        Ok(())
    }

    pub(crate) fn background_for(&self, channels: usize) -> Result<Vec<f64>> {
        match &self.background {
            None => Ok(vec![0.0; channels]),
            Some(bg) if bg.len() == channels => Ok(bg.clone()),
            Some(bg) => Err(Error::ShapeMismatch(format!(
                "background has {} channels, payload has {channels}",
                bg.len()
            ))),
        }
    }
}

/// Rendered payload plus accumulated alpha and alpha-weighted depth planes.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderBuffers {
    pub payload: Image,
    pub alpha: Image,
    pub depth: Image,
}

impl RenderBuffers {
    fn background(width: usize, height: usize, background: &[f64]) -> Self {
        let c = background.len();
        Self {
            payload: Image::from_fn(width, height, c, |_, _, ch| background[ch]),
            alpha: Image::zeros(width, height, 1),
            depth: Image::zeros(width, height, 1),
        }
    }
}

/// `o · exp(−½ dᵀ Σ⁻¹ d)` at `pixel`, clamped to `[0, ALPHA_MAX]`.
pub fn evaluate_gaussian2d(
    mean2d: &Vector2<f64>,
    cov2d: &Covariance2,
    opacity: f64,
    pixel: &Vector2<f64>,
) -> Result<f64> {
    let conic = cov2d.inverse()?;
    let d = pixel - mean2d;
    let q = conic.xx * d.x * d.x + 2.0 * conic.xy * d.x * d.y + conic.yy * d.y * d.y;
    Ok((opacity * (-0.5 * q).exp()).clamp(0.0, ALPHA_MAX))
}

/// Front-to-back compositing of depth-ordered `(payload, α)` pairs over a background.
/// Returns the blended payload and the accumulated alpha `1 − Π(1 − αᵢ)`.
pub fn alpha_blend(contributions: &[(&[f64], f64)], background: &[f64]) -> (Vec<f64>, f64) {
    let mut out = vec![0.0; background.len()];
    let mut transmittance = 1.0;
    for (payload, alpha) in contributions {
        let weight = alpha * transmittance;
        for (o, c) in out.iter_mut().zip(payload.iter()) {
            *o += c * weight;
        }
        transmittance *= 1.0 - alpha;
    }
    for (o, b) in out.iter_mut().zip(background) {
        *o += b * transmittance;
    }
    (out, 1.0 - transmittance)
}

/// A projected Gaussian ready for rasterization.
#[derive(Debug, Clone)]
pub(crate) struct Splat {
    pub index: usize,
    pub mean: Vector2<f64>,
    pub depth: f64,
    pub conic: Covariance2,
    pub opacity: f64,
    /// Inclusive pixel bounds, clipped to the image; empty when `x0 > x1`.
    pub x0: i64,
    pub x1: i64,
    pub y0: i64,
    pub y1: i64,
}

/// Footprint test and opacity of `splat` at pixel `(px, py)`.
pub(crate) struct Sample {
    pub alpha: f64,
    /// Unclamped `o · G`.
    pub raw_alpha: f64,
    pub gauss: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Splat {
    #[inline]
    pub fn sample(&self, px: f64, py: f64, cutoff_sq: f64) -> Option<Sample> {
        let dx = px - self.mean.x;
        let dy = py - self.mean.y;
        let q = self.conic.xx * dx * dx + 2.0 * self.conic.xy * dx * dy + self.conic.yy * dy * dy;
        if !(q <= cutoff_sq) {
            return None;
        }
        let gauss = (-0.5 * q).exp();
        let raw_alpha = self.opacity * gauss;
        Some(Sample {
            alpha: raw_alpha.min(ALPHA_MAX),
            raw_alpha,
            gauss,
            dx,
            dy,
        })
    }
}

/// Projects every Gaussian, dropping culled and degenerate ones, and returns
/// the survivors sorted by `(depth, index)`.
pub(crate) fn project_splats(
    gaussians: &[ActivatedGaussian],
    camera: &CameraModel,
    cutoff_sigmas: f64,
) -> Vec<Splat> {
    let (w, h) = (camera.width() as i64, camera.height() as i64);
    let mut splats: Vec<Splat> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(index, g)| {
            let x = Vector3::from(g.position);
            let projected = project_point(&x, camera);
            if projected.culled {
                return None;
            }
            let r = unit_quat_to_rotation(&g.rotation);
            let cov3 = covariance_from_rotation_scale(&r, &g.scale);
            let cov = project_covariance(&cov3, camera, &x)?;
            let conic = cov.inverse().ok()?;
            if !projected.pixel.x.is_finite() || !projected.pixel.y.is_finite() {
                return None;
            }
            let ex = cutoff_sigmas * cov.xx.sqrt();
            let ey = cutoff_sigmas * cov.yy.sqrt();
            let clip = |v: f64, hi: i64| -> i64 {
                if v.is_nan() {
                    0
                } else {
                    v.clamp(-1.0, hi as f64) as i64
                }
            };
            let mean = projected.pixel;
            Some(Splat {
                index,
                mean,
                depth: projected.depth,
                conic,
                opacity: g.opacity,
                x0: clip((mean.x - ex).floor() - 1.0, w).max(0),
                x1: clip((mean.x + ex).ceil() + 1.0, w).min(w - 1),
                y0: clip((mean.y - ey).floor() - 1.0, h).max(0),
                y1: clip((mean.y + ey).ceil() + 1.0, h).min(h - 1),
            })
        })
        .collect();
    splats.sort_by(|a, b| depth_order(a.depth, a.index, b.depth, b.index));
    splats
}

#[inline]
pub(crate) fn depth_order(da: f64, ia: usize, db: f64, ib: usize) -> Ordering {
    da.total_cmp(&db).then(ia.cmp(&ib))
}

/// Payload channel count and per-Gaussian payload rows.
pub(crate) fn gather_payloads(
    gaussians: &[ActivatedGaussian],
    config: &RasterConfig,
    select: PayloadSelect,
) -> Result<(usize, Vec<f64>)> {
    let feature_dim = match gaussians.first() {
        Some(g) => g.feature.len(),
        None => match (&config.background, select) {
            (Some(bg), PayloadSelect::Feature) => bg.len(),
            (Some(bg), PayloadSelect::Joint) => bg.len().saturating_sub(3),
            _ => DEFAULT_FEATURE_DIM,
        },
    };
    if let Some(i) = gaussians.iter().position(|g| g.feature.len() != feature_dim) {
        return Err(Error::ShapeMismatch(format!(
            "gaussian {i} has {} feature channels, expected {feature_dim}",
            gaussians[i].feature.len()
        )));
    }
    let channels = select.channels(feature_dim);
    let mut payloads = Vec::with_capacity(channels * gaussians.len());
    for g in gaussians {
        select.write(g, &mut payloads);
    }
    Ok((channels, payloads))
}

/// Square tile grid with the splats overlapping each tile, in depth order.
pub(crate) struct TileBins {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub bins: Vec<Vec<u32>>,
}

impl TileBins {
    pub fn build(splats: &[Splat], width: usize, height: usize, tile_size: usize) -> Self {
        let tiles_x = width.div_ceil(tile_size);
        let tiles_y = height.div_ceil(tile_size);
        let mut bins = vec![Vec::new(); tiles_x * tiles_y];
        // Splats arrive depth-sorted, so every bin ends up depth-sorted too.
        for (k, s) in splats.iter().enumerate() {
            if s.x0 > s.x1 || s.y0 > s.y1 {
                continue;
            }
            let tx0 = s.x0 as usize / tile_size;
            let tx1 = s.x1 as usize / tile_size;
            let ty0 = s.y0 as usize / tile_size;
            let ty1 = s.y1 as usize / tile_size;
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    bins[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        Self {
            tile_size,
            tiles_x,
            bins,
        }
    }

    pub fn tile_pixels(&self, tile: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (x0, (x0 + self.tile_size).min(width), y0, (y0 + self.tile_size).min(height))
    }
}

/// Structural fingerprint of a render: which Gaussians touch which pixels,
/// in which order, and whether their opacity was clamped.
pub(crate) type Signature = u64;

fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0000_0100_0000_01b3)
}

struct TileOutput {
    payload: Vec<f64>,
    alpha: Vec<f64>,
    depth: Vec<f64>,
    signature: Signature,
}

pub(crate) fn render_tiled(
    gaussians: &[ActivatedGaussian],
    camera: &CameraModel,
    config: &RasterConfig,
    select: PayloadSelect,
) -> Result<(RenderBuffers, Signature)> {
    camera.validate()?;
    config.validate()?;
    let (channels, payloads) = gather_payloads(gaussians, config, select)?;
    let background = config.background_for(channels)?;
    let (width, height) = (camera.width(), camera.height());
    let mut buffers = RenderBuffers::background(width, height, &background);
    if gaussians.is_empty() {
        return Ok((buffers, 0));
    }

    let splats = project_splats(gaussians, camera, config.cutoff_sigmas);
    let bins = TileBins::build(&splats, width, height, config.tile_size);
    let cutoff_sq = config.cutoff_sigmas * config.cutoff_sigmas;
    let cap = config.max_contributors_per_pixel.unwrap_or(usize::MAX);

    let outputs: Vec<TileOutput> = (0..bins.bins.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = bins.tile_pixels(tile, width, height);
            let n_px = (x1 - x0) * (y1 - y0);
            let mut out = TileOutput {
                payload: Vec::with_capacity(n_px * channels),
                alpha: Vec::with_capacity(n_px),
                depth: Vec::with_capacity(n_px),
                signature: 0xcbf2_9ce4_8422_2325,
            };
            let bin = &bins.bins[tile];
            let mut acc = vec![0.0; channels];
            for py in y0..y1 {
                for px in x0..x1 {
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    let mut transmittance = 1.0;
                    let mut depth_acc = 0.0;
                    let mut used = 0usize;
                    for &k in bin {
                        if used == cap {
                            break;
                        }
                        let splat = &splats[k as usize];
                        let Some(sample) = splat.sample(px as f64, py as f64, cutoff_sq) else {
                            continue;
                        };
                        used += 1;
                        out.signature = mix(
                            out.signature,
                            ((py * width + px) as u64) << 32
                                ^ (splat.index as u64) << 1
                                ^ (sample.raw_alpha > ALPHA_MAX) as u64,
                        );
                        let weight = sample.alpha * transmittance;
                        let row = &payloads[splat.index * channels..(splat.index + 1) * channels];
                        for (a, c) in acc.iter_mut().zip(row) {
                            *a += c * weight;
                        }
                        depth_acc += splat.depth * weight;
                        transmittance *= 1.0 - sample.alpha;
                    }
                    for (a, b) in acc.iter().zip(&background) {
                        out.payload.push(a + b * transmittance);
                    }
                    let alpha = 1.0 - transmittance;
                    out.alpha.push(alpha);
                    out.depth.push(if alpha > 0.0 { depth_acc / alpha } else { 0.0 });
                }
            }
            out
        })
        .collect();

    let mut signature: Signature = 0;
    for (tile, out) in outputs.iter().enumerate() {
        let (x0, x1, y0, y1) = bins.tile_pixels(tile, width, height);
        let mut i = 0;
        for py in y0..y1 {
            for px in x0..x1 {
                buffers
                    .payload
                    .pixel_mut(px, py)
                    .copy_from_slice(&out.payload[i * channels..(i + 1) * channels]);
                buffers.alpha.set(px, py, 0, out.alpha[i]);
                buffers.depth.set(px, py, 0, out.depth[i]);
                i += 1;
            }
        }
        signature = mix(signature, out.signature);
    }
    Ok((buffers, signature))
}

/// Tile-binned forward render of `payload_select` channels.
pub fn render(
    gaussians: &[ActivatedGaussian],
    camera: &CameraModel,
    config: &RasterConfig,
    payload_select: PayloadSelect,
) -> Result<RenderBuffers> {
    render_tiled(gaussians, camera, config, payload_select).map(|(b, _)| b)
}

/// One Gaussian's contribution at one pixel, as seen by the reference renderer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub index: usize,
    pub depth: f64,
    pub alpha: f64,
    /// `αᵢ · Πⱼ<ᵢ(1 − αⱼ)`.
    pub weight: f64,
}

/// Per-pixel contributor lists (row-major), in blending order.
pub fn reference_contributions(
    gaussians: &[ActivatedGaussian],
    camera: &CameraModel,
    config: &RasterConfig,
) -> Result<Vec<Vec<Contribution>>> {
    camera.validate()?;
    config.validate()?;
    let splats = project_splats(gaussians, camera, config.cutoff_sigmas);
    let cutoff_sq = config.cutoff_sigmas * config.cutoff_sigmas;
    let cap = config.max_contributors_per_pixel.unwrap_or(usize::MAX);
    let mut logs = Vec::with_capacity(camera.width() * camera.height());
    for py in 0..camera.height() {
        for px in 0..camera.width() {
            let mut hits: Vec<(f64, usize, f64)> = splats
                .iter()
                .filter_map(|s| {
                    s.sample(px as f64, py as f64, cutoff_sq)
                        .map(|sample| (s.depth, s.index, sample.alpha))
                })
                .collect();
            hits.sort_by(|a, b| depth_order(a.0, a.1, b.0, b.1));
            hits.truncate(cap);
            let log: Vec<Contribution> = (0..hits.len())
                .map(|i| {
                    let transmittance: f64 = hits[..i].iter().fold(1.0, |t, h| t * (1.0 - h.2));
                    Contribution {
                        index: hits[i].1,
                        depth: hits[i].0,
                        alpha: hits[i].2,
                        weight: hits[i].2 * transmittance,
                    }
                })
                .collect();
            logs.push(log);
        }
    }
    Ok(logs)
}

/// Brute-force renderer: every Gaussian is evaluated at every pixel, sorted
/// per pixel and blended by the literal compositing sum. Used as an oracle.
pub fn render_reference(
    gaussians: &[ActivatedGaussian],
    camera: &CameraModel,
    config: &RasterConfig,
    payload_select: PayloadSelect,
) -> Result<RenderBuffers> {
    camera.validate()?;
    config.validate()?;
    let (channels, payloads) = gather_payloads(gaussians, config, payload_select)?;
    let background = config.background_for(channels)?;
    let (width, height) = (camera.width(), camera.height());
    let mut buffers = RenderBuffers::background(width, height, &background);
    let logs = reference_contributions(gaussians, camera, config)?;
    for py in 0..height {
        for px in 0..width {
            let log = &logs[py * width + px];
            let mut value = vec![0.0; channels];
            let mut depth_acc = 0.0;
            for (i, c) in log.iter().enumerate() {
                let transmittance: f64 = log[..i].iter().fold(1.0, |t, p| t * (1.0 - p.alpha));
                let weight = c.alpha * transmittance;
                let row = &payloads[c.index * channels..(c.index + 1) * channels];
                for (v, p) in value.iter_mut().zip(row) {
                    *v += p * weight;
                }
                depth_acc += c.depth * weight;
            }
            let transmittance: f64 = log.iter().fold(1.0, |t, p| t * (1.0 - p.alpha));
            for (v, b) in value.iter_mut().zip(&background) {
                *v += b * transmittance;
            }
            buffers.payload.pixel_mut(px, py).copy_from_slice(&value);
            let alpha = 1.0 - transmittance;
            buffers.alpha.set(px, py, 0, alpha);
            buffers
                .depth
                .set(px, py, 0, if alpha > 0.0 { depth_acc / alpha } else { 0.0 });
        }
    }
    Ok(buffers)
}
