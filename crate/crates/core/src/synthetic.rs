//! Seeded random scenes and cameras for checks, demos and the command line.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::error::Result;
use crate::geometry::CameraModel;
use crate::primitives::{logit, ParamGroup, Scene};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub count: usize,
    pub feature_dim: usize,
    pub center: [f64; 3],
    /// Positions are uniform in a cube of this half side around `center`.
    pub half_extent: f64,
    /// Range of the raw (log) scale per axis.
    pub log_scale: (f64, f64),
    /// Range of the activated opacity.
    pub opacity: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            count: 50,
            feature_dim: 9,
            center: [0.0; 3],
            half_extent: 1.0,
            log_scale: (-3.0, -1.5),
            opacity: (0.2, 0.95),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Random scene with uniformly oriented Gaussians, colors and features in
/// `[0, 1]`. Raw rotations are left unnormalized.
pub fn random_scene(spec: &SceneSpec, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut scene = Scene::zeros(spec.count, spec.feature_dim);
    for i in 0..spec.count {
        let p: [f64; 3] = std::array::from_fn(|k| spec.center[k] + rng.random_range(-1.0..1.0) * spec.half_extent);
        scene.row_mut(ParamGroup::Position, i).copy_from_slice(&p);
        let q: [f64; 4] = loop {
            let q: [f64; 4] = std::array::from_fn(|_| normal.sample(&mut rng));
            if q.iter().map(|v| v * v).sum::<f64>() > 1e-2 {
                break q;
            }
        };
        scene.row_mut(ParamGroup::Rotation, i).copy_from_slice(&q);
        for s in scene.row_mut(ParamGroup::Scale, i) {
            *s = uniform(&mut rng, spec.log_scale);
        }
        scene.row_mut(ParamGroup::Opacity, i)[0] = logit(uniform(&mut rng, spec.opacity));
        for c in scene.row_mut(ParamGroup::Color, i) {
            *c = rng.random::<f64>();
        }
        for f in scene.row_mut(ParamGroup::Feature, i) {
            *f = rng.random::<f64>();
        }
    }
    scene
}

/// Adds independent Gaussian noise with the given standard deviation to the
/// groups listed, clamping colors back into `[0, 1]`.
pub fn perturb_scene(scene: &Scene, noise: &[(ParamGroup, f64)], seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = scene.clone();
    for &(group, std) in noise {
        let dist = Normal::new(0.0, std).expect("finite std");
        for v in out.group_mut(group) {
            *v += dist.sample(&mut rng);
        }
    }
    out.clamp_colors();
    out
}

/// Pinhole camera at `eye` aimed at `target`, with world -y as image up.
pub fn camera_at(eye: [f64; 3], target: [f64; 3], focal: f64, width: usize, height: usize) -> Result<CameraModel> {
    let eye = Vector3::from(eye);
    let target = Vector3::from(target);
    let dir = (target - eye).normalize();
    let up = if dir.y.abs() > 0.99 {
        Vector3::new(0.0, 0.0, 1.0)
    } else {
        Vector3::new(0.0, -1.0, 0.0)
    };
    CameraModel::look_at(eye, target, up, focal, focal, width, height)
}

/// `count` cameras evenly spaced on a ring of `radius` around `target`,
/// raised by `elevation` (radians) above the ring plane.
pub fn orbit_cameras(
    count: usize,
    target: [f64; 3],
    radius: f64,
    elevation: f64,
    focal: f64,
    width: usize,
    height: usize,
) -> Result<Vec<CameraModel>> {
    (0..count)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
            let eye = [
                target[0] + radius * elevation.cos() * theta.sin(),
                target[1] - radius * elevation.sin(),
                target[2] - radius * elevation.cos() * theta.cos(),
            ];
            camera_at(eye, target, focal, width, height)
        })
        .collect()
}

/// Camera at a random direction and distance in `distance` from `target`.
pub fn random_camera(
    seed: u64,
    target: [f64; 3],
    distance: (f64, f64),
    focal: f64,
    width: usize,
    height: usize,
) -> Result<CameraModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir: [f64; 3] = UnitSphere.sample(&mut rng);
    let r = uniform(&mut rng, distance);
    let eye = std::array::from_fn(|k| target[k] + r * dir[k]);
    camera_at(eye, target, focal, width, height)
}

/// Scene and camera used for gradient checks: `count` Gaussians a few pixels
/// wide, all in front of a `width`×`height` camera.
pub fn gradcheck_setup(seed: u64, count: usize, width: usize, height: usize) -> Result<(Scene, CameraModel)> {
    let spec = SceneSpec {
        count,
        feature_dim: 9,
        center: [0.0; 3],
        half_extent: 0.6,
        log_scale: (-2.0, -1.0),
        opacity: (0.2, 0.9),
    };
    let scene = random_scene(&spec, seed);
    let focal = 1.2 * width.max(height) as f64;
    let camera = random_camera(seed ^ 0x5eed_cafe, [0.0; 3], (3.5, 4.5), focal, width, height)?;
    Ok((scene, camera))
}
