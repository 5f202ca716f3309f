#![allow(dead_code)]

use std::io::Write;
use std::path::PathBuf;

use nalgebra::{Matrix3, Matrix4, Vector3};
use pfgs::geometry::{quat_mul, quat_to_rotation, rigid_transform, CameraModel, Quat};
use pfgs::primitives::{ParamGroup, Scene};
use pfgs::synthetic::{random_camera, random_scene, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Prints a line that survives the test harness's output capture.
pub fn announce(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

pub fn verdict(criterion: u32, name: &str, pass: bool, detail: &str) {
    announce(&format!(
        "[acceptance] criterion {criterion:>2} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    ));
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn pfgs_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_pfgs"))
}

pub fn sample_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/sample")
}

/// A random scene of `count` Gaussians seen by a random camera at `size`×`size`.
pub fn scene_and_camera(seed: u64, count: usize, feature_dim: usize, size: usize) -> (Scene, CameraModel) {
    let spec = SceneSpec {
        count,
        feature_dim,
        log_scale: (-3.0, -1.2),
        ..SceneSpec::default()
    };
    let scene = random_scene(&spec, seed);
    let camera = random_camera(seed.wrapping_mul(31).wrapping_add(7), [0.0; 3], (3.0, 5.0), size as f64, size, size)
        .expect("camera");
    (scene, camera)
}

pub fn random_unit_quat(rng: &mut ChaCha8Rng) -> Quat {
    loop {
        let q: Quat = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

/// Applies `x ↦ R x + t` to every Gaussian of `scene`.
pub fn transform_scene(scene: &Scene, q: &Quat, t: &Vector3<f64>) -> Scene {
    let r = quat_to_rotation(q).expect("unit quaternion");
    let mut out = scene.clone();
    for i in 0..scene.len() {
        let p = scene.row(ParamGroup::Position, i);
        let moved = r * Vector3::new(p[0], p[1], p[2]) + t;
        out.row_mut(ParamGroup::Position, i).copy_from_slice(moved.as_slice());
        let raw = scene.row(ParamGroup::Rotation, i);
        let rotated = quat_mul(q, &[raw[0], raw[1], raw[2], raw[3]]);
        out.row_mut(ParamGroup::Rotation, i).copy_from_slice(&rotated);
    }
    out
}

/// The camera that sees the transformed world exactly as `camera` saw the original.
pub fn transform_camera(camera: &CameraModel, q: &Quat, t: &Vector3<f64>) -> CameraModel {
    let r: Matrix3<f64> = quat_to_rotation(q).expect("unit quaternion");
    let inverse: Matrix4<f64> = rigid_transform(&r.transpose(), &(-(r.transpose() * t)));
    CameraModel::new(
        camera.fx(),
        camera.fy(),
        camera.cx(),
        camera.cy(),
        camera.width(),
        camera.height(),
        camera.world_to_camera() * inverse,
    )
    .expect("transformed camera")
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
