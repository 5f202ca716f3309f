//! Acceptance suite. Each test checks one criterion at its stated tolerance
//! and prints a single PASS/FAIL line.

mod common;

use std::fs;
use std::process::Command;
use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use serde::Deserialize;

use common::*;
use pfgs::buffer::Image;
use pfgs::fit::{fit_features, fit_scene, FitConfig, View};
use pfgs::geometry::CameraModel;
use pfgs::grad::{finite_diff_check, LossReduction, GRADCHECK_TOLERANCE};
use pfgs::io::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint, Provenance};
use pfgs::io::ply::{load_point_cloud, write_point_cloud, PlyFormat};
use pfgs::losses::{frequency_loss, progressive_multiscale_image_loss, total_loss, LoopWeights, LossWeights, PredictionPyramid};
use pfgs::primitives::{logit, CloudPoint, ParamGroup, PointCloud};
use pfgs::raster::{alpha_blend, render, render_reference, PayloadSelect, RasterConfig};
use pfgs::synthetic::{gradcheck_setup, orbit_cameras, perturb_scene, random_scene, SceneSpec};

#[test]
fn criterion_01_tiled_render_matches_reference() {
    let started = Instant::now();
    let config = RasterConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let count = 1 + (seed as usize * 37) % 200;
        let (scene, camera) = scene_and_camera(seed, count, 9, 64);
        let gaussians = scene.activate().unwrap();
        let fast = render(&gaussians, &camera, &config, PayloadSelect::Joint).unwrap();
        let slow = render_reference(&gaussians, &camera, &config, PayloadSelect::Joint).unwrap();
        worst = worst
            .max(max_abs_diff(fast.payload.data(), slow.payload.data()))
            .max(max_abs_diff(fast.alpha.data(), slow.alpha.data()))
            .max(max_abs_diff(fast.depth.data(), slow.depth.data()));
    }
    let seconds = started.elapsed().as_secs_f64();
    let pass = worst <= 1e-6 && seconds < 60.0;
    verdict(1, "tiled render vs reference", pass, &format!("max deviation {worst:.3e}, {seconds:.1} s"));
    assert!(pass);
}

#[test]
fn criterion_02_analytic_gradients_match_finite_differences() {
    let started = Instant::now();
    let config = RasterConfig::default();
    let (mut checked, mut under, mut boundary, mut worst) = (0usize, 0usize, 0usize, 0.0f64);
    for seed in 0..20u64 {
        let (scene, camera) = gradcheck_setup(seed, 12, 32, 32).unwrap();
        let channels = PayloadSelect::Joint.channels(scene.feature_dim());
        let mut r = rng(1000 + seed);
        let weights = Image::from_fn(32, 32, channels, |_, _, _| r.random_range(-1.0..1.0));
        let report = finite_diff_check(
            &scene,
            &camera,
            &config,
            PayloadSelect::Joint,
            &LossReduction::Weighted(weights),
            1e-4,
        )
        .unwrap();
        for e in report.entries.iter().filter(|e| !e.boundary) {
            checked += 1;
            if e.relative_error < GRADCHECK_TOLERANCE {
                under += 1;
            }
            worst = worst.max(e.relative_error);
        }
        boundary += report.excluded_boundary;
    }
    let seconds = started.elapsed().as_secs_f64();
    let fraction = under as f64 / checked as f64;
    let pass = fraction >= 0.99 && seconds < 120.0;
    verdict(
        2,
        "gradients vs central differences",
        pass,
        &format!(
            "{:.2}% of {checked} parameters under 1e-3, {boundary} boundary excluded, max error {worst:.2e}, {seconds:.1} s",
            100.0 * fraction
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_03_two_contributor_blend_closed_form() {
    let mut r = rng(3);
    let camera = CameraModel::new(10.0, 10.0, 0.0, 0.0, 1, 1, nalgebra::Matrix4::identity()).unwrap();
    let config = RasterConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a1: f64 = r.random_range(0.0..0.999);
        let a2: f64 = r.random_range(0.0..0.999);
        let c1: [f64; 3] = std::array::from_fn(|_| r.random::<f64>());
        let c2: [f64; 3] = std::array::from_fn(|_| r.random::<f64>());
        let expected: Vec<f64> = (0..3).map(|k| c1[k] * a1 + c2[k] * a2 * (1.0 - a1)).collect();

        let (blended, _) = alpha_blend(&[(&c1, a1), (&c2, a2)], &[0.0; 3]);
        worst = worst.max(max_abs_diff(&blended, &expected));

        // Both means sit exactly on the only pixel center, so each α equals its opacity.
        let mut scene = pfgs::Scene::zeros(2, 1);
        let z1: f64 = r.random_range(1.0..2.0);
        for (i, (z, a, c)) in [(z1, a1, c1), (z1 + 1.0, a2, c2)].into_iter().enumerate() {
            scene.row_mut(ParamGroup::Position, i).copy_from_slice(&[0.0, 0.0, z]);
            scene.row_mut(ParamGroup::Rotation, i).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            scene.row_mut(ParamGroup::Scale, i).copy_from_slice(&[-2.0; 3]);
            scene.row_mut(ParamGroup::Opacity, i)[0] = logit(a);
            scene.row_mut(ParamGroup::Color, i).copy_from_slice(&c);
        }
        let gaussians = scene.activate().unwrap();
        let opacities = [gaussians[0].opacity, gaussians[1].opacity];
        let expected: Vec<f64> = (0..3)
            .map(|k| c1[k] * opacities[0] + c2[k] * opacities[1] * (1.0 - opacities[0]))
            .collect();
        let out = render(&gaussians, &camera, &config, PayloadSelect::Color).unwrap();
        worst = worst.max(max_abs_diff(out.payload.data(), &expected));
    }
    let pass = worst <= 1e-12;
    verdict(3, "two-contributor blend closed form", pass, &format!("1000 draws, max deviation {worst:.3e}"));
    assert!(pass);
}

#[test]
fn criterion_04_joint_render_with_feature_equal_color() {
    let config = RasterConfig::default();
    let mut mismatches = 0usize;
    for seed in 0..20u64 {
        let (mut scene, camera) = scene_and_camera(400 + seed, 60, 3, 48);
        let colors = scene.group(ParamGroup::Color).to_vec();
        scene.group_mut(ParamGroup::Feature).copy_from_slice(&colors);
        let out = render(&scene.activate().unwrap(), &camera, &config, PayloadSelect::Joint).unwrap();
        for px in out.payload.data().chunks_exact(6) {
            if (0..3).any(|k| px[k].to_bits() != px[3 + k].to_bits()) {
                mismatches += 1;
            }
        }
    }
    let pass = mismatches == 0;
    verdict(4, "joint render channel consistency", pass, &format!("20 scenes, {mismatches} pixels differ bitwise"));
    assert!(pass);
}

#[derive(Deserialize)]
struct SceneSection {
    count: usize,
    seed: u64,
    #[serde(default)]
    feature_seed: u64,
    log_scale: (f64, f64),
    opacity: (f64, f64),
}

#[derive(Deserialize)]
struct ViewSection {
    count: usize,
    size: usize,
    focal: f64,
    radius: f64,
    elevation: f64,
}

#[derive(Deserialize)]
struct Perturbation {
    seed: u64,
    position: f64,
    rotation: f64,
    scale: f64,
    opacity: f64,
    color: f64,
}

#[derive(Deserialize)]
struct RecoveryThresholds {
    min_gain_db: f64,
    min_final_db: f64,
    max_seconds: f64,
}

#[derive(Deserialize)]
struct RecoveryPilot {
    scene: SceneSection,
    views: ViewSection,
    perturbation: Perturbation,
    fit: FitConfig,
    thresholds: RecoveryThresholds,
}

fn make_views(scene: &pfgs::Scene, views: &ViewSection, select: PayloadSelect) -> Vec<View> {
    let config = RasterConfig::default();
    let gaussians = scene.activate().unwrap();
    orbit_cameras(views.count, [0.0; 3], views.radius, views.elevation, views.focal, views.size, views.size)
        .unwrap()
        .into_iter()
        .map(|camera| {
            let target = render(&gaussians, &camera, &config, select).unwrap().payload;
            View { camera, target }
        })
        .collect()
}

fn pilot_scene(section: &SceneSection, feature_dim: usize) -> pfgs::Scene {
    let spec = SceneSpec {
        count: section.count,
        feature_dim,
        log_scale: section.log_scale,
        opacity: section.opacity,
        ..SceneSpec::default()
    };
    random_scene(&spec, section.seed)
}

#[test]
fn criterion_05_self_supervised_recovery_fit() {
    let pilot: RecoveryPilot = toml::from_str(include_str!("config/recovery.toml")).unwrap();
    let started = Instant::now();
    let truth = pilot_scene(&pilot.scene, 9);
    let views = make_views(&truth, &pilot.views, PayloadSelect::Color);
    let p = &pilot.perturbation;
    let init = perturb_scene(
        &truth,
        &[
            (ParamGroup::Position, p.position),
            (ParamGroup::Rotation, p.rotation),
            (ParamGroup::Scale, p.scale),
            (ParamGroup::Opacity, p.opacity),
            (ParamGroup::Color, p.color),
        ],
        p.seed,
    );
    let (_, report) = fit_scene(init, &views, &pilot.fit, &RasterConfig::default()).unwrap();
    let seconds = started.elapsed().as_secs_f64();
    let before = report.initial_eval().mean_psnr();
    let after = report.final_eval().mean_psnr();
    let t = &pilot.thresholds;
    let pass = after - before >= t.min_gain_db && after > t.min_final_db && seconds < t.max_seconds;
    verdict(
        5,
        "self-supervised recovery fit",
        pass,
        &format!(
            "mean PSNR {before:.2} -> {after:.2} dB (+{:.2}), {} steps, {seconds:.1} s",
            after - before,
            pilot.fit.steps
        ),
    );
    assert!(pass);
}

#[derive(Deserialize)]
struct FeatureThresholds {
    max_l1: f64,
}

#[derive(Deserialize)]
struct FeaturePilot {
    scene: SceneSection,
    views: ViewSection,
    fit: FitConfig,
    thresholds: FeatureThresholds,
}

#[test]
fn criterion_06_feature_fit_on_replicated_color() {
    let pilot: FeaturePilot = toml::from_str(include_str!("config/feature_fit.toml")).unwrap();
    let mut scene = pilot_scene(&pilot.scene, 9);
    let color_views = make_views(&scene, &pilot.views, PayloadSelect::Color);
    let views: Vec<View> = color_views
        .into_iter()
        .map(|v| {
            let t = &v.target;
            let target = Image::from_fn(t.width(), t.height(), 9, |x, y, k| t.get(x, y, k % 3));
            View { camera: v.camera, target }
        })
        .collect();
    let mut r = rng(pilot.scene.feature_seed);
    let noise = Normal::new(0.0, 0.01).unwrap();
    for f in scene.group_mut(ParamGroup::Feature) {
        *f = noise.sample(&mut r);
    }
    let (_, report) = fit_features(&scene, &views, &pilot.fit, &RasterConfig::default()).unwrap();
    let before = report.initial_eval().mean_l1();
    let after = report.final_eval().mean_l1();
    let pass = after < pilot.thresholds.max_l1;
    verdict(
        6,
        "feature fit on replicated color",
        pass,
        &format!("mean L1 {before:.4} -> {after:.5} after {} steps", pilot.fit.steps),
    );
    assert!(pass);
}

#[test]
fn criterion_07_loss_weight_constants() {
    let loops = LoopWeights::default();
    let weights = LossWeights::default();
    let mut ok = loops.weight(1) == Some(0.75) && loops.weight(2) == Some(1.0);
    ok &= (weights.gamma_gs, weights.gamma_mim, weights.gamma_mfr) == (0.75, 1.0, 0.25);
    ok &= total_loss(1.0, 1.0, 1.0, &weights) == 2.0;
    ok &= total_loss(0.0, 0.0, 0.0, &weights) == 0.0;

    // One loop, one scale, inner L1 of 0.2.
    let gt = Image::zeros(1, 1, 1);
    let pred = Image::filled(1, 1, 1, 0.2);
    let pyramid = PredictionPyramid::new(vec![1.0], vec![vec![pred]]).unwrap();
    let single = progressive_multiscale_image_loss(&pyramid, &gt, &loops).unwrap();
    ok &= single == 0.75 * 0.2 && (single - 0.15).abs() <= f64::EPSILON * 0.15;
    verdict(
        7,
        "progressive and total loss weights",
        ok,
        &format!("w = {:?}, total(1,1,1) = {}, single-term loss = {single}", loops.0, total_loss(1.0, 1.0, 1.0, &weights)),
    );
    assert!(ok);
}

fn direct_dft_loss(pred: &Image, gt: &Image) -> f64 {
    let (h, w, c) = pred.shape();
    let mut total = 0.0;
    for ch in 0..c {
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let phase = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        let d = pred.get(x, y, ch) - gt.get(x, y, ch);
                        acc += Complex::new(phase.cos(), phase.sin()) * d;
                    }
                }
                total += acc.norm();
            }
        }
    }
    total / (h * w) as f64
}

#[test]
fn criterion_08_frequency_loss() {
    let mut r = rng(8);
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..20 {
        let a = Image::from_fn(8, 8, 3, |_, _, _| r.random::<f64>());
        let b = Image::from_fn(8, 8, 3, |_, _, _| r.random::<f64>());
        ok &= frequency_loss(&a, &a).unwrap() == 0.0;
        worst = worst.max((frequency_loss(&a, &b).unwrap() - direct_dft_loss(&a, &b)).abs());
        let shifted = Image::from_fn(8, 8, 3, |x, y, c| a.get((x + 1) % 8, y, c));
        ok &= frequency_loss(&shifted, &a).unwrap() > 0.0;
    }
    ok &= worst <= 1e-10;
    verdict(8, "frequency loss", ok, &format!("identical = 0, shifted > 0, fast vs direct DFT {worst:.2e}"));
    assert!(ok);
}

#[test]
fn criterion_09_rigid_transform_invariance() {
    let config = RasterConfig::default();
    let mut r = rng(9);
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let (scene, camera) = scene_and_camera(900 + seed, 80, 4, 48);
        let q = random_unit_quat(&mut r);
        let t = Vector3::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
        let a = render(&scene.activate().unwrap(), &camera, &config, PayloadSelect::Joint).unwrap();
        let moved = transform_scene(&scene, &q, &t);
        let b = render(&moved.activate().unwrap(), &transform_camera(&camera, &q, &t), &config, PayloadSelect::Joint)
            .unwrap();
        worst = worst
            .max(max_abs_diff(a.payload.data(), b.payload.data()))
            .max(max_abs_diff(a.alpha.data(), b.alpha.data()));
    }
    let pass = worst <= 1e-4;
    verdict(9, "rigid transform invariance", pass, &format!("20 scenes, max pixel change {worst:.3e}"));
    assert!(pass);
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(pfgs_bin()).args(args).env("PFGS_THREADS", "1").output().unwrap()
}

#[test]
fn criterion_10_round_trips_and_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(10);
    let mut notes = Vec::new();

    let cloud = PointCloud::new(
        (0..500)
            .map(|_| CloudPoint {
                position: std::array::from_fn(|_| r.random_range(-1e3..1e3) * r.random::<f64>()),
                color: std::array::from_fn(|_| r.random_range(0..=255u8) as f64 / 255.0),
            })
            .collect(),
    );
    let mut ply_ok = true;
    for (format, name) in [(PlyFormat::BinaryLittleEndian, "b.ply"), (PlyFormat::Ascii, "a.ply")] {
        let path = dir.path().join(name);
        write_point_cloud(&path, &cloud, format).unwrap();
        let back = load_point_cloud(&path).unwrap();
        ply_ok &= back.points.iter().zip(&cloud.points).all(|(a, b)| {
            a.position.map(f64::to_bits) == b.position.map(f64::to_bits) && a.color == b.color
        }) && back.len() == cloud.len();
    }
    notes.push(format!("ply {}", if ply_ok { "ok" } else { "differs" }));

    let (scene, camera) = scene_and_camera(10, 50, 9, 40);
    let checkpoint = Checkpoint {
        scene: scene.clone(),
        optimizer: None,
        provenance: Provenance::from_config(&FitConfig::default()),
    };
    let bytes = encode_checkpoint(&checkpoint);
    let back = decode_checkpoint(&bytes, dir.path()).unwrap();
    let config = RasterConfig::default();
    let before = render(&scene.activate().unwrap(), &camera, &config, PayloadSelect::Joint).unwrap();
    let after = render(&back.scene.activate().unwrap(), &camera, &config, PayloadSelect::Joint).unwrap();
    let params_equal = back.scene.iter_values().map(f64::to_bits).eq(scene.iter_values().map(f64::to_bits));
    let ckpt_ok = params_equal && encode_checkpoint(&back) == bytes && before == after;
    notes.push(format!("checkpoint {}", if ckpt_ok { "ok" } else { "differs" }));

    let reports: Vec<Vec<u8>> = (0..2)
        .map(|k| {
            let path = dir.path().join(format!("grad{k}.json"));
            let out = run_cli(&["gradcheck", "--seed", "7", "--report", path.to_str().unwrap()]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            fs::read(path).unwrap()
        })
        .collect();
    let gradcheck_ok = reports[0] == reports[1];

    let sample = sample_dir();
    let cloud_path = sample.join("cloud.ply");
    let cameras_path = sample.join("cameras.json");
    let targets = dir.path().join("targets");
    let out = run_cli(&[
        "render",
        "--cloud",
        cloud_path.to_str().unwrap(),
        "--cameras",
        cameras_path.to_str().unwrap(),
        "--out",
        targets.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let checkpoints: Vec<Vec<u8>> = (0..2)
        .map(|k| {
            let path = dir.path().join(format!("fit{k}.ckpt"));
            let out = run_cli(&[
                "fit",
                "--cloud",
                cloud_path.to_str().unwrap(),
                "--cameras",
                cameras_path.to_str().unwrap(),
                "--targets",
                targets.to_str().unwrap(),
                "--out",
                path.to_str().unwrap(),
                "--steps",
                "25",
                "--seed",
                "5",
            ]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            fs::read(path).unwrap()
        })
        .collect();
    let fit_ok = checkpoints[0] == checkpoints[1];
    notes.push(format!(
        "gradcheck reports {}, fit checkpoints {}",
        if gradcheck_ok { "identical" } else { "differ" },
        if fit_ok { "identical" } else { "differ" }
    ));

    let pass = ply_ok && ckpt_ok && gradcheck_ok && fit_ok;
    verdict(10, "IO round trips and CLI determinism", pass, &notes.join(", "));
    assert!(pass);
}
