//! Command-line front end: `render`, `fit`, `gradcheck` and `loss-eval`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::buffer::Image;
use crate::error::{Error, Result};
use crate::fit::{fit_gaussians, initialize_from_cloud, FitConfig, View};
use crate::grad::{finite_diff_check, LossReduction, GRADCHECK_TOLERANCE};
use crate::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance};
use crate::io::images::{load_image, save_image, save_planes, save_raw, ChannelRange};
use crate::io::{load_cameras, load_point_cloud};
use crate::losses::{
    l1_loss, progressive_multiscale_frequency_loss, progressive_multiscale_image_loss,
    total_loss, LossWeights, PredictionPyramid, DEFAULT_SCALES,
};
use crate::primitives::{Scene, DEFAULT_FEATURE_DIM};
use crate::raster::{gather_payloads, render, PayloadSelect, RasterConfig};
use crate::synthetic::gradcheck_setup;

/// Environment variable capping worker threads (0 or unset = all cores).
pub const THREADS_ENV: &str = "PFGS_THREADS";

#[derive(Parser, Debug)]
#[command(name = "pfgs", version, about = "Differentiable multi-channel Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render every camera to `<out>/view_NNN.png`.
    Render(RenderArgs),
    /// Fit Gaussians to target images and write a checkpoint.
    Fit(FitArgs),
    /// Compare analytic gradients with finite differences on a random scene.
    Gradcheck(GradcheckArgs),
    /// Evaluate the training losses of predicted images against ground truth.
    LossEval(LossEvalArgs),
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Point cloud used to initialize the scene when no checkpoint is given.
    #[arg(long, required_unless_present = "checkpoint")]
    cloud: Option<PathBuf>,
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// color, feature or joint.
    #[arg(long, default_value = "color", value_parser = parse_payload)]
    payload: PayloadSelect,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seed for initializing from the point cloud.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the unquantized payload as `view_NNN.raw`.
    #[arg(long)]
    raw: bool,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    /// Directory holding `view_NNN.png` for every camera.
    #[arg(long)]
    targets: PathBuf,
    /// Checkpoint path; the report goes to `<out>.report.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file with fit settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image size as HxW.
    #[arg(long, default_value = "32x32", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 12)]
    count: usize,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    /// Write the full JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LossEvalArgs {
    /// Predictions: `<stem>.png`, optionally with `<stem>_l<L>_s<S>.png` pyramids.
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth `<stem>.png` files.
    #[arg(long)]
    gt: PathBuf,
    /// Total-loss weights γ_gs,γ_mim,γ_mfr.
    #[arg(long, value_parser = parse_weights)]
    weights: Option<[f64; 3]>,
    /// Write the JSON summary here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_payload(s: &str) -> std::result::Result<PayloadSelect, String> {
    PayloadSelect::parse(s).ok_or_else(|| format!("unknown payload '{s}' (color, feature or joint)"))
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("size must look like HxW")?;
    let h: usize = h.parse().map_err(|_| format!("bad height '{h}'"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width '{w}'"))?;
    if h == 0 || w == 0 {
        return Err("size must be at least 1x1".into());
    }
    Ok((h, w))
}

fn parse_weights(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad weight '{p}'")))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected three comma-separated weights".to_string())
}

/// File name of view `k`.
pub fn view_name(k: usize) -> String {
    format!("view_{k:03}")
}

fn configure_threads() {
    let Ok(value) = std::env::var(THREADS_ENV) else { return };
    match value.trim().parse::<usize>() {
        Ok(0) => {}
        Ok(n) => {
            if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
                log::warn!("thread pool already initialized; ignoring {THREADS_ENV}={n}");
            }
        }
        Err(_) => log::warn!("ignoring {THREADS_ENV}={value:?}: not a non-negative integer"),
    }
}

fn load_scene(checkpoint: Option<&Path>, cloud: Option<&Path>, seed: u64) -> Result<Scene> {
    match (checkpoint, cloud) {
        (Some(path), _) => Ok(load_checkpoint(path)?.scene),
        (None, Some(cloud)) => initialize_from_cloud(&load_point_cloud(cloud)?, DEFAULT_FEATURE_DIM, seed),
        (None, None) => Err(Error::Validation("render needs --cloud or --checkpoint".into())),
    }
}

fn run_render(args: &RenderArgs) -> Result<()> {
    let cameras = load_cameras(&args.cameras)?;
    let scene = load_scene(args.checkpoint.as_deref(), args.cloud.as_deref(), args.seed)?;
    let gaussians = scene.activate()?;
    let config = RasterConfig::default();
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    cameras.par_iter().enumerate().try_for_each(|(k, camera)| {
        let buffers = render(&gaussians, camera, &config, args.payload)?;
        let base = args.out.join(format!("{}.png", view_name(k)));
        let range = ChannelRange::default();
        match args.payload {
            PayloadSelect::Color => {
                save_image(&buffers.payload, &base, range)?;
            }
            PayloadSelect::Feature => {
                save_planes(&buffers.payload, &base, range)?;
            }
            PayloadSelect::Joint => {
                save_image(&buffers.payload.channel_range(0, 3)?, &base, range)?;
                let d = buffers.payload.channels() - 3;
                save_planes(&buffers.payload.channel_range(3, d)?, &base, range)?;
            }
        }
        if args.raw {
            save_raw(&buffers.payload, args.out.join(format!("{}.raw", view_name(k))))?;
        }
        Ok(())
    })?;
    println!("rendered {} view(s) to {}", cameras.len(), args.out.display());
    Ok(())
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str::<FitConfig>(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                offset: e.span().map_or(0, |s| s.start as u64),
                message: e.message().to_string(),
            })?
        }
        None => FitConfig::default(),
    };
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let cloud = load_point_cloud(&args.cloud)?;
    let cameras = load_cameras(&args.cameras)?;
    if cameras.is_empty() {
        return Err(Error::Validation("fit needs at least one camera".into()));
    }
    let views = cameras
        .into_iter()
        .enumerate()
        .map(|(k, camera)| {
            let target = load_image(args.targets.join(format!("{}.png", view_name(k))))?;
            Ok(View { camera, target })
        })
        .collect::<Result<Vec<_>>>()?;
    let (scene, report) = fit_gaussians(&cloud, &views, &config, &RasterConfig::default())?;
    save_checkpoint(
        &args.out,
        &Checkpoint {
            scene,
            optimizer: None,
            provenance: Provenance::from_config(&config),
        },
    )?;
    let report_path = report_path(&args.out);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    println!(
        "fit {} steps: mean PSNR {:.3} dB -> {:.3} dB; checkpoint {}",
        config.steps,
        report.initial_eval().mean_psnr(),
        report.final_eval().mean_psnr(),
        args.out.display()
    );
    Ok(())
}

/// `<checkpoint>.report.json`.
pub fn report_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".report.json");
    PathBuf::from(name)
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    if args.count == 0 {
        return Err(Error::Validation("--count must be at least 1".into()));
    }
    let (height, width) = args.size;
    let (scene, camera) = gradcheck_setup(args.seed, args.count, width, height)?;
    let config = RasterConfig::default();
    let select = PayloadSelect::Joint;
    let (channels, _) = gather_payloads(&scene.activate()?, &config, select)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0x9e37_79b9);
    let weights = Image::from_fn(width, height, channels, |_, _, _| rng.random_range(-1.0..1.0));
    let report = finite_diff_check(&scene, &camera, &config, select, &LossReduction::Weighted(weights), args.epsilon)?;
    let passed = report.fraction_under_tolerance >= 0.99;
    println!(
        "gradcheck seed {}: {} checked, {} boundary, {:.2}% under {:e}, max error {:.3e} -> {}",
        args.seed,
        report.checked,
        report.excluded_boundary,
        100.0 * report.fraction_under_tolerance,
        GRADCHECK_TOLERANCE,
        report.max_error,
        if passed { "pass" } else { "FAIL" }
    );
    if let Some(path) = &args.report {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
    }
    Ok(passed)
}

#[derive(Debug, Serialize)]
struct ImageLosses {
    name: String,
    l_gs: f64,
    l_mim: f64,
    l_mfr: f64,
    total: f64,
    /// Whether a full loop/scale pyramid was found; otherwise the full-size
    /// prediction stands in for every loop and is area-averaged per scale.
    pyramid: bool,
}

#[derive(Debug, Serialize)]
struct LossSummary {
    weights: [f64; 3],
    images: Vec<ImageLosses>,
    mean_total: f64,
}

fn pyramid_path(dir: &Path, stem: &str, l: usize, s: usize) -> PathBuf {
    dir.join(format!("{stem}_l{l}_s{s}.png"))
}

fn evaluate_pair(pred_dir: &Path, gt_path: &Path, weights: &LossWeights) -> Result<ImageLosses> {
    let stem = gt_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    let gt = load_image(gt_path)?;
    let pred = load_image(pred_dir.join(format!("{stem}.png")))?;
    let l_gs = l1_loss(&pred, &gt)?;
    let loops = weights.loops.0.len();
    let have_pyramid = (1..=loops)
        .all(|l| (1..=DEFAULT_SCALES.len()).all(|s| pyramid_path(pred_dir, &stem, l, s).is_file()));
    let pyramid = if have_pyramid {
        let images = (1..=loops)
            .map(|l| {
                (1..=DEFAULT_SCALES.len())
                    .map(|s| load_image(pyramid_path(pred_dir, &stem, l, s)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        PredictionPyramid::new(DEFAULT_SCALES.to_vec(), images)?
    } else {
        let per_scale = DEFAULT_SCALES
            .iter()
            .map(|r| crate::losses::downsample_image(&pred, *r))
            .collect::<Result<Vec<_>>>()?;
        PredictionPyramid::new(DEFAULT_SCALES.to_vec(), vec![per_scale; loops])?
    };
    let l_mim = progressive_multiscale_image_loss(&pyramid, &gt, &weights.loops)?;
    let l_mfr = progressive_multiscale_frequency_loss(&pyramid, &gt, &weights.loops)?;
    Ok(ImageLosses {
        name: stem,
        l_gs,
        l_mim,
        l_mfr,
        total: total_loss(l_gs, l_mim, l_mfr, weights),
        pyramid: have_pyramid,
    })
}

fn run_loss_eval(args: &LossEvalArgs) -> Result<()> {
    let mut weights = LossWeights::default();
    if let Some([a, b, c]) = args.weights {
        weights.gamma_gs = a;
        weights.gamma_mim = b;
        weights.gamma_mfr = c;
    }
    weights.validate()?;
    let mut gt_files: Vec<PathBuf> = fs::read_dir(&args.gt)
        .map_err(|e| Error::io(&args.gt, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    gt_files.sort();
    if gt_files.is_empty() {
        return Err(Error::Validation(format!("no .png files in {}", args.gt.display())));
    }
    let images = gt_files
        .iter()
        .map(|gt| evaluate_pair(&args.pred, gt, &weights))
        .collect::<Result<Vec<_>>>()?;
    let mean_total = images.iter().map(|i| i.total).sum::<f64>() / images.len() as f64;
    let summary = LossSummary {
        weights: [weights.gamma_gs, weights.gamma_mim, weights.gamma_mfr],
        images,
        mean_total,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    match &args.out {
        Some(path) => fs::write(path, json).map_err(|e| Error::io(path, e))?,
        None => println!("{json}"),
    }
    Ok(())
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 for usage and validation errors, 2 for IO errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    configure_threads();
    let outcome = match &cli.command {
        Command::Render(a) => run_render(a).map(|_| true),
        Command::Fit(a) => run_fit(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::LossEval(a) => run_loss_eval(a).map(|_| true),
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
