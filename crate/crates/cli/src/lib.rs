//! Command-line driver: synthesize a scene, train, render, evaluate, export
//! point clouds and run the gradient checker.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use planar4d::checkpoint::{load_checkpoint, Model};
use planar4d::renderer::{render_frame, Camera};
use planar4d::sampler::{ClampMode, ImportanceMaps};
use planar4d::scene_io::{
    atomic_write, evaluate_frames, export_pointcloud, generate_synthetic, holdout_split, load_dataset,
    render_to_images, save_dataset, summarize, write_color_png, write_depth_png, write_gray8_png, write_heatmap_png,
    write_ply, Dataset, SynthSceneSpec, DEFAULT_DEPTH_SCALE, METRICS_HEADER,
};
use planar4d::training::gradcheck::{check_component_seeds, tolerance, COMPONENTS};
use planar4d::training::{train, TrainConfig, TrainOutputs};

/// Name of the occluder-free copy written next to a synthetic dataset.
pub const GROUND_TRUTH_DIR: &str = "ground_truth";
pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const LOSS_LOG_NAME: &str = "losses.csv";
pub const METRICS_NAME: &str = "metrics.csv";

#[derive(Parser, Debug)]
#[command(name = "planar4d", version, about = "Dynamic RGBD scene reconstruction with factorized 4D feature planes")]
struct Cli {
    /// TOML file with [train], [synth] and [eval] tables; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic benchmark dataset and its occluder-free ground truth.
    Synth,
    /// Train on a dataset directory.
    Train(TrainArgs),
    /// Render color, depth and opacity images from a checkpoint.
    Render(RenderArgs),
    /// PSNR/SSIM and depth error against ground truth, written as CSV.
    Eval(EvalArgs),
    /// Back-project a rendered frame to a binary PLY point cloud.
    ExportPointcloud(ExportArgs),
    /// Compare analytic gradients with central finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClampArg {
    Min,
    Max,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory (manifest.json plus frame, depth and mask PNGs).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, value_enum)]
    clamp_mode: Option<ClampArg>,
    /// Draw rays uniformly over all pixels instead of from importance maps.
    #[arg(long)]
    no_isdm: bool,
    #[arg(long)]
    no_depth_loss: bool,
    /// Keep only the finest plane scale.
    #[arg(long)]
    single_scale: bool,
    /// Frames held out of training, spread evenly over the clip.
    #[arg(long)]
    holdout: Option<usize>,
    /// Write occlusion, motion and combined importance heatmaps.
    #[arg(long)]
    dump_importance: bool,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated normalized times.
    #[arg(long, value_delimiter = ',', required = true)]
    times: Vec<f64>,
    /// Samples per ray (defaults to the training value).
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Ground-truth dataset (defaults to the data directory's ground_truth/).
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Frames to score (defaults to the held-out frames of the run, else all).
    #[arg(long, value_delimiter = ',')]
    frames: Vec<usize>,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    time: f64,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "points.ply")]
    name: String,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Random instances per component.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Only this component.
    #[arg(long)]
    component: Option<String>,
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub synth: SynthSceneSpec,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Frames held out of training.
    pub holdout: usize,
}

/// What a training run records in its checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub camera: Camera,
    pub n_samples: usize,
    pub frame_count: usize,
    pub held_out: Vec<usize>,
    pub train: TrainConfig,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<planar4d::Error> for Failure {
    fn from(e: planar4d::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 2 for usage or configuration errors and
/// 1 for runtime failures.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.workers {
        Some(0) => Err(Failure::Usage("--workers must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Failure::Runtime(e.into())),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let mut file = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        file.train.seed = seed;
    }
    let seed = file.train.seed;
    match &cli.command {
        Command::Synth => synth(&file.synth, seed, &cli.out_dir),
        Command::Train(a) => {
            let mut cfg = file.train.clone();
            if let Some(n) = a.iterations {
                cfg.iterations = n;
            }
            if let Some(m) = a.clamp_mode {
                cfg.sampler.clamp_mode = match m {
                    ClampArg::Min => ClampMode::Min,
                    ClampArg::Max => ClampMode::Max,
                };
            }
            if a.no_isdm {
                cfg.use_isdm = false;
            }
            if a.no_depth_loss {
                cfg = cfg.without_depth_loss();
            }
            if a.single_scale {
                cfg = cfg.single_scale();
            }
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let holdout = a.holdout.unwrap_or(file.eval.holdout);
            run_train(&cfg, &a.data, holdout, a.dump_importance, &cli.out_dir)
        }
        Command::Render(a) => render(a, &cli.out_dir),
        Command::Eval(a) => eval(a, &cli.out_dir),
        Command::ExportPointcloud(a) => export(a, &cli.out_dir),
        Command::GradCheck(a) => grad_check(a, seed),
    }
}

fn synth(spec: &SynthSceneSpec, seed: u64, out: &Path) -> Result<(), Failure> {
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let scene = generate_synthetic(spec, seed)?;
    save_dataset(&scene.dataset, out, DEFAULT_DEPTH_SCALE)?;
    save_dataset(&scene.truth_dataset()?, &out.join(GROUND_TRUTH_DIR), DEFAULT_DEPTH_SCALE)?;
    log::info!("wrote {} frames to {}", scene.dataset.len(), out.display());
    Ok(())
}

fn run_train(cfg: &TrainConfig, data: &Path, holdout: usize, dump: bool, out: &Path) -> Result<(), Failure> {
    let full = load_dataset(data)?;
    let (train_frames, held_out) = if holdout > 0 {
        holdout_split(full.len(), holdout).map_err(|e| Failure::Usage(e.to_string()))?
    } else {
        ((0..full.len()).collect(), Vec::new())
    };
    let dataset = full.subset(&train_frames)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if dump {
        dump_importance(&dataset, cfg, out)?;
    }
    let info = RunInfo {
        camera: dataset.camera.clone(),
        n_samples: cfg.n_samples,
        frame_count: full.len(),
        held_out,
        train: cfg.clone(),
    };
    let outputs = TrainOutputs {
        log_csv: Some(out.join(LOSS_LOG_NAME)),
        checkpoint: Some(out.join(CHECKPOINT_NAME)),
        run_info: serde_json::to_value(&info).map_err(|e| Failure::Runtime(e.into()))?,
    };
    let outcome = train(&dataset, cfg, &outputs)?;
    if let Some(last) = outcome.log.last() {
        log::info!("finished {} iterations, final loss {:.6}", outcome.log.len(), last.total);
    }
    Ok(())
}

fn dump_importance(dataset: &Dataset, cfg: &TrainConfig, out: &Path) -> Result<(), Failure> {
    let maps = ImportanceMaps::build(&dataset.frames, &dataset.masks, &cfg.sampler)?;
    let dir = out.join("importance");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for i in 0..dataset.len() {
        write_heatmap_png(&dir.join(format!("occlusion_{i:04}.png")), &maps.occlusion[i])?;
        write_heatmap_png(&dir.join(format!("motion_{i:04}.png")), &maps.motion[i])?;
        write_heatmap_png(&dir.join(format!("combined_{i:04}.png")), &maps.combined[i])?;
    }
    Ok(())
}

fn load_run(path: &Path) -> Result<(Model, RunInfo), Failure> {
    let (model, echo) = load_checkpoint(path)?;
    let info: RunInfo = serde_json::from_value(echo.run)
        .map_err(|e| anyhow!("{} does not record its camera and run settings: {e}", path.display()))?;
    Ok((model, info))
}

fn check_time(t: f64) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Failure::Usage(format!("time {t} is outside [0, 1]")));
    }
    Ok(())
}

fn render(a: &RenderArgs, out: &Path) -> Result<(), Failure> {
    for &t in &a.times {
        check_time(t)?;
    }
    let (model, info) = load_run(&a.checkpoint)?;
    let n = a.samples.unwrap_or(info.n_samples);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for &t in &a.times {
        let frame = render_frame(&model.planes, &model.decoder, &info.camera, t, n)?;
        let (color, depth, opacity) = render_to_images(&frame);
        let stem = format!("t{t:.4}");
        write_color_png(&out.join(format!("color_{stem}.png")), &color)?;
        write_depth_png(&out.join(format!("depth_{stem}.png")), &depth)?;
        write_gray8_png(&out.join(format!("opacity_{stem}.png")), &opacity)?;
    }
    Ok(())
}

fn eval(a: &EvalArgs, out: &Path) -> Result<(), Failure> {
    let (model, info) = load_run(&a.checkpoint)?;
    let observed = load_dataset(&a.data)?;
    let gt_dir = a.ground_truth.clone().unwrap_or_else(|| a.data.join(GROUND_TRUTH_DIR));
    let truth = load_dataset(&gt_dir)?;
    let frames = if !a.frames.is_empty() {
        a.frames.clone()
    } else if !info.held_out.is_empty() {
        info.held_out.clone()
    } else {
        (0..observed.len()).collect()
    };
    if let Some(&bad) = frames.iter().find(|&&f| f >= observed.len()) {
        return Err(Failure::Usage(format!("frame {bad} is out of range")));
    }
    let rows = evaluate_frames(&model, &observed, &truth, &frames, a.samples.unwrap_or(info.n_samples))?;
    let summary = summarize(&rows)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(METRICS_NAME);
    atomic_write(&path, |w| {
        use std::io::Write;
        writeln!(w, "{METRICS_HEADER}")?;
        for r in &rows {
            writeln!(w, "{}", r.csv_row())?;
        }
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        writeln!(
            w,
            "mean,,{:.6},{:.6},{},,{},{:.6}",
            summary.psnr,
            summary.ssim,
            opt(summary.psnr_occluded),
            opt(summary.passthrough_psnr_occluded),
            summary.depth_mae
        )?;
        Ok(())
    })?;
    println!(
        "psnr {:.3} dB  ssim {:.4}  occluded psnr {}  depth mae {:.5}",
        summary.psnr,
        summary.ssim,
        summary.psnr_occluded.map(|v| format!("{v:.3} dB")).unwrap_or_else(|| "n/a".into()),
        summary.depth_mae
    );
    Ok(())
}

fn export(a: &ExportArgs, out: &Path) -> Result<(), Failure> {
    check_time(a.time)?;
    let (model, info) = load_run(&a.checkpoint)?;
    let frame = render_frame(&model.planes, &model.decoder, &info.camera, a.time, a.samples.unwrap_or(info.n_samples))?;
    let (color, depth, opacity) = render_to_images(&frame);
    let points = export_pointcloud(&color, &depth, &opacity, &info.camera)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_ply(&out.join(&a.name), &points)?;
    log::info!("wrote {} points", points.len());
    Ok(())
}

fn grad_check(a: &GradCheckArgs, seed: u64) -> Result<(), Failure> {
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let names: Vec<&str> = match &a.component {
        Some(c) if COMPONENTS.contains(&c.as_str()) => vec![c.as_str()],
        Some(c) => return Err(Failure::Usage(format!("unknown component {c}; known: {}", COMPONENTS.join(", ")))),
        None => COMPONENTS.to_vec(),
    };
    let mut failed = Vec::new();
    println!("{:<18} {:>8} {:>12} {:>10}  status", "component", "checked", "max_rel_err", "tolerance");
    for name in names {
        let report = check_component_seeds(name, seed..seed + a.seeds)?;
        let tol = tolerance(name);
        let ok = report.max_rel_error < tol;
        println!(
            "{:<18} {:>8} {:>12.3e} {:>10.0e}  {}",
            name,
            report.checked,
            report.max_rel_error,
            tol,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("gradient check failed for {}", failed.join(", "))))
    }
}
