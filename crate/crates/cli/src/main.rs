//! `mvtrack`: simulate scenes, train and run the tracker, evaluate, ablate
//! and benchmark.

mod config;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mvtrack::experiments::{ablation_csv, run_ablation, timing_csv, timing_sweep, BenchmarkConfig, Suite, ThroughputConfig};
use mvtrack::metrics::{evaluate_with, THRESHOLDS_2D, THRESHOLDS_3D};
use mvtrack::scene::{generate_scene, read_scene, write_scene, SceneConfig, SceneData};
use mvtrack::tracker::{
    read_trajectories_json, track_sequence_with, trajectories_csv, write_trajectories_json, FrameOutput, TrackerConfig,
    TrackerError, TrackerModel,
};
use mvtrack::train::{train, TrainConfig, TrainError};
use mvtrack::volume::fields_to_le_bytes;

use config::{config_error, render, resolve, ConfigError, SeedRule};

#[derive(Debug, Parser)]
#[command(name = "mvtrack", version, about = "Multi-camera 3D point tracking")]
struct Cli {
    /// TOML file overriding the command's defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; each command has its own default.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// `track` only: write every frame's combined attention weights here as
    /// little-endian f32, laid out `[frame][view][voxel][point]`.
    #[arg(long, global = true)]
    dump_attention: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene (JSON plus feature sidecar).
    Simulate,
    /// Train a tracker on one or more scenes.
    Train {
        /// Scene files produced by `simulate`.
        #[arg(long = "scene")]
        scenes: Vec<PathBuf>,
    },
    /// Track every point of a scene with a trained model.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
    },
    /// Score trajectories against a scene's ground truth.
    Eval {
        /// Trajectory JSON produced by `track`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Comma-separated 3D thresholds in world units.
        #[arg(long, value_delimiter = ',')]
        thresholds_3d: Option<Vec<f64>>,
        /// Comma-separated 2D thresholds in pixels.
        #[arg(long, value_delimiter = ',')]
        thresholds_2d: Option<Vec<f64>>,
    },
    /// Run an ablation suite: cameras, grid, attention or losses.
    Ablate { suite: String },
    /// Operation-count model and volume-population timings.
    Bench,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    thresholds_3d: Vec<f64>,
    thresholds_2d: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds_3d: THRESHOLDS_3D.to_vec(),
            thresholds_2d: THRESHOLDS_2D.to_vec(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_error(format!("input file {} does not exist", path.display())))
    }
}

fn output_path(cli: &Cli, default: &str) -> anyhow::Result<PathBuf> {
    let path = cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(config_error(format!(
            "output directory {} does not exist",
            dir.display()
        ))),
        _ => Ok(path),
    }
}

fn load_scene(path: &Path) -> anyhow::Result<SceneData> {
    require_file(path)?;
    read_scene(path).map_err(|e| config_error(format!("cannot load scene {}: {e}", path.display())))
}

/// Sibling of `path` with the given extension, e.g. `model.ckpt` to
/// `model.log.csv`.
fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(config_error("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    if cli.dump_attention.is_some() && !matches!(cli.command, Command::Track { .. }) {
        return Err(config_error("--dump-attention only applies to `track`"));
    }
    let file = cli.config.as_deref();
    if let Some(f) = file {
        require_file(f)?;
    }
    match &cli.command {
        Command::Simulate => cmd_simulate(cli, file),
        Command::Train { scenes } => cmd_train(cli, file, scenes),
        Command::Track { checkpoint, scene } => cmd_track(cli, file, checkpoint, scene),
        Command::Eval {
            pred,
            scene,
            thresholds_3d,
            thresholds_2d,
        } => cmd_eval(cli, file, pred, scene, thresholds_3d.as_deref(), thresholds_2d.as_deref()),
        Command::Ablate { suite } => cmd_ablate(cli, file, suite),
        Command::Bench => cmd_bench(cli, file),
    }
}

fn cmd_simulate(cli: &Cli, file: Option<&Path>) -> anyhow::Result<()> {
    let cfg: SceneConfig = resolve(&SceneConfig::default(), file, cli.seed, SeedRule::Required, cli.print_config)?;
    if cli.print_config {
        print!("{}", render(&cfg)?);
        return Ok(());
    }
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    let out = output_path(cli, "scene.json")?;
    let scene = generate_scene(&cfg)?;
    write_scene(&out, &scene)?;
    println!(
        "wrote {}: {} cameras, {} points, {} frames, occlusion fraction {:.3}",
        out.display(),
        scene.observations.n_views(),
        scene.observations.n_points,
        scene.observations.n_frames,
        scene.occlusion_fraction()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, file: Option<&Path>, scene_paths: &[PathBuf]) -> anyhow::Result<()> {
    let scenes = if cli.print_config {
        Vec::new()
    } else if scene_paths.is_empty() {
        return Err(config_error("train needs at least one --scene"));
    } else {
        scene_paths.iter().map(|p| load_scene(p)).collect::<anyhow::Result<Vec<_>>>()?
    };
    let (d, k) = scenes.first().map_or_else(
        || {
            let s = SceneConfig::default();
            (s.feature_dim, s.n_points)
        },
        |s| (s.observations.feature_dim(), s.observations.n_points),
    );
    let cfg: TrainConfig = resolve(&TrainConfig::desk(d, k), file, cli.seed, SeedRule::Required, cli.print_config)?;
    if cli.print_config {
        print!("{}", render(&cfg)?);
        return Ok(());
    }
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    let out = output_path(cli, "model.ckpt")?;
    match train(&cfg, &scenes) {
        Ok(outcome) => {
            outcome.model.save(&out, outcome.steps)?;
            let log_path = sibling(&out, "log.csv");
            fs::write(&log_path, outcome.log_csv())?;
            let first = outcome.epoch_losses.first().copied().unwrap_or(f64::NAN);
            let last = outcome.epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} steps, epoch loss {first:.6} -> {last:.6}; wrote {} and {}",
                outcome.steps,
                out.display(),
                log_path.display()
            );
            Ok(())
        }
        Err(TrainError::Divergence { step, last_good }) => {
            let rescue = sibling(&out, "last_good.ckpt");
            last_good.save(&rescue, step)?;
            anyhow::bail!(
                "training diverged at step {step}; last finite parameters saved to {}",
                rescue.display()
            )
        }
        Err(TrainError::InvalidConfig(m)) => Err(config_error(m)),
        Err(TrainError::Tracker(e @ TrackerError::SpecMismatch { .. })) => Err(config_error(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

fn cmd_track(cli: &Cli, file: Option<&Path>, checkpoint: &Path, scene_path: &Path) -> anyhow::Result<()> {
    let cfg: TrackerConfig = resolve(&TrackerConfig::default(), file, None, SeedRule::Optional, cli.print_config)?;
    if cli.print_config {
        print!("{}", render(&cfg)?);
        return Ok(());
    }
    require_file(checkpoint)?;
    let (model, _) = TrackerModel::load(checkpoint)
        .map_err(|e| config_error(format!("cannot load checkpoint {}: {e}", checkpoint.display())))?;
    let scene = load_scene(scene_path)?;
    let obs = &scene.observations;
    model.check_compatible(obs).map_err(|e| config_error(e.to_string()))?;
    let out = output_path(cli, "trajectories.json")?;

    let mut dump = cli.dump_attention.as_deref().map(File::create).transpose()?;
    let mut dump_err: Option<std::io::Error> = None;
    let mut hook = |_frame: usize, o: &FrameOutput| {
        if let (Some(f), None) = (dump.as_mut(), dump_err.as_ref()) {
            if let Err(e) = f.write_all(&fields_to_le_bytes(&o.fields)) {
                dump_err = Some(e);
            }
        }
    };
    let trajs = track_sequence_with(obs, &model, &cfg, Some(&mut hook))?;
    if let Some(e) = dump_err {
        return Err(e).context("writing attention dump");
    }
    write_trajectories_json(&out, &trajs)?;
    let csv = sibling(&out, "csv");
    fs::write(&csv, trajectories_csv(&trajs))?;
    let valid: usize = trajs.iter().map(|t| t.valid.iter().filter(|&&v| v).count()).sum();
    println!(
        "tracked {} points over {} frames ({valid} valid predictions); wrote {} and {}",
        trajs.len(),
        obs.n_frames,
        out.display(),
        csv.display()
    );
    if let Some(p) = &cli.dump_attention {
        println!(
            "attention dump {}: {} frames x {} views x {} voxels x {} points",
            p.display(),
            obs.n_frames,
            obs.n_views(),
            model.config.grid_resolution.pow(3),
            obs.n_points
        );
    }
    Ok(())
}

fn cmd_eval(
    cli: &Cli,
    file: Option<&Path>,
    pred: &Path,
    scene_path: &Path,
    th3: Option<&[f64]>,
    th2: Option<&[f64]>,
) -> anyhow::Result<()> {
    let mut cfg: EvalConfig = resolve(&EvalConfig::default(), file, None, SeedRule::Optional, cli.print_config)?;
    if let Some(t) = th3 {
        cfg.thresholds_3d = t.to_vec();
    }
    if let Some(t) = th2 {
        cfg.thresholds_2d = t.to_vec();
    }
    if cli.print_config {
        print!("{}", render(&cfg)?);
        return Ok(());
    }
    let positive = |v: &[f64]| !v.is_empty() && v.iter().all(|&t| t > 0.0 && t.is_finite());
    if !positive(&cfg.thresholds_3d) || !positive(&cfg.thresholds_2d) {
        return Err(config_error("threshold ladders must be non-empty lists of positive numbers"));
    }
    require_file(pred)?;
    let trajs = read_trajectories_json(pred)
        .map_err(|e| config_error(format!("cannot load trajectories {}: {e}", pred.display())))?;
    let scene = load_scene(scene_path)?;
    let report = evaluate_with(&scene, &trajs, &cfg.thresholds_3d, &cfg.thresholds_2d)?;
    let out = output_path(cli, "report.json")?;
    print!("{}", report.table());
    fs::write(&out, report.to_json())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_ablate(cli: &Cli, file: Option<&Path>, suite: &str) -> anyhow::Result<()> {
    let suite: Suite = suite.parse().map_err(|e: mvtrack::experiments::ExperimentError| config_error(e.to_string()))?;
    let cfg: BenchmarkConfig = resolve(&BenchmarkConfig::default(), file, cli.seed, SeedRule::List, cli.print_config)?;
    if cli.print_config {
        print!("{}", render(&cfg)?);
        return Ok(());
    }
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    let out = output_path(cli, "ablation.csv")?;
    let csv = ablation_csv(&run_ablation(suite, &cfg)?);
    fs::write(&out, &csv)?;
    print!("{csv}");
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_bench(cli: &Cli, file: Option<&Path>) -> anyhow::Result<()> {
    let cfg: ThroughputConfig = resolve(&ThroughputConfig::default(), file, cli.seed, SeedRule::Optional, cli.print_config)?;
    if cli.print_config {
        print!("{}", render(&cfg)?);
        return Ok(());
    }
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    let out = output_path(cli, "bench.csv")?;
    let csv = timing_csv(&timing_sweep(&cfg)?);
    fs::write(&out, &csv)?;
    print!("{csv}");
    println!("wrote {}", out.display());
    Ok(())
}
