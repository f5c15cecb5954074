//! Benchmark and ablation runs on synthetic scenes.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{calibration_sweep, evaluate, flop_estimate, CalibrationSweep, MetricReport, MetricsError};
use crate::scene::{generate_scene, CalibrationNoise, MotionModel, SceneConfig, SceneData, SceneError};
use crate::tracker::{track_sequence, ModelConfig, Sequence, TrackerConfig, TrackerError, TrackerModel};
use crate::train::{train, LossWeights, TrainConfig, TrainError};
use crate::volume::{attention_fields, populate_volume, AttentionMode, AttentionParams, OpCounter, DEFAULT_CHUNK_SIZE};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// Noisy synthetic benchmark: per seed, a few training scenes and one
/// held-out scene, all drawn from the same camera rig distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seeds: Vec<u64>,
    /// Cameras in the generated rig; runs restrict to a prefix of it.
    pub rig_cameras: usize,
    pub train_cameras: usize,
    pub n_train_scenes: usize,
    pub n_points: usize,
    pub n_frames: usize,
    pub feature_dim: usize,
    pub pixel_noise_sigma: f64,
    pub occlusion_rate: f64,
    pub motion_model: MotionModel,
    pub epochs: usize,
    pub lr: f64,
    pub grid_resolution: usize,
    pub camera_counts: Vec<usize>,
    pub calibration_base: CalibrationNoise,
    pub calibration_levels: Vec<f64>,
    pub calibration_seeds: Vec<u64>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            rig_cameras: 5,
            train_cameras: 3,
            n_train_scenes: 3,
            n_points: 8,
            n_frames: 24,
            feature_dim: 16,
            pixel_noise_sigma: 1.0,
            occlusion_rate: 0.3,
            motion_model: MotionModel::Mixed,
            epochs: 20,
            lr: 1e-3,
            grid_resolution: 16,
            camera_counts: vec![2, 3, 4, 5],
            calibration_base: CalibrationNoise {
                intrinsic_px: 1.0,
                rotation_deg: 1.0,
                translation_cm: 5.0,
            },
            calibration_levels: vec![1.0, 2.0, 4.0],
            calibration_seeds: vec![11, 12],
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ExperimentError::InvalidConfig(m.into()));
        if self.seeds.is_empty() || self.n_train_scenes == 0 || self.epochs == 0 {
            return bad("seeds, n_train_scenes and epochs must be non-empty");
        }
        if self.train_cameras == 0 || self.train_cameras > self.rig_cameras {
            return bad("train_cameras must lie in 1..=rig_cameras");
        }
        if self.camera_counts.iter().any(|&n| n == 0 || n > self.rig_cameras) {
            return bad("camera counts must lie in 1..=rig_cameras");
        }
        Ok(())
    }

    fn scene(&self, seed: u64) -> Result<SceneData> {
        let cfg = SceneConfig {
            n_cameras: self.rig_cameras,
            n_points: self.n_points,
            n_frames: self.n_frames,
            feature_dim: self.feature_dim,
            pixel_noise_sigma: self.pixel_noise_sigma,
            occlusion_rate: self.occlusion_rate,
            seed,
            motion_model: self.motion_model,
            ..SceneConfig::default()
        };
        Ok(generate_scene(&cfg)?)
    }

    /// Training scenes (restricted to the training cameras) and the
    /// held-out scene (full rig) for one seed.
    pub fn scenes(&self, seed: u64) -> Result<(Vec<SceneData>, SceneData)> {
        let base = seed.wrapping_mul(1000);
        let prefix: Vec<usize> = (0..self.train_cameras).collect();
        let train = (1..=self.n_train_scenes as u64)
            .map(|k| Ok(self.scene(base + k)?.restrict_views(&prefix)))
            .collect::<Result<Vec<_>>>()?;
        let test = self.scene(base + 500)?;
        Ok((train, test))
    }

    pub fn train_config(&self, seed: u64, mode: AttentionMode, weights: LossWeights) -> TrainConfig {
        let mut tc = TrainConfig::desk(self.feature_dim, self.n_points);
        tc.epochs = self.epochs;
        tc.scenes_per_epoch = self.n_train_scenes;
        tc.seed = seed;
        tc.lr = self.lr;
        tc.weights = weights;
        tc.model.attention = mode;
        tc.model.grid_resolution = self.grid_resolution;
        tc
    }
}

/// A trained tracker variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Masked attention, default loss weights.
    Attention,
    /// Uniform attention, default loss weights.
    Uniform,
    /// Masked attention, (1.0, 0.5, 0.5) loss weights.
    Balanced,
}

impl Variant {
    pub fn mode(self) -> AttentionMode {
        match self {
            Variant::Uniform => AttentionMode::Uniform,
            _ => AttentionMode::Masked,
        }
    }

    pub fn weights(self) -> LossWeights {
        match self {
            Variant::Balanced => LossWeights::balanced(),
            _ => LossWeights::default(),
        }
    }
}

pub fn train_variant(cfg: &BenchmarkConfig, seed: u64, train_scenes: &[SceneData], variant: Variant) -> Result<TrackerModel> {
    let tc = cfg.train_config(seed, variant.mode(), variant.weights());
    Ok(train(&tc, train_scenes)?.model)
}

/// Tracks `scene` restricted to its first `n_views` cameras and scores it.
pub fn evaluate_views(model: &TrackerModel, scene: &SceneData, n_views: usize) -> Result<MetricReport> {
    let views: Vec<usize> = (0..n_views).collect();
    let sub = scene.restrict_views(&views);
    let trajs = track_sequence(&sub.observations, model, &TrackerConfig::default())?;
    Ok(evaluate(&sub, &trajs)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub attention: MetricReport,
    pub uniform: MetricReport,
    pub balanced: MetricReport,
    /// Attention model on the held-out scene with each camera count.
    pub cameras: Vec<(usize, MetricReport)>,
    pub calibration: CalibrationSweep,
}

/// Trains the three variants for one seed and evaluates them.
pub fn run_seed(cfg: &BenchmarkConfig, seed: u64) -> Result<SeedResult> {
    cfg.validate()?;
    let (train_scenes, test) = cfg.scenes(seed)?;
    let attention_model = train_variant(cfg, seed, &train_scenes, Variant::Attention)?;
    let uniform_model = train_variant(cfg, seed, &train_scenes, Variant::Uniform)?;
    let balanced_model = train_variant(cfg, seed, &train_scenes, Variant::Balanced)?;
    let n = cfg.train_cameras;
    let cameras = cfg
        .camera_counts
        .iter()
        .map(|&c| Ok((c, evaluate_views(&attention_model, &test, c)?)))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<usize> = (0..n).collect();
    let eval_scene = test.restrict_views(&views);
    let calibration = calibration_sweep(
        &eval_scene,
        &attention_model,
        &TrackerConfig::default(),
        cfg.calibration_base,
        &cfg.calibration_levels,
        &cfg.calibration_seeds,
    )?;
    let result = SeedResult {
        seed,
        attention: evaluate_views(&attention_model, &test, n)?,
        uniform: evaluate_views(&uniform_model, &test, n)?,
        balanced: evaluate_views(&balanced_model, &test, n)?,
        cameras,
        calibration,
    };
    log::info!(
        "seed {seed}: APD attention {:.2}, uniform {:.2}, balanced {:.2}",
        result.attention.apd,
        result.uniform.apd,
        result.balanced.apd
    );
    Ok(result)
}

pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<Vec<SeedResult>> {
    cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Cameras,
    Grid,
    Attention,
    Losses,
}

impl std::str::FromStr for Suite {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cameras" => Ok(Suite::Cameras),
            "grid" => Ok(Suite::Grid),
            "attention" => Ok(Suite::Attention),
            "losses" => Ok(Suite::Losses),
            other => Err(ExperimentError::InvalidConfig(format!("unknown suite {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub label: String,
    pub report: MetricReport,
}

/// Grid resolutions compared by the grid suite.
pub const GRID_SUITE: [usize; 3] = [8, 16, 24];

pub fn run_ablation(suite: Suite, cfg: &BenchmarkConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let (train_scenes, test) = cfg.scenes(seed)?;
        let n = cfg.train_cameras;
        let mut push = |label: String, report: MetricReport| rows.push(AblationRow { seed, label, report });
        match suite {
            Suite::Cameras => {
                let model = train_variant(cfg, seed, &train_scenes, Variant::Attention)?;
                for &c in &cfg.camera_counts {
                    push(format!("{c} cameras"), evaluate_views(&model, &test, c)?);
                }
            }
            Suite::Grid => {
                for res in GRID_SUITE {
                    let mut tc = cfg.train_config(seed, AttentionMode::Masked, LossWeights::default());
                    tc.model.grid_resolution = res;
                    let model = train(&tc, &train_scenes)?.model;
                    push(format!("grid {res}"), evaluate_views(&model, &test, n)?);
                }
            }
            Suite::Attention => {
                for (label, v) in [("attention", Variant::Attention), ("uniform", Variant::Uniform)] {
                    let model = train_variant(cfg, seed, &train_scenes, v)?;
                    push(label.into(), evaluate_views(&model, &test, n)?);
                }
            }
            Suite::Losses => {
                for (label, v) in [("weights 1.0/0.7/0.8", Variant::Attention), ("weights 1.0/0.5/0.5", Variant::Balanced)] {
                    let model = train_variant(cfg, seed, &train_scenes, v)?;
                    push(label.into(), evaluate_views(&model, &test, n)?);
                }
            }
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("seed,variant,APD,OA,3D-AJ,2D-AJ,mean_error\n");
    for r in rows {
        let oa = r.report.oa.map_or_else(String::new, |v| format!("{v:.4}"));
        let _ = writeln!(
            s,
            "{},{},{:.4},{},{:.4},{:.4},{:.6}",
            r.seed,
            r.label,
            r.report.apd,
            oa,
            r.report.aj3d * 100.0,
            r.report.aj2d * 100.0,
            r.report.mean_error
        );
    }
    s
}

/// Dimensions swept by the throughput benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThroughputConfig {
    pub resolutions: Vec<usize>,
    pub view_counts: Vec<usize>,
    pub n_points: usize,
    pub feature_dim: usize,
    pub chunk_sizes: Vec<usize>,
    /// Timed runs per row; the fastest is reported.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ThroughputConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![8, 16, 24],
            view_counts: vec![2, 3, 4, 5],
            n_points: 8,
            feature_dim: 16,
            chunk_sizes: vec![1024, DEFAULT_CHUNK_SIZE, 65536],
            repeats: 3,
            seed: 0,
        }
    }
}

impl ThroughputConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ExperimentError::InvalidConfig(m.into()));
        if self.resolutions.iter().any(|&r| r < 2) {
            return bad("resolutions must be at least 2");
        }
        if self.view_counts.iter().any(|&n| n < 2) {
            return bad("view counts must be at least 2");
        }
        if self.chunk_sizes.is_empty() || self.chunk_sizes.contains(&0) {
            return bad("chunk sizes must be positive");
        }
        if self.n_points == 0 || self.feature_dim == 0 || self.repeats == 0 {
            return bad("n_points, feature_dim and repeats must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub grid_resolution: usize,
    pub n_views: usize,
    pub n_points: usize,
    pub feature_dim: usize,
    pub chunk_size: usize,
    pub estimated_flops: u64,
    /// Multiply-adds counted during volume population.
    pub populate_macs: u64,
    pub populate_ms: f64,
    /// Output equals the first chunk size's output bit for bit.
    pub matches_reference: bool,
}

/// Times volume population on the first frame of a generated scene for
/// every combination of resolution, view count and chunk size, next to the
/// operation-count model of a full frame.
pub fn timing_sweep(cfg: &ThroughputConfig) -> Result<Vec<TimingRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &res in &cfg.resolutions {
        for &n_views in &cfg.view_counts {
            let scene = generate_scene(&SceneConfig {
                n_cameras: n_views,
                n_points: cfg.n_points,
                n_frames: 1,
                feature_dim: cfg.feature_dim,
                seed: cfg.seed,
                ..SceneConfig::default()
            })?;
            let seq = Sequence::new(&scene.observations, res)?;
            let inputs = seq.frame(0);
            let fields = attention_fields(&seq.geom, &inputs.dist, &AttentionParams::default(), AttentionMode::Masked);
            let weights: Vec<Array2<f64>> = fields.into_iter().map(|f| f.combined).collect();
            let spec = ModelConfig::desk(cfg.feature_dim, cfg.n_points).mlp_spec();
            let flops = flop_estimate(res, n_views, cfg.n_points, cfg.feature_dim, &spec).total_flops();
            let mut reference: Option<Array2<f64>> = None;
            for &chunk in &cfg.chunk_sizes {
                let mut best = f64::INFINITY;
                let mut macs = 0;
                let mut out = None;
                for _ in 0..cfg.repeats {
                    let counter = OpCounter::default();
                    let start = Instant::now();
                    let v = populate_volume(&weights, &inputs.features, chunk, Some(&counter)).map_err(TrackerError::from)?;
                    best = best.min(start.elapsed().as_secs_f64() * 1000.0);
                    macs = counter.get();
                    out = Some(v);
                }
                let out = out.expect("repeats is positive");
                let matches_reference = reference.as_ref().map_or(true, |r| *r == out);
                reference.get_or_insert(out);
                rows.push(TimingRow {
                    grid_resolution: res,
                    n_views,
                    n_points: cfg.n_points,
                    feature_dim: cfg.feature_dim,
                    chunk_size: chunk,
                    estimated_flops: flops,
                    populate_macs: macs,
                    populate_ms: best,
                    matches_reference,
                });
            }
        }
    }
    Ok(rows)
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut s = String::from(
        "grid_resolution,n_views,n_points,feature_dim,chunk_size,estimated_flops,populate_macs,populate_ms,matches_reference\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.3},{}",
            r.grid_resolution,
            r.n_views,
            r.n_points,
            r.feature_dim,
            r.chunk_size,
            r.estimated_flops,
            r.populate_macs,
            r.populate_ms,
            r.matches_reference
        );
    }
    s
}
