//! Accuracy metrics, calibration sweeps and the operation-count model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraParams, Point3, MIN_DEPTH};
use crate::nnet::MlpSpec;
use crate::scene::{perturb_calibration, CalibrationNoise, SceneData, SceneError, SceneObservations};
use crate::tracker::{track_sequence, TrackerConfig, TrackerError, TrackerModel, Trajectory3D};

pub const THRESHOLDS_3D: [f64; 5] = [0.01, 0.02, 0.04, 0.08, 0.16];
pub const THRESHOLDS_2D: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
/// Frames scored after a point reappears.
pub const OA_WINDOW: usize = 5;
/// Multiply-adds to project one voxel into one view (3×4 matrix product
/// plus the perspective divide).
pub const PROJECTION_MACS: u64 = 18;
/// Per (voxel, view, point): squared pixel distance and the softmax term.
pub const ATTENTION_MACS: u64 = 4;
/// Per (voxel, view, point): point-to-line distance and Gaussian weight.
pub const EPIPOLAR_MACS: u64 = 6;
/// Per (voxel, view, point): reprojection distance and Gaussian weight.
pub const SFM_MACS: u64 = 4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no (point, frame) pairs to score")]
    EmptyIntersection,
    #[error("prediction and ground truth do not align: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Mean score over thresholds plus the per-threshold values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub mean: f64,
    pub per_threshold: Vec<f64>,
}

impl ThresholdScore {
    fn from_per_threshold(per_threshold: Vec<f64>) -> Self {
        let mean = per_threshold.iter().sum::<f64>() / per_threshold.len().max(1) as f64;
        Self { mean, per_threshold }
    }
}

fn check_alignment(pred: &[Trajectory3D], gt: &[Vec<Point3>]) -> Result<usize> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Mismatch(format!(
            "{} trajectories, {} ground-truth tracks",
            pred.len(),
            gt.len()
        )));
    }
    let mut n_frames = None;
    for t in pred {
        let g = gt
            .get(t.point_id)
            .ok_or_else(|| MetricsError::Mismatch(format!("point id {} has no ground truth", t.point_id)))?;
        if t.positions.len() != g.len() || t.valid.len() != g.len() {
            return Err(MetricsError::Mismatch(format!("point {} frame count differs", t.point_id)));
        }
        if *n_frames.get_or_insert(g.len()) != g.len() {
            return Err(MetricsError::Mismatch("trajectories have different lengths".into()));
        }
    }
    Ok(n_frames.unwrap_or(0))
}

fn pair_accuracy(
    pred: &[Trajectory3D],
    gt: &[Vec<Point3>],
    pairs: &[(usize, usize)],
    thresholds: &[f64],
) -> Result<ThresholdScore> {
    if pairs.is_empty() || thresholds.is_empty() {
        return Err(MetricsError::EmptyIntersection);
    }
    let per = thresholds
        .iter()
        .map(|&th| {
            let hits = pairs
                .iter()
                .filter(|&&(m, f)| {
                    let t = &pred[m];
                    t.valid[f] && (t.positions[f] - gt[t.point_id][f]).norm() < th
                })
                .count();
            100.0 * hits as f64 / pairs.len() as f64
        })
        .collect();
    Ok(ThresholdScore::from_per_threshold(per))
}

/// Percentage of (point, frame) pairs within each threshold, averaged over
/// thresholds. Invalid predictions are misses.
pub fn apd(pred: &[Trajectory3D], gt: &[Vec<Point3>], thresholds: &[f64]) -> Result<ThresholdScore> {
    let n_frames = check_alignment(pred, gt)?;
    let pairs: Vec<(usize, usize)> = (0..pred.len())
        .flat_map(|m| (0..n_frames).map(move |f| (m, f)))
        .collect();
    pair_accuracy(pred, gt, &pairs, thresholds)
}

/// Mean distance to ground truth over every (point, frame), valid or not.
pub fn mean_error(pred: &[Trajectory3D], gt: &[Vec<Point3>]) -> Result<f64> {
    let n_frames = check_alignment(pred, gt)?;
    let n = pred.len() * n_frames;
    if n == 0 {
        return Err(MetricsError::EmptyIntersection);
    }
    let sum: f64 = pred
        .iter()
        .flat_map(|t| t.positions.iter().zip(&gt[t.point_id]).map(|(p, g)| (p - g).norm()))
        .sum();
    Ok(sum / n as f64)
}

/// A run of frames in which a point is visible in no view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlackoutEpisode {
    pub point_id: usize,
    pub start: usize,
    pub len: usize,
}

pub fn blackout_episodes(obs: &SceneObservations) -> Vec<BlackoutEpisode> {
    let mut out = Vec::new();
    for p in 0..obs.n_points {
        let mut start = None;
        for f in 0..=obs.n_frames {
            let hidden = f < obs.n_frames && obs.visible_views(f, p) == 0;
            match (hidden, start) {
                (true, None) => start = Some(f),
                (false, Some(s)) => {
                    out.push(BlackoutEpisode {
                        point_id: p,
                        start: s,
                        len: f - s,
                    });
                    start = None;
                }
                _ => {}
            }
        }
    }
    out
}

/// Accuracy over the first [`OA_WINDOW`] frames after each all-view
/// occlusion, counted from the first frame the point is seen by two views
/// again. `None` when the scene has no such episodes.
pub fn occlusion_accuracy(
    pred: &[Trajectory3D],
    gt: &[Vec<Point3>],
    obs: &SceneObservations,
    thresholds: &[f64],
) -> Result<Option<ThresholdScore>> {
    let n_frames = check_alignment(pred, gt)?;
    let episodes = blackout_episodes(obs);
    if episodes.is_empty() {
        return Ok(None);
    }
    let mut pairs = Vec::new();
    for e in &episodes {
        let Some(m) = pred.iter().position(|t| t.point_id == e.point_id) else { continue };
        let after = e.start + e.len;
        if let Some(back) = (after..n_frames.min(obs.n_frames)).find(|&f| obs.visible_views(f, e.point_id) >= 2) {
            for f in back..(back + OA_WINDOW).min(n_frames) {
                if !pairs.contains(&(m, f)) {
                    pairs.push((m, f));
                }
            }
        }
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    pair_accuracy(pred, gt, &pairs, thresholds).map(Some)
}

/// Jaccard counts for one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Records one prediction. A claimed-valid prediction outside the
    /// threshold on a visible point is both a false positive and a false
    /// negative.
    pub fn add(&mut self, pred_valid: bool, gt_visible: bool, within: bool) {
        match (pred_valid, gt_visible) {
            (true, true) if within => self.tp += 1,
            (true, true) => {
                self.fp += 1;
                self.fn_ += 1;
            }
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    pub fn jaccard(&self) -> Option<f64> {
        let d = self.tp + self.fp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }
}

/// 3D Jaccard. `gt_visible[point][frame]` is true when the point is seen by
/// at least one view.
pub fn jaccard_3d(
    pred: &[Trajectory3D],
    gt: &[Vec<Point3>],
    gt_visible: &[Vec<bool>],
    thresholds: &[f64],
) -> Result<ThresholdScore> {
    let n_frames = check_alignment(pred, gt)?;
    if gt_visible.len() != gt.len() || gt_visible.iter().any(|v| v.len() != n_frames) {
        return Err(MetricsError::Mismatch("visibility does not match ground truth".into()));
    }
    let per = thresholds
        .iter()
        .map(|&th| {
            let mut c = Confusion::default();
            for t in pred {
                for f in 0..n_frames {
                    let within = (t.positions[f] - gt[t.point_id][f]).norm() < th;
                    c.add(t.valid[f], gt_visible[t.point_id][f], within);
                }
            }
            c.jaccard().ok_or(MetricsError::EmptyIntersection)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ThresholdScore::from_per_threshold(per))
}

/// 2D Jaccard: both prediction and ground truth are projected into each
/// view; visibility is the per-view track flag. Averaged over thresholds
/// and views.
pub fn jaccard_2d(
    pred: &[Trajectory3D],
    gt: &[Vec<Point3>],
    obs: &SceneObservations,
    cams: &[CameraParams],
    thresholds_px: &[f64],
) -> Result<ThresholdScore> {
    let n_frames = check_alignment(pred, gt)?;
    if cams.len() != obs.n_views() || n_frames != obs.n_frames {
        return Err(MetricsError::Mismatch("cameras or frames do not match observations".into()));
    }
    let mut per = vec![0.0; thresholds_px.len()];
    for (v, cam) in cams.iter().enumerate() {
        for (k, &th) in thresholds_px.iter().enumerate() {
            let mut c = Confusion::default();
            for t in pred {
                for f in 0..n_frames {
                    let within = match (project(&t.positions[f], cam), project(&gt[t.point_id][f], cam)) {
                        (Ok((a, da)), Ok((b, db))) if da > MIN_DEPTH && db > MIN_DEPTH => (a - b).norm() < th,
                        _ => false,
                    };
                    c.add(t.valid[f], obs.track(f, v, t.point_id).visible, within);
                }
            }
            per[k] += c.jaccard().ok_or(MetricsError::EmptyIntersection)? / cams.len() as f64;
        }
    }
    Ok(ThresholdScore::from_per_threshold(per))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Percent.
    pub apd: f64,
    /// Percent; `None` when the scene has no all-view occlusions.
    pub oa: Option<f64>,
    /// In [0, 1].
    pub aj3d: f64,
    /// In [0, 1].
    pub aj2d: f64,
    pub mean_error: f64,
    pub apd_per_threshold: Vec<f64>,
    pub aj3d_per_threshold: Vec<f64>,
    pub aj2d_per_threshold: Vec<f64>,
    pub n_points: usize,
    pub n_frames: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table; Jaccard scores are printed ×100.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let oa = self.oa.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(s, "{:<12}{:>10}", "metric", "value");
        let _ = writeln!(s, "{:<12}{:>10.2}", "APD", self.apd);
        let _ = writeln!(s, "{:<12}{:>10}", "OA", oa);
        let _ = writeln!(s, "{:<12}{:>10.2}", "3D-AJ", self.aj3d * 100.0);
        let _ = writeln!(s, "{:<12}{:>10.2}", "2D-AJ", self.aj2d * 100.0);
        let _ = writeln!(s, "{:<12}{:>10.4}", "mean error", self.mean_error);
        let _ = writeln!(s, "{:<12}{:>10}", "points", self.n_points);
        let _ = writeln!(s, "{:<12}{:>10}", "frames", self.n_frames);
        s
    }

    /// Field-wise mean; OA averages over the reports that define it.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let avg_vec = |f: &dyn Fn(&MetricReport) -> &Vec<f64>| -> Vec<f64> {
            (0..f(first).len())
                .map(|k| reports.iter().map(|r| f(r)[k]).sum::<f64>() / n)
                .collect()
        };
        let oas: Vec<f64> = reports.iter().filter_map(|r| r.oa).collect();
        Some(MetricReport {
            apd: avg(&|r| r.apd),
            oa: (!oas.is_empty()).then(|| oas.iter().sum::<f64>() / oas.len() as f64),
            aj3d: avg(&|r| r.aj3d),
            aj2d: avg(&|r| r.aj2d),
            mean_error: avg(&|r| r.mean_error),
            apd_per_threshold: avg_vec(&|r| &r.apd_per_threshold),
            aj3d_per_threshold: avg_vec(&|r| &r.aj3d_per_threshold),
            aj2d_per_threshold: avg_vec(&|r| &r.aj2d_per_threshold),
            n_points: first.n_points,
            n_frames: first.n_frames,
        })
    }
}

/// Scores trajectories against a scene's ground truth with the default
/// thresholds. 2D metrics use the scene's true cameras.
pub fn evaluate(scene: &SceneData, trajs: &[Trajectory3D]) -> Result<MetricReport> {
    evaluate_with(scene, trajs, &THRESHOLDS_3D, &THRESHOLDS_2D)
}

/// [`evaluate`] with explicit world-unit and pixel threshold ladders.
pub fn evaluate_with(
    scene: &SceneData,
    trajs: &[Trajectory3D],
    thresholds_3d: &[f64],
    thresholds_2d: &[f64],
) -> Result<MetricReport> {
    let obs = &scene.observations;
    let gt = &scene.gt_traj;
    let visible: Vec<Vec<bool>> = (0..obs.n_points)
        .map(|p| (0..obs.n_frames).map(|f| obs.visible_views(f, p) > 0).collect())
        .collect();
    let a = apd(trajs, gt, thresholds_3d)?;
    let oa = occlusion_accuracy(trajs, gt, obs, thresholds_3d)?;
    let j3 = jaccard_3d(trajs, gt, &visible, thresholds_3d)?;
    let j2 = jaccard_2d(trajs, gt, obs, &obs.cameras, thresholds_2d)?;
    Ok(MetricReport {
        apd: a.mean,
        oa: oa.map(|s| s.mean),
        aj3d: j3.mean,
        aj2d: j2.mean,
        mean_error: mean_error(trajs, gt)?,
        apd_per_threshold: a.per_threshold,
        aj3d_per_threshold: j3.per_threshold,
        aj2d_per_threshold: j2.per_threshold,
        n_points: obs.n_points,
        n_frames: obs.n_frames,
    })
}

/// Which calibration parameters a sweep row perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseGroup {
    None,
    Intrinsic,
    Rotation,
    Translation,
}

impl NoiseGroup {
    pub fn name(self) -> &'static str {
        match self {
            NoiseGroup::None => "none",
            NoiseGroup::Intrinsic => "intrinsic",
            NoiseGroup::Rotation => "rotation",
            NoiseGroup::Translation => "translation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub group: NoiseGroup,
    /// Multiple of the base noise.
    pub level: f64,
    pub noise: CalibrationNoise,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSweep {
    pub clean: MetricReport,
    pub rows: Vec<SweepRow>,
}

impl CalibrationSweep {
    /// Mean over levels of `(APD_clean − APD_level) / level`.
    pub fn drop_per_unit(&self, group: NoiseGroup) -> Option<f64> {
        let rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.group == group && r.level > 0.0).collect();
        if rows.is_empty() {
            return None;
        }
        Some(rows.iter().map(|r| (self.clean.apd - r.report.apd) / r.level).sum::<f64>() / rows.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,level,intrinsic_px,rotation_deg,translation_cm,APD,OA,3D-AJ,2D-AJ\n");
        for r in &self.rows {
            let oa = r.report.oa.map_or_else(String::new, |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.4},{},{:.4},{:.4}",
                r.group.name(),
                r.level,
                r.noise.intrinsic_px,
                r.noise.rotation_deg,
                r.noise.translation_cm,
                r.report.apd,
                oa,
                r.report.aj3d * 100.0,
                r.report.aj2d * 100.0
            );
        }
        s
    }
}

/// Tracks `scene` with perturbed calibration. Each group is perturbed alone
/// at `level × base`; every row averages over `seeds`. A zero-noise row is
/// included first.
pub fn calibration_sweep(
    scene: &SceneData,
    model: &TrackerModel,
    cfg: &TrackerConfig,
    base: CalibrationNoise,
    levels: &[f64],
    seeds: &[u64],
) -> Result<CalibrationSweep> {
    let clean = evaluate(scene, &track_sequence(&scene.observations, model, cfg)?)?;
    let run = |noise: CalibrationNoise| -> Result<MetricReport> {
        let reports = seeds
            .iter()
            .map(|&seed| {
                let cams = perturb_calibration(&scene.observations.cameras, noise, seed)?;
                let obs = scene.observations.with_cameras(cams);
                let trajs = track_sequence(&obs, model, cfg)?;
                evaluate(scene, &trajs)
            })
            .collect::<Result<Vec<_>>>()?;
        MetricReport::mean(&reports).ok_or(MetricsError::EmptyIntersection)
    };
    let zero = CalibrationNoise {
        intrinsic_px: 0.0,
        rotation_deg: 0.0,
        translation_cm: 0.0,
    };
    let mut rows = vec![SweepRow {
        group: NoiseGroup::None,
        level: 0.0,
        noise: zero,
        report: run(zero)?,
    }];
    for group in [NoiseGroup::Intrinsic, NoiseGroup::Rotation, NoiseGroup::Translation] {
        for &level in levels {
            let mut noise = zero;
            match group {
                NoiseGroup::Intrinsic => noise.intrinsic_px = base.intrinsic_px * level,
                NoiseGroup::Rotation => noise.rotation_deg = base.rotation_deg * level,
                NoiseGroup::Translation => noise.translation_cm = base.translation_cm * level,
                NoiseGroup::None => unreachable!(),
            }
            rows.push(SweepRow {
                group,
                level,
                noise,
                report: run(noise)?,
            });
        }
    }
    Ok(CalibrationSweep { clean, rows })
}

/// Multiply-add counts per stage of one tracked frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub projection: u64,
    pub attention: u64,
    pub masks: u64,
    pub aggregation: u64,
    pub correspondence: u64,
    pub mlp: u64,
    pub total_macs: u64,
}

impl FlopBreakdown {
    /// Stages that scale with the number of voxels.
    pub fn voxel_macs(&self) -> u64 {
        self.projection + self.attention + self.masks + self.aggregation + self.correspondence
    }

    /// One multiply-add counts as two operations.
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs
    }
}

/// Closed-form cost of one frame for grid resolution `v_s`, `n_views`
/// views, `k` points and feature width `d`. The network runs once per
/// point.
pub fn flop_estimate(v_s: usize, n_views: usize, k: usize, d: usize, mlp: &MlpSpec) -> FlopBreakdown {
    let v3 = (v_s as u64).pow(3);
    let (n, k, d) = (n_views as u64, k as u64, d as u64);
    let projection = PROJECTION_MACS * v3 * n;
    let attention = ATTENTION_MACS * v3 * n * k;
    let masks = (EPIPOLAR_MACS + SFM_MACS) * v3 * n * k;
    let aggregation = v3 * n * k * d;
    let correspondence = v3 * k * d;
    let mlp = k * mlp.macs();
    FlopBreakdown {
        projection,
        attention,
        masks,
        aggregation,
        correspondence,
        mlp,
        total_macs: projection + attention + masks + aggregation + correspondence + mlp,
    }
}
