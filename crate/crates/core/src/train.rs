//! Loss terms and the end-to-end training loop.

use nalgebra::Vector3;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, project_jacobian, CameraParams, Point2, Point3, MIN_DEPTH};
use crate::nnet::{adamw_step, cosine_lr, OptimState};
use crate::scene::SceneData;
use crate::tracker::{
    frame_backward, frame_forward, init_queries, refresh_queries, update_queries, FrameInputs, FrameOutput,
    ModelConfig, Sequence, TrackQuery, TrackerError, TrackerModel, DEFAULT_MOMENTUM,
};
use crate::volume::DEFAULT_CHUNK_SIZE;

/// Attention entries are clamped to this before taking logs.
pub const ATTN_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("index mismatch: {0}")]
    IndexMismatch(String),
    #[error("non-finite loss")]
    NonFinite,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss diverged at step {step}")]
    Divergence { step: u64, last_good: Box<TrackerModel> },
    #[error(transparent)]
    Tracker(#[from] TrackerError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub proj: f64,
    pub attn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            proj: 0.7,
            attn: 0.8,
        }
    }
}

impl LossWeights {
    /// The lighter (1.0, 0.5, 0.5) weighting used in the loss ablation.
    pub fn balanced() -> Self {
        Self {
            recon: 1.0,
            proj: 0.5,
            attn: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.recon, self.proj, self.attn];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || all.iter().all(|w| *w == 0.0) {
            return Err(TrainError::InvalidConfig(
                "loss weights must be nonnegative with at least one positive".into(),
            ));
        }
        Ok(())
    }
}

/// A loss value and its gradient with respect to each predicted point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointLoss {
    pub value: f64,
    pub grad: Vec<Vector3<f64>>,
    /// Set when no term contributed.
    pub empty: bool,
    /// Terms skipped because the point sits behind or on a camera.
    pub excluded: usize,
}

fn check_indices(n: usize, visible: &[usize]) -> Result<()> {
    match visible.iter().find(|&&i| i >= n) {
        Some(i) => Err(TrainError::IndexMismatch(format!("visible index {i} with {n} points"))),
        None => Ok(()),
    }
}

/// Mean squared distance over the points in `visible`.
pub fn recon_loss(pred: &[Point3], gt: &[Point3], visible: &[usize]) -> Result<PointLoss> {
    if pred.len() != gt.len() {
        return Err(TrainError::IndexMismatch(format!(
            "{} predictions, {} ground-truth points",
            pred.len(),
            gt.len()
        )));
    }
    check_indices(pred.len(), visible)?;
    let mut grad = vec![Vector3::zeros(); pred.len()];
    if visible.is_empty() {
        return Ok(PointLoss {
            value: 0.0,
            grad,
            empty: true,
            excluded: 0,
        });
    }
    let n = visible.len() as f64;
    let mut value = 0.0;
    for &i in visible {
        let e = pred[i] - gt[i];
        value += e.norm_squared() / n;
        grad[i] += e * (2.0 / n);
    }
    Ok(PointLoss {
        value,
        grad,
        empty: false,
        excluded: 0,
    })
}

/// Mean over (view, point) pairs of the squared reprojection residual
/// divided by the squared image diagonal. Only points in `visible` whose
/// track is present in that view contribute.
///
/// `tracks[view][point]`.
pub fn proj_loss(
    pred: &[Point3],
    tracks: &[Vec<Option<Point2>>],
    cams: &[CameraParams],
    visible: &[usize],
) -> Result<PointLoss> {
    if tracks.len() != cams.len() || tracks.iter().any(|t| t.len() != pred.len()) {
        return Err(TrainError::IndexMismatch("tracks do not match cameras and predictions".into()));
    }
    check_indices(pred.len(), visible)?;
    let mut grad = vec![Vector3::zeros(); pred.len()];
    let mut terms: Vec<(usize, Vector3<f64>, f64)> = Vec::new();
    let mut excluded = 0;
    let mut value = 0.0;
    for (cam, view_tracks) in cams.iter().zip(tracks) {
        let diag2 = cam.image_diagonal().powi(2);
        for &i in visible {
            let Some(x) = view_tracks[i] else { continue };
            match project(&pred[i], cam) {
                Ok((px, depth)) if depth > MIN_DEPTH => {
                    let e = px - x;
                    let j = project_jacobian(&pred[i], cam).expect("depth checked");
                    value += e.norm_squared() / diag2;
                    terms.push((i, j.transpose() * e * (2.0 / diag2), 0.0));
                }
                _ => excluded += 1,
            }
        }
    }
    if excluded > 0 {
        log::debug!("projection loss skipped {excluded} terms behind a camera");
    }
    let n = terms.len();
    if n == 0 {
        return Ok(PointLoss {
            value: 0.0,
            grad,
            empty: true,
            excluded,
        });
    }
    for (i, g, _) in terms {
        grad[i] += g / n as f64;
    }
    Ok(PointLoss {
        value: value / n as f64,
        grad,
        empty: false,
        excluded,
    })
}

/// Point-to-point attention between two views: row-softmax of
/// `−‖z_a,i − z_b,j‖² / T` over the points visible in view `b`. Columns of
/// invisible points are zero.
pub fn point_attention(z_a: &Array2<f64>, z_b: &Array2<f64>, visible_b: &[bool], temperature: f64) -> Array2<f64> {
    let (k, _) = z_a.dim();
    let d2 = sq_distances(z_a, z_b);
    let mut out = Array2::zeros((k, z_b.nrows()));
    for i in 0..k {
        let cols: Vec<usize> = (0..z_b.nrows()).filter(|&j| visible_b[j]).collect();
        let Some(min) = cols.iter().map(|&j| d2[[i, j]]).reduce(f64::min) else { continue };
        let sum: f64 = cols.iter().map(|&j| (-(d2[[i, j]] - min) / temperature).exp()).sum();
        for &j in &cols {
            out[[i, j]] = (-(d2[[i, j]] - min) / temperature).exp() / sum;
        }
    }
    out
}

fn sq_distances(z_a: &Array2<f64>, z_b: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((z_a.nrows(), z_b.nrows()), |(i, j)| {
        z_a.row(i).iter().zip(z_b.row(j)).map(|(x, y)| (x - y).powi(2)).sum()
    })
}

/// `−mean log A(i,i)` over the listed diagonal entries of each matrix,
/// averaged over matrices. Entries are clamped at [`ATTN_FLOOR`]. A matrix
/// with no listed entries contributes 0.
pub fn attn_loss(pairs: &[(&Array2<f64>, &[usize])]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|(a, idx)| {
            if idx.is_empty() {
                0.0
            } else {
                -idx.iter().map(|&i| a[[i, i]].max(ATTN_FLOOR).ln()).sum::<f64>() / idx.len() as f64
            }
        })
        .sum();
    total / pairs.len() as f64
}

/// Attention loss of one frame over all ordered view pairs, and its
/// derivative with respect to the log temperature.
///
/// `features[view]` is `K × D`; `visible[view][point]`.
pub fn frame_attn_loss(features: &[Array2<f64>], visible: &[Vec<bool>], temperature: f64) -> (f64, f64) {
    let n = features.len();
    if n < 2 {
        return (0.0, 0.0);
    }
    let mut value = 0.0;
    let mut d_log_t = 0.0;
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let att = point_attention(&features[a], &features[b], &visible[b], temperature);
            let d2 = sq_distances(&features[a], &features[b]);
            let idx: Vec<usize> = (0..features[a].nrows()).filter(|&i| visible[a][i] && visible[b][i]).collect();
            if idx.is_empty() {
                continue;
            }
            let m = idx.len() as f64;
            for &i in &idx {
                let aii = att[[i, i]];
                value -= aii.max(ATTN_FLOOR).ln() / m;
                if aii > ATTN_FLOOR {
                    let expected: f64 = att.row(i).iter().zip(d2.row(i)).map(|(p, d)| p * d).sum();
                    d_log_t -= (d2[[i, i]] - expected) / temperature / m;
                }
            }
        }
    }
    let pairs = (n * (n - 1)) as f64;
    (value / pairs, d_log_t / pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub recon: f64,
    pub proj: f64,
    pub attn: f64,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    let t = weights.recon * parts.recon + weights.proj * parts.proj + weights.attn * parts.attn;
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TrainError::NonFinite)
    }
}

/// Loss of one frame with its gradient over the flattened model.
pub struct FrameObjective {
    pub parts: LossParts,
    pub total: f64,
    pub grad: Vec<f64>,
    pub output: FrameOutput,
}

/// Forward pass, loss and backward pass for one frame. With `frozen`
/// the voxel choices are taken from there instead of the argmax.
#[allow(clippy::too_many_arguments)]
pub fn frame_objective(
    model: &TrackerModel,
    seq: &Sequence,
    inputs: &FrameInputs,
    queries: &[TrackQuery],
    gt: &[Point3],
    weights: &LossWeights,
    frozen: Option<&[Option<usize>]>,
    chunk_size: usize,
    train_mode: bool,
    seed: u64,
) -> Result<FrameObjective> {
    let output = frame_forward(model, seq, inputs, queries, frozen, chunk_size, train_mode, seed)?;
    let visible: Vec<usize> = (0..output.predictions.len())
        .filter(|&m| output.predictions[m].is_some())
        .collect();
    let pred: Vec<Point3> = output
        .predictions
        .iter()
        .zip(gt)
        .map(|(p, g)| p.unwrap_or(*g))
        .collect();
    let recon = recon_loss(&pred, gt, &visible)?;
    let proj = proj_loss(&pred, &inputs.dist.tracks, &seq.obs.cameras, &visible)?;
    let vis_mask: Vec<Vec<bool>> = inputs
        .dist
        .tracks
        .iter()
        .map(|t| t.iter().map(Option::is_some).collect())
        .collect();
    let temperature = model.log_temperature.exp();
    let (attn, attn_d_log_t) = frame_attn_loss(&inputs.features, &vis_mask, temperature);
    let parts = LossParts {
        recon: recon.value,
        proj: proj.value,
        attn,
    };
    let total = total_loss(&parts, weights)?;
    let d_pred: Vec<Option<Vector3<f64>>> = (0..pred.len())
        .map(|m| {
            output.predictions[m].map(|_| recon.grad[m] * weights.recon + proj.grad[m] * weights.proj)
        })
        .collect();
    let mut grad = frame_backward(model, seq, inputs, queries, &output, &d_pred)?;
    let t_index = model.n_params() - 3;
    grad[t_index] += weights.attn * attn_d_log_t;
    Ok(FrameObjective {
        parts,
        total,
        grad,
        output,
    })
}

/// One frame with its query states and voxel choices fixed.
pub struct FrozenFrame {
    pub inputs: FrameInputs,
    pub queries: Vec<TrackQuery>,
    pub selection: Vec<Option<usize>>,
    pub gt: Vec<Point3>,
}

/// Records query states and voxel choices from an evaluation pass of
/// `model` over `scene`, so the sequence loss becomes a smooth function of
/// the parameters.
pub fn freeze_sequence(model: &TrackerModel, seq: &Sequence, scene: &SceneData, momentum: f64) -> Result<Vec<FrozenFrame>> {
    let obs = seq.obs;
    let mut queries = init_queries(obs, 0);
    let mut frames = Vec::with_capacity(obs.n_frames);
    for frame in 0..obs.n_frames {
        refresh_queries(&mut queries, obs, frame);
        let inputs = seq.frame(frame);
        let out = frame_forward(model, seq, &inputs, &queries, None, DEFAULT_CHUNK_SIZE, false, 0)?;
        let targets = out.embedding_targets(&seq.geom);
        frames.push(FrozenFrame {
            inputs,
            queries: queries.clone(),
            selection: out.selection(),
            gt: scene.gt_traj.iter().map(|t| t[frame]).collect(),
        });
        update_queries(&mut queries, &out.predictions, &targets, momentum);
    }
    Ok(frames)
}

/// Summed loss and gradient over frozen frames, evaluated without dropout.
pub fn frozen_objective(
    model: &TrackerModel,
    seq: &Sequence,
    frames: &[FrozenFrame],
    weights: &LossWeights,
) -> Result<(f64, Vec<f64>)> {
    let mut total = 0.0;
    let mut grad = vec![0.0; model.n_params()];
    for f in frames {
        let obj = frame_objective(
            model,
            seq,
            &f.inputs,
            &f.queries,
            &f.gt,
            weights,
            Some(&f.selection),
            DEFAULT_CHUNK_SIZE,
            false,
            0,
        )?;
        total += obj.total;
        for (g, v) in grad.iter_mut().zip(&obj.grad) {
            *g += v;
        }
    }
    Ok((total, grad))
}

/// Analytic and central-difference derivative of one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientProbe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientProbe {
    /// `|a − n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Compares the analytic gradient with central differences of step `h`
/// at the given flat parameter indices.
pub fn probe_gradients(
    model: &TrackerModel,
    seq: &Sequence,
    frames: &[FrozenFrame],
    weights: &LossWeights,
    indices: &[usize],
    h: f64,
) -> Result<Vec<GradientProbe>> {
    let (_, grad) = frozen_objective(model, seq, frames, weights)?;
    let base = model.to_flat();
    let mut probe = model.clone();
    let mut eval = |k: usize, v: f64| -> Result<f64> {
        let mut flat = base.clone();
        flat[k] = v;
        probe.assign_flat(&flat)?;
        Ok(frozen_objective(&probe, seq, frames, weights)?.0)
    };
    indices
        .iter()
        .map(|&k| {
            let numeric = (eval(k, base[k] + h)? - eval(k, base[k] - h)?) / (2.0 * h);
            Ok(GradientProbe {
                index: k,
                analytic: grad[k],
                numeric,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub scenes_per_epoch: usize,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub chunk_size: usize,
    pub momentum: f64,
}

impl TrainConfig {
    pub fn desk(feature_dim: usize, n_points: usize) -> Self {
        Self {
            epochs: 50,
            scenes_per_epoch: 1,
            seed: 0,
            lr: 1e-3,
            weight_decay: 1e-5,
            warmup_epochs: 1,
            weights: LossWeights::default(),
            model: ModelConfig::desk(feature_dim, n_points),
            chunk_size: DEFAULT_CHUNK_SIZE,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.scenes_per_epoch == 0 || self.chunk_size == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs, scenes_per_epoch and chunk_size must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(TrainError::InvalidConfig("lr and weight_decay must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig("momentum must lie in [0, 1]".into()));
        }
        self.weights.validate()?;
        self.model.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub recon: f64,
    pub proj: f64,
    pub attn: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrackerModel,
    pub steps: u64,
    pub log: Vec<StepRecord>,
    /// Mean total loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainOutcome {
    /// `step,lr,L_recon,L_proj,L_attn,total` rows.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("step,lr,L_recon,L_proj,L_attn,total\n");
        for r in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.lr, r.recon, r.proj, r.attn, r.total
            ));
        }
        out
    }
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed ^ step.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Trains a fresh model. One optimizer step per frame; each epoch visits
/// `scenes_per_epoch` scenes in turn, cycling through `scenes`.
pub fn train(cfg: &TrainConfig, scenes: &[SceneData]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = TrackerModel::new(cfg.model.clone(), cfg.seed)?;
    train_from(cfg, scenes, model)
}

/// Continues training an existing model.
pub fn train_from(cfg: &TrainConfig, scenes: &[SceneData], mut model: TrackerModel) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::InvalidConfig("at least one training scene is required".into()));
    }
    let seqs: Vec<Sequence> = scenes
        .iter()
        .map(|s| {
            model.check_compatible(&s.observations)?;
            Sequence::new(&s.observations, model.config.grid_resolution)
        })
        .collect::<Result<_, TrackerError>>()?;
    let steps_for = |scene: usize| scenes[scene % scenes.len()].observations.n_frames as u64;
    let steps_per_epoch: u64 = (0..cfg.scenes_per_epoch).map(steps_for).sum();
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let warmup = steps_per_epoch * cfg.warmup_epochs as u64;

    let mut opt = OptimState::new(model.n_params(), cfg.lr, cfg.weight_decay);
    let mask = model.decay_mask();
    let mut log = Vec::with_capacity(total_steps as usize);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    let mut scene_cursor = 0usize;
    for _epoch in 0..cfg.epochs {
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0usize;
        for _ in 0..cfg.scenes_per_epoch {
            let s = scene_cursor % scenes.len();
            scene_cursor += 1;
            let seq = &seqs[s];
            let scene = &scenes[s];
            let obs = &scene.observations;
            let mut queries = init_queries(obs, 0);
            for frame in 0..obs.n_frames {
                refresh_queries(&mut queries, obs, frame);
                let inputs = seq.frame(frame);
                let gt: Vec<Point3> = scene.gt_traj.iter().map(|t| t[frame]).collect();
                let lr = cosine_lr(step, total_steps, warmup, cfg.lr);
                let obj = match frame_objective(
                    &model,
                    seq,
                    &inputs,
                    &queries,
                    &gt,
                    &cfg.weights,
                    None,
                    cfg.chunk_size,
                    true,
                    step_seed(cfg.seed, step),
                ) {
                    Ok(o) => o,
                    Err(TrainError::NonFinite) => {
                        return Err(TrainError::Divergence {
                            step,
                            last_good: Box::new(model),
                        })
                    }
                    Err(e) => return Err(e),
                };
                if obj.grad.iter().any(|g| !g.is_finite()) {
                    return Err(TrainError::Divergence {
                        step,
                        last_good: Box::new(model),
                    });
                }
                let mut flat = model.to_flat();
                opt.lr = lr;
                adamw_step(&mut flat, &obj.grad, Some(&mask), &mut opt).map_err(TrackerError::from)?;
                if flat.iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::Divergence {
                        step,
                        last_good: Box::new(model),
                    });
                }
                model.assign_flat(&flat)?;
                log.push(StepRecord {
                    step,
                    lr,
                    recon: obj.parts.recon,
                    proj: obj.parts.proj,
                    attn: obj.parts.attn,
                    total: obj.total,
                });
                epoch_sum += obj.total;
                epoch_n += 1;
                let targets = obj.output.embedding_targets(&seq.geom);
                update_queries(&mut queries, &obj.output.predictions, &targets, cfg.momentum);
                step += 1;
            }
        }
        epoch_losses.push(epoch_sum / epoch_n.max(1) as f64);
        log::info!(
            "epoch {} mean loss {:.6}",
            epoch_losses.len(),
            epoch_losses.last().copied().unwrap_or(0.0)
        );
    }
    Ok(TrainOutcome {
        model,
        steps: step,
        log,
        epoch_losses,
    })
}
