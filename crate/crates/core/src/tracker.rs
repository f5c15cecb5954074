//! Frame-by-frame 3D tracking with persistent track queries.
//!
//! Each frame the grid is projected into every view, attention fields and
//! masks are evaluated against the visible 2D tracks, and the volume is
//! filled with attention-weighted features. Every query then picks the
//! voxel whose feature best matches its embedding, assembles a compound
//! feature there, and the network regresses the 3D position as an offset
//! from that voxel.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{dlt_triangulate, CameraParams, Point2, Point3};
use crate::nnet::{self, mlp_backward, mlp_forward, MlpParams, MlpSpec, NnetError, Tape};
use crate::scene::SceneObservations;
use crate::volume::{
    attention_fields, make_grid, populate_volume, weight_row, AttentionField, AttentionMode,
    AttentionParams, FrameDistances, GridGeometry, OpCounter, VolumeError, WeightRow,
    DEFAULT_CHUNK_SIZE, DEFAULT_RESOLUTION, DEFAULT_SIGMA_EPIPOLAR, DEFAULT_SIGMA_SFM,
    DEFAULT_TEMPERATURE,
};

pub const DEFAULT_MOMENTUM: f64 = 0.8;
/// Query positions are kept inside the grid plus this margin.
pub const QUERY_BOUND: f64 = 1.5;
const RESIDUAL_RIDGE: f64 = 1e-6;
const CHECKPOINT_FORMAT: &str = "mvtrack-model-1";

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("scene has no camera calibration")]
    CalibrationMissing,
    #[error("track frames are not contiguous: expected frame {expected}, found {found}")]
    FrameGap { expected: usize, found: usize },
    #[error("model expects {what} {expected}, scene provides {found}")]
    SpecMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("correspondence dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Network(#[from] NnetError),
    #[error("trajectory io: {0}")]
    Io(String),
}

pub type Result<T, E = TrackerError> = std::result::Result<T, E>;

/// Architecture and initial values of a tracker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub grid_resolution: usize,
    pub feature_dim: usize,
    /// Number of tracked points; fixes the width of the correspondence row.
    pub n_queries: usize,
    pub mlp_layers: Vec<usize>,
    pub standardize: bool,
    pub dropout_rate: f64,
    pub attention: AttentionMode,
    pub init_temperature: f64,
    pub init_sigma_epipolar: f64,
    pub init_sigma_sfm: f64,
    /// Restricts the correspondence search to voxels within this many cells
    /// of the query position. `None` searches the whole grid.
    #[serde(default)]
    pub search_radius: Option<usize>,
    /// Adds the view-consistency residual to the network output, so the
    /// network learns a correction to the ray-intersection estimate.
    #[serde(default)]
    pub residual_skip: bool,
}

impl ModelConfig {
    /// Desk-scale tracker: small network without standardization and a
    /// one-cell search window around each query.
    pub fn desk(feature_dim: usize, n_queries: usize) -> Self {
        let spec = MlpSpec::desk(1);
        Self {
            grid_resolution: DEFAULT_RESOLUTION,
            feature_dim,
            n_queries,
            mlp_layers: spec.layer_sizes,
            standardize: false,
            dropout_rate: spec.dropout_rate,
            attention: AttentionMode::Masked,
            init_temperature: DEFAULT_TEMPERATURE,
            init_sigma_epipolar: DEFAULT_SIGMA_EPIPOLAR,
            init_sigma_sfm: DEFAULT_SIGMA_SFM,
            search_radius: Some(1),
            residual_skip: false,
        }
    }

    /// Length of the compound feature: voxel coordinate, volume feature,
    /// correspondence row and view-consistency residual.
    pub fn compound_dim(&self) -> usize {
        3 + self.feature_dim + self.n_queries + 3
    }

    pub fn mlp_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.compound_dim(),
            layer_sizes: self.mlp_layers.clone(),
            standardize: self.standardize,
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_resolution < 2 {
            return Err(TrackerError::InvalidConfig("grid_resolution must be at least 2".into()));
        }
        if self.feature_dim == 0 || self.n_queries == 0 {
            return Err(TrackerError::InvalidConfig("feature_dim and n_queries must be positive".into()));
        }
        for (name, v) in [
            ("init_temperature", self.init_temperature),
            ("init_sigma_epipolar", self.init_sigma_epipolar),
            ("init_sigma_sfm", self.init_sigma_sfm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrackerError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        self.mlp_spec().validate()?;
        Ok(())
    }
}

/// Network, query map and attention scalars.
///
/// The three scalars are stored as logarithms so gradient steps keep them
/// positive.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerModel {
    pub config: ModelConfig,
    pub spec: MlpSpec,
    pub mlp: MlpParams,
    /// Linear map applied to query embeddings before matching (`D × D`).
    pub query_map: DMatrix<f64>,
    pub log_temperature: f64,
    pub log_sigma_epipolar: f64,
    pub log_sigma_sfm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelCheckpointHeader {
    format: String,
    model: ModelConfig,
    step: u64,
    n_params: usize,
}

impl TrackerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = config.mlp_spec();
        let mlp = MlpParams::init(&spec, seed)?;
        let d = config.feature_dim;
        Ok(Self {
            log_temperature: config.init_temperature.ln(),
            log_sigma_epipolar: config.init_sigma_epipolar.ln(),
            log_sigma_sfm: config.init_sigma_sfm.ln(),
            query_map: DMatrix::identity(d, d),
            config,
            spec,
            mlp,
        })
    }

    pub fn attention_params(&self) -> AttentionParams {
        AttentionParams {
            temperature: self.log_temperature.exp(),
            sigma_epipolar: self.log_sigma_epipolar.exp(),
            sigma_sfm: self.log_sigma_sfm.exp(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params() + self.query_map.len() + 3
    }

    /// Network parameters, then the query map (row-major), then the log
    /// temperature, log epipolar width and log reprojection width.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.mlp.to_flat();
        out.extend(self.query_map.transpose().iter());
        out.extend([self.log_temperature, self.log_sigma_epipolar, self.log_sigma_sfm]);
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(NnetError::ShapeMismatch(format!(
                "{} values for {} model parameters",
                flat.len(),
                self.n_params()
            ))
            .into());
        }
        let n_mlp = self.mlp.n_params();
        self.mlp.assign_flat(&flat[..n_mlp])?;
        let d = self.config.feature_dim;
        self.query_map = DMatrix::from_row_slice(d, d, &flat[n_mlp..n_mlp + d * d]);
        let tail = &flat[n_mlp + d * d..];
        self.log_temperature = tail[0];
        self.log_sigma_epipolar = tail[1];
        self.log_sigma_sfm = tail[2];
        Ok(())
    }

    /// Weight decay applies to affine weights and the query map only.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut m = self.mlp.decay_mask();
        m.extend(std::iter::repeat(true).take(self.query_map.len()));
        m.extend([false; 3]);
        m
    }

    pub fn checkpoint_bytes(&self, step: u64) -> Result<Vec<u8>> {
        let header = ModelCheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            model: self.config.clone(),
            step,
            n_params: self.n_params(),
        };
        Ok(nnet::checkpoint_bytes(&header, &self.to_flat())?)
    }

    pub fn save(&self, path: &Path, step: u64) -> Result<()> {
        let bytes = self.checkpoint_bytes(step)?;
        fs::write(path, bytes).map_err(|e| TrackerError::Io(e.to_string()))
    }

    /// Loads a checkpoint; returns the model and its training step.
    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let bytes = fs::read(path).map_err(|e| TrackerError::Io(e.to_string()))?;
        let (header, values): (ModelCheckpointHeader, Vec<f64>) = nnet::parse_checkpoint(&bytes)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(NnetError::Malformed(format!("unknown format {}", header.format)).into());
        }
        let mut model = Self::new(header.model, 0)?;
        if values.len() != header.n_params {
            return Err(NnetError::Malformed("parameter count disagrees with header".into()).into());
        }
        model.assign_flat(&values)?;
        Ok((model, header.step))
    }

    /// Errors unless the scene's feature width and point count fit the model.
    pub fn check_compatible(&self, obs: &SceneObservations) -> Result<()> {
        if obs.feature_dim() != self.config.feature_dim {
            return Err(TrackerError::SpecMismatch {
                what: "feature_dim",
                expected: self.config.feature_dim,
                found: obs.feature_dim(),
            });
        }
        if obs.n_points != self.config.n_queries {
            return Err(TrackerError::SpecMismatch {
                what: "n_points",
                expected: self.config.n_queries,
                found: obs.n_points,
            });
        }
        Ok(())
    }
}

/// Persistent per-point state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackQuery {
    pub point_id: usize,
    pub position: Point3,
    pub embedding: DVector<f64>,
    /// False until the point has been triangulated from two views.
    pub position_valid: bool,
    /// False until the point has been seen at least once.
    pub embedding_valid: bool,
}

fn unit(v: DVector<f64>) -> Option<DVector<f64>> {
    let n = v.norm();
    (n > 0.0 && n.is_finite()).then(|| v / n)
}

fn clamp_to_bounds(p: Point3) -> Point3 {
    p.map(|v| v.clamp(-QUERY_BOUND, QUERY_BOUND))
}

fn mean_visible_feature(obs: &SceneObservations, frame: usize, point: usize) -> Option<DVector<f64>> {
    let d = obs.feature_dim();
    let mut acc = DVector::zeros(d);
    let mut n = 0;
    for v in 0..obs.n_views() {
        if obs.track(frame, v, point).visible {
            n += 1;
            for (a, &z) in acc.iter_mut().zip(obs.features.get(frame, v, point)) {
                *a += z as f64;
            }
        }
    }
    if n == 0 {
        None
    } else {
        unit(acc)
    }
}

fn triangulate_visible(obs: &SceneObservations, frame: usize, point: usize) -> Option<Point3> {
    let views: Vec<(&CameraParams, Point2)> = (0..obs.n_views())
        .filter_map(|v| {
            let t = obs.track(frame, v, point);
            t.visible.then_some((&obs.cameras[v], t.xy))
        })
        .collect();
    if views.len() < 2 {
        return None;
    }
    dlt_triangulate(&views).ok().filter(|p| p.coords.iter().all(|c| c.is_finite()))
}

/// One query per point. Points seen in two or more views at `frame` are
/// triangulated; the rest are created with `position_valid == false`.
pub fn init_queries(obs: &SceneObservations, frame: usize) -> Vec<TrackQuery> {
    let mut queries: Vec<TrackQuery> = (0..obs.n_points)
        .map(|point_id| TrackQuery {
            point_id,
            position: Point3::origin(),
            embedding: DVector::zeros(obs.feature_dim()),
            position_valid: false,
            embedding_valid: false,
        })
        .collect();
    refresh_queries(&mut queries, obs, frame);
    queries
}

/// Completes deferred queries from observations at `frame`.
pub fn refresh_queries(queries: &mut [TrackQuery], obs: &SceneObservations, frame: usize) {
    for q in queries.iter_mut() {
        if !q.embedding_valid {
            if let Some(e) = mean_visible_feature(obs, frame, q.point_id) {
                q.embedding = e;
                q.embedding_valid = true;
            }
        }
        if !q.position_valid {
            if let Some(p) = triangulate_visible(obs, frame, q.point_id) {
                q.position = clamp_to_bounds(p);
                q.position_valid = true;
            }
        }
    }
}

/// `C(m, i) = cos(F_Q · e_m, V_feat[i])`, with 0 wherever either vector
/// vanishes.
pub fn query_correspondence(
    queries: &[TrackQuery],
    query_map: &DMatrix<f64>,
    vfeat: &Array2<f64>,
) -> Result<Array2<f64>> {
    let d = vfeat.ncols();
    if query_map.shape() != (d, d) || queries.iter().any(|q| q.embedding.len() != d) {
        return Err(TrackerError::DimensionMismatch(format!(
            "query map {:?}, volume features of width {d}",
            query_map.shape()
        )));
    }
    let keys: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| (query_map * &q.embedding).iter().copied().collect())
        .collect();
    let key_norms: Vec<f64> = keys.iter().map(|k| k.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut out = Array2::zeros((queries.len(), vfeat.nrows()));
    for (i, row) in vfeat.outer_iter().enumerate() {
        let vn = row.dot(&row).sqrt();
        if vn == 0.0 {
            continue;
        }
        for (m, k) in keys.iter().enumerate() {
            if key_norms[m] == 0.0 {
                continue;
            }
            let dot: f64 = k.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            out[[m, i]] = dot / (key_norms[m] * vn);
        }
    }
    Ok(out)
}

/// Momentum blend `q ← α·q + (1−α)·p` for positions, and the same blend for
/// embeddings toward the given targets followed by renormalization.
pub fn update_queries(
    queries: &mut [TrackQuery],
    predictions: &[Option<Point3>],
    embedding_targets: &[Option<DVector<f64>>],
    alpha: f64,
) {
    for (m, q) in queries.iter_mut().enumerate() {
        if let Some(p) = predictions.get(m).copied().flatten() {
            q.position = if q.position_valid {
                clamp_to_bounds(Point3::from(q.position.coords * alpha + p.coords * (1.0 - alpha)))
            } else {
                clamp_to_bounds(p)
            };
            q.position_valid = true;
        }
        if let Some(Some(target)) = embedding_targets.get(m) {
            if q.embedding_valid {
                let blended = &q.embedding * alpha + target * (1.0 - alpha);
                if let Some(e) = unit(blended) {
                    q.embedding = e;
                }
            }
        }
    }
}

/// Tracked 3D path of one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory3D {
    pub point_id: usize,
    pub positions: Vec<Point3>,
    pub valid: Vec<bool>,
}

/// Runtime knobs that do not change the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerConfig {
    pub chunk_size: usize,
    pub momentum: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

/// Camera-dependent state shared across the frames of one sequence.
pub struct Sequence<'a> {
    pub obs: &'a SceneObservations,
    pub geom: GridGeometry,
}

impl<'a> Sequence<'a> {
    pub fn new(obs: &'a SceneObservations, grid_resolution: usize) -> Result<Self> {
        check_observations(obs)?;
        let grid = make_grid(grid_resolution)?;
        Ok(Self {
            obs,
            geom: GridGeometry::new(grid, &obs.cameras),
        })
    }

    pub fn frame(&self, frame: usize) -> FrameInputs {
        let obs = self.obs;
        let tracks: Vec<Vec<Option<Point2>>> = (0..obs.n_views())
            .map(|v| {
                (0..obs.n_points)
                    .map(|p| {
                        let t = obs.track(frame, v, p);
                        t.visible.then_some(t.xy)
                    })
                    .collect()
            })
            .collect();
        let features = (0..obs.n_views())
            .map(|v| {
                Array2::from_shape_fn((obs.n_points, obs.feature_dim()), |(p, k)| {
                    obs.features.get(frame, v, p)[k] as f64
                })
            })
            .collect();
        let n_visible = (0..obs.n_points).map(|p| obs.visible_views(frame, p)).collect();
        FrameInputs {
            frame,
            dist: FrameDistances::new(&self.geom, tracks),
            features,
            n_visible,
        }
    }
}

fn check_observations(obs: &SceneObservations) -> Result<()> {
    if obs.cameras.is_empty() {
        return Err(TrackerError::CalibrationMissing);
    }
    let expected = obs.n_frames * obs.n_views() * obs.n_points;
    if obs.tracks.len() != expected {
        return Err(TrackerError::DimensionMismatch(format!(
            "{} tracks for {expected} (frame, view, point) slots",
            obs.tracks.len()
        )));
    }
    for (k, t) in obs.tracks.iter().enumerate() {
        let frame = k / (obs.n_views() * obs.n_points);
        if t.frame != frame {
            return Err(TrackerError::FrameGap {
                expected: frame,
                found: t.frame,
            });
        }
    }
    Ok(())
}

/// Observations of one frame arranged for the volume stages.
pub struct FrameInputs {
    pub frame: usize,
    pub dist: FrameDistances,
    /// Per view, `n_points × D`.
    pub features: Vec<Array2<f64>>,
    /// Number of views seeing each point.
    pub n_visible: Vec<usize>,
}

/// Per-query quantities kept for the backward pass.
#[derive(Debug, Clone)]
pub struct QueryReadout {
    pub voxel: usize,
    pub neighbourhood: Vec<usize>,
    pub input: DVector<f64>,
    pub output: DVector<f64>,
    tape: Tape,
}

/// Result of one frame's forward pass.
pub struct FrameOutput {
    pub vfeat: Array2<f64>,
    pub fields: Vec<AttentionField>,
    /// `F_Q · e_m` for every query (zero for queries without an embedding).
    pub keys: Vec<DVector<f64>>,
    pub readouts: Vec<Option<QueryReadout>>,
    pub predictions: Vec<Option<Point3>>,
}

impl FrameOutput {
    /// Voxel chosen by each query, for freezing the selection.
    pub fn selection(&self) -> Vec<Option<usize>> {
        self.readouts.iter().map(|r| r.as_ref().map(|r| r.voxel)).collect()
    }

    /// Normalized volume feature at the voxel nearest each prediction.
    pub fn embedding_targets(&self, geom: &GridGeometry) -> Vec<Option<DVector<f64>>> {
        self.predictions
            .iter()
            .map(|p| {
                p.and_then(|p| {
                    let i = geom.grid.nearest(&p);
                    unit(DVector::from_iterator(self.vfeat.ncols(), self.vfeat.row(i).iter().copied()))
                })
            })
            .collect()
    }
}

fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(b) / (na * nb)
    }
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`.
fn cosine_grads(a: &DVector<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return (DVector::zeros(a.len()), DVector::zeros(b.len()));
    }
    let c = a.dot(b) / (na * nb);
    let da = b / (na * nb) - a * (c / (na * na));
    let db = a / (na * nb) - b * (c / (nb * nb));
    (da, db)
}

/// Least-squares offset, in voxel spacings, from `origin` toward the
/// viewing rays of `point` in every view that sees it.
///
/// Solves `(Σ P_a + εI)·δ = Σ P_a (c_a − origin)` with `P_a` the projector
/// orthogonal to ray `a` and `c_a` the camera centre. With a single view the
/// component along the ray is left at zero.
pub fn ray_residual(seq: &Sequence, frame: usize, point: usize, origin: &Point3, spacing: f64) -> Vector3<f64> {
    let obs = seq.obs;
    let mut lhs = Matrix3::identity() * RESIDUAL_RIDGE;
    let mut rhs = Vector3::zeros();
    for (v, cam) in obs.cameras.iter().enumerate() {
        let t = obs.track(frame, v, point);
        if !t.visible {
            continue;
        }
        let d = cam.ray_direction(&t.xy).normalize();
        let proj = Matrix3::identity() - d * d.transpose();
        lhs += proj;
        rhs += proj * (cam.center() - origin);
    }
    lhs.lu().solve(&rhs).unwrap_or_else(Vector3::zeros) / spacing
}

fn volume_features(
    model: &TrackerModel,
    seq: &Sequence,
    inputs: &FrameInputs,
    chunk_size: usize,
    counter: Option<&OpCounter>,
) -> Result<(Vec<AttentionField>, Array2<f64>)> {
    let fields = attention_fields(&seq.geom, &inputs.dist, &model.attention_params(), model.config.attention);
    let weights: Vec<Array2<f64>> = fields.iter().map(|f| f.combined.clone()).collect();
    let vfeat = populate_volume(&weights, &inputs.features, chunk_size, counter)?;
    Ok((fields, vfeat))
}

fn argmax_lowest(row: ndarray::ArrayView1<f64>, candidates: Option<&[usize]>) -> usize {
    match candidates {
        Some(c) if !c.is_empty() => {
            let mut best = c[0];
            for &i in c {
                if row[i] > row[best] {
                    best = i;
                }
            }
            best
        }
        _ => {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        }
    }
}

/// Voxels within `radius` cells (per axis) of the voxel nearest `centre`,
/// in ascending index order.
pub fn search_window(grid: &crate::volume::VolumetricGrid, centre: &Point3, radius: usize) -> Vec<usize> {
    let (cx, cy, cz) = grid.cell(grid.nearest(centre));
    let n = grid.resolution();
    let span = |c: usize| c.saturating_sub(radius)..=(c + radius).min(n - 1);
    let mut out = Vec::new();
    for ix in span(cx) {
        for iy in span(cy) {
            for iz in span(cz) {
                out.push(grid.index(ix, iy, iz));
            }
        }
    }
    out.sort_unstable();
    out
}

/// Seed of the dropout stream for one query at one step.
fn dropout_seed(seed: u64, query: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(query as u64)
}

/// Runs the volume stages, correspondence, readout and network for one
/// frame. A point is predicted only when some view sees it and its query
/// has an embedding. `frozen` overrides the argmax voxel choice.
pub fn frame_forward(
    model: &TrackerModel,
    seq: &Sequence,
    inputs: &FrameInputs,
    queries: &[TrackQuery],
    frozen: Option<&[Option<usize>]>,
    chunk_size: usize,
    train_mode: bool,
    seed: u64,
) -> Result<FrameOutput> {
    let (fields, vfeat) = volume_features(model, seq, inputs, chunk_size, None)?;
    let corr = query_correspondence(queries, &model.query_map, &vfeat)?;
    let grid = &seq.geom.grid;
    let h = grid.spacing();
    let m_total = queries.len();
    let d = model.config.feature_dim;
    let keys: Vec<DVector<f64>> = queries.iter().map(|q| &model.query_map * &q.embedding).collect();

    let mut readouts = Vec::with_capacity(m_total);
    let mut predictions = Vec::with_capacity(m_total);
    for (m, q) in queries.iter().enumerate() {
        let active = inputs.n_visible[q.point_id] > 0 && q.embedding_valid;
        if !active {
            readouts.push(None);
            predictions.push(None);
            continue;
        }
        let voxel = match frozen.and_then(|f| f[m]) {
            Some(v) => v,
            None => {
                let window = match model.config.search_radius {
                    Some(r) if q.position_valid => Some(search_window(grid, &q.position, r)),
                    _ => None,
                };
                argmax_lowest(corr.row(m), window.as_deref())
            }
        };
        let neighbourhood = grid.neighbourhood(voxel);
        let g = grid.coord(voxel);
        let mut x = DVector::zeros(model.config.compound_dim());
        x.fixed_rows_mut::<3>(0).copy_from(&g.coords);
        for &n in &neighbourhood {
            for k in 0..d {
                x[3 + k] += vfeat[[n, k]] / neighbourhood.len() as f64;
            }
        }
        let v = DVector::from_iterator(d, vfeat.row(voxel).iter().copied());
        for r in 0..m_total {
            x[3 + d + r] = cosine(&keys[(m + r) % m_total], &v);
        }
        let res = ray_residual(seq, inputs.frame, q.point_id, &g, h);
        x.fixed_rows_mut::<3>(3 + d + m_total).copy_from(&res);
        let (y, tape) = mlp_forward(&model.mlp, &model.spec, &x, train_mode, dropout_seed(seed, m))?;
        let offset = if model.config.residual_skip { &y + DVector::from_column_slice(res.as_slice()) } else { y.clone() };
        predictions.push(Some(Point3::from(g.coords + offset * h)));
        readouts.push(Some(QueryReadout {
            voxel,
            neighbourhood,
            input: x,
            output: y,
            tape,
        }));
    }
    Ok(FrameOutput {
        vfeat,
        fields,
        keys,
        readouts,
        predictions,
    })
}

/// Gradient of a loss with respect to every model parameter, given the
/// loss gradient with respect to each prediction. Voxel choices and query
/// states are held fixed.
pub fn frame_backward(
    model: &TrackerModel,
    seq: &Sequence,
    inputs: &FrameInputs,
    queries: &[TrackQuery],
    out: &FrameOutput,
    d_pred: &[Option<Vector3<f64>>],
) -> Result<Vec<f64>> {
    let d = model.config.feature_dim;
    let m_total = queries.len();
    let h = seq.geom.grid.spacing();
    let n_mlp = model.mlp.n_params();
    let mut grad = vec![0.0; model.n_params()];
    let mut d_keys: Vec<DVector<f64>> = vec![DVector::zeros(d); m_total];
    let mut d_vfeat: std::collections::BTreeMap<usize, DVector<f64>> = Default::default();

    for (m, readout) in out.readouts.iter().enumerate() {
        let (Some(r), Some(dp)) = (readout, d_pred.get(m).copied().flatten()) else {
            continue;
        };
        let dy = DVector::from_column_slice((dp * h).as_slice());
        let g = mlp_backward(&model.mlp, &r.tape, &dy)?;
        for (acc, v) in grad[..n_mlp].iter_mut().zip(&g.params) {
            *acc += v;
        }
        let dx = &g.input;
        let n_nb = r.neighbourhood.len() as f64;
        for &n in &r.neighbourhood {
            let e = d_vfeat.entry(n).or_insert_with(|| DVector::zeros(d));
            for k in 0..d {
                e[k] += dx[3 + k] / n_nb;
            }
        }
        let v = DVector::from_iterator(d, out.vfeat.row(r.voxel).iter().copied());
        let mut dv = DVector::zeros(d);
        for k in 0..m_total {
            let c_grad = dx[3 + d + k];
            if c_grad == 0.0 {
                continue;
            }
            let mq = (m + k) % m_total;
            let (dkey, dvv) = cosine_grads(&out.keys[mq], &v);
            d_keys[mq] += dkey * c_grad;
            dv += dvv * c_grad;
        }
        *d_vfeat.entry(r.voxel).or_insert_with(|| DVector::zeros(d)) += dv;
    }

    // Query map: key_m = F_Q e_m.
    let mut d_map = DMatrix::zeros(d, d);
    for (q, dk) in queries.iter().zip(&d_keys) {
        d_map += dk * q.embedding.transpose();
    }
    for (acc, v) in grad[n_mlp..n_mlp + d * d].iter_mut().zip(d_map.transpose().iter()) {
        *acc += v;
    }

    // Attention scalars through the volume features.
    let params = model.attention_params();
    let mut row = WeightRow::default();
    let (mut d_t, mut d_se, mut d_ss) = (0.0, 0.0, 0.0);
    for (&i, dv) in &d_vfeat {
        for a in 0..seq.geom.n_views() {
            weight_row(&seq.geom, &inputs.dist, &params, model.config.attention, a, i, &mut row);
            for (j, z) in inputs.features[a].outer_iter().enumerate() {
                let dw: f64 = z.iter().zip(dv.iter()).map(|(zk, gk)| zk * gk).sum();
                d_t += dw * row.d_log_temperature[j];
                d_se += dw * row.d_log_sigma_epipolar[j];
                d_ss += dw * row.d_log_sigma_sfm[j];
            }
        }
    }
    let base = n_mlp + d * d;
    grad[base] += d_t;
    grad[base + 1] += d_se;
    grad[base + 2] += d_ss;
    Ok(grad)
}

/// Per-frame observer used for debugging dumps.
pub type FrameHook<'h> = dyn FnMut(usize, &FrameOutput) + 'h;

/// Tracks every point through every frame.
///
/// A frame where a point is visible in no view yields `valid == false` and
/// repeats the last valid position (or the query position when none exists
/// yet).
pub fn track_sequence(
    obs: &SceneObservations,
    model: &TrackerModel,
    cfg: &TrackerConfig,
) -> Result<Vec<Trajectory3D>> {
    track_sequence_with(obs, model, cfg, None)
}

pub fn track_sequence_with(
    obs: &SceneObservations,
    model: &TrackerModel,
    cfg: &TrackerConfig,
    mut hook: Option<&mut FrameHook>,
) -> Result<Vec<Trajectory3D>> {
    model.check_compatible(obs)?;
    if !(0.0..=1.0).contains(&cfg.momentum) {
        return Err(TrackerError::InvalidConfig("momentum must lie in [0, 1]".into()));
    }
    let seq = Sequence::new(obs, model.config.grid_resolution)?;
    let mut queries = init_queries(obs, 0);
    let mut trajs: Vec<Trajectory3D> = (0..obs.n_points)
        .map(|point_id| Trajectory3D {
            point_id,
            positions: Vec::with_capacity(obs.n_frames),
            valid: Vec::with_capacity(obs.n_frames),
        })
        .collect();
    for frame in 0..obs.n_frames {
        refresh_queries(&mut queries, obs, frame);
        let inputs = seq.frame(frame);
        let out = frame_forward(model, &seq, &inputs, &queries, None, cfg.chunk_size, false, 0)?;
        if let Some(h) = hook.as_mut() {
            h(frame, &out);
        }
        for (m, traj) in trajs.iter_mut().enumerate() {
            match out.predictions[m] {
                Some(p) => {
                    traj.positions.push(p);
                    traj.valid.push(true);
                }
                None => {
                    let last = traj.positions.last().copied().unwrap_or(queries[m].position);
                    traj.positions.push(last);
                    traj.valid.push(false);
                }
            }
        }
        let targets = out.embedding_targets(&seq.geom);
        update_queries(&mut queries, &out.predictions, &targets, cfg.momentum);
    }
    Ok(trajs)
}

#[derive(Serialize, Deserialize)]
struct TrajFrameRecord {
    frame: usize,
    xyz: [f64; 3],
    valid: bool,
}

#[derive(Serialize, Deserialize)]
struct TrajRecord {
    point_id: usize,
    frames: Vec<TrajFrameRecord>,
}

pub fn write_trajectories_json(path: &Path, trajs: &[Trajectory3D]) -> Result<()> {
    let records: Vec<TrajRecord> = trajs
        .iter()
        .map(|t| TrajRecord {
            point_id: t.point_id,
            frames: t
                .positions
                .iter()
                .zip(&t.valid)
                .enumerate()
                .map(|(frame, (p, &valid))| TrajFrameRecord {
                    frame,
                    xyz: [p.x, p.y, p.z],
                    valid,
                })
                .collect(),
        })
        .collect();
    let text = serde_json::to_string_pretty(&records).map_err(|e| TrackerError::Io(e.to_string()))?;
    fs::write(path, text).map_err(|e| TrackerError::Io(e.to_string()))
}

pub fn read_trajectories_json(path: &Path) -> Result<Vec<Trajectory3D>> {
    let text = fs::read_to_string(path).map_err(|e| TrackerError::Io(e.to_string()))?;
    let records: Vec<TrajRecord> = serde_json::from_str(&text).map_err(|e| TrackerError::Io(e.to_string()))?;
    records
        .into_iter()
        .map(|mut r| {
            r.frames.sort_by_key(|f| f.frame);
            for (k, f) in r.frames.iter().enumerate() {
                if f.frame != k {
                    return Err(TrackerError::FrameGap {
                        expected: k,
                        found: f.frame,
                    });
                }
            }
            Ok(Trajectory3D {
                point_id: r.point_id,
                positions: r.frames.iter().map(|f| Point3::new(f.xyz[0], f.xyz[1], f.xyz[2])).collect(),
                valid: r.frames.iter().map(|f| f.valid).collect(),
            })
        })
        .collect()
}

/// Rows of `frame,point_id,x,y,z,valid`.
pub fn trajectories_csv(trajs: &[Trajectory3D]) -> String {
    let mut out = String::from("frame,point_id,x,y,z,valid\n");
    let n_frames = trajs.iter().map(|t| t.positions.len()).max().unwrap_or(0);
    for f in 0..n_frames {
        for t in trajs {
            if let Some(p) = t.positions.get(f) {
                out.push_str(&format!("{f},{},{},{},{},{}\n", t.point_id, p.x, p.y, p.z, t.valid[f]));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};
    use approx::assert_abs_diff_eq;

    fn query(e: Vec<f64>) -> TrackQuery {
        TrackQuery {
            point_id: 0,
            position: Point3::new(1.0, 1.0, 1.0),
            embedding: DVector::from_vec(e),
            position_valid: true,
            embedding_valid: true,
        }
    }

    #[test]
    fn init_queries_triangulate_noiseless_points() {
        let scene = generate_scene(&SceneConfig::default()).unwrap();
        let qs = init_queries(&scene.observations, 0);
        assert_eq!(qs.len(), scene.config.n_points);
        for q in &qs {
            assert!(q.position_valid && q.embedding_valid);
            assert!((q.position - scene.gt_traj[q.point_id][0]).norm() < 1e-7);
            assert_abs_diff_eq!(q.embedding.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn init_queries_defer_unseen_points() {
        let mut scene = generate_scene(&SceneConfig::default()).unwrap();
        let n_views = scene.observations.n_views();
        for v in 0..n_views {
            let k = v * scene.config.n_points + 2;
            scene.observations.tracks[k].visible = false;
        }
        let k = scene.config.n_points + 3;
        scene.observations.tracks[k].visible = false;
        let qs = init_queries(&scene.observations, 0);
        assert!(!qs[2].position_valid && !qs[2].embedding_valid);
        // Seen in two views: still triangulable.
        assert!(qs[3].position_valid);
    }

    #[test]
    fn correspondence_examples() {
        let e = vec![0.6, 0.8, 0.0];
        let qs = vec![query(e.clone()), query(vec![0.0, 0.0, 1.0])];
        let vfeat = Array2::from_shape_vec((3, 3), vec![0.6, 0.8, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        let c = query_correspondence(&qs, &DMatrix::identity(3, 3), &vfeat).unwrap();
        assert_abs_diff_eq!(c[[0, 0]], 1.0, epsilon = 1e-15);
        assert_eq!(c[[0, 1]], 0.0);
        assert_eq!(c[[1, 1]], 1.0);
        assert_eq!(c[[0, 2]], 0.0);
        assert!(query_correspondence(&qs, &DMatrix::identity(2, 2), &vfeat).is_err());
    }

    #[test]
    fn momentum_examples() {
        let mut qs = vec![query(vec![1.0, 0.0])];
        update_queries(&mut qs, &[Some(Point3::origin())], &[None], 0.8);
        assert_abs_diff_eq!(qs[0].position, Point3::new(0.8, 0.8, 0.8), epsilon = 1e-15);

        let mut qs = vec![query(vec![1.0, 0.0])];
        update_queries(&mut qs, &[Some(Point3::origin())], &[Some(DVector::from_vec(vec![0.0, 1.0]))], 1.0);
        assert_eq!(qs[0].position, Point3::new(1.0, 1.0, 1.0));
        assert_eq!(qs[0].embedding, DVector::from_vec(vec![1.0, 0.0]));

        let mut qs = vec![query(vec![1.0, 0.0])];
        let p = Point3::new(0.1, -0.2, 0.3);
        update_queries(&mut qs, &[Some(p)], &[Some(DVector::from_vec(vec![0.0, 1.0]))], 0.0);
        assert_eq!(qs[0].position, p);
        assert_eq!(qs[0].embedding, DVector::from_vec(vec![0.0, 1.0]));
    }

    #[test]
    fn ray_residual_points_at_the_true_position() {
        let scene = generate_scene(&SceneConfig::default()).unwrap();
        let seq = Sequence::new(&scene.observations, 8).unwrap();
        let gt = scene.gt_traj[1][4];
        let origin = Point3::new(gt.x + 0.1, gt.y - 0.05, gt.z + 0.07);
        let r = ray_residual(&seq, 4, 1, &origin, 0.5);
        assert!((origin + r * 0.5 - gt).norm() < 1e-5);
    }

    #[test]
    fn model_flat_round_trip_and_checkpoint() {
        let model = TrackerModel::new(ModelConfig::desk(16, 8), 3).unwrap();
        let mut other = TrackerModel::new(ModelConfig::desk(16, 8), 4).unwrap();
        other.assign_flat(&model.to_flat()).unwrap();
        assert_eq!(other.to_flat(), model.to_flat());
        assert_eq!(model.decay_mask().len(), model.n_params());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path, 7).unwrap();
        let (loaded, step) = TrackerModel::load(&path).unwrap();
        assert_eq!(step, 7);
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.checkpoint_bytes(7).unwrap(), model.checkpoint_bytes(7).unwrap());
    }

    #[test]
    fn incompatible_scene_is_rejected() {
        let scene = generate_scene(&SceneConfig::default()).unwrap();
        let model = TrackerModel::new(ModelConfig::desk(8, 8), 0).unwrap();
        let err = track_sequence(&scene.observations, &model, &TrackerConfig::default()).unwrap_err();
        match err {
            TrackerError::SpecMismatch { expected, found, .. } => assert_eq!((expected, found), (8, 16)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn frame_gap_and_missing_calibration() {
        let scene = generate_scene(&SceneConfig::default()).unwrap();
        let mut obs = scene.observations.clone();
        let k = 2 * obs.n_views() * obs.n_points;
        obs.tracks[k].frame = 5;
        assert!(matches!(Sequence::new(&obs, 4), Err(TrackerError::FrameGap { expected: 2, found: 5 })));
        let mut obs = scene.observations.clone();
        obs.cameras.clear();
        assert!(matches!(Sequence::new(&obs, 4), Err(TrackerError::CalibrationMissing)));
    }

    #[test]
    fn trajectory_files_round_trip() {
        let trajs = vec![Trajectory3D {
            point_id: 0,
            positions: vec![Point3::new(0.1, 0.2, 0.3), Point3::new(-0.1, 0.0, 1.0)],
            valid: vec![true, false],
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        write_trajectories_json(&path, &trajs).unwrap();
        assert_eq!(read_trajectories_json(&path).unwrap(), trajs);
        let csv = trajectories_csv(&trajs);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().ends_with("false"));
    }
}
