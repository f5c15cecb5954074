//! Deterministic synthetic multi-camera scenes.
//!
//! A scene is a ring of calibrated cameras around the origin, a set of 3D
//! points moving inside the cube `[-1, 1]³`, their per-view 2D tracks with
//! pixel noise and structured occlusion, and per-observation appearance
//! features that carry the identity of each point.
//!
//! Every random quantity comes from a ChaCha stream derived from the scene
//! seed, so a config always produces bit-identical data.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    cameras_from_records, cameras_to_records, project, CameraParams, CameraRecord,
    GeometryError, Point2, Point3, MIN_DEPTH,
};

pub const RIG_RADIUS: f64 = 3.0;
pub const IMAGE_WIDTH: f64 = 640.0;
pub const IMAGE_HEIGHT: f64 = 480.0;
/// Mean length, in frames, of an occlusion run.
pub const MEAN_OCCLUSION_RUN: f64 = 5.0;
/// One world unit is one metre.
pub const METRES_PER_UNIT: f64 = 1.0;

const STREAM_RIG: u64 = 1;
const STREAM_TRAJECTORY: u64 = 2;
const STREAM_PIXEL_NOISE: u64 = 3;
const STREAM_OCCLUSION: u64 = 4;
const STREAM_FEATURE_NOISE: u64 = 5;
const IDENTITY_CODEBOOK_SEED: u64 = 0x5eed_1d;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("scene io: {0}")]
    Io(String),
    #[error("malformed scene file: {0}")]
    Malformed(String),
}

pub type Result<T, E = SceneError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionModel {
    Linear,
    Orbit,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub n_cameras: usize,
    pub n_points: usize,
    pub n_frames: usize,
    pub feature_dim: usize,
    pub pixel_noise_sigma: f64,
    pub occlusion_rate: f64,
    pub feature_noise_sigma: f64,
    pub seed: u64,
    pub motion_model: MotionModel,
    /// Views that receive occlusion; `None` means every view.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occluded_views: Option<Vec<usize>>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_cameras: 3,
            n_points: 8,
            n_frames: 24,
            feature_dim: 16,
            pixel_noise_sigma: 0.0,
            occlusion_rate: 0.0,
            feature_noise_sigma: 0.1,
            seed: 7,
            motion_model: MotionModel::Mixed,
            occluded_views: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SceneError::ConfigInvalid(m.to_string()));
        if self.n_cameras < 2 {
            return bad("n_cameras must be at least 2");
        }
        if self.n_points == 0 || self.n_frames == 0 || self.feature_dim == 0 {
            return bad("n_points, n_frames and feature_dim must be positive");
        }
        if !(self.pixel_noise_sigma >= 0.0 && self.pixel_noise_sigma.is_finite()) {
            return bad("pixel_noise_sigma must be a finite non-negative number");
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return bad("feature_noise_sigma must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return bad("occlusion_rate must lie in [0, 1)");
        }
        if let Some(views) = &self.occluded_views {
            if views.iter().any(|&v| v >= self.n_cameras) {
                return bad("occluded_views refers to a missing camera");
            }
        }
        Ok(())
    }

    fn view_is_occludable(&self, view: usize) -> bool {
        self.occluded_views
            .as_ref()
            .map_or(true, |views| views.contains(&view))
    }
}

/// One 2D observation of one point in one view at one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Track2D {
    pub view_id: usize,
    pub point_id: usize,
    pub frame: usize,
    pub xy: Point2,
    pub confidence: f64,
    pub visible: bool,
}

/// Dense appearance features laid out `[frame][view][point][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub n_frames: usize,
    pub n_views: usize,
    pub n_points: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

/// Borrowed view of one feature vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVec<'a> {
    pub frame: usize,
    pub view_id: usize,
    pub point_id: usize,
    pub values: &'a [f32],
}

impl FeatureTensor {
    pub fn zeros(n_frames: usize, n_views: usize, n_points: usize, dim: usize) -> Self {
        Self {
            n_frames,
            n_views,
            n_points,
            dim,
            data: vec![0.0; n_frames * n_views * n_points * dim],
        }
    }

    fn offset(&self, frame: usize, view: usize, point: usize) -> usize {
        ((frame * self.n_views + view) * self.n_points + point) * self.dim
    }

    pub fn get(&self, frame: usize, view: usize, point: usize) -> &[f32] {
        let o = self.offset(frame, view, point);
        &self.data[o..o + self.dim]
    }

    fn get_mut(&mut self, frame: usize, view: usize, point: usize) -> &mut [f32] {
        let o = self.offset(frame, view, point);
        &mut self.data[o..o + self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = FeatureVec<'_>> {
        (0..self.n_frames).flat_map(move |frame| {
            (0..self.n_views).flat_map(move |view| {
                (0..self.n_points).map(move |point| FeatureVec {
                    frame,
                    view_id: view,
                    point_id: point,
                    values: self.get(frame, view, point),
                })
            })
        })
    }

    /// Little-endian f32 bytes in `[frame][view][point][dim]` order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(
        bytes: &[u8],
        n_frames: usize,
        n_views: usize,
        n_points: usize,
        dim: usize,
    ) -> Result<Self> {
        let expected = n_frames * n_views * n_points * dim * 4;
        if bytes.len() != expected {
            return Err(SceneError::Malformed(format!(
                "feature sidecar has {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            n_frames,
            n_views,
            n_points,
            dim,
            data,
        })
    }
}

/// A maximal run of frames during which one point is occluded in one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionEpisode {
    pub view_id: usize,
    pub point_id: usize,
    pub start: usize,
    pub len: usize,
}

/// Everything a tracker may consume: calibration, 2D tracks and features.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObservations {
    pub cameras: Vec<CameraParams>,
    pub n_frames: usize,
    pub n_points: usize,
    /// Dense, ordered by frame, then view position, then point.
    pub tracks: Vec<Track2D>,
    pub features: FeatureTensor,
}

impl SceneObservations {
    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim
    }

    /// Track of `point` in the view at position `view` of `cameras`.
    pub fn track(&self, frame: usize, view: usize, point: usize) -> &Track2D {
        &self.tracks[(frame * self.n_views() + view) * self.n_points + point]
    }

    pub fn visible_views(&self, frame: usize, point: usize) -> usize {
        (0..self.n_views())
            .filter(|&v| self.track(frame, v, point).visible)
            .count()
    }

    /// Keeps only the views at the given positions, in the given order.
    pub fn restrict_views(&self, views: &[usize]) -> Self {
        let mut tracks = Vec::with_capacity(self.n_frames * views.len() * self.n_points);
        let mut features =
            FeatureTensor::zeros(self.n_frames, views.len(), self.n_points, self.features.dim);
        for frame in 0..self.n_frames {
            for (new_view, &view) in views.iter().enumerate() {
                for point in 0..self.n_points {
                    tracks.push(*self.track(frame, view, point));
                    features
                        .get_mut(frame, new_view, point)
                        .copy_from_slice(self.features.get(frame, view, point));
                }
            }
        }
        Self {
            cameras: views.iter().map(|&v| self.cameras[v].clone()).collect(),
            n_frames: self.n_frames,
            n_points: self.n_points,
            tracks,
            features,
        }
    }

    /// Same observations seen through a different calibration.
    pub fn with_cameras(&self, cameras: Vec<CameraParams>) -> Self {
        assert_eq!(cameras.len(), self.cameras.len());
        Self {
            cameras,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        let n_views = self.n_views();
        if self.tracks.len() != self.n_frames * n_views * self.n_points {
            return Err(SceneError::Malformed(format!(
                "expected {} tracks, found {}",
                self.n_frames * n_views * self.n_points,
                self.tracks.len()
            )));
        }
        for frame in 0..self.n_frames {
            for (v, cam) in self.cameras.iter().enumerate() {
                for point in 0..self.n_points {
                    let tr = self.track(frame, v, point);
                    if tr.frame != frame || tr.view_id != cam.view_id() || tr.point_id != point {
                        return Err(SceneError::Malformed(format!(
                            "track order broken at frame {frame}, view {}, point {point}",
                            cam.view_id()
                        )));
                    }
                    if !(0.0..=1.0).contains(&tr.confidence) {
                        return Err(SceneError::Malformed("confidence outside [0, 1]".into()));
                    }
                    if tr.visible && !(tr.xy.x.is_finite() && tr.xy.y.is_finite()) {
                        return Err(SceneError::Malformed("visible track is not finite".into()));
                    }
                }
            }
        }
        if self.features.n_frames != self.n_frames
            || self.features.n_views != n_views
            || self.features.n_points != self.n_points
        {
            return Err(SceneError::Malformed("feature tensor shape mismatch".into()));
        }
        Ok(())
    }
}

/// Synthetic scene with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub config: SceneConfig,
    pub observations: SceneObservations,
    /// `gt_traj[point][frame]`.
    pub gt_traj: Vec<Vec<Point3>>,
    pub occlusion_episodes: Vec<OcclusionEpisode>,
}

impl SceneData {
    pub fn cameras(&self) -> &[CameraParams] {
        &self.observations.cameras
    }

    pub fn restrict_views(&self, views: &[usize]) -> Self {
        let kept: Vec<usize> = views
            .iter()
            .map(|&v| self.observations.cameras[v].view_id())
            .collect();
        let mut config = self.config.clone();
        config.n_cameras = views.len();
        config.occluded_views = None;
        Self {
            config,
            observations: self.observations.restrict_views(views),
            gt_traj: self.gt_traj.clone(),
            occlusion_episodes: self
                .occlusion_episodes
                .iter()
                .filter(|e| kept.contains(&e.view_id))
                .copied()
                .collect(),
        }
    }

    /// Fraction of (view, point, frame) observations flagged occluded.
    pub fn occlusion_fraction(&self) -> f64 {
        let tracks = &self.observations.tracks;
        tracks.iter().filter(|t| !t.visible).count() as f64 / tracks.len() as f64
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Ring of cameras at radius 3 around the vertical axis, at varied heights,
/// all looking at the origin.
fn generate_rig(cfg: &SceneConfig) -> Result<Vec<CameraParams>> {
    let mut rng = stream_rng(cfg.seed, STREAM_RIG);
    (0..cfg.n_cameras)
        .map(|view| {
            let azimuth = 2.0 * PI * view as f64 / cfg.n_cameras as f64 + rng.gen_range(-0.15..0.15);
            let height = rng.gen_range(-1.0..1.0);
            let focal = rng.gen_range(380.0..420.0);
            let k = Matrix3::new(
                focal,
                0.0,
                IMAGE_WIDTH / 2.0,
                0.0,
                focal,
                IMAGE_HEIGHT / 2.0,
                0.0,
                0.0,
                1.0,
            );
            let center = Point3::new(RIG_RADIUS * azimuth.cos(), RIG_RADIUS * azimuth.sin(), height);
            CameraParams::look_at(view, k, center, Point3::origin(), Vector3::z())
                .map_err(SceneError::from)
        })
        .collect()
}

fn random_in_cube<R: Rng>(rng: &mut R, half: f64) -> Point3 {
    Point3::new(
        rng.gen_range(-half..half),
        rng.gen_range(-half..half),
        rng.gen_range(-half..half),
    )
}

fn generate_trajectories(cfg: &SceneConfig) -> Vec<Vec<Point3>> {
    let mut rng = stream_rng(cfg.seed, STREAM_TRAJECTORY);
    let span = (cfg.n_frames.max(2) - 1) as f64;
    (0..cfg.n_points)
        .map(|_| {
            let orbit = match cfg.motion_model {
                MotionModel::Linear => false,
                MotionModel::Orbit => true,
                MotionModel::Mixed => rng.gen_bool(0.5),
            };
            if orbit {
                let center = random_in_cube(&mut rng, 0.4);
                let radius = rng.gen_range(0.15..0.35);
                let axis = Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng));
                let axis = if axis.norm() > 1e-9 { axis.normalize() } else { Vector3::z() };
                let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
                let u = axis.cross(&helper).normalize();
                let v = axis.cross(&u);
                let phase = rng.gen_range(0.0..2.0 * PI);
                let sweep = rng.gen_range(0.5 * PI..2.0 * PI);
                (0..cfg.n_frames)
                    .map(|f| {
                        let a = phase + sweep * f as f64 / span;
                        center + (u * a.cos() + v * a.sin()) * radius
                    })
                    .collect()
            } else {
                let start = random_in_cube(&mut rng, 0.7);
                let end = random_in_cube(&mut rng, 0.7);
                (0..cfg.n_frames)
                    .map(|f| start + (end - start) * (f as f64 / span))
                    .collect()
            }
        })
        .collect()
}

/// Two-state occlusion chain per (view, point): occluded runs have mean
/// [`MEAN_OCCLUSION_RUN`] frames and the stationary occluded fraction equals
/// `occlusion_rate`. Returns `occluded[view][point][frame]`.
fn generate_occlusion(cfg: &SceneConfig) -> Vec<Vec<Vec<bool>>> {
    let mut rng = stream_rng(cfg.seed, STREAM_OCCLUSION);
    let rate = cfg.occlusion_rate;
    let mean_occluded = MEAN_OCCLUSION_RUN.max(rate / (1.0 - rate));
    let p_leave = 1.0 / mean_occluded;
    let p_enter = if rate > 0.0 {
        (rate / (mean_occluded * (1.0 - rate))).min(1.0)
    } else {
        0.0
    };
    (0..cfg.n_cameras)
        .map(|view| {
            let active = rate > 0.0 && cfg.view_is_occludable(view);
            (0..cfg.n_points)
                .map(|_| {
                    let mut state = rng.gen_bool(rate);
                    (0..cfg.n_frames)
                        .map(|f| {
                            if f > 0 {
                                let u: f64 = rng.gen();
                                state = if state { u >= p_leave } else { u < p_enter };
                            }
                            active && state
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn episodes_from_mask(occluded: &[Vec<Vec<bool>>], cams: &[CameraParams]) -> Vec<OcclusionEpisode> {
    let mut episodes = Vec::new();
    for (view, per_point) in occluded.iter().enumerate() {
        for (point, frames) in per_point.iter().enumerate() {
            let mut start = None;
            for (f, &occ) in frames.iter().chain(std::iter::once(&false)).enumerate() {
                match (occ, start) {
                    (true, None) => start = Some(f),
                    (false, Some(s)) => {
                        episodes.push(OcclusionEpisode {
                            view_id: cams[view].view_id(),
                            point_id: point,
                            start: s,
                            len: f - s,
                        });
                        start = None;
                    }
                    _ => {}
                }
            }
        }
    }
    episodes
}

/// Unit-norm identity vector of a point; depends only on `point_id` and `dim`.
pub fn identity_vector(point_id: usize, dim: usize) -> Vec<f64> {
    let mut rng = stream_rng(IDENTITY_CODEBOOK_SEED, point_id as u64);
    let v: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<SceneData> {
    cfg.validate()?;
    let cameras = generate_rig(cfg)?;
    let gt_traj = generate_trajectories(cfg);
    let occluded = generate_occlusion(cfg);

    let mut pixel_rng = stream_rng(cfg.seed, STREAM_PIXEL_NOISE);
    let sigma = cfg.pixel_noise_sigma;
    let mut tracks = Vec::with_capacity(cfg.n_frames * cfg.n_cameras * cfg.n_points);
    for frame in 0..cfg.n_frames {
        for (view, cam) in cameras.iter().enumerate() {
            for point in 0..cfg.n_points {
                let (exact, depth) = project(&gt_traj[point][frame], cam)?;
                let noise = if sigma > 0.0 {
                    Vector3::new(normal(&mut pixel_rng) * sigma, normal(&mut pixel_rng) * sigma, 0.0)
                } else {
                    Vector3::zeros()
                };
                let in_front = depth > MIN_DEPTH;
                let visible = in_front && !occluded[view][point][frame];
                let confidence = match (visible, sigma > 0.0) {
                    (false, _) => 0.0,
                    (true, false) => 1.0,
                    (true, true) => (-(noise.norm_squared()) / (8.0 * sigma * sigma)).exp(),
                };
                tracks.push(Track2D {
                    view_id: cam.view_id(),
                    point_id: point,
                    frame,
                    xy: Point2::new(exact.x + noise.x, exact.y + noise.y),
                    confidence,
                    visible,
                });
            }
        }
    }

    let codebook: Vec<Vec<f64>> = (0..cfg.n_points)
        .map(|p| identity_vector(p, cfg.feature_dim))
        .collect();
    let mut feature_rng = stream_rng(cfg.seed, STREAM_FEATURE_NOISE);
    let mut features = FeatureTensor::zeros(cfg.n_frames, cfg.n_cameras, cfg.n_points, cfg.feature_dim);
    let mut scratch = vec![0.0; cfg.feature_dim];
    for frame in 0..cfg.n_frames {
        for view in 0..cfg.n_cameras {
            for point in 0..cfg.n_points {
                for (s, id) in scratch.iter_mut().zip(&codebook[point]) {
                    *s = id + cfg.feature_noise_sigma * normal(&mut feature_rng);
                }
                let n = scratch.iter().map(|x| x * x).sum::<f64>().sqrt();
                for (dst, s) in features.get_mut(frame, view, point).iter_mut().zip(&scratch) {
                    *dst = (s / n) as f32;
                }
            }
        }
    }

    let occlusion_episodes = episodes_from_mask(&occluded, &cameras);
    Ok(SceneData {
        config: cfg.clone(),
        observations: SceneObservations {
            cameras,
            n_frames: cfg.n_frames,
            n_points: cfg.n_points,
            tracks,
            features,
        },
        gt_traj,
        occlusion_episodes,
    })
}

/// Standard deviations of Gaussian calibration noise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationNoise {
    pub intrinsic_px: f64,
    pub rotation_deg: f64,
    pub translation_cm: f64,
}

/// Jitters focal lengths and principal points, composes each rotation with a
/// random-axis rotation of half-normal angle, and shifts translations.
///
/// Parameter groups with zero noise are copied bit for bit.
pub fn perturb_calibration(
    cams: &[CameraParams],
    noise: CalibrationNoise,
    seed: u64,
) -> Result<Vec<CameraParams>> {
    if noise.intrinsic_px < 0.0 || noise.rotation_deg < 0.0 || noise.translation_cm < 0.0 {
        return Err(SceneError::ConfigInvalid("noise levels must be non-negative".into()));
    }
    cams.iter()
        .enumerate()
        .map(|(i, cam)| {
            let mut rng = stream_rng(seed, 100 + i as u64);
            // Draw everything up front so each group sees the same stream
            // regardless of which groups are active.
            let d_int: [f64; 4] = std::array::from_fn(|_| normal(&mut rng));
            let axis = Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng));
            let d_angle = normal(&mut rng);
            let d_t = Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng));

            let mut k = *cam.k();
            if noise.intrinsic_px > 0.0 {
                k[(0, 0)] += noise.intrinsic_px * d_int[0];
                k[(1, 1)] += noise.intrinsic_px * d_int[1];
                k[(0, 2)] += noise.intrinsic_px * d_int[2];
                k[(1, 2)] += noise.intrinsic_px * d_int[3];
            }
            let mut r = *cam.r();
            if noise.rotation_deg > 0.0 && axis.norm() > 0.0 {
                let angle = (noise.rotation_deg * d_angle).abs().to_radians();
                let jitter = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
                let composed = jitter.matrix() * r;
                let svd = composed.svd(true, true);
                let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
                r = u * v_t;
            }
            let mut t = *cam.t();
            if noise.translation_cm > 0.0 {
                t += d_t * (noise.translation_cm / 100.0 / METRES_PER_UNIT);
            }
            CameraParams::new(cam.view_id(), k, r, t).map_err(SceneError::from)
        })
        .collect()
}

/// Geodesic angle, in degrees, between two rotations.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    frame: usize,
    xyz: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct PointRecord {
    point_id: usize,
    frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize)]
struct TrackRecord {
    view_id: usize,
    point_id: usize,
    frame: usize,
    xy: [f64; 2],
    confidence: f64,
    visible: bool,
}

/// Header describing the binary feature sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub file: String,
    pub dtype: String,
    pub layout: String,
    pub n_frames: usize,
    pub n_views: usize,
    pub n_points: usize,
    pub dim: usize,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    config: SceneConfig,
    cameras: Vec<CameraRecord>,
    points: Vec<PointRecord>,
    tracks: Vec<TrackRecord>,
    occlusion_episodes: Vec<OcclusionEpisode>,
    features: FeatureHeader,
}

/// Path of the feature sidecar that accompanies a scene JSON file.
pub fn sidecar_path(scene_path: &Path) -> PathBuf {
    let stem = scene_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into());
    scene_path.with_file_name(format!("{stem}.features.bin"))
}

fn io_err(e: impl std::fmt::Display) -> SceneError {
    SceneError::Io(e.to_string())
}

pub fn write_scene(path: &Path, scene: &SceneData) -> Result<()> {
    let obs = &scene.observations;
    let sidecar = sidecar_path(path);
    let file = SceneFile {
        config: scene.config.clone(),
        cameras: cameras_to_records(&obs.cameras),
        points: scene
            .gt_traj
            .iter()
            .enumerate()
            .map(|(point_id, frames)| PointRecord {
                point_id,
                frames: frames
                    .iter()
                    .enumerate()
                    .map(|(frame, p)| FrameRecord {
                        frame,
                        xyz: [p.x, p.y, p.z],
                    })
                    .collect(),
            })
            .collect(),
        tracks: obs
            .tracks
            .iter()
            .map(|t| TrackRecord {
                view_id: t.view_id,
                point_id: t.point_id,
                frame: t.frame,
                xy: [t.xy.x, t.xy.y],
                confidence: t.confidence,
                visible: t.visible,
            })
            .collect(),
        occlusion_episodes: scene.occlusion_episodes.clone(),
        features: FeatureHeader {
            file: sidecar
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            dtype: "f32le".into(),
            layout: "frame,view,point,dim".into(),
            n_frames: obs.features.n_frames,
            n_views: obs.features.n_views,
            n_points: obs.features.n_points,
            dim: obs.features.dim,
        },
    };
    let text = serde_json::to_string_pretty(&file).map_err(io_err)?;
    fs::write(path, text).map_err(io_err)?;
    let mut out = fs::File::create(&sidecar).map_err(io_err)?;
    out.write_all(&obs.features.to_le_bytes()).map_err(io_err)?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<SceneData> {
    let text = fs::read_to_string(path).map_err(io_err)?;
    let file: SceneFile =
        serde_json::from_str(&text).map_err(|e| SceneError::Malformed(e.to_string()))?;
    let header = &file.features;
    if header.dtype != "f32le" || header.layout != "frame,view,point,dim" {
        return Err(SceneError::Malformed(format!(
            "unsupported feature encoding {} / {}",
            header.dtype, header.layout
        )));
    }
    let sidecar = path.with_file_name(&header.file);
    let mut bytes = Vec::new();
    fs::File::open(&sidecar)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err)?;
    let features = FeatureTensor::from_le_bytes(
        &bytes,
        header.n_frames,
        header.n_views,
        header.n_points,
        header.dim,
    )?;
    let cameras = cameras_from_records(&file.cameras)?;
    let n_points = file.points.len();
    let mut gt_traj = vec![Vec::new(); n_points];
    for rec in file.points {
        if rec.point_id >= n_points {
            return Err(SceneError::Malformed(format!("point id {} out of range", rec.point_id)));
        }
        let mut frames = rec.frames;
        frames.sort_by_key(|f| f.frame);
        gt_traj[rec.point_id] = frames
            .into_iter()
            .map(|f| Point3::new(f.xyz[0], f.xyz[1], f.xyz[2]))
            .collect();
    }
    let tracks = file
        .tracks
        .into_iter()
        .map(|t| Track2D {
            view_id: t.view_id,
            point_id: t.point_id,
            frame: t.frame,
            xy: Point2::new(t.xy[0], t.xy[1]),
            confidence: t.confidence,
            visible: t.visible,
        })
        .collect();
    let observations = SceneObservations {
        cameras,
        n_frames: header.n_frames,
        n_points: header.n_points,
        tracks,
        features,
    };
    observations.validate()?;
    if gt_traj.iter().any(|t| t.len() != observations.n_frames) {
        return Err(SceneError::Malformed("ground truth frame count mismatch".into()));
    }
    Ok(SceneData {
        config: file.config,
        observations,
        gt_traj,
        occlusion_episodes: file.occlusion_episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dlt_triangulate;

    fn cfg(seed: u64) -> SceneConfig {
        SceneConfig {
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&cfg(7)).unwrap();
        let b = generate_scene(&cfg(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg(8)).unwrap();
        assert_ne!(a.gt_traj, c.gt_traj);
    }

    #[test]
    fn noiseless_tracks_are_exact_projections() {
        let scene = generate_scene(&cfg(3)).unwrap();
        let obs = &scene.observations;
        for tr in &obs.tracks {
            assert!(tr.visible);
            let (x, _) = project(&scene.gt_traj[tr.point_id][tr.frame], &obs.cameras[tr.view_id]).unwrap();
            assert!((x - tr.xy).norm() < 1e-9);
        }
    }

    #[test]
    fn rig_and_trajectories_respect_layout() {
        let scene = generate_scene(&SceneConfig {
            n_cameras: 5,
            n_frames: 50,
            ..cfg(21)
        })
        .unwrap();
        for cam in scene.cameras() {
            let c = cam.center();
            assert!((c.x.hypot(c.y) - RIG_RADIUS).abs() < 1e-9);
            let (o, depth) = project(&Point3::origin(), cam).unwrap();
            assert!(depth > 0.0);
            assert!((o.x - IMAGE_WIDTH / 2.0).abs() < 1e-6 && (o.y - IMAGE_HEIGHT / 2.0).abs() < 1e-6);
        }
        for p in scene.gt_traj.iter().flatten() {
            assert!(p.coords.amax() <= 1.0);
        }
    }

    #[test]
    fn occlusion_fraction_matches_rate() {
        for seed in 0..5 {
            let scene = generate_scene(&SceneConfig {
                n_points: 20,
                n_frames: 100,
                occlusion_rate: 0.3,
                ..cfg(seed)
            })
            .unwrap();
            let frac = scene.occlusion_fraction();
            assert!((0.25..=0.35).contains(&frac), "seed {seed}: {frac}");
        }
    }

    #[test]
    fn occlusion_runs_average_five_frames() {
        let scene = generate_scene(&SceneConfig {
            n_points: 100,
            n_frames: 400,
            occlusion_rate: 0.3,
            ..cfg(4)
        })
        .unwrap();
        let interior: Vec<_> = scene
            .occlusion_episodes
            .iter()
            .filter(|e| e.start > 0 && e.start + e.len < 400)
            .collect();
        let mean = interior.iter().map(|e| e.len as f64).sum::<f64>() / interior.len() as f64;
        assert!((mean - MEAN_OCCLUSION_RUN).abs() < 0.3, "mean run {mean}");
    }

    #[test]
    fn all_views_occluded_probability() {
        let scene = generate_scene(&SceneConfig {
            n_points: 200,
            n_frames: 200,
            occlusion_rate: 0.3,
            ..cfg(12)
        })
        .unwrap();
        let obs = &scene.observations;
        let mut all = 0usize;
        for f in 0..obs.n_frames {
            for p in 0..obs.n_points {
                all += usize::from(obs.visible_views(f, p) == 0);
            }
        }
        let frac = all as f64 / (obs.n_frames * obs.n_points) as f64;
        assert!((frac - 0.027).abs() < 0.01, "{frac}");
    }

    #[test]
    fn occlusion_restricted_to_selected_views() {
        let scene = generate_scene(&SceneConfig {
            occlusion_rate: 0.3,
            occluded_views: Some(vec![0, 1]),
            ..cfg(2)
        })
        .unwrap();
        assert!(scene.observations.tracks.iter().filter(|t| t.view_id == 2).all(|t| t.visible));
        assert!(scene.occlusion_episodes.iter().all(|e| e.view_id < 2));
        // Episode log reproduces the per-track flags exactly.
        let obs = &scene.observations;
        let from_log: usize = scene.occlusion_episodes.iter().map(|e| e.len).sum();
        assert_eq!(from_log, obs.tracks.iter().filter(|t| !t.visible).count());
        for e in &scene.occlusion_episodes {
            for f in e.start..e.start + e.len {
                assert!(!obs.track(f, e.view_id, e.point_id).visible);
            }
        }
    }

    #[test]
    fn same_point_features_are_more_similar() {
        let cos = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x * y) as f64).sum::<f64>();
        for seed in 0..5 {
            let scene = generate_scene(&SceneConfig {
                feature_noise_sigma: 0.45,
                ..cfg(seed)
            })
            .unwrap();
            let feats = &scene.observations.features;
            let (mut same, mut diff, mut ns, mut nd) = (0.0, 0.0, 0, 0);
            for f in 0..feats.n_frames {
                for p in 0..feats.n_points {
                    for q in 0..feats.n_points {
                        let c = cos(feats.get(f, 0, p), feats.get(f, 1, q));
                        if p == q {
                            same += c;
                            ns += 1;
                        } else {
                            diff += c;
                            nd += 1;
                        }
                    }
                }
            }
            assert!(same / ns as f64 > diff / nd as f64);
        }
        let v = identity_vector(3, 16);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_scene_triangulates_exactly() {
        let scene = generate_scene(&cfg(9)).unwrap();
        let obs = &scene.observations;
        for f in 0..obs.n_frames {
            for p in 0..obs.n_points {
                let views: Vec<_> = (0..obs.n_views())
                    .map(|v| (&obs.cameras[v], obs.track(f, v, p).xy))
                    .collect();
                let x = dlt_triangulate(&views).unwrap();
                assert!((x - scene.gt_traj[p][f]).norm() < 1e-7);
            }
        }
    }

    #[test]
    fn zero_calibration_noise_is_identity() {
        let scene = generate_scene(&cfg(1)).unwrap();
        let out = perturb_calibration(scene.cameras(), CalibrationNoise::default(), 5).unwrap();
        assert_eq!(out, scene.cameras());
    }

    #[test]
    fn translation_noise_leaves_k_and_r_untouched() {
        let scene = generate_scene(&cfg(1)).unwrap();
        let noise = CalibrationNoise {
            translation_cm: 5.0,
            ..Default::default()
        };
        let out = perturb_calibration(scene.cameras(), noise, 5).unwrap();
        for (a, b) in scene.cameras().iter().zip(&out) {
            assert_eq!(a.k(), b.k());
            assert_eq!(a.r(), b.r());
            assert_ne!(a.t(), b.t());
        }
    }

    #[test]
    fn rotation_noise_has_half_normal_angle() {
        let scene = generate_scene(&cfg(1)).unwrap();
        let cam = &scene.cameras()[0];
        let noise = CalibrationNoise {
            rotation_deg: 1.0,
            ..Default::default()
        };
        let mut total = 0.0;
        for seed in 0..1000 {
            let out = perturb_calibration(std::slice::from_ref(cam), noise, seed).unwrap();
            total += rotation_angle_deg(cam.r(), out[0].r());
        }
        let mean = total / 1000.0;
        let expected = (2.0 / PI).sqrt();
        assert!((mean - expected).abs() < 0.06, "mean {mean}, expected {expected}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            SceneConfig { n_cameras: 1, ..cfg(0) },
            SceneConfig { n_points: 0, ..cfg(0) },
            SceneConfig { occlusion_rate: 1.0, ..cfg(0) },
            SceneConfig { pixel_noise_sigma: -1.0, ..cfg(0) },
        ] {
            assert!(matches!(generate_scene(&bad), Err(SceneError::ConfigInvalid(_))));
        }
    }

    #[test]
    fn scene_file_round_trip() {
        let scene = generate_scene(&SceneConfig {
            pixel_noise_sigma: 1.0,
            occlusion_rate: 0.2,
            ..cfg(5)
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        write_scene(&path, &scene).unwrap();
        assert!(sidecar_path(&path).exists());
        let back = read_scene(&path).unwrap();
        assert_eq!(back, scene);
    }
}
