//! Volumetric grid, per-view projection, distance attention, geometric masks
//! and attention-weighted feature population.
//!
//! Pixel distances are divided by the image diagonal of the view they are
//! measured in, so the temperature and mask widths are fractions of the
//! image size rather than raw pixels.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::Vector3;
use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{fundamental_matrix, CameraParams, FundamentalMatrix, Point2, Point3, MIN_DEPTH};

pub const DEFAULT_RESOLUTION: usize = 16;
pub const DEFAULT_CHUNK_SIZE: usize = 8192;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_SIGMA_EPIPOLAR: f64 = 0.1;
pub const DEFAULT_SIGMA_SFM: f64 = 0.5;
/// Pixel width of the reprojection mask per unit of `sigma_sfm`, as a
/// fraction of the image diagonal.
pub const SFM_PIXEL_SCALE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("grid resolution {0} is below 2")]
    ResolutionTooSmall(usize),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("mask width must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("attention needs at least one point")]
    NoPoints,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("chunk size must be at least 1")]
    ZeroChunk,
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// Uniform lattice over `[-1, 1]³`, x-major then y then z.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumetricGrid {
    resolution: usize,
    coords: Vec<Point3>,
}

pub fn make_grid(resolution: usize) -> Result<VolumetricGrid> {
    if resolution < 2 {
        return Err(VolumeError::ResolutionTooSmall(resolution));
    }
    let step = 2.0 / (resolution - 1) as f64;
    let axis = |k: usize| if k == resolution - 1 { 1.0 } else { -1.0 + step * k as f64 };
    let mut coords = Vec::with_capacity(resolution.pow(3));
    for ix in 0..resolution {
        for iy in 0..resolution {
            for iz in 0..resolution {
                coords.push(Point3::new(axis(ix), axis(iy), axis(iz)));
            }
        }
    }
    Ok(VolumetricGrid { resolution, coords })
}

impl VolumetricGrid {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        2.0 / (self.resolution - 1) as f64
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn coord(&self, i: usize) -> Point3 {
        self.coords[i]
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.resolution + iy) * self.resolution + iz
    }

    pub fn cell(&self, i: usize) -> (usize, usize, usize) {
        let r = self.resolution;
        (i / (r * r), (i / r) % r, i % r)
    }

    /// Voxel nearest to `p`, clamping points outside the cube.
    pub fn nearest(&self, p: &Point3) -> usize {
        let r = self.resolution;
        let h = self.spacing();
        let snap = |v: f64| (((v + 1.0) / h).round().max(0.0) as usize).min(r - 1);
        self.index(snap(p.x), snap(p.y), snap(p.z))
    }

    /// `i` followed by its in-grid face neighbours.
    pub fn neighbourhood(&self, i: usize) -> Vec<usize> {
        let r = self.resolution as isize;
        let (x, y, z) = self.cell(i);
        let (x, y, z) = (x as isize, y as isize, z as isize);
        let mut out = vec![i];
        for (dx, dy, dz) in [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)] {
            let (a, b, c) = (x + dx, y + dy, z + dz);
            if (0..r).contains(&a) && (0..r).contains(&b) && (0..r).contains(&c) {
                out.push(self.index(a as usize, b as usize, c as usize));
            }
        }
        out
    }
}

/// Grid voxels projected into one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGrid {
    pub view_id: usize,
    pub pixels: Vec<Point2>,
    pub depth: Vec<f64>,
    /// Voxel lies in front of the camera.
    pub valid: Vec<bool>,
    pub image_diag: f64,
}

pub fn project_grid(grid: &VolumetricGrid, cam: &CameraParams) -> ProjectedGrid {
    let n = grid.len();
    let mut pixels = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let (k, r, t) = (cam.k(), cam.r(), cam.t());
    for p in grid.coords() {
        let pc = r * p.coords + t;
        let z = pc.z;
        if z.abs() < MIN_DEPTH {
            pixels.push(Point2::origin());
        } else {
            let h = k * pc;
            pixels.push(Point2::new(h.x / h.z, h.y / h.z));
        }
        depth.push(z);
        valid.push(z > MIN_DEPTH);
    }
    ProjectedGrid {
        view_id: cam.view_id(),
        pixels,
        depth,
        valid,
        image_diag: cam.image_diagonal(),
    }
}

impl ProjectedGrid {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Squared pixel distance divided by the squared image diagonal.
    fn normalized_sq_distance(&self, i: usize, x: &Point2) -> f64 {
        (self.pixels[i] - x).norm_squared() / (self.image_diag * self.image_diag)
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

/// Row `i` is the softmax over points of `−ρ²/T`, where `ρ` is the distance
/// between the voxel's projection and the point in image-diagonal units.
/// Voxels without a valid projection get uniform rows.
pub fn distance_attention(pg: &ProjectedGrid, points: &[Point2], temperature: f64) -> Result<Array2<f64>> {
    if !(temperature > 0.0) {
        return Err(VolumeError::NonPositiveTemperature(temperature));
    }
    if points.is_empty() {
        return Err(VolumeError::NoPoints);
    }
    let k = points.len();
    let mut out = Array2::zeros((pg.len(), k));
    let mut row = vec![0.0; k];
    for i in 0..pg.len() {
        if pg.valid[i] {
            for (r, p) in row.iter_mut().zip(points) {
                *r = -pg.normalized_sq_distance(i, p) / temperature;
            }
            softmax_in_place(&mut row);
        } else {
            row.fill(1.0 / k as f64);
        }
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
    }
    Ok(out)
}

/// Epipolar mask for view `a`.
///
/// Each partner supplies the fundamental matrix mapping its pixels to lines
/// in view `a` and its own projection of the grid. Entry `(i, j)` is
/// `exp(−δ²/2σ²)`, with `δ` the normalized distance from point `j` to the
/// line induced by voxel `i`, averaged over partners where the voxel is
/// valid. Degenerate lines contribute 1; invalid voxels in view `a` get 0.
pub fn epipolar_mask(
    pg_a: &ProjectedGrid,
    points_a: &[Point2],
    partners: &[(&FundamentalMatrix, &ProjectedGrid)],
    sigma: f64,
) -> Result<Array2<f64>> {
    if !(sigma > 0.0) {
        return Err(VolumeError::NonPositiveSigma(sigma));
    }
    for (f, pg_b) in partners {
        if f.view_b != pg_a.view_id || f.view_a != pg_b.view_id || pg_b.len() != pg_a.len() {
            return Err(VolumeError::ShapeMismatch(format!(
                "partner F maps view {} to {}, expected {} to {}",
                f.view_a, f.view_b, pg_b.view_id, pg_a.view_id
            )));
        }
    }
    let mut out = Array2::zeros((pg_a.len(), points_a.len()));
    let two_s2 = 2.0 * sigma * sigma;
    for i in 0..pg_a.len() {
        if !pg_a.valid[i] {
            continue;
        }
        let mut count = 0usize;
        let mut acc = vec![0.0; points_a.len()];
        for (f, pg_b) in partners {
            if !pg_b.valid[i] {
                continue;
            }
            count += 1;
            let line = normalized_line(&f.line_in_b(&pg_b.pixels[i]));
            for (a, p) in acc.iter_mut().zip(points_a) {
                *a += match line {
                    Some(l) => {
                        let d = line_distance(&l, p) / pg_a.image_diag;
                        (-d * d / two_s2).exp()
                    }
                    None => 1.0,
                };
            }
        }
        for (j, a) in acc.iter().enumerate() {
            out[[i, j]] = if count == 0 { 1.0 } else { a / count as f64 };
        }
    }
    Ok(out)
}

/// Reprojection mask for view `a`: entry `(i, j)` averages
/// `exp(−ρ_b²/2σ_px²)` over partner views `b` that see point `j`, with
/// `ρ_b` the normalized distance between voxel `i` projected into `b` and
/// the track of `j` in `b`, and `σ_px = sigma_sfm · SFM_PIXEL_SCALE`.
/// Voxels behind a partner camera contribute 0.
pub fn sfm_mask(
    pg_a: &ProjectedGrid,
    partners: &[(&ProjectedGrid, &[Option<Point2>])],
    n_points: usize,
    sigma_sfm: f64,
) -> Result<Array2<f64>> {
    if !(sigma_sfm > 0.0) {
        return Err(VolumeError::NonPositiveSigma(sigma_sfm));
    }
    for (pg_b, tracks) in partners {
        if pg_b.len() != pg_a.len() || tracks.len() != n_points {
            return Err(VolumeError::ShapeMismatch("sfm partner shape".into()));
        }
    }
    let s = sigma_sfm * SFM_PIXEL_SCALE;
    let two_s2 = 2.0 * s * s;
    let mut out = Array2::zeros((pg_a.len(), n_points));
    for i in 0..pg_a.len() {
        if !pg_a.valid[i] {
            continue;
        }
        for j in 0..n_points {
            let (mut acc, mut count) = (0.0, 0usize);
            for (pg_b, tracks) in partners {
                if let Some(x) = tracks[j] {
                    count += 1;
                    if pg_b.valid[i] {
                        acc += (-pg_b.normalized_sq_distance(i, &x) / two_s2).exp();
                    }
                }
            }
            if count > 0 {
                out[[i, j]] = acc / count as f64;
            }
        }
    }
    Ok(out)
}

/// `A · max(M_epi, M_sfm)` elementwise, without renormalizing rows.
pub fn combine_masks(
    attention: &Array2<f64>,
    epipolar: &Array2<f64>,
    sfm: &Array2<f64>,
) -> Result<Array2<f64>> {
    if attention.dim() != epipolar.dim() || attention.dim() != sfm.dim() {
        return Err(VolumeError::ShapeMismatch(format!(
            "attention {:?}, epipolar {:?}, sfm {:?}",
            attention.dim(),
            epipolar.dim(),
            sfm.dim()
        )));
    }
    let mut out = attention.clone();
    ndarray::Zip::from(&mut out)
        .and(epipolar)
        .and(sfm)
        .for_each(|a, &e, &s| *a *= e.max(s));
    Ok(out)
}

/// Counts multiply-adds performed by [`populate_volume`].
#[derive(Debug, Default)]
pub struct OpCounter(AtomicU64);

impl OpCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }
}

/// `V_feat[i] = Σ_views Σ_points weight(i, j) · feature(j)`, evaluated in
/// blocks of `chunk_size` voxels. Each voxel is summed in the same order
/// whatever the chunking, so the result does not depend on `chunk_size`.
pub fn populate_volume(
    weights: &[Array2<f64>],
    features: &[Array2<f64>],
    chunk_size: usize,
    counter: Option<&OpCounter>,
) -> Result<Array2<f64>> {
    if chunk_size == 0 {
        return Err(VolumeError::ZeroChunk);
    }
    if weights.len() != features.len() || weights.is_empty() {
        return Err(VolumeError::DimensionMismatch(format!(
            "{} weight fields for {} feature sets",
            weights.len(),
            features.len()
        )));
    }
    let (n_vox, k) = weights[0].dim();
    let d = features[0].ncols();
    for (w, f) in weights.iter().zip(features) {
        if w.dim() != (n_vox, k) || f.dim() != (k, d) {
            return Err(VolumeError::DimensionMismatch(format!(
                "weights {:?} and features {:?}, expected ({n_vox}, {k}) and ({k}, {d})",
                w.dim(),
                f.dim()
            )));
        }
    }
    let mut out = Array2::zeros((n_vox, d));
    out.axis_chunks_iter_mut(Axis(0), chunk_size)
        .into_par_iter()
        .enumerate()
        .for_each(|(c, mut block)| {
            let start = c * chunk_size;
            let rows = block.nrows();
            for (w, f) in weights.iter().zip(features) {
                accumulate(&mut block, w.slice(s![start..start + rows, ..]), f.view());
            }
            if let Some(counter) = counter {
                counter.add((rows * weights.len() * k * d) as u64);
            }
        });
    Ok(out)
}

fn accumulate(block: &mut ndarray::ArrayViewMut2<f64>, w: ArrayView2<f64>, f: ArrayView2<f64>) {
    for (mut out_row, w_row) in block.outer_iter_mut().zip(w.outer_iter()) {
        for (&wij, f_row) in w_row.iter().zip(f.outer_iter()) {
            out_row.scaled_add(wij, &f_row);
        }
    }
}

fn normalized_line(l: &Vector3<f64>) -> Option<Vector3<f64>> {
    let n = l.x.hypot(l.y);
    (n * n >= 1e-20).then(|| l / n)
}

fn line_distance(unit_line: &Vector3<f64>, x: &Point2) -> f64 {
    (unit_line.x * x.x + unit_line.y * x.y + unit_line.z).abs()
}

/// How voxels weight the tracked points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Distance attention with epipolar and reprojection masks.
    Masked,
    /// Every visible point weighted equally; no masks.
    Uniform,
}

/// Temperature and mask widths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams {
    pub temperature: f64,
    pub sigma_epipolar: f64,
    pub sigma_sfm: f64,
}

impl Default for AttentionParams {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            sigma_epipolar: DEFAULT_SIGMA_EPIPOLAR,
            sigma_sfm: DEFAULT_SIGMA_SFM,
        }
    }
}

/// Per-view attention, masks and their product.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionField {
    pub view_id: usize,
    pub temperature: f64,
    pub attention: Array2<f64>,
    pub epipolar: Array2<f64>,
    pub sfm: Array2<f64>,
    pub combined: Array2<f64>,
}

/// Camera-dependent quantities shared by every frame of a sequence:
/// the grid, its projections, and the unit epipolar line each voxel induces
/// in every view from every partner view.
#[derive(Debug, Clone)]
pub struct GridGeometry {
    pub grid: VolumetricGrid,
    pub projected: Vec<ProjectedGrid>,
    /// `lines[a][p][i]`: line in view `a` induced by voxel `i` through the
    /// `p`-th partner of `a` (partners are the other views in order).
    lines: Vec<Vec<Vec<Option<Vector3<f64>>>>>,
}

fn partners_of(a: usize, n: usize) -> impl Iterator<Item = usize> {
    (0..n).filter(move |&b| b != a)
}

impl GridGeometry {
    pub fn new(grid: VolumetricGrid, cams: &[CameraParams]) -> Self {
        let projected: Vec<ProjectedGrid> = cams.iter().map(|c| project_grid(&grid, c)).collect();
        let n = cams.len();
        let lines = (0..n)
            .map(|a| {
                partners_of(a, n)
                    .map(|b| match fundamental_matrix(&cams[b], &cams[a]) {
                        Ok(f) => (0..grid.len())
                            .map(|i| {
                                if projected[b].valid[i] {
                                    normalized_line(&f.line_in_b(&projected[b].pixels[i]))
                                } else {
                                    None
                                }
                            })
                            .collect(),
                        Err(_) => vec![None; grid.len()],
                    })
                    .collect()
            })
            .collect();
        Self {
            grid,
            projected,
            lines,
        }
    }

    pub fn n_views(&self) -> usize {
        self.projected.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.grid.len()
    }
}

/// Track-dependent distances for one frame.
#[derive(Debug, Clone)]
pub struct FrameDistances {
    /// `tracks[a][j]`: pixel of point `j` in view `a` when visible.
    pub tracks: Vec<Vec<Option<Point2>>>,
    /// `rho2[a][(i, j)]`: normalized squared distance from voxel `i`'s
    /// projection to point `j` in view `a` (0 when `j` is not visible).
    rho2: Vec<Array2<f64>>,
    /// `epi2[a][p][(i, j)]`: normalized squared epipolar distance; NaN when
    /// the line is unavailable.
    epi2: Vec<Vec<Array2<f64>>>,
}

impl FrameDistances {
    pub fn new(geom: &GridGeometry, tracks: Vec<Vec<Option<Point2>>>) -> Self {
        let n_vox = geom.n_voxels();
        let k = tracks.first().map_or(0, Vec::len);
        let rho2 = geom
            .projected
            .iter()
            .zip(&tracks)
            .map(|(pg, tr)| {
                let mut m = Array2::zeros((n_vox, k));
                for i in 0..n_vox {
                    for (j, x) in tr.iter().enumerate() {
                        if let Some(x) = x {
                            m[[i, j]] = pg.normalized_sq_distance(i, x);
                        }
                    }
                }
                m
            })
            .collect();
        let epi2 = (0..geom.n_views())
            .map(|a| {
                let diag2 = geom.projected[a].image_diag.powi(2);
                geom.lines[a]
                    .iter()
                    .map(|lines| {
                        let mut m = Array2::from_elem((n_vox, k), f64::NAN);
                        for (i, line) in lines.iter().enumerate() {
                            if let Some(l) = line {
                                for (j, x) in tracks[a].iter().enumerate() {
                                    if let Some(x) = x {
                                        m[[i, j]] = line_distance(l, x).powi(2) / diag2;
                                    }
                                }
                            }
                        }
                        m
                    })
                    .collect()
            })
            .collect();
        Self { tracks, rho2, epi2 }
    }

    pub fn n_points(&self) -> usize {
        self.tracks.first().map_or(0, Vec::len)
    }
}

/// One voxel's weights in one view, with derivatives with respect to the
/// logarithms of the temperature and the two mask widths.
#[derive(Debug, Clone, Default)]
pub struct WeightRow {
    pub attention: Vec<f64>,
    pub epipolar: Vec<f64>,
    pub sfm: Vec<f64>,
    pub weight: Vec<f64>,
    pub d_log_temperature: Vec<f64>,
    pub d_log_sigma_epipolar: Vec<f64>,
    pub d_log_sigma_sfm: Vec<f64>,
}

impl WeightRow {
    fn reset(&mut self, k: usize) {
        for v in [
            &mut self.attention,
            &mut self.epipolar,
            &mut self.sfm,
            &mut self.weight,
            &mut self.d_log_temperature,
            &mut self.d_log_sigma_epipolar,
            &mut self.d_log_sigma_sfm,
        ] {
            v.clear();
            v.resize(k, 0.0);
        }
    }
}

/// Fills `row` with the weights voxel `i` gives each point of view `a`.
pub fn weight_row(
    geom: &GridGeometry,
    dist: &FrameDistances,
    params: &AttentionParams,
    mode: AttentionMode,
    a: usize,
    i: usize,
    row: &mut WeightRow,
) {
    let k = dist.n_points();
    row.reset(k);
    let tracks = &dist.tracks[a];
    let n_visible = tracks.iter().filter(|t| t.is_some()).count();
    if n_visible == 0 {
        return;
    }
    if !geom.projected[a].valid[i] {
        // Uniform attention, zero masks: the voxel contributes nothing.
        for j in 0..k {
            if tracks[j].is_some() {
                row.attention[j] = 1.0 / n_visible as f64;
            }
        }
        return;
    }
    if mode == AttentionMode::Uniform {
        for j in 0..k {
            if tracks[j].is_some() {
                row.attention[j] = 1.0 / n_visible as f64;
                row.epipolar[j] = 1.0;
                row.sfm[j] = 1.0;
                row.weight[j] = row.attention[j];
            }
        }
        return;
    }

    let t = params.temperature;
    let rho2 = dist.rho2[a].row(i);
    let mut max_logit = f64::NEG_INFINITY;
    for j in 0..k {
        if tracks[j].is_some() {
            max_logit = max_logit.max(-rho2[j] / t);
        }
    }
    let (mut sum, mut mean_scaled) = (0.0, 0.0);
    for j in 0..k {
        if tracks[j].is_some() {
            let e = (-rho2[j] / t - max_logit).exp();
            row.attention[j] = e;
            sum += e;
        }
    }
    for j in 0..k {
        row.attention[j] /= sum;
        mean_scaled += row.attention[j] * rho2[j] / t;
    }

    let n = geom.n_views();
    let two_se2 = 2.0 * params.sigma_epipolar.powi(2);
    let s_sfm = params.sigma_sfm * SFM_PIXEL_SCALE;
    let two_ss2 = 2.0 * s_sfm * s_sfm;
    for j in 0..k {
        if tracks[j].is_none() {
            continue;
        }
        let (mut epi, mut d_epi, mut n_epi) = (0.0, 0.0, 0usize);
        let (mut sfm, mut d_sfm, mut n_sfm) = (0.0, 0.0, 0usize);
        for (p, b) in partners_of(a, n).enumerate() {
            if geom.projected[b].valid[i] {
                n_epi += 1;
                let d2 = dist.epi2[a][p][[i, j]];
                if d2.is_nan() {
                    epi += 1.0;
                } else {
                    let e = (-d2 / two_se2).exp();
                    epi += e;
                    d_epi += e * 2.0 * d2 / two_se2;
                }
            }
            if dist.tracks[b][j].is_some() {
                n_sfm += 1;
                if geom.projected[b].valid[i] {
                    let r2 = dist.rho2[b][[i, j]];
                    let e = (-r2 / two_ss2).exp();
                    sfm += e;
                    d_sfm += e * 2.0 * r2 / two_ss2;
                }
            }
        }
        let (epi, d_epi) = if n_epi == 0 {
            (1.0, 0.0)
        } else {
            (epi / n_epi as f64, d_epi / n_epi as f64)
        };
        let (sfm, d_sfm) = if n_sfm == 0 {
            (0.0, 0.0)
        } else {
            (sfm / n_sfm as f64, d_sfm / n_sfm as f64)
        };
        let att = row.attention[j];
        row.epipolar[j] = epi;
        row.sfm[j] = sfm;
        let mask = epi.max(sfm);
        row.weight[j] = att * mask;
        row.d_log_temperature[j] = att * (rho2[j] / t - mean_scaled) * mask;
        if epi >= sfm {
            row.d_log_sigma_epipolar[j] = att * d_epi;
        } else {
            row.d_log_sigma_sfm[j] = att * d_sfm;
        }
    }
}

/// Full attention fields for every view of one frame.
pub fn attention_fields(
    geom: &GridGeometry,
    dist: &FrameDistances,
    params: &AttentionParams,
    mode: AttentionMode,
) -> Vec<AttentionField> {
    let (n_vox, k) = (geom.n_voxels(), dist.n_points());
    (0..geom.n_views())
        .map(|a| {
            let rows: Vec<WeightRow> = (0..n_vox)
                .into_par_iter()
                .map_init(WeightRow::default, |scratch, i| {
                    weight_row(geom, dist, params, mode, a, i, scratch);
                    scratch.clone()
                })
                .collect();
            let gather = |f: fn(&WeightRow) -> &Vec<f64>| {
                let mut m = Array2::zeros((n_vox, k));
                for (i, r) in rows.iter().enumerate() {
                    m.row_mut(i).assign(&ndarray::ArrayView1::from(f(r)));
                }
                m
            };
            AttentionField {
                view_id: geom.projected[a].view_id,
                temperature: params.temperature,
                attention: gather(|r| &r.attention),
                epipolar: gather(|r| &r.epipolar),
                sfm: gather(|r| &r.sfm),
                combined: gather(|r| &r.weight),
            }
        })
        .collect()
}

/// Little-endian f32 dump of combined weights, laid out `[view][voxel][point]`.
pub fn fields_to_le_bytes(fields: &[AttentionField]) -> Vec<u8> {
    fields
        .iter()
        .flat_map(|f| f.combined.iter().flat_map(|&v| (v as f32).to_le_bytes()))
        .collect()
}
