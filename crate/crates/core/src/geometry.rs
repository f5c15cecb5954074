//! Pinhole cameras, projection, epipolar geometry and DLT triangulation.
//!
//! World points are expressed in metres. A camera maps a world point `p` to
//! camera coordinates `R·p + t` and then to pixels through the intrinsic
//! matrix `K`. Depth is the third camera coordinate and is returned signed:
//! points behind a camera are reported, not rejected.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point2 = nalgebra::Point2<f64>;
pub type Point3 = nalgebra::Point3<f64>;

/// Smallest |depth| accepted by [`project`].
pub const MIN_DEPTH: f64 = 1e-12;

const ORTHONORMAL_TOL: f64 = 1e-9;
const MIN_BASELINE: f64 = 1e-10;
const MIN_LINE_NORM_SQ: f64 = 1e-20;
const DLT_CONDITION_LIMIT: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera {view_id}: {reason}")]
    InvalidCamera { view_id: usize, reason: String },
    #[error("point lies on the camera plane (depth {depth:e})")]
    DegenerateProjection { depth: f64 },
    #[error("views {view_a} and {view_b} share a camera centre; the fundamental matrix vanishes")]
    DegeneratePair { view_a: usize, view_b: usize },
    #[error("epipolar line has a vanishing normal")]
    DegenerateLine,
    #[error("triangulation needs at least 2 views, got {got}")]
    InsufficientViews { got: usize },
    #[error("triangulation is ill-conditioned (singular value ratio {ratio:e})")]
    IllConditioned { ratio: f64 },
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("calibration io: {0}")]
    Io(String),
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

/// Intrinsics and extrinsics of one calibrated view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraParams {
    view_id: usize,
    k: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    k_inv: Matrix3<f64>,
}

impl CameraParams {
    pub fn new(view_id: usize, k: Matrix3<f64>, r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        let invalid = |reason: &str| GeometryError::InvalidCamera {
            view_id,
            reason: reason.to_string(),
        };
        if k.iter().chain(r.iter()).chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite entry"));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(invalid("K must be upper triangular"));
        }
        if k[(2, 2)] != 1.0 {
            return Err(invalid("K[2][2] must be 1"));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(invalid("focal lengths must be positive"));
        }
        let gram = r * r.transpose() - Matrix3::identity();
        if gram.amax() > ORTHONORMAL_TOL {
            return Err(invalid("R is not orthonormal"));
        }
        if (r.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(invalid("det(R) must be +1"));
        }
        let k_inv = k.try_inverse().ok_or_else(|| invalid("K is singular"))?;
        Ok(Self {
            view_id,
            k,
            r,
            t,
            k_inv,
        })
    }

    /// Camera at `center` looking at `target`, with `up` fixing the roll.
    pub fn look_at(
        view_id: usize,
        k: Matrix3<f64>,
        center: Point3,
        target: Point3,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - center).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(GeometryError::InvalidCamera {
                view_id,
                reason: "viewing direction parallel to up vector".into(),
            });
        }
        let right = right.normalize();
        // Image y grows downwards.
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * center.coords);
        Self::new(view_id, k, r, t)
    }

    pub fn view_id(&self) -> usize {
        self.view_id
    }

    pub fn k(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn r(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn t(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn k_inv(&self) -> &Matrix3<f64> {
        &self.k_inv
    }

    pub fn with_view_id(mut self, view_id: usize) -> Self {
        self.view_id = view_id;
        self
    }

    /// Optical centre in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> Point3 {
        Point3::from(-(self.r.transpose() * self.t))
    }

    /// Unit world-frame direction of the viewing ray through `pixel`.
    pub fn ray_direction(&self, pixel: &Point2) -> Vector3<f64> {
        let cam = self.k_inv * Vector3::new(pixel.x, pixel.y, 1.0);
        (self.r.transpose() * cam).normalize()
    }

    /// World point of `pixel` at the given depth (third camera coordinate).
    pub fn back_project(&self, pixel: &Point2, depth: f64) -> Point3 {
        let cam = self.k_inv * Vector3::new(pixel.x, pixel.y, 1.0) * depth;
        Point3::from(self.r.transpose() * (cam - self.t))
    }

    /// Pixel scale used to normalise image-plane distances.
    ///
    /// The principal point is assumed to sit at the image centre, so the
    /// diagonal is `2·‖(cx, cy)‖`. Cameras whose principal point is at the
    /// origin fall back to a scale of 1 (raw pixels).
    pub fn image_diagonal(&self) -> f64 {
        let d = 2.0 * self.k[(0, 2)].hypot(self.k[(1, 2)]);
        if d > 0.0 {
            d
        } else {
            1.0
        }
    }

    /// 3×4 projection matrix `K[R|t]`.
    pub fn projection_matrix(&self) -> nalgebra::Matrix3x4<f64> {
        let mut rt = nalgebra::Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        rt.set_column(3, &self.t);
        self.k * rt
    }
}

/// Projects a world point; returns pixel coordinates and signed depth.
pub fn project(p: &Point3, cam: &CameraParams) -> Result<(Point2, f64)> {
    if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let xc = cam.r * p.coords + cam.t;
    let depth = xc.z;
    if depth.abs() < MIN_DEPTH {
        return Err(GeometryError::DegenerateProjection { depth });
    }
    let h = cam.k * xc;
    Ok((Point2::new(h.x / h.z, h.y / h.z), depth))
}

/// Jacobian of the pixel coordinates of [`project`] with respect to the world point.
pub fn project_jacobian(p: &Point3, cam: &CameraParams) -> Result<nalgebra::Matrix2x3<f64>> {
    let xc = cam.r * p.coords + cam.t;
    let z = xc.z;
    if z.abs() < MIN_DEPTH {
        return Err(GeometryError::DegenerateProjection { depth: z });
    }
    let h = cam.k * xc;
    let (u, v) = (h.x / z, h.y / z);
    let k = &cam.k;
    // d(u,v)/d(xc); third row of K is (0,0,1).
    let d_cam = nalgebra::Matrix2x3::new(
        k[(0, 0)] / z,
        k[(0, 1)] / z,
        (k[(0, 2)] - u) / z,
        0.0,
        k[(1, 1)] / z,
        (k[(1, 2)] - v) / z,
    );
    Ok(d_cam * cam.r)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Fundamental matrix of an ordered view pair, scaled to unit Frobenius norm.
///
/// Satisfies `x_bᵀ F x_a = 0` for homogeneous pixel coordinates of the same
/// world point seen in view `a` and view `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalMatrix {
    pub matrix: Matrix3<f64>,
    pub view_a: usize,
    pub view_b: usize,
}

impl FundamentalMatrix {
    /// Epipolar line in view `b` of pixel `x_a` in view `a`.
    pub fn line_in_b(&self, x_a: &Point2) -> Vector3<f64> {
        self.matrix * Vector3::new(x_a.x, x_a.y, 1.0)
    }

    /// Algebraic epipolar residual `x_bᵀ F x_a`.
    pub fn residual(&self, x_a: &Point2, x_b: &Point2) -> f64 {
        Vector3::new(x_b.x, x_b.y, 1.0).dot(&self.line_in_b(x_a))
    }

    /// The pair with roles of the views swapped (`Fᵀ`).
    pub fn transposed(&self) -> Self {
        Self {
            matrix: self.matrix.transpose(),
            view_a: self.view_b,
            view_b: self.view_a,
        }
    }
}

/// `K_b^{-T} [t_b − R_b R_a^{-1} t_a]_× R_b R_a^{-1} K_a^{-1}` without normalisation.
pub(crate) fn fundamental_raw(cam_a: &CameraParams, cam_b: &CameraParams) -> Matrix3<f64> {
    let r_ba = cam_b.r * cam_a.r.transpose();
    let t_ba = cam_b.t - r_ba * cam_a.t;
    cam_b.k_inv.transpose() * skew(&t_ba) * r_ba * cam_a.k_inv
}

pub fn fundamental_matrix(cam_a: &CameraParams, cam_b: &CameraParams) -> Result<FundamentalMatrix> {
    let baseline = (cam_a.center() - cam_b.center()).norm();
    if baseline < MIN_BASELINE {
        return Err(GeometryError::DegeneratePair {
            view_a: cam_a.view_id,
            view_b: cam_b.view_id,
        });
    }
    let raw = fundamental_raw(cam_a, cam_b);
    let norm = raw.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(GeometryError::DegeneratePair {
            view_a: cam_a.view_id,
            view_b: cam_b.view_id,
        });
    }
    Ok(FundamentalMatrix {
        matrix: raw / norm,
        view_a: cam_a.view_id,
        view_b: cam_b.view_id,
    })
}

/// Euclidean distance from `x` to the line `a·x + b·y + c = 0`.
pub fn epipolar_distance(x: &Point2, line: &Vector3<f64>) -> Result<f64> {
    let n2 = line.x * line.x + line.y * line.y;
    if n2 < MIN_LINE_NORM_SQ {
        return Err(GeometryError::DegenerateLine);
    }
    Ok((line.x * x.x + line.y * x.y + line.z).abs() / n2.sqrt())
}

/// Linear (DLT) triangulation from two or more calibrated observations.
///
/// Pixel coordinates are Hartley-normalised before the homogeneous system is
/// solved; the solution is the right singular vector of the smallest
/// singular value.
pub fn dlt_triangulate(obs: &[(&CameraParams, Point2)]) -> Result<Point3> {
    if obs.len() < 2 {
        return Err(GeometryError::InsufficientViews { got: obs.len() });
    }
    if obs
        .iter()
        .any(|(_, x)| !(x.x.is_finite() && x.y.is_finite()))
    {
        return Err(GeometryError::NonFinite);
    }
    let n = obs.len() as f64;
    let (sx, sy) = obs
        .iter()
        .fold((0.0, 0.0), |(sx, sy), (_, x)| (sx + x.x, sy + x.y));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = obs
        .iter()
        .map(|(_, x)| (x.x - cx).hypot(x.y - cy))
        .sum::<f64>()
        / n;
    let scale = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    let norm = Matrix3::new(scale, 0.0, -scale * cx, 0.0, scale, -scale * cy, 0.0, 0.0, 1.0);

    let mut a = DMatrix::<f64>::zeros(2 * obs.len(), 4);
    for (row, (cam, x)) in obs.iter().enumerate() {
        let p = norm * cam.projection_matrix();
        let xn = norm * Vector3::new(x.x, x.y, 1.0);
        let (u, v) = (xn.x / xn.z, xn.y / xn.z);
        for (k, coeff) in [(0usize, u), (1usize, v)] {
            let mut r = p.row(2) * coeff - p.row(k);
            let rn = r.norm();
            if rn > 0.0 {
                r /= rn;
            }
            for c in 0..4 {
                a[(2 * row + k, c)] = r[c];
            }
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::IllConditioned { ratio: 0.0 })?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |k: usize| svd.singular_values[order[k]];
    let largest = sv(0);
    // The null direction is the last one; the next one must be well separated
    // from zero or the rays do not pin down a single point.
    let ratio = if largest > 0.0 { sv(2) / largest } else { 0.0 };
    if ratio < DLT_CONDITION_LIMIT {
        return Err(GeometryError::IllConditioned { ratio });
    }
    let h = v_t.row(order[3]);
    if h[3].abs() < 1e-14 {
        return Err(GeometryError::IllConditioned { ratio });
    }
    let p = Point3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    Ok(p)
}

/// One camera as stored in calibration and scene files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub view_id: usize,
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<&CameraParams> for CameraRecord {
    fn from(cam: &CameraParams) -> Self {
        let row_major = |m: &Matrix3<f64>| {
            let mut out = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    out[3 * r + c] = m[(r, c)];
                }
            }
            out
        };
        Self {
            view_id: cam.view_id,
            k: row_major(&cam.k),
            r: row_major(&cam.r),
            t: [cam.t.x, cam.t.y, cam.t.z],
        }
    }
}

impl TryFrom<&CameraRecord> for CameraParams {
    type Error = GeometryError;

    fn try_from(rec: &CameraRecord) -> Result<Self> {
        CameraParams::new(
            rec.view_id,
            Matrix3::from_row_slice(&rec.k),
            Matrix3::from_row_slice(&rec.r),
            Vector3::from_column_slice(&rec.t),
        )
    }
}

pub fn cameras_to_records(cams: &[CameraParams]) -> Vec<CameraRecord> {
    cams.iter().map(CameraRecord::from).collect()
}

pub fn cameras_from_records(records: &[CameraRecord]) -> Result<Vec<CameraParams>> {
    records.iter().map(CameraParams::try_from).collect()
}

/// Reads a calibration file: a JSON array of `{view_id, K, R, t}` objects.
pub fn read_calibration(path: &Path) -> Result<Vec<CameraParams>> {
    let text = fs::read_to_string(path).map_err(|e| GeometryError::Io(e.to_string()))?;
    let records: Vec<CameraRecord> =
        serde_json::from_str(&text).map_err(|e| GeometryError::Io(e.to_string()))?;
    cameras_from_records(&records)
}

pub fn write_calibration(path: &Path, cams: &[CameraParams]) -> Result<()> {
    let text = serde_json::to_string_pretty(&cameras_to_records(cams))
        .map_err(|e| GeometryError::Io(e.to_string()))?;
    fs::write(path, text).map_err(|e| GeometryError::Io(e.to_string()))
}


#[cfg(test)]
mod tests {
    use super::test_support::random_camera;
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_cam(view_id: usize, t: Vector3<f64>) -> CameraParams {
        CameraParams::new(view_id, Matrix3::identity(), Matrix3::identity(), t).unwrap()
    }

    #[test]
    fn project_identity_camera_on_axis() {
        let cam = identity_cam(0, Vector3::zeros());
        let (x, depth) = project(&Point3::new(0.0, 0.0, 1.0), &cam).unwrap();
        assert_eq!((x.x, x.y, depth), (0.0, 0.0, 1.0));
    }

    #[test]
    fn project_scales_by_focal_length() {
        let k = Matrix3::from_diagonal(&Vector3::new(2.0, 2.0, 1.0));
        let cam = CameraParams::new(0, k, Matrix3::identity(), Vector3::zeros()).unwrap();
        let (x, depth) = project(&Point3::new(1.0, 0.0, 2.0), &cam).unwrap();
        assert_relative_eq!(x.x, 1.0);
        assert_relative_eq!(x.y, 0.0);
        assert_relative_eq!(depth, 2.0);
    }

    #[test]
    fn project_rejects_points_on_camera_plane() {
        let cam = identity_cam(0, Vector3::zeros());
        assert!(matches!(
            project(&Point3::new(1.0, 1.0, 0.0), &cam),
            Err(GeometryError::DegenerateProjection { .. })
        ));
        // Behind the camera is reported, not rejected.
        let (_, depth) = project(&Point3::new(0.0, 0.0, -2.0), &cam).unwrap();
        assert_eq!(depth, -2.0);
    }

    #[test]
    fn back_projected_ray_contains_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let cam = random_camera(&mut rng, 0);
            let p = Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let (x, _) = project(&p, &cam).unwrap();
            let dir = cam.ray_direction(&x);
            let to_p = p - cam.center();
            let off_ray = (to_p - dir * to_p.dot(&dir)).norm();
            assert!(off_ray < 1e-9, "residual {off_ray}");
        }
    }

    #[test]
    fn camera_validation() {
        let bad_r = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(CameraParams::new(0, Matrix3::identity(), bad_r, Vector3::zeros()).is_err());
        let mut k = Matrix3::identity();
        k[(1, 0)] = 0.5;
        assert!(CameraParams::new(0, k, Matrix3::identity(), Vector3::zeros()).is_err());
        let k = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        assert!(CameraParams::new(0, k, Matrix3::identity(), Vector3::zeros()).is_err());
    }

    #[test]
    fn fundamental_of_identical_cameras_is_degenerate() {
        let cam = identity_cam(0, Vector3::new(0.3, 0.0, 1.0));
        let other = cam.clone().with_view_id(1);
        assert!(fundamental_raw(&cam, &other).amax() == 0.0);
        assert_eq!(
            fundamental_matrix(&cam, &other),
            Err(GeometryError::DegeneratePair { view_a: 0, view_b: 1 })
        );
    }

    #[test]
    fn fundamental_of_x_translation_is_skew_of_x() {
        let a = identity_cam(0, Vector3::zeros());
        let b = identity_cam(1, Vector3::new(1.0, 0.0, 0.0));
        let f = fundamental_matrix(&a, &b).unwrap();
        let expected = skew(&Vector3::new(1.0, 0.0, 0.0));
        let cos = f.matrix.dot(&expected) / (f.matrix.norm() * expected.norm());
        assert_relative_eq!(cos.abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fundamental_epipolar_residual_and_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random_camera(&mut rng, 0);
            let b = random_camera(&mut rng, 1);
            let f = fundamental_matrix(&a, &b).unwrap();
            assert_relative_eq!(f.matrix.norm(), 1.0, epsilon = 1e-12);
            let sv = f.matrix.singular_values();
            let (mx, mn) = (sv.max(), sv.min());
            assert!(mn < 1e-8 * mx);
            for _ in 0..20 {
                let p = Point3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let (xa, _) = project(&p, &a).unwrap();
                let (xb, _) = project(&p, &b).unwrap();
                assert!(f.residual(&xa, &xb).abs() < 1e-8);
            }
            let swapped = fundamental_matrix(&b, &a).unwrap();
            let cos = swapped.matrix.dot(&f.matrix.transpose());
            assert!(cos.abs() > 1.0 - 1e-9);
        }
    }

    #[test]
    fn epipolar_distance_examples() {
        let d = |x: f64, y: f64, l: [f64; 3]| {
            epipolar_distance(&Point2::new(x, y), &Vector3::from(l)).unwrap()
        };
        assert_eq!(d(0.0, 0.0, [0.0, 1.0, 0.0]), 0.0);
        assert_eq!(d(0.0, 3.0, [0.0, 1.0, 0.0]), 3.0);
        assert_eq!(d(1.0, 1.0, [1.0, 1.0, -2.0]), 0.0);
        assert_eq!(
            epipolar_distance(&Point2::origin(), &Vector3::new(0.0, 0.0, 1.0)),
            Err(GeometryError::DegenerateLine)
        );
    }

    #[test]
    fn dlt_recovers_noiseless_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Point3::new(0.3, -0.2, 0.5);
        let cams: Vec<_> = (0..3).map(|v| random_camera(&mut rng, v)).collect();
        let obs: Vec<_> = cams.iter().map(|c| (c, project(&p, c).unwrap().0)).collect();
        let q = dlt_triangulate(&obs).unwrap();
        assert!((q - p).norm() < 1e-9);
    }

    #[test]
    fn dlt_rejects_degenerate_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cam = random_camera(&mut rng, 0);
        let twin = cam.clone().with_view_id(1);
        let p = Point3::new(0.1, 0.2, 0.3);
        let x = project(&p, &cam).unwrap().0;
        assert!(matches!(
            dlt_triangulate(&[(&cam, x)]),
            Err(GeometryError::InsufficientViews { got: 1 })
        ));
        assert!(matches!(
            dlt_triangulate(&[(&cam, x), (&twin, x)]),
            Err(GeometryError::IllConditioned { .. })
        ));
    }

    #[test]
    fn calibration_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cams: Vec<_> = (0..3).map(|v| random_camera(&mut rng, v)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.json");
        write_calibration(&path, &cams).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"K\"") && text.contains("\"view_id\""));
        assert_eq!(read_calibration(&path).unwrap(), cams);
    }
}
