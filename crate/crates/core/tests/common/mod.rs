//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use mvtrack::geometry::{CameraParams, Point3};

/// Camera 2.5–4 units from the origin, looking at a point near it.
pub fn random_camera<R: Rng>(rng: &mut R, view_id: usize) -> CameraParams {
    loop {
        let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if dir.norm() < 0.2 {
            continue;
        }
        let center = Point3::from(dir.normalize() * rng.gen_range(2.5..4.0));
        let target = Point3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
        let f = rng.gen_range(300.0..700.0);
        let k = Matrix3::new(
            f,
            0.0,
            rng.gen_range(280.0..360.0),
            0.0,
            f * rng.gen_range(0.95..1.05),
            rng.gen_range(200.0..280.0),
            0.0,
            0.0,
            1.0,
        );
        if let Ok(cam) = CameraParams::look_at(view_id, k, center, target, Vector3::z()) {
            return cam;
        }
    }
}

pub fn random_point<R: Rng>(rng: &mut R, half_extent: f64) -> Point3 {
    Point3::new(
        rng.gen_range(-half_extent..half_extent),
        rng.gen_range(-half_extent..half_extent),
        rng.gen_range(-half_extent..half_extent),
    )
}

/// Central `q`-quantile of `v` (sorts in place).
pub fn quantile(v: &mut [f64], q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((v.len() as f64 - 1.0) * q).round() as usize;
    v[k]
}
