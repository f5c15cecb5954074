//! Distance attention and volume population properties.

mod common;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvtrack::geometry::{project, Point2};
use mvtrack::volume::{distance_attention, make_grid, populate_volume, project_grid, OpCounter};

fn random_points(rng: &mut ChaCha8Rng, k: usize) -> Vec<Point2> {
    (0..k).map(|_| Point2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0))).collect()
}

#[test]
fn attention_rows_are_distributions() {
    let grid = make_grid(8).unwrap();
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = common::random_camera(&mut rng, 0);
        let pg = project_grid(&grid, &cam);
        let k = rng.gen_range(1..10);
        let points = random_points(&mut rng, k);
        let t = 10f64.powf(rng.gen_range(-3.0..0.0));
        let a = distance_attention(&pg, &points, t).unwrap();
        for row in a.outer_iter() {
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            assert!((row.sum() - 1.0).abs() < 1e-12, "seed {seed}: row sum {}", row.sum());
        }
    }
}

#[test]
fn tiny_temperature_selects_the_nearest_point() {
    let grid = make_grid(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cam = common::random_camera(&mut rng, 0);
    let pg = project_grid(&grid, &cam);
    let points = random_points(&mut rng, 5);
    let a = distance_attention(&pg, &points, 1e-6).unwrap();
    for (i, row) in a.outer_iter().enumerate() {
        let nearest = (0..points.len())
            .min_by(|&x, &y| {
                let dx = (pg.pixels[i] - points[x]).norm();
                let dy = (pg.pixels[i] - points[y]).norm();
                dx.partial_cmp(&dy).unwrap()
            })
            .unwrap();
        // Skip voxels nearly equidistant from two points.
        let mut d: Vec<f64> = points.iter().map(|p| (pg.pixels[i] - p).norm()).collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if d[1] - d[0] < 1.0 {
            continue;
        }
        assert!((row[nearest] - 1.0).abs() < 1e-9, "voxel {i}: {row}");
    }
}

#[test]
fn equidistant_points_split_evenly() {
    let grid = make_grid(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cam = common::random_camera(&mut rng, 0);
    let pg = project_grid(&grid, &cam);
    let centre = project(&grid.coord(0), &cam).unwrap().0;
    let points = [Point2::new(centre.x + 20.0, centre.y), Point2::new(centre.x, centre.y - 20.0)];
    let a = distance_attention(&pg, &points, 0.1).unwrap();
    assert!((a[[0, 0]] - 0.5).abs() < 1e-12);
    assert!((a[[0, 1]] - 0.5).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn population_is_chunk_invariant(seed in 0u64..1_000, n_views in 1usize..4, k in 1usize..6, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_vox = 6 * 6 * 6;
        let weights: Vec<Array2<f64>> =
            (0..n_views).map(|_| Array2::from_shape_fn((n_vox, k), |_| rng.gen_range(0.0..1.0))).collect();
        let features: Vec<Array2<f64>> =
            (0..n_views).map(|_| Array2::from_shape_fn((k, d), |_| rng.gen_range(-1.0..1.0))).collect();
        let reference = populate_volume(&weights, &features, n_vox, None).unwrap();
        for chunk in [1, 7, 64, 1024] {
            let counter = OpCounter::default();
            let out = populate_volume(&weights, &features, chunk, Some(&counter)).unwrap();
            prop_assert_eq!(&out, &reference);
            prop_assert_eq!(counter.get(), (n_vox * n_views * k * d) as u64);
        }
        // Oracle: explicit triple loop.
        for i in 0..n_vox {
            for c in 0..d {
                let mut s = 0.0;
                for v in 0..n_views {
                    for j in 0..k {
                        s += weights[v][[i, j]] * features[v][[j, c]];
                    }
                }
                prop_assert!((reference[[i, c]] - s).abs() < 1e-12);
            }
        }
    }
}
