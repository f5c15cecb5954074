//! Metric definitions checked on hand-built and simulated fixtures.

use proptest::prelude::*;

use mvtrack::geometry::Point3;
use mvtrack::metrics::{
    apd, blackout_episodes, calibration_sweep, evaluate, flop_estimate, jaccard_3d, occlusion_accuracy, NoiseGroup,
    THRESHOLDS_3D,
};
use mvtrack::nnet::MlpSpec;
use mvtrack::scene::{generate_scene, CalibrationNoise, SceneConfig, SceneData};
use mvtrack::tracker::{ModelConfig, TrackerConfig, TrackerModel, Trajectory3D};

fn occluded_scene(seed: u64) -> SceneData {
    generate_scene(&SceneConfig {
        occlusion_rate: 0.3,
        seed,
        ..SceneConfig::default()
    })
    .unwrap()
}

fn exact(scene: &SceneData) -> Vec<Trajectory3D> {
    scene
        .gt_traj
        .iter()
        .enumerate()
        .map(|(point_id, g)| Trajectory3D {
            point_id,
            positions: g.clone(),
            valid: vec![true; g.len()],
        })
        .collect()
}

#[test]
fn occlusion_accuracy_is_undefined_without_blackouts() {
    let scene = generate_scene(&SceneConfig::default()).unwrap();
    assert!(blackout_episodes(&scene.observations).is_empty());
    let oa = occlusion_accuracy(&exact(&scene), &scene.gt_traj, &scene.observations, &THRESHOLDS_3D).unwrap();
    assert!(oa.is_none());
    assert!(evaluate(&scene, &exact(&scene)).unwrap().oa.is_none());
}

#[test]
fn exact_predictions_score_perfectly() {
    let scene = (0..20).map(occluded_scene).find(|s| !blackout_episodes(&s.observations).is_empty()).unwrap();
    let report = evaluate(&scene, &exact(&scene)).unwrap();
    assert_eq!(report.apd, 100.0);
    assert_eq!(report.oa, Some(100.0));
    assert_eq!(report.mean_error, 0.0);
    assert!(report.aj3d > 0.0 && report.aj3d <= 1.0);
}

/// A predictor that freezes during a blackout and then catches up slowly
/// loses accuracy mostly right after occlusions.
#[test]
fn slow_reacquisition_lowers_occlusion_accuracy_below_apd() {
    let scene = (0..20).map(occluded_scene).find(|s| !blackout_episodes(&s.observations).is_empty()).unwrap();
    let obs = &scene.observations;
    let trajs: Vec<Trajectory3D> = scene
        .gt_traj
        .iter()
        .enumerate()
        .map(|(p, g)| {
            let mut positions = Vec::with_capacity(g.len());
            let mut current = g[0];
            let mut catch_up = 0;
            for (f, target) in g.iter().enumerate() {
                if obs.visible_views(f, p) == 0 {
                    catch_up = 5;
                } else if catch_up > 0 {
                    current = Point3::from(current.coords * 0.8 + target.coords * 0.2);
                    catch_up -= 1;
                } else {
                    current = *target;
                }
                positions.push(current);
            }
            Trajectory3D {
                point_id: p,
                positions,
                valid: vec![true; g.len()],
            }
        })
        .collect();
    let report = evaluate(&scene, &trajs).unwrap();
    let oa = report.oa.unwrap();
    assert!(oa < report.apd, "OA {oa} vs APD {}", report.apd);
}

#[test]
fn jaccard_counts_each_outcome() {
    let gt = vec![vec![Point3::origin(); 4]];
    let far = Point3::new(1.0, 0.0, 0.0);
    let pred = vec![Trajectory3D {
        point_id: 0,
        positions: vec![Point3::origin(), far, Point3::origin(), Point3::origin()],
        valid: vec![true, true, false, true],
    }];
    // TP, FP + FN, FN, FP.
    let visible = vec![vec![true, true, true, false]];
    let score = jaccard_3d(&pred, &gt, &visible, &[0.1]).unwrap();
    assert!((score.mean - 1.0 / 5.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// With every point visible and every prediction valid, a miss costs the
    /// Jaccard score twice, so it never exceeds the accuracy.
    #[test]
    fn jaccard_never_exceeds_accuracy_under_full_visibility(
        offsets in prop::collection::vec(prop::collection::vec(0.0f64..0.3, 6), 1..5),
    ) {
        let gt: Vec<Vec<Point3>> = offsets.iter().map(|o| vec![Point3::origin(); o.len()]).collect();
        let pred: Vec<Trajectory3D> = offsets
            .iter()
            .enumerate()
            .map(|(p, o)| Trajectory3D {
                point_id: p,
                positions: o.iter().map(|&d| Point3::new(d, 0.0, 0.0)).collect(),
                valid: vec![true; o.len()],
            })
            .collect();
        let visible = vec![vec![true; 6]; offsets.len()];
        let aj = jaccard_3d(&pred, &gt, &visible, &THRESHOLDS_3D).unwrap();
        let acc = apd(&pred, &gt, &THRESHOLDS_3D).unwrap();
        for (j, a) in aj.per_threshold.iter().zip(&acc.per_threshold) {
            prop_assert!(*j * 100.0 <= *a + 1e-9);
        }
    }
}

#[test]
fn calibration_sweep_has_a_clean_reference_row() {
    let scene = generate_scene(&SceneConfig {
        n_points: 4,
        n_frames: 6,
        seed: 3,
        ..SceneConfig::default()
    })
    .unwrap();
    let mut cfg = ModelConfig::desk(scene.config.feature_dim, 4);
    cfg.grid_resolution = 8;
    let model = TrackerModel::new(cfg, 2).unwrap();
    let base = CalibrationNoise {
        intrinsic_px: 1.0,
        rotation_deg: 1.0,
        translation_cm: 5.0,
    };
    let sweep = calibration_sweep(&scene, &model, &TrackerConfig::default(), base, &[1.0, 2.0, 4.0], &[11, 12]).unwrap();
    assert_eq!(sweep.rows[0].group, NoiseGroup::None);
    assert_eq!(sweep.rows[0].report, sweep.clean);
    for group in [NoiseGroup::Intrinsic, NoiseGroup::Rotation, NoiseGroup::Translation] {
        let rows: Vec<_> = sweep.rows.iter().filter(|r| r.group == group).collect();
        assert_eq!(rows.len(), 3);
        assert!(sweep.drop_per_unit(group).unwrap().is_finite());
    }
    assert_eq!(sweep.to_csv().lines().count(), 1 + 1 + 9);
}

#[test]
fn flop_model_is_affine_in_views_and_points() {
    let spec = MlpSpec::desk(40);
    let f = |n, k| flop_estimate(16, n, k, 16, &spec).total_macs as i64;
    for k in 1..6 {
        assert_eq!(f(4, k) - 2 * f(3, k) + f(2, k), 0);
    }
    for n in 2..5 {
        assert_eq!(f(n, 5) - 2 * f(n, 4) + f(n, 3), 0);
    }
    let ratio = flop_estimate(24, 4, 8, 16, &spec).voxel_macs() as f64 / flop_estimate(16, 4, 8, 16, &spec).voxel_macs() as f64;
    assert!((ratio - 3.375).abs() < 1e-12);
}
