//! Runs the `mvtrack` binary end to end in temporary directories.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvtrack::scene::read_scene;
use mvtrack::tracker::{read_trajectories_json, write_trajectories_json, TrackerModel, Trajectory3D};

fn mvtrack(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvtrack"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Small scene: 3 cameras, 4 points, 6 frames.
fn small_scene(dir: &Path, name: &str, extra: &str) {
    write(dir, "scene.toml", &format!("n_points = 4\nn_frames = 6\n{extra}"));
    ok(&mvtrack(dir, &["simulate", "--config", "scene.toml", "--seed", "5", "--out", name]));
}

const SMALL_TRAIN: &str = "epochs = 2\n[model]\ngrid_resolution = 8\n";

#[test]
fn simulate_requires_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvtrack(dir.path(), &["simulate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn simulate_is_deterministic_and_defaults_to_three_cameras() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::create_dir(d.join("a")).unwrap();
    fs::create_dir(d.join("b")).unwrap();
    let stdout = ok(&mvtrack(d, &["simulate", "--seed", "3", "--out", "a/scene.json"]));
    assert!(stdout.contains("3 cameras"), "{stdout}");
    ok(&mvtrack(d, &["simulate", "--seed", "3", "--out", "b/scene.json"]));
    for name in ["scene.json", "scene.features.bin"] {
        assert_eq!(fs::read(d.join("a").join(name)).unwrap(), fs::read(d.join("b").join(name)).unwrap());
    }
    assert_eq!(read_scene(&d.join("a/scene.json")).unwrap().observations.n_views(), 3);
}

#[test]
fn malformed_config_and_missing_inputs_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "bad.toml", "n_points = \"many\"\n");
    assert_eq!(mvtrack(d, &["simulate", "--seed", "1", "--config", "bad.toml"]).status.code(), Some(1));
    write(d, "unknown.toml", "colour = 3\n");
    assert_eq!(mvtrack(d, &["simulate", "--seed", "1", "--config", "unknown.toml"]).status.code(), Some(1));
    assert_eq!(mvtrack(d, &["train", "--seed", "1", "--scene", "missing.json"]).status.code(), Some(1));
    assert_eq!(
        mvtrack(d, &["simulate", "--seed", "1", "--out", "no/such/dir/s.json"]).status.code(),
        Some(1)
    );
}

#[test]
fn zero_learning_rate_keeps_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_scene(d, "scene.json", "");
    write(d, "train.toml", &format!("lr = 0.0\n{SMALL_TRAIN}"));
    ok(&mvtrack(d, &["train", "--config", "train.toml", "--seed", "4", "--scene", "scene.json", "--out", "m.ckpt"]));
    let (trained, step) = TrackerModel::load(&d.join("m.ckpt")).unwrap();
    assert_eq!(step, 12);
    let init = TrackerModel::new(trained.config.clone(), 4).unwrap();
    let rounded: Vec<f64> = init.to_flat().iter().map(|&v| v as f32 as f64).collect();
    assert_eq!(trained.to_flat(), rounded);
    let log = fs::read_to_string(d.join("m.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 12);
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_scene(d, "scene.json", "");
    write(d, "train.toml", SMALL_TRAIN);
    for name in ["a.ckpt", "b.ckpt"] {
        ok(&mvtrack(d, &["train", "--config", "train.toml", "--seed", "9", "--scene", "scene.json", "--out", name]));
    }
    assert_eq!(fs::read(d.join("a.ckpt")).unwrap(), fs::read(d.join("b.ckpt")).unwrap());
    assert_eq!(mvtrack(d, &["train", "--scene", "scene.json"]).status.code(), Some(1));
}

#[test]
fn track_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_scene(d, "scene.json", "");
    write(d, "train.toml", SMALL_TRAIN);
    ok(&mvtrack(d, &["train", "--config", "train.toml", "--seed", "2", "--scene", "scene.json", "--out", "m.ckpt"]));
    ok(&mvtrack(
        d,
        &["track", "--checkpoint", "m.ckpt", "--scene", "scene.json", "--out", "t.json", "--dump-attention", "a.bin"],
    ));
    let trajs = read_trajectories_json(&d.join("t.json")).unwrap();
    assert_eq!(trajs.len(), 4);
    assert!(trajs.iter().all(|t| t.positions.len() == 6));
    let csv = fs::read_to_string(d.join("t.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 6);
    // 6 frames × 3 views × 8³ voxels × 4 points, 4 bytes each.
    assert_eq!(fs::metadata(d.join("a.bin")).unwrap().len(), 6 * 3 * 512 * 4 * 4);

    let stdout = ok(&mvtrack(d, &["eval", "--pred", "t.json", "--scene", "scene.json", "--out", "r.json"]));
    for metric in ["APD", "OA", "3D-AJ", "2D-AJ"] {
        assert!(stdout.contains(metric), "{stdout}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    for key in ["apd", "oa", "aj3d", "aj2d"] {
        assert!(report.get(key).is_some(), "{key}");
    }
}

#[test]
fn ground_truth_scores_full_marks_and_thresholds_only_change_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_scene(d, "scene.json", "");
    let scene = read_scene(&d.join("scene.json")).unwrap();
    let gt: Vec<Trajectory3D> = scene
        .gt_traj
        .iter()
        .enumerate()
        .map(|(point_id, g)| Trajectory3D {
            point_id,
            positions: g.clone(),
            valid: vec![true; g.len()],
        })
        .collect();
    write_trajectories_json(&d.join("gt.json"), &gt).unwrap();
    ok(&mvtrack(d, &["eval", "--pred", "gt.json", "--scene", "scene.json", "--out", "a.json"]));
    ok(&mvtrack(
        d,
        &["eval", "--pred", "gt.json", "--scene", "scene.json", "--out", "b.json", "--thresholds-3d", "0.05,0.5"],
    ));
    let read = |n: &str| -> serde_json::Value { serde_json::from_str(&fs::read_to_string(d.join(n)).unwrap()).unwrap() };
    let (a, b) = (read("a.json"), read("b.json"));
    assert_eq!(a["apd"], 100.0);
    assert_eq!(a["apd_per_threshold"].as_array().unwrap().len(), 5);
    assert_eq!(b["apd_per_threshold"].as_array().unwrap().len(), 2);
    assert_eq!(a["apd"], b["apd"]);
    assert_eq!(a["aj2d"], b["aj2d"]);
}

#[test]
fn incompatible_checkpoint_names_both_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_scene(d, "scene.json", "");
    small_scene(d, "wide.json", "feature_dim = 8\n");
    write(d, "train.toml", "epochs = 1\n[model]\ngrid_resolution = 8\n");
    ok(&mvtrack(d, &["train", "--config", "train.toml", "--seed", "2", "--scene", "scene.json", "--out", "m.ckpt"]));
    let out = mvtrack(d, &["track", "--checkpoint", "m.ckpt", "--scene", "wide.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("16") && err.contains('8') && err.contains("feature_dim"), "{err}");
}

#[test]
fn ablation_suites_emit_their_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "bench.toml", "n_points = 4\nn_frames = 4\nepochs = 1\nn_train_scenes = 1\ngrid_resolution = 8\n");
    let rows = |suite: &str| -> Vec<String> {
        let out = format!("{suite}.csv");
        ok(&mvtrack(d, &["ablate", suite, "--config", "bench.toml", "--seed", "1", "--out", &out]));
        fs::read_to_string(d.join(&out)).unwrap().lines().skip(1).map(str::to_string).collect()
    };
    let cams = rows("cameras");
    assert_eq!(cams.len(), 4);
    for (row, n) in cams.iter().zip(2..=5) {
        assert!(row.starts_with(&format!("1,{n} cameras,")), "{row}");
    }
    assert_eq!(rows("attention").len(), 2);
    assert!(rows("grid").iter().any(|r| r.contains("grid 16")));
    assert_eq!(mvtrack(d, &["ablate", "colours"]).status.code(), Some(1));
}

#[test]
fn bench_rows_are_chunk_invariant_and_flops_linear_in_views() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let defaults = ok(&mvtrack(d, &["bench", "--print-config"]));
    assert!(defaults.contains("16") && defaults.contains("8192"));
    write(d, "bench.toml", "resolutions = [6]\nview_counts = [2, 3, 4]\nrepeats = 1\n");
    ok(&mvtrack(d, &["bench", "--config", "bench.toml", "--out", "b.csv"]));
    let csv = fs::read_to_string(d.join("b.csv")).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 3 * 3);
    assert!(rows.iter().all(|r| r[8] == "true"));
    let flops: Vec<i64> = rows.iter().step_by(3).map(|r| r[5].parse().unwrap()).collect();
    assert_eq!(flops[2] - 2 * flops[1] + flops[0], 0);
}
