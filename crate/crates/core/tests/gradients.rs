//! Finite-difference checks of the network and the full tracking objective.

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvtrack::nnet::{mlp_backward, mlp_forward, MlpParams, MlpSpec};
use mvtrack::scene::{generate_scene, SceneConfig};
use mvtrack::tracker::{ModelConfig, Sequence, TrackerModel};
use mvtrack::train::{freeze_sequence, probe_gradients, LossWeights};

fn random_input(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-1.5..1.5))
}

/// Loss `0.5‖y − target‖²` of a forward pass.
fn half_sq(params: &MlpParams, spec: &MlpSpec, x: &DVector<f64>, target: &DVector<f64>, train: bool, seed: u64) -> f64 {
    let (y, _) = mlp_forward(params, spec, x, train, seed).unwrap();
    0.5 * (y - target).norm_squared()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn network_gradients_match_central_differences(seed in 0u64..10_000, standardize: bool, dropout in prop::bool::ANY) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = MlpSpec {
            input_dim: rng.gen_range(2..7),
            layer_sizes: vec![rng.gen_range(3..9), rng.gen_range(3..9), 3],
            standardize,
            dropout_rate: if dropout { 0.3 } else { 0.0 },
        };
        let mut params = MlpParams::init(&spec, seed).unwrap();
        // Nonzero gains and shifts so those paths are exercised too.
        let mut flat = params.to_flat();
        for v in flat.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        params.assign_flat(&flat).unwrap();
        let x = random_input(&mut rng, spec.input_dim);
        let target = random_input(&mut rng, 3);

        let (y, tape) = mlp_forward(&params, &spec, &x, true, seed).unwrap();
        let grads = mlp_backward(&params, &tape, &(y - &target)).unwrap();

        let h = 1e-6;
        let base = params.to_flat();
        let mut probe = params.clone();
        for k in 0..base.len() {
            let mut f = base.clone();
            f[k] = base[k] + h;
            probe.assign_flat(&f).unwrap();
            let up = half_sq(&probe, &spec, &x, &target, true, seed);
            f[k] = base[k] - h;
            probe.assign_flat(&f).unwrap();
            let down = half_sq(&probe, &spec, &x, &target, true, seed);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.params[k];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            prop_assert!(rel < 1e-4, "param {k}: analytic {analytic}, numeric {numeric}");
        }
        for k in 0..spec.input_dim {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let numeric = (half_sq(&params, &spec, &xp, &target, true, seed)
                - half_sq(&params, &spec, &xm, &target, true, seed))
                / (2.0 * h);
            let analytic = grads.input[k];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            prop_assert!(rel < 1e-4, "input {k}: analytic {analytic}, numeric {numeric}");
        }
    }
}

#[test]
fn tracker_objective_gradients_match_central_differences() {
    let scene = generate_scene(&SceneConfig {
        n_cameras: 3,
        n_points: 4,
        n_frames: 2,
        pixel_noise_sigma: 0.5,
        seed: 3,
        ..SceneConfig::default()
    })
    .unwrap();
    let mut cfg = ModelConfig::desk(scene.config.feature_dim, 4);
    cfg.grid_resolution = 8;
    let model = TrackerModel::new(cfg, 5).unwrap();
    let seq = Sequence::new(&scene.observations, 8).unwrap();
    let frames = freeze_sequence(&model, &seq, &scene, 0.8).unwrap();

    let n = model.n_params();
    let n_mlp = model.mlp.n_params();
    let mut indices: Vec<usize> = (0..n_mlp).step_by(97).collect();
    indices.extend((n_mlp..n - 3).step_by(17));
    indices.extend(n - 3..n);

    for weights in [
        LossWeights::default(),
        LossWeights { recon: 1.0, proj: 0.0, attn: 0.0 },
        LossWeights { recon: 0.0, proj: 1.0, attn: 0.0 },
        LossWeights { recon: 0.0, proj: 0.0, attn: 1.0 },
    ] {
        let probes = probe_gradients(&model, &seq, &frames, &weights, &indices, 1e-6).unwrap();
        for p in probes {
            assert!(
                p.relative_error(1e-6) < 1e-4,
                "{weights:?} index {}: analytic {}, numeric {}",
                p.index,
                p.analytic,
                p.numeric
            );
        }
    }
}
