//! Small dense networks with exact reverse-mode gradients, AdamW, a cosine
//! schedule with linear warmup, and a flat checkpoint format.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const STANDARDIZE_EPS: f64 = 1e-5;
const CHECKPOINT_MAGIC: &[u8; 8] = b"MVTCKPT1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("tape was recorded with parameter generation {tape}, parameters are at {params}")]
    StaleTape { tape: u64, params: u64 },
    #[error("checkpoint io: {0}")]
    Io(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T, E = NnetError> = std::result::Result<T, E>;

/// Layer layout of a ReLU perceptron ending in a 3-vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    /// Output widths of each affine layer; the last one must be 3.
    pub layer_sizes: Vec<usize>,
    /// Standardize hidden pre-activations over the feature axis.
    pub standardize: bool,
    pub dropout_rate: f64,
}

impl MlpSpec {
    /// `[64, 64, 32, 3]`, standardized, no dropout.
    pub fn desk(input_dim: usize) -> Self {
        Self {
            input_dim,
            layer_sizes: vec![64, 64, 32, 3],
            standardize: true,
            dropout_rate: 0.0,
        }
    }

    /// `[512, 256, 128, 3]`, standardized, dropout 0.2.
    pub fn large(input_dim: usize) -> Self {
        Self {
            input_dim,
            layer_sizes: vec![512, 256, 128, 3],
            standardize: true,
            dropout_rate: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(NnetError::InvalidSpec("layer sizes must be positive".into()));
        }
        if self.layer_sizes.last() != Some(&3) {
            return Err(NnetError::InvalidSpec("the last layer must have 3 outputs".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnetError::InvalidSpec("dropout rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn fan_ins(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.input_dim).chain(self.layer_sizes.iter().copied())
    }

    /// Multiply-adds of one forward pass through the affine layers.
    pub fn macs(&self) -> u64 {
        self.fan_ins()
            .zip(&self.layer_sizes)
            .map(|(i, &o)| (i * o) as u64)
            .sum()
    }
}

/// One affine layer, plus the standardization gain and shift when enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub gain: Option<DVector<f64>>,
    pub shift: Option<DVector<f64>>,
}

impl DenseLayer {
    fn n_params(&self) -> usize {
        self.weight.len()
            + self.bias.len()
            + self.gain.as_ref().map_or(0, |g| g.len())
            + self.shift.as_ref().map_or(0, |s| s.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
    generation: u64,
}

impl MlpParams {
    /// Weights uniform in `±1/√fan_in`, zero biases, unit gains.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = spec.layer_sizes.len();
        let layers = spec
            .fan_ins()
            .zip(&spec.layer_sizes)
            .enumerate()
            .map(|(l, (fan_in, &out))| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = DMatrix::from_fn(out, fan_in, |_, _| rng.gen_range(-bound..bound));
                let hidden_norm = spec.standardize && l + 1 < n_layers;
                DenseLayer {
                    weight,
                    bias: DVector::zeros(out),
                    gain: hidden_norm.then(|| DVector::from_element(out, 1.0)),
                    shift: hidden_norm.then(|| DVector::zeros(out)),
                }
            })
            .collect();
        Ok(Self {
            layers,
            generation: 0,
        })
    }

    /// All parameters zero (gains included).
    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        let mut p = Self::init(spec, 0)?;
        let n = p.n_params();
        p.assign_flat(&vec![0.0; n])?;
        p.generation = 0;
        Ok(p)
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::n_params).sum()
    }

    /// Flattened as weight (row-major), bias, gain, shift per layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.weight.transpose().iter());
            out.extend(l.bias.iter());
            if let Some(g) = &l.gain {
                out.extend(g.iter());
            }
            if let Some(s) = &l.shift {
                out.extend(s.iter());
            }
        }
        out
    }

    /// Overwrites every parameter and invalidates outstanding tapes.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(NnetError::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.n_params()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            let (rows, cols) = l.weight.shape();
            for r in 0..rows {
                for c in 0..cols {
                    l.weight[(r, c)] = it.next().unwrap();
                }
            }
            for v in l.bias.iter_mut() {
                *v = it.next().unwrap();
            }
            for v in l.gain.iter_mut().flat_map(|g| g.iter_mut()) {
                *v = it.next().unwrap();
            }
            for v in l.shift.iter_mut().flat_map(|s| s.iter_mut()) {
                *v = it.next().unwrap();
            }
        }
        self.generation += 1;
        Ok(())
    }

    /// True for affine weights, false for biases, gains and shifts.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(std::iter::repeat(true).take(l.weight.len()));
            out.extend(std::iter::repeat(false).take(l.n_params() - l.weight.len()));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct LayerTape {
    input: DVector<f64>,
    /// Standardized pre-activation and inverse standard deviation.
    normalized: Option<(DVector<f64>, f64)>,
    /// Input of the ReLU.
    activation_in: DVector<f64>,
    dropout: Option<DVector<f64>>,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    layers: Vec<LayerTape>,
    generation: u64,
}

fn check_shapes(params: &MlpParams, spec: &MlpSpec) -> Result<()> {
    let ok = params.layers.len() == spec.layer_sizes.len()
        && params
            .layers
            .iter()
            .zip(spec.fan_ins().zip(&spec.layer_sizes))
            .all(|(l, (i, &o))| l.weight.shape() == (o, i));
    if ok {
        Ok(())
    } else {
        Err(NnetError::ShapeMismatch("parameters do not match the spec".into()))
    }
}

/// Affine → standardize → ReLU → dropout per hidden layer, then a final
/// affine layer. Dropout is active only in `train_mode` and is drawn from
/// `seed`.
pub fn mlp_forward(
    params: &MlpParams,
    spec: &MlpSpec,
    x: &DVector<f64>,
    train_mode: bool,
    seed: u64,
) -> Result<(DVector<f64>, Tape)> {
    check_shapes(params, spec)?;
    if x.len() != spec.input_dim {
        return Err(NnetError::ShapeMismatch(format!(
            "input has {} entries, spec expects {}",
            x.len(),
            spec.input_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.layers.len();
    let mut h = x.clone();
    let mut tapes = Vec::with_capacity(n);
    for (l, layer) in params.layers.iter().enumerate() {
        let z = &layer.weight * &h + &layer.bias;
        if l + 1 == n {
            tapes.push(LayerTape {
                input: h,
                normalized: None,
                activation_in: z.clone(),
                dropout: None,
            });
            h = z;
            break;
        }
        let (u, normalized) = match (&layer.gain, &layer.shift) {
            (Some(gain), Some(shift)) => {
                let mean = z.mean();
                let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
                let inv_std = 1.0 / (var + STANDARDIZE_EPS).sqrt();
                let zhat = z.map(|v| (v - mean) * inv_std);
                (zhat.component_mul(gain) + shift, Some((zhat, inv_std)))
            }
            _ => (z, None),
        };
        let mut a = u.map(|v| v.max(0.0));
        let dropout = (train_mode && spec.dropout_rate > 0.0).then(|| {
            let keep = 1.0 - spec.dropout_rate;
            DVector::from_fn(a.len(), |_, _| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        });
        if let Some(m) = &dropout {
            a.component_mul_assign(m);
        }
        tapes.push(LayerTape {
            input: h,
            normalized,
            activation_in: u,
            dropout,
        });
        h = a;
    }
    Ok((
        h,
        Tape {
            layers: tapes,
            generation: params.generation,
        },
    ))
}

/// Gradients laid out like [`MlpParams::to_flat`], plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub params: Vec<f64>,
    pub input: DVector<f64>,
}

pub fn mlp_backward(params: &MlpParams, tape: &Tape, dy: &DVector<f64>) -> Result<MlpGrads> {
    if tape.generation != params.generation {
        return Err(NnetError::StaleTape {
            tape: tape.generation,
            params: params.generation,
        });
    }
    if tape.layers.len() != params.layers.len() || dy.len() != 3 {
        return Err(NnetError::ShapeMismatch("tape does not match parameters".into()));
    }
    let mut per_layer: Vec<Vec<f64>> = Vec::with_capacity(params.layers.len());
    let n = params.layers.len();
    let mut grad = dy.clone();
    for l in (0..n).rev() {
        let layer = &params.layers[l];
        let lt = &tape.layers[l];
        let mut blob: Vec<f64> = Vec::with_capacity(layer.n_params());
        let dz = if l + 1 == n {
            grad.clone()
        } else {
            let mut da = grad.clone();
            if let Some(m) = &lt.dropout {
                da.component_mul_assign(m);
            }
            let du = DVector::from_fn(da.len(), |k, _| if lt.activation_in[k] > 0.0 { da[k] } else { 0.0 });
            match (&lt.normalized, &layer.gain) {
                (Some((zhat, inv_std)), Some(gain)) => {
                    let dzhat = du.component_mul(gain);
                    let m = dzhat.len() as f64;
                    let mean_d = dzhat.sum() / m;
                    let mean_dz = dzhat.dot(zhat) / m;
                    let dz = DVector::from_fn(dzhat.len(), |k, _| {
                        inv_std * (dzhat[k] - mean_d - zhat[k] * mean_dz)
                    });
                    let dgain = du.component_mul(zhat);
                    let dshift = du.clone();
                    blob.extend(dgain.iter());
                    blob.extend(dshift.iter());
                    dz
                }
                _ => du,
            }
        };
        let dw = &dz * lt.input.transpose();
        let mut head: Vec<f64> = dw.transpose().iter().copied().collect();
        head.extend(dz.iter());
        head.extend(blob);
        per_layer.push(head);
        grad = layer.weight.transpose() * &dz;
    }
    per_layer.reverse();
    Ok(MlpGrads {
        params: per_layer.into_iter().flatten().collect(),
        input: grad,
    })
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimState {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// Learning rate 1e-4, weight decay 1e-5.
    pub fn with_defaults(n_params: usize) -> Self {
        Self::new(n_params, 1e-4, 1e-5)
    }
}

/// One AdamW update. Entries whose `decay_mask` is false skip weight decay.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    decay_mask: Option<&[bool]>,
    state: &mut OptimState,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || decay_mask.is_some_and(|m| m.len() != n) {
        return Err(NnetError::ShapeMismatch(format!(
            "{n} parameters, {} gradients, {} moments",
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for k in 0..n {
        let g = grads[k];
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        let decay = if decay_mask.map_or(true, |m| m[k]) {
            state.weight_decay * params[k]
        } else {
            0.0
        };
        params[k] -= state.lr * (m_hat / (v_hat.sqrt() + state.eps) + decay);
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr`, then half a cosine down to 0.
pub fn cosine_lr(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let progress = if total_steps > warmup_steps {
        (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64
    } else {
        1.0
    };
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Writes `magic | header length (u64 LE) | JSON header | f32 LE values`.
pub fn write_checkpoint<H: Serialize>(path: &Path, header: &H, values: &[f64]) -> Result<()> {
    let bytes = checkpoint_bytes(header, values)?;
    let mut f = fs::File::create(path).map_err(|e| NnetError::Io(e.to_string()))?;
    f.write_all(&bytes).map_err(|e| NnetError::Io(e.to_string()))
}

pub fn checkpoint_bytes<H: Serialize>(header: &H, values: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| NnetError::Io(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * values.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn read_checkpoint<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| NnetError::Io(e.to_string()))?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(NnetError::Malformed("missing magic bytes".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| NnetError::Malformed("truncated header".into()))?;
    let header = serde_json::from_slice(body).map_err(|e| NnetError::Malformed(e.to_string()))?;
    let blob = &bytes[16 + len..];
    if blob.len() % 4 != 0 {
        return Err(NnetError::Malformed("parameter blob is not a whole number of f32".into()));
    }
    let values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((header, values))
}

/// Header of a bare network checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpointHeader {
    pub spec: MlpSpec,
    pub step: u64,
    pub n_params: usize,
}

pub fn save_mlp(path: &Path, spec: &MlpSpec, params: &MlpParams, step: u64) -> Result<()> {
    let header = MlpCheckpointHeader {
        spec: spec.clone(),
        step,
        n_params: params.n_params(),
    };
    write_checkpoint(path, &header, &params.to_flat())
}

pub fn load_mlp(path: &Path) -> Result<(MlpSpec, MlpParams, u64)> {
    let (header, values): (MlpCheckpointHeader, Vec<f64>) = read_checkpoint(path)?;
    let mut params = MlpParams::init(&header.spec, 0)?;
    if values.len() != header.n_params {
        return Err(NnetError::Malformed("parameter count disagrees with header".into()));
    }
    params.assign_flat(&values)?;
    Ok((header.spec, params, header.step))
}
