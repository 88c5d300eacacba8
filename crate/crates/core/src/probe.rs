//! Linear / one-hidden-layer probe over frozen features, trained with Adam.
//!
//! The hidden layer uses `tanh`. Parameters are stored as a list of tensors
//! in the order `[W0, b0, W1, b1, ...]`, with each `W` row-major
//! `outputs x inputs`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding_store::{manifest_path, EmbeddingMatrix};
use crate::losses::{compute_loss, LossConfig, LossError};
use crate::metrics::{mean_average_precision, EvalReport, MetricsError};
use crate::scalar::{dot, Scalar};
use crate::spml_dataset::{mix_seed, AnnotationMatrix};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VLPLMDL1";

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("feature dimension {found} does not match model input {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("gradient shape does not match parameters: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    DivergenceDetected { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    fn forward_into(&self, x: &[T], out: &mut Vec<T>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(w, &b)| dot(w, x) + b),
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel<T> {
    layers: Vec<Dense<T>>,
}

/// Gradient buffers laid out like [`ProbeModel::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> ProbeGrads<T> {
    pub fn zeros_like(model: &ProbeModel<T>) -> Self {
        Self {
            tensors: model.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }

    fn fill_zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(T::zero()));
    }
}

impl<T: Scalar> ProbeModel<T> {
    /// Gaussian weights with standard deviation `1/sqrt(fan_in)`, zero biases.
    pub fn init(dim: usize, n_labels: usize, hidden: Option<usize>, seed: u64) -> Result<Self, ProbeError> {
        if dim == 0 || n_labels == 0 || hidden == Some(0) {
            return Err(ProbeError::InvalidShape(format!(
                "dim {dim}, labels {n_labels}, hidden {hidden:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths: Vec<usize> = match hidden {
            Some(h) => vec![dim, h, n_labels],
            None => vec![dim, n_labels],
        };
        let layers = widths
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let scale = 1.0 / (inputs as f64).sqrt();
                Dense {
                    inputs,
                    outputs,
                    weights: (0..inputs * outputs)
                        .map(|_| T::lit(scale * rng.sample::<f64, _>(StandardNormal)))
                        .collect(),
                    bias: vec![T::zero(); outputs],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense<T>>) -> Result<Self, ProbeError> {
        if layers.is_empty() || layers.len() > 2 {
            return Err(ProbeError::InvalidShape(format!("{} layers", layers.len())));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 || l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(ProbeError::InvalidShape(format!("layer {i}")));
            }
        }
        if layers.len() == 2 && layers[0].outputs != layers[1].inputs {
            return Err(ProbeError::InvalidShape("hidden width mismatch".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn n_labels(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn hidden(&self) -> Option<usize> {
        (self.layers.len() == 2).then(|| self.layers[0].outputs)
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, features: &[T]) -> Result<Vec<T>, ProbeError> {
        let mut cache = ForwardCache::default();
        self.forward_cached(features, &mut cache)?;
        Ok(cache.scores)
    }

    /// Scores for every row, row-major `rows x n_labels`.
    pub fn forward_batch(&self, features: &EmbeddingMatrix<T>) -> Result<Vec<T>, ProbeError> {
        let mut out = Vec::with_capacity(features.rows() * self.n_labels());
        let mut cache = ForwardCache::default();
        for row in features.iter_rows() {
            self.forward_cached(row, &mut cache)?;
            out.extend_from_slice(&cache.scores);
        }
        Ok(out)
    }

    fn forward_cached(&self, x: &[T], cache: &mut ForwardCache<T>) -> Result<(), ProbeError> {
        if x.len() != self.dim() {
            return Err(ProbeError::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        match self.layers.as_slice() {
            [out] => out.forward_into(x, &mut cache.scores),
            [hidden, out] => {
                hidden.forward_into(x, &mut cache.hidden);
                cache.hidden.iter_mut().for_each(|h| *h = h.tanh());
                out.forward_into(&cache.hidden, &mut cache.scores);
            }
            _ => unreachable!("validated at construction"),
        }
        Ok(())
    }

    /// Adds d loss / d params for one sample into `grads`, given d loss / d scores.
    fn backward_into(&self, x: &[T], cache: &ForwardCache<T>, grad_scores: &[T], grads: &mut ProbeGrads<T>) {
        fn dense_backward<T: Scalar>(layer: &Dense<T>, input: &[T], upstream: &[T], gw: &mut [T], gb: &mut [T]) {
            for (o, &g) in upstream.iter().enumerate() {
                gb[o] += g;
                for (w, &xi) in gw[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(input) {
                    *w += g * xi;
                }
            }
        }
        match self.layers.as_slice() {
            [out] => {
                let (gw, gb) = grads.tensors.split_at_mut(1);
                dense_backward(out, x, grad_scores, &mut gw[0], &mut gb[0]);
            }
            [hidden, out] => {
                let [gw0, gb0, gw1, gb1] = grads.tensors.as_mut_slice() else {
                    unreachable!("two dense layers")
                };
                dense_backward(out, &cache.hidden, grad_scores, gw1, gb1);
                let mut upstream = vec![T::zero(); hidden.outputs];
                for (o, &g) in grad_scores.iter().enumerate() {
                    for (u, &w) in upstream.iter_mut().zip(&out.weights[o * out.inputs..(o + 1) * out.inputs]) {
                        *u += g * w;
                    }
                }
                for (u, &h) in upstream.iter_mut().zip(&cache.hidden) {
                    *u *= T::one() - h * h;
                }
                dense_backward(hidden, x, &upstream, gw0, gb0);
            }
            _ => unreachable!("validated at construction"),
        }
    }
}

#[derive(Debug, Default)]
struct ForwardCache<T> {
    hidden: Vec<T>,
    scores: Vec<T>,
}

/// Mean loss over the given rows and its gradient with respect to every
/// parameter. Samples are reduced in index order.
pub fn batch_loss_and_gradient<T: Scalar>(
    model: &ProbeModel<T>,
    features: &EmbeddingMatrix<T>,
    annotations: &AnnotationMatrix,
    rows: &[usize],
    loss: &LossConfig,
    grads: &mut ProbeGrads<T>,
) -> Result<T, ProbeError> {
    grads.fill_zero();
    if rows.is_empty() {
        return Ok(T::zero());
    }
    let inv_n = T::one() / T::from_usize(rows.len()).unwrap();
    let mut cache = ForwardCache::default();
    let mut total = T::zero();
    for &i in rows {
        let x = features.row(i);
        model.forward_cached(x, &mut cache)?;
        let res = compute_loss(&cache.scores, annotations.row(i), loss)?;
        total += res.value;
        let scaled: Vec<T> = res.grad_scores.iter().map(|&g| g * inv_n).collect();
        model.backward_into(x, &cache, &scaled, grads);
    }
    Ok(total * inv_n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &ProbeModel<T>, lr: f64, adam: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = model.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            step: 0,
            lr: T::lit(lr),
            beta1: T::lit(adam.beta1),
            beta2: T::lit(adam.beta2),
            eps: T::lit(adam.eps),
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    model: &mut ProbeModel<T>,
    grads: &ProbeGrads<T>,
    state: &mut OptimizerState<T>,
) -> Result<(), ProbeError> {
    let mut params = model.tensors_mut();
    if params.len() != grads.tensors.len()
        || params.len() != state.first_moment.len()
        || params.iter().zip(&grads.tensors).any(|(p, g)| p.len() != g.len())
        || params.iter().zip(&state.first_moment).any(|(p, m)| p.len() != m.len())
    {
        return Err(ProbeError::ShapeMismatch(format!(
            "{} parameter tensors, {} gradient tensors",
            params.len(),
            grads.tensors.len()
        )));
    }
    if let Some(t) = grads.tensors.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(ProbeError::NonFiniteGradient(t));
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let correction1 = T::one() - b1.powi(t);
    let correction2 = T::one() - b2.powi(t);
    for (((param, grad), m), v) in params
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        for j in 0..param.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let m_hat = m[j] / correction1;
            let v_hat = v[j] / correction2;
            param[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub shuffle: bool,
    /// Hidden width; `None` trains a linear probe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            loss: LossConfig::default(),
            shuffle: true,
            hidden: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.epochs == 0 {
            return Err(ProbeError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ProbeError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ProbeError::InvalidConfig(format!("lr = {}", self.lr)));
        }
        if self.hidden == Some(0) {
            return Err(ProbeError::InvalidConfig("hidden width must be >= 1".into()));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !(0.0 < beta1 && beta1 < 1.0 && 0.0 < beta2 && beta2 < 1.0 && eps > 0.0) {
            return Err(ProbeError::InvalidConfig("adam constants out of range".into()));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Features paired with fully labeled targets.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a, T> {
    pub features: &'a EmbeddingMatrix<T>,
    pub labels: &'a AnnotationMatrix,
}

pub fn evaluate<T: Scalar>(model: &ProbeModel<T>, set: EvalSet<'_, T>) -> Result<EvalReport, ProbeError> {
    if set.features.rows() != set.labels.n_samples() || set.labels.n_labels() != model.n_labels() {
        return Err(ProbeError::InvalidShape("evaluation set does not match model".into()));
    }
    let scores = model.forward_batch(set.features)?;
    Ok(mean_average_precision(&scores, &set.labels.binary_targets(), model.n_labels())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation mAP in [0, 1], when a validation set was given.
    pub val_map: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Snapshot with the best validation mAP (last epoch without validation).
    pub model: ProbeModel<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> std::io::Result<()> {
    let mut out = String::from("epoch,train_loss,val_map\n");
    for r in history {
        let val = r.val_map.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, val));
    }
    fs::write(path, out)
}

/// Mini-batch Adam training. Deterministic for a fixed `cfg.seed`.
pub fn train<T: Scalar>(
    features: &EmbeddingMatrix<T>,
    annotations: &AnnotationMatrix,
    validation: Option<EvalSet<'_, T>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, ProbeError> {
    cfg.validate()?;
    let n = features.rows();
    if n == 0 || annotations.n_samples() == 0 {
        return Err(ProbeError::EmptyDataset);
    }
    if annotations.n_samples() != n {
        return Err(ProbeError::InvalidShape(format!(
            "{n} feature rows, {} annotation rows",
            annotations.n_samples()
        )));
    }
    let mut model = ProbeModel::init(features.dim(), annotations.n_labels(), cfg.hidden, mix_seed(cfg.seed, 0))?;
    let mut state = OptimizerState::new(&model, cfg.lr, cfg.adam);
    let mut grads = ProbeGrads::zeros_like(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..n).collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ProbeModel<T>)> = None;
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0f64;
        for (batch, rows) in order.chunks(cfg.batch_size).enumerate() {
            let loss = batch_loss_and_gradient(&model, features, annotations, rows, &cfg.loss, &mut grads)?;
            if !loss.is_finite() {
                return Err(ProbeError::DivergenceDetected { epoch, batch });
            }
            epoch_loss += loss.as_f64() * rows.len() as f64;
            adam_step(&mut model, &grads, &mut state)?;
            if !model.is_finite() {
                return Err(ProbeError::DivergenceDetected { epoch, batch });
            }
        }

        let val_map = validation
            .map(|set| evaluate(&model, set).map(|r| r.map))
            .transpose()?;
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / n as f64,
            val_map,
        });
        let score = val_map.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => validation.is_none() || score > *b,
        };
        if improved {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}

/// JSON sidecar of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub best_val_map: Option<f64>,
}

/// Layout: magic, u32 layer count, per layer (u32 outputs, u32 inputs),
/// then every tensor as f32 little-endian in `tensors()` order.
pub fn save_checkpoint<T: Scalar>(path: &Path, model: &ProbeModel<T>, meta: &CheckpointMeta) -> Result<(), ProbeError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for l in &model.layers {
        bytes.extend_from_slice(&(l.outputs as u32).to_le_bytes());
        bytes.extend_from_slice(&(l.inputs as u32).to_le_bytes());
    }
    for t in model.tensors() {
        for v in t {
            bytes.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&bytes)?;
    fs::write(manifest_path(path), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ProbeModel<T>, Option<CheckpointMeta>), ProbeError> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| ProbeError::MalformedCheckpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing VLPLMDL1 magic"));
    }
    let read_u32 = |at: usize| -> Result<usize, ProbeError> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| bad("truncated header"))
    };
    let n_layers = read_u32(8)?;
    if !(1..=2).contains(&n_layers) {
        return Err(bad("unsupported layer count"));
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        shapes.push((read_u32(12 + 8 * i)?, read_u32(16 + 8 * i)?));
    }
    let mut offset = 12 + 8 * n_layers;
    let expected: usize = shapes.iter().map(|(o, i)| o * i + o).sum::<usize>() * 4 + offset;
    if bytes.len() != expected {
        return Err(bad("parameter section has the wrong length"));
    }
    let mut take = |count: usize| -> Vec<T> {
        let out = bytes[offset..offset + count * 4]
            .chunks_exact(4)
            .map(|c| T::widen_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        offset += count * 4;
        out
    };
    let layers = shapes
        .iter()
        .map(|&(outputs, inputs)| Dense {
            inputs,
            outputs,
            weights: take(outputs * inputs),
            bias: take(outputs),
        })
        .collect();
    let model = ProbeModel::from_layers(layers)?;
    let sidecar = manifest_path(path);
    let meta = if sidecar.exists() {
        Some(serde_json::from_slice(&fs::read(sidecar)?)?)
    } else {
        None
    };
    Ok((model, meta))
}
