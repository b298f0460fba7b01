//! Feedforward ReLU network whose layers are trained independently, each by
//! the cross-entropy of its own frozen random classifier.
//!
//! For layer `l` with input `I`, trainable weights `W` (fan-in × width) and
//! quenched classifier `J` (width × 10):
//!
//! ```text
//! z = I W,   y = max(0, z),   S = y J,   P = softmax(S),   E = -Σ h ln P
//! ∂E/∂W_ij = (Σ_k (P_k - h_k) J_jk) f'(z_j) I_i
//! ```
//!
//! and `y` becomes the input of layer `l + 1`. No error signal crosses a
//! layer boundary.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{minibatch_indices, one_hot_matrix, DataError, LabeledDataset, INPUT_WIDTH, NUM_CLASSES};
use crate::numerics::{gaussian_matrix, Matrix, NumericsError, Rng};
use crate::parallel;

/// Mean local loss above which training is aborted.
pub const LOSS_LIMIT: f64 = 1e3;
/// Frobenius norm of any weight matrix above which training is aborted.
pub const WEIGHT_NORM_LIMIT: f64 = 1e6;
/// Default spread of the fixed classifier weights (see [`NetConfig::std_j`]).
pub const DEFAULT_STD_J: f64 = 0.25;

/// Rows per task when evaluating large batches.
const EVAL_CHUNK: usize = 500;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at layer {layer}, batch {batch}: {detail}")]
    Divergence {
        layer: usize,
        batch: usize,
        detail: String,
    },
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default = "default_input_width")]
    pub input_width: usize,
    /// Widths `n_1..n_L` of the trainable layers; the depth is their count.
    pub widths: Vec<usize>,
    #[serde(default = "default_classifier_width")]
    pub classifier_width: usize,
    #[serde(default)]
    pub seed: u64,
    /// `W` entries are drawn from `N(0, init_std_w² / fan_in)`.
    #[serde(default = "one")]
    pub init_std_w: f64,
    /// `J` entries are drawn from `N(0, std_j² / n_l)`. The back-projected
    /// error scales with `J`, and the resulting change in scores with `J²`, so
    /// this sets the effective step size of every layer. At `eta0 = 0.5` an
    /// 8×200 MNIST network's deepest layer blows up within the first epoch
    /// for every seed tried at 1, and for roughly one seed in four at 0.5.
    #[serde(default = "default_std_j")]
    pub std_j: f64,
}

fn default_input_width() -> usize {
    INPUT_WIDTH
}
fn default_classifier_width() -> usize {
    NUM_CLASSES
}
fn one() -> f64 {
    1.0
}
fn default_std_j() -> f64 {
    DEFAULT_STD_J
}

impl NetConfig {
    /// `depth` layers of equal `width` on 784-pixel inputs.
    pub fn uniform(depth: usize, width: usize, seed: u64) -> Self {
        Self {
            input_width: INPUT_WIDTH,
            widths: vec![width; depth],
            classifier_width: NUM_CLASSES,
            seed,
            init_std_w: 1.0,
            std_j: DEFAULT_STD_J,
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.widths.is_empty() {
            return Err(NetworkError::Config("depth must be at least 1".into()));
        }
        if self.input_width == 0 || self.widths.contains(&0) {
            return Err(NetworkError::Config("all widths must be at least 1".into()));
        }
        if self.classifier_width != NUM_CLASSES {
            return Err(NetworkError::Config(format!(
                "classifier width must be {NUM_CLASSES}"
            )));
        }
        if !(self.init_std_w >= 0.0) || !(self.std_j >= 0.0) {
            return Err(NetworkError::Config("standard deviations must be >= 0".into()));
        }
        Ok(())
    }

    /// Fan-in of layer `l` (0-based).
    pub fn fan_in(&self, l: usize) -> usize {
        if l == 0 {
            self.input_width
        } else {
            self.widths[l - 1]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eta0: f64,
    pub decay: f64,
    pub decay_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 100,
            eta0: 0.5,
            decay: 0.8,
            decay_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if !(self.eta0 > 0.0) {
            return Err(NetworkError::Config("eta0 must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(NetworkError::Config("decay must lie in (0, 1]".into()));
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return Err(NetworkError::Config(
                "decay_every and batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Step size for `epoch` (0-based): `eta0 · decay^⌊epoch / decay_every⌋`.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.eta0 * cfg.decay.powi((epoch / cfg.decay_every.max(1)) as i32)
}

/// Activations of every layer for one batch (one row per input).
#[derive(Clone, Debug)]
pub struct LayerRecord {
    pub pre: Matrix,
    pub act: Matrix,
    pub scores: Matrix,
    pub probs: Matrix,
}

#[derive(Clone, Debug)]
pub struct LayerActivations {
    pub batch: Matrix,
    pub layers: Vec<LayerRecord>,
}

impl LayerActivations {
    /// Input `I^l` of layer `l` (0-based): the batch for `l = 0`, else the
    /// previous layer's activation.
    pub fn input(&self, l: usize) -> &Matrix {
        if l == 0 {
            &self.batch
        } else {
            &self.layers[l - 1].act
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalErrorNet {
    config: NetConfig,
    weights: Vec<Matrix>,
    classifiers: Vec<Matrix>,
}

/// Draws `W^l` then `J^l` for each layer in order from `rng`.
pub fn init_network(cfg: &NetConfig, rng: &mut Rng) -> Result<LocalErrorNet, NetworkError> {
    cfg.validate()?;
    let mut weights = Vec::with_capacity(cfg.depth());
    let mut classifiers = Vec::with_capacity(cfg.depth());
    for (l, &width) in cfg.widths.iter().enumerate() {
        let fan_in = cfg.fan_in(l);
        weights.push(gaussian_matrix(
            rng,
            fan_in,
            width,
            0.0,
            cfg.init_std_w / (fan_in as f64).sqrt(),
        ));
        classifiers.push(gaussian_matrix(
            rng,
            width,
            cfg.classifier_width,
            0.0,
            cfg.std_j / (width as f64).sqrt(),
        ));
    }
    Ok(LocalErrorNet {
        config: cfg.clone(),
        weights,
        classifiers,
    })
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows(scores: &Matrix) -> Matrix {
    let mut out = scores.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn relu(m: &Matrix) -> Matrix {
    m.map(|z| z.max(0.0))
}

/// `E = -Σ_i h_i ln P_i` for one row.
pub fn local_loss(probs: &[f64], h: &[f64]) -> f64 {
    -probs
        .iter()
        .zip(h)
        .filter(|(_, &hi)| hi != 0.0)
        .map(|(p, hi)| hi * p.ln())
        .sum::<f64>()
}

/// Mean of [`local_loss`] over the rows of `probs` and `targets`.
pub fn local_loss_batch(probs: &Matrix, targets: &Matrix) -> f64 {
    let n = probs.rows();
    if n == 0 {
        return 0.0;
    }
    (0..n)
        .map(|r| local_loss(probs.row(r), targets.row(r)))
        .sum::<f64>()
        / n as f64
}

/// Predicted class: index of the largest score, lowest index on ties.
pub fn classify_at_layer(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

impl LocalErrorNet {
    pub fn new(cfg: &NetConfig) -> Result<Self, NetworkError> {
        init_network(cfg, &mut Rng::new(cfg.seed))
    }

    /// Assembles a net from explicit matrices, checking every shape.
    pub fn from_parts(config: NetConfig, weights: Vec<Matrix>, classifiers: Vec<Matrix>) -> Result<Self, NetworkError> {
        config.validate()?;
        if weights.len() != config.depth() || classifiers.len() != config.depth() {
            return Err(NetworkError::Config("one W and one J per layer".into()));
        }
        for l in 0..config.depth() {
            let w_shape = (config.fan_in(l), config.widths[l]);
            let j_shape = (config.widths[l], config.classifier_width);
            if weights[l].shape() != w_shape || classifiers[l].shape() != j_shape {
                return Err(NetworkError::Config(format!(
                    "layer {l}: W {:?} J {:?}, expected {w_shape:?} {j_shape:?}",
                    weights[l].shape(),
                    classifiers[l].shape()
                )));
            }
        }
        Ok(Self {
            config,
            weights,
            classifiers,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn classifiers(&self) -> &[Matrix] {
        &self.classifiers
    }

    pub fn weight(&self, l: usize) -> &Matrix {
        &self.weights[l]
    }

    pub fn classifier(&self, l: usize) -> &Matrix {
        &self.classifiers[l]
    }

    /// Mutable access to a trainable matrix (classifiers stay frozen).
    pub fn weight_mut(&mut self, l: usize) -> &mut Matrix {
        &mut self.weights[l]
    }

    /// SHA-256 over the bit patterns of every classifier matrix.
    pub fn classifier_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for j in &self.classifiers {
            for x in j.data() {
                hasher.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    fn check_input(&self, batch: &Matrix) -> Result<(), NetworkError> {
        if batch.cols() != self.config.input_width {
            return Err(NumericsError::Shape(format!(
                "input width {} but the net expects {}",
                batch.cols(),
                self.config.input_width
            ))
            .into());
        }
        Ok(())
    }

    /// Pre-activation, activation, scores and probabilities of layer `l` for
    /// the given layer input.
    pub fn layer_forward(&self, l: usize, input: &Matrix) -> Result<LayerRecord, NetworkError> {
        let pre = input.matmul(&self.weights[l])?;
        let act = relu(&pre);
        let scores = act.matmul(&self.classifiers[l])?;
        let probs = softmax_rows(&scores);
        Ok(LayerRecord {
            pre,
            act,
            scores,
            probs,
        })
    }

    /// Full forward pass, keeping every layer's record.
    pub fn forward(&self, batch: &Matrix) -> Result<LayerActivations, NetworkError> {
        self.check_input(batch)?;
        let mut layers: Vec<LayerRecord> = Vec::with_capacity(self.depth());
        for l in 0..self.depth() {
            let rec = {
                let input = layers.last().map_or(batch, |r| &r.act);
                self.layer_forward(l, input)?
            };
            layers.push(rec);
        }
        Ok(LayerActivations {
            batch: batch.clone(),
            layers,
        })
    }

    /// Inputs `I^1..I^L` of every layer (the last entry is `I^L`), without
    /// keeping scores.
    pub fn layer_inputs(&self, batch: &Matrix) -> Result<Vec<Matrix>, NetworkError> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.depth());
        inputs.push(batch.clone());
        for l in 0..self.depth() - 1 {
            let next = relu(&inputs[l].matmul(&self.weights[l])?);
            inputs.push(next);
        }
        Ok(inputs)
    }

    /// Activations `y^l` of every layer.
    pub fn layer_activations(&self, batch: &Matrix) -> Result<Vec<Matrix>, NetworkError> {
        let mut inputs = self.layer_inputs(batch)?;
        let last = relu(&inputs[self.depth() - 1].matmul(&self.weights[self.depth() - 1])?);
        inputs.remove(0);
        inputs.push(last);
        Ok(inputs)
    }

    /// Back-projected error `(P - h) Jᵀ ⊙ f'(z)` at layer `l`, one row per
    /// input. `f'(z) = 1` for `z > 0`, else 0.
    pub fn layer_delta(&self, l: usize, rec: &LayerRecord, targets: &Matrix) -> Result<Matrix, NetworkError> {
        let err = rec.probs.sub(targets)?;
        let mut delta = err.matmul_t(&self.classifiers[l])?;
        for (d, &z) in delta.data_mut().iter_mut().zip(rec.pre.data()) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        Ok(delta)
    }

    /// `∂E^l/∂W^l` of the batch-mean local loss.
    pub fn local_gradient(&self, l: usize, acts: &LayerActivations, targets: &Matrix) -> Result<Matrix, NetworkError> {
        let delta = self.layer_delta(l, &acts.layers[l], targets)?;
        let n = acts.batch.rows().max(1) as f64;
        Ok(acts.input(l).t_matmul(&delta)?.scale(1.0 / n))
    }

    /// `∂E^l/∂I^l` for each row's own loss, through layer `l` only.
    pub fn input_gradient(&self, l: usize, acts: &LayerActivations, targets: &Matrix) -> Result<Matrix, NetworkError> {
        let delta = self.layer_delta(l, &acts.layers[l], targets)?;
        Ok(delta.matmul_t(&self.weights[l])?)
    }

    /// Input gradient at layer `l` computed straight from the layer input.
    pub fn input_gradient_at(&self, l: usize, input: &Matrix, targets: &Matrix) -> Result<Matrix, NetworkError> {
        let rec = self.layer_forward(l, input)?;
        let delta = self.layer_delta(l, &rec, targets)?;
        Ok(delta.matmul_t(&self.weights[l])?)
    }

    /// Per-layer predictions for every row of `images`.
    pub fn predict(&self, images: &Matrix) -> Result<Vec<Vec<usize>>, NetworkError> {
        self.check_input(images)?;
        let n = images.rows();
        let chunks = n.div_ceil(EVAL_CHUNK);
        let parts = parallel::map_indices(chunks, |c| -> Result<Vec<Vec<usize>>, NetworkError> {
            let idx: Vec<usize> = (c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(n)).collect();
            let mut input = images.select_rows(&idx);
            let mut out = Vec::with_capacity(self.depth());
            for l in 0..self.depth() {
                let act = relu(&input.matmul(&self.weights[l])?);
                let scores = act.matmul(&self.classifiers[l])?;
                out.push((0..scores.rows()).map(|r| classify_at_layer(scores.row(r))).collect());
                input = act;
            }
            Ok(out)
        });
        let mut per_layer = vec![Vec::with_capacity(n); self.depth()];
        for part in parts {
            for (l, preds) in part?.into_iter().enumerate() {
                per_layer[l].extend(preds);
            }
        }
        Ok(per_layer)
    }

    /// Apply `W^l -= eta · grad` to one layer only.
    pub fn apply_update(&mut self, l: usize, eta: f64, grad: &Matrix) -> Result<(), NetworkError> {
        self.weights[l].add_scaled(-eta, grad)?;
        Ok(())
    }

    /// Writes the checkpoint container: `LECK`, version u32, header length
    /// u32 (little-endian), a JSON header, then every `W^l` followed by
    /// every `J^l` as little-endian f64 in row-major order.
    pub fn save_checkpoint(&self, meta: &CheckpointMeta, path: &Path) -> Result<(), NetworkError> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            meta: meta.clone(),
        })
        .map_err(|e| NetworkError::Format(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for m in self.weights.iter().chain(&self.classifiers) {
            for x in m.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let io = |source| NetworkError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&buf).map_err(io)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, CheckpointMeta), NetworkError> {
        let bytes = fs::read(path).map_err(|source| NetworkError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(NetworkError::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(NetworkError::Format(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: CheckpointHeader = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| NetworkError::Format("header truncated".into()))
            .and_then(|h| serde_json::from_slice(h).map_err(|e| NetworkError::Format(e.to_string())))?;
        let cfg = header.config;
        cfg.validate()?;
        let mut floats = bytes[12 + hlen..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |rows: usize, cols: usize| -> Result<Matrix, NetworkError> {
            let data: Vec<f64> = floats.by_ref().take(rows * cols).collect();
            if data.len() != rows * cols {
                return Err(NetworkError::Format("weights truncated".into()));
            }
            Ok(Matrix::from_vec(rows, cols, data)?)
        };
        let weights = (0..cfg.depth())
            .map(|l| take(cfg.fan_in(l), cfg.widths[l]))
            .collect::<Result<Vec<_>, _>>()?;
        let classifiers = (0..cfg.depth())
            .map(|l| take(cfg.widths[l], cfg.classifier_width))
            .collect::<Result<Vec<_>, _>>()?;
        if (bytes.len() - 12 - hlen) != 8 * (weights.iter().chain(&classifiers).map(|m| m.data().len()).sum::<usize>()) {
            return Err(NetworkError::Format("trailing bytes after weights".into()));
        }
        Ok((Self::from_parts(cfg, weights, classifiers)?, header.meta))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"LECK";
const CHECKPOINT_VERSION: u32 = 1;

/// Provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net_seed: u64,
    pub shuffle_seed: u64,
    pub replicate: usize,
    pub epochs_trained: usize,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetConfig,
    meta: CheckpointMeta,
}

/// Per-layer fraction of correctly classified rows.
pub fn test_accuracy(net: &LocalErrorNet, ds: &LabeledDataset) -> Result<Vec<f64>, NetworkError> {
    let preds = net.predict(ds.images())?;
    Ok(accuracy_from_predictions(&preds, ds.labels()))
}

pub fn accuracy_from_predictions(preds: &[Vec<usize>], labels: &[u8]) -> Vec<f64> {
    let n = labels.len().max(1) as f64;
    preds
        .iter()
        .map(|p| {
            p.iter()
                .zip(labels)
                .filter(|(&a, &q)| a == q as usize)
                .count() as f64
                / n
        })
        .collect()
}

/// One pass over shuffled mini-batches. Every batch runs a single forward
/// pass, computes all layers' local gradients from it, then applies them.
///
/// Returns the per-layer misclassification rate of the training batches,
/// measured on the forward pass preceding each update.
pub fn train_epoch(
    net: &mut LocalErrorNet,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>, NetworkError> {
    cfg.validate()?;
    sgd_epoch(net, ds, cfg.batch_size, learning_rate(cfg, epoch), rng)
}

/// [`train_epoch`] with an explicit step size; `eta = 0` is allowed.
pub fn sgd_epoch(
    net: &mut LocalErrorNet,
    ds: &LabeledDataset,
    batch_size: usize,
    eta: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>, NetworkError> {
    let batch_size = batch_size.min(ds.len().max(1));
    let batches = minibatch_indices(ds.len(), batch_size, rng)?;
    let depth = net.depth();
    let mut wrong = vec![0usize; depth];
    for (b, idx) in batches.iter().enumerate() {
        let x = ds.images().select_rows(idx);
        let labels: Vec<u8> = idx.iter().map(|&i| ds.labels()[i]).collect();
        let targets = one_hot_matrix(&labels);
        let acts = net.forward(&x)?;
        let mut grads = Vec::with_capacity(depth);
        for l in 0..depth {
            let rec = &acts.layers[l];
            let loss = local_loss_batch(&rec.probs, &targets);
            if !loss.is_finite() || loss.abs() > LOSS_LIMIT {
                return Err(NetworkError::Divergence {
                    layer: l + 1,
                    batch: b,
                    detail: format!("local loss {loss}"),
                });
            }
            wrong[l] += (0..rec.scores.rows())
                .filter(|&r| classify_at_layer(rec.scores.row(r)) != labels[r] as usize)
                .count();
            grads.push(net.local_gradient(l, &acts, &targets)?);
        }
        for (l, g) in grads.iter().enumerate() {
            net.apply_update(l, eta, g)?;
            let norm = net.weights[l].frobenius_norm();
            if !norm.is_finite() || norm > WEIGHT_NORM_LIMIT {
                return Err(NetworkError::Divergence {
                    layer: l + 1,
                    batch: b,
                    detail: format!("weight norm {norm}"),
                });
            }
        }
    }
    let n = ds.len().max(1) as f64;
    Ok(wrong.iter().map(|&w| w as f64 / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{one_hot, SyntheticBlobs};

    fn tiny_cfg(input: usize, widths: &[usize], seed: u64) -> NetConfig {
        NetConfig {
            input_width: input,
            widths: widths.to_vec(),
            classifier_width: 10,
            seed,
            init_std_w: 1.0,
            std_j: 1.0,
        }
    }

    #[test]
    fn full_size_shapes() {
        let net = LocalErrorNet::new(&NetConfig::uniform(8, 200, 1)).unwrap();
        assert_eq!(net.depth(), 8);
        assert_eq!(net.weight(0).shape(), (784, 200));
        for l in 1..8 {
            assert_eq!(net.weight(l).shape(), (200, 200));
        }
        assert!(net.classifiers().iter().all(|j| j.shape() == (200, 10)));
    }

    #[test]
    fn init_is_deterministic_and_degenerate_w() {
        let cfg = tiny_cfg(6, &[4, 3], 9);
        assert_eq!(LocalErrorNet::new(&cfg).unwrap(), LocalErrorNet::new(&cfg).unwrap());
        let zero = LocalErrorNet::new(&NetConfig {
            init_std_w: 0.0,
            ..cfg
        })
        .unwrap();
        assert!(zero.weights().iter().all(|w| w.max_abs() == 0.0));
        assert!(zero.classifiers().iter().all(|j| j.max_abs() > 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(tiny_cfg(3, &[], 0).validate().is_err());
        assert!(tiny_cfg(3, &[2, 0], 0).validate().is_err());
        let mut c = tiny_cfg(3, &[2], 0);
        c.classifier_width = 5;
        assert!(c.validate().is_err());
        assert!(TrainConfig { eta0: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { decay: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let net = LocalErrorNet::new(&NetConfig {
            init_std_w: 0.0,
            ..tiny_cfg(5, &[3], 2)
        })
        .unwrap();
        let x = Matrix::filled(2, 5, 0.7);
        let acts = net.forward(&x).unwrap();
        let rec = &acts.layers[0];
        assert_eq!(rec.pre.max_abs(), 0.0);
        assert_eq!(rec.scores.max_abs(), 0.0);
        assert!(rec.probs.data().iter().all(|&p| p == 0.1));
    }

    #[test]
    fn hand_worked_tiny_forward() {
        // 2 inputs -> 2 hidden -> 10 classes.
        let w = Matrix::from_vec(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let mut j = Matrix::zeros(2, 10);
        j.set(0, 0, 1.0);
        j.set(1, 3, 0.5);
        j.set(1, 9, -1.0);
        let net = LocalErrorNet::from_parts(tiny_cfg(2, &[2], 0), vec![w], vec![j]).unwrap();
        let x = Matrix::from_vec(1, 2, vec![2.0, 1.0]).unwrap();
        let rec = &net.forward(&x).unwrap().layers[0];
        // z = (2·1 + 1·0.5, 2·(-1) + 1·2) = (2.5, 0)
        assert_eq!(rec.pre.data(), &[2.5, 0.0]);
        assert_eq!(rec.act.data(), &[2.5, 0.0]);
        let mut s = [0.0; 10];
        s[0] = 2.5;
        assert_eq!(rec.scores.data(), &s);
        let denom = 2.5f64.exp() + 9.0;
        assert!((rec.probs.get(0, 0) - 2.5f64.exp() / denom).abs() < 1e-15);
        assert!((rec.probs.get(0, 5) - 1.0 / denom).abs() < 1e-15);
    }

    #[test]
    fn activations_nonnegative_and_probs_normalized() {
        let net = LocalErrorNet::new(&tiny_cfg(12, &[8, 6, 5], 3)).unwrap();
        let x = gaussian_matrix(&mut Rng::new(4), 7, 12, 0.0, 2.0);
        let acts = net.forward(&x).unwrap();
        for rec in &acts.layers {
            assert!(rec.act.data().iter().all(|&y| y >= 0.0));
            for r in 0..rec.probs.rows() {
                let row = rec.probs.row(r);
                assert!(row.iter().all(|&p| p > 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert!(net.forward(&Matrix::zeros(1, 11)).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let s = Matrix::from_vec(1, 4, vec![0.3, -1.0, 2.0, 0.0]).unwrap();
        let a = softmax_rows(&s);
        let b = softmax_rows(&s.map(|x| x + 17.0));
        assert!(a.max_abs_diff(&b) < 1e-12);
        let big = softmax_rows(&Matrix::from_vec(1, 2, vec![1000.0, 0.0]).unwrap());
        assert!(big.is_finite());
    }

    #[test]
    fn loss_values() {
        let uniform = [0.1; 10];
        let h = one_hot(4).unwrap();
        assert!((local_loss(&uniform, h.as_slice()) - 10f64.ln()).abs() < 1e-12);
        let mut sharp = [1e-12; 10];
        sharp[4] = 1.0 - 9e-12;
        assert!(local_loss(&sharp, h.as_slice()) < 1e-10);

        let mut rng = Rng::new(6);
        let mut p = Matrix::zeros(5, 10);
        for x in p.data_mut() {
            *x = rng.normal();
        }
        let p = softmax_rows(&p);
        let labels = [1u8, 3, 0, 9, 9];
        let h = one_hot_matrix(&labels);
        let direct: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &q)| -p.get(r, q as usize).ln())
            .sum::<f64>()
            / 5.0;
        assert!((local_loss_batch(&p, &h) - direct).abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_when_prediction_is_exact() {
        let net = LocalErrorNet::new(&tiny_cfg(4, &[3], 5)).unwrap();
        let x = Matrix::filled(1, 4, 0.5);
        let mut acts = net.forward(&x).unwrap();
        // Pretend the classifier output is exactly the target.
        let h = one_hot_matrix(&[2]);
        acts.layers[0].probs = h.clone();
        assert_eq!(net.local_gradient(0, &acts, &h).unwrap().max_abs(), 0.0);
        assert_eq!(net.input_gradient(0, &acts, &h).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn dead_relu_gives_zero_gradient() {
        let cfg = tiny_cfg(3, &[4], 0);
        let w = Matrix::filled(3, 4, -1.0);
        let j = gaussian_matrix(&mut Rng::new(1), 4, 10, 0.0, 1.0);
        let net = LocalErrorNet::from_parts(cfg, vec![w], vec![j]).unwrap();
        let x = Matrix::filled(2, 3, 0.5);
        let acts = net.forward(&x).unwrap();
        let h = one_hot_matrix(&[1, 7]);
        assert_eq!(net.local_gradient(0, &acts, &h).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn one_unit_input_gradient_by_hand() {
        // One input, one hidden unit: z = w·I, S_k = J_k·y.
        let w = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let mut j = Matrix::zeros(1, 10);
        j.set(0, 0, 1.0);
        j.set(0, 1, -0.5);
        let net = LocalErrorNet::from_parts(tiny_cfg(1, &[1], 0), vec![w], vec![j.clone()]).unwrap();
        let x = Matrix::from_vec(1, 1, vec![0.75]).unwrap();
        let h = one_hot_matrix(&[1]);
        let acts = net.forward(&x).unwrap();
        let y: f64 = 1.5;
        let mut s = [0.0f64; 10];
        s[0] = y;
        s[1] = -0.5 * y;
        let denom: f64 = s.iter().map(|v| v.exp()).sum();
        let p: Vec<f64> = s.iter().map(|v| v.exp() / denom).collect();
        let back: f64 = (0..10)
            .map(|k| (p[k] - if k == 1 { 1.0 } else { 0.0 }) * j.get(0, k))
            .sum();
        let expected = 2.0 * back;
        let got = net.input_gradient(0, &acts, &h).unwrap().get(0, 0);
        assert!((got - expected).abs() < 1e-14);
        let wgrad = net.local_gradient(0, &acts, &h).unwrap().get(0, 0);
        assert!((wgrad - back * 0.75).abs() < 1e-14);
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(learning_rate(&cfg, 0), 0.5);
        assert!((learning_rate(&cfg, 9) - 0.5).abs() < 1e-15);
        assert!((learning_rate(&cfg, 10) - 0.4).abs() < 1e-15);
        assert!((learning_rate(&cfg, 25) - 0.32).abs() < 1e-15);
    }

    #[test]
    fn argmax_rules() {
        let mut s = [0.0; 10];
        s[9] = 5.0;
        assert_eq!(classify_at_layer(&s), 9);
        let mut t = [0.0; 10];
        t[2] = 3.0;
        t[7] = 3.0;
        assert_eq!(classify_at_layer(&t), 2);
        let shifted: Vec<f64> = t.iter().map(|x| x - 11.0).collect();
        assert_eq!(classify_at_layer(&shifted), 2);
    }

    #[test]
    fn accuracy_is_one_for_perfect_predictions() {
        let preds = vec![vec![3, 1, 4], vec![3, 0, 4]];
        assert_eq!(accuracy_from_predictions(&preds, &[3, 1, 4]), vec![1.0, 2.0 / 3.0]);
    }

    #[test]
    fn zero_step_leaves_net_unchanged() {
        let ds = SyntheticBlobs {
            count: 60,
            width: 20,
            noise: 0.2,
        }
        .generate(&mut Rng::new(1));
        let mut net = LocalErrorNet::new(&tiny_cfg(20, &[8, 8], 2)).unwrap();
        let before = net.clone();
        let errs = sgd_epoch(&mut net, &ds, 10, 0.0, &mut Rng::new(3)).unwrap();
        assert_eq!(net, before);
        let acc = test_accuracy(&net, &ds).unwrap();
        for (e, a) in errs.iter().zip(&acc) {
            assert!((e - (1.0 - a)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_sample_single_step() {
        let images = Matrix::from_vec(2, 3, vec![0.2, 0.4, 0.6, 0.8, 0.0, 1.0]).unwrap();
        let ds = LabeledDataset::new(images.clone(), vec![2, 5]).unwrap();
        let mut net = LocalErrorNet::new(&tiny_cfg(3, &[4], 8)).unwrap();
        let w0 = net.weight(0).clone();
        let j = net.classifier(0).clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            eta0: 0.3,
            decay: 1.0,
            decay_every: 1,
        };
        train_epoch(&mut net, &ds, &cfg, 0, &mut Rng::new(0)).unwrap();

        // Scalar re-derivation of the averaged gradient.
        let mut expected = w0.clone();
        let labels = [2usize, 5];
        for s in 0..2 {
            let x = images.row(s);
            let z: Vec<f64> = (0..4).map(|jj| (0..3).map(|i| x[i] * w0.get(i, jj)).sum()).collect();
            let y: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            let sc: Vec<f64> = (0..10).map(|k| (0..4).map(|jj| y[jj] * j.get(jj, k)).sum()).collect();
            let m = sc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let den: f64 = sc.iter().map(|v| (v - m).exp()).sum();
            let p: Vec<f64> = sc.iter().map(|v| (v - m).exp() / den).collect();
            for i in 0..3 {
                for jj in 0..4 {
                    let back: f64 = (0..10)
                        .map(|k| (p[k] - if k == labels[s] { 1.0 } else { 0.0 }) * j.get(jj, k))
                        .sum();
                    let fp = if z[jj] > 0.0 { 1.0 } else { 0.0 };
                    let g = back * fp * x[i] / 2.0;
                    expected.set(i, jj, expected.get(i, jj) - 0.3 * g);
                }
            }
        }
        assert!(net.weight(0).max_abs_diff(&expected) < 1e-14);
        assert_eq!(net.classifier(0), &j);
    }

    #[test]
    fn update_touches_one_layer() {
        let mut net = LocalErrorNet::new(&tiny_cfg(5, &[4, 4, 4], 1)).unwrap();
        let before = net.clone();
        let g = Matrix::filled(4, 4, 1.0);
        net.apply_update(1, 0.1, &g).unwrap();
        assert_eq!(net.weight(0), before.weight(0));
        assert_eq!(net.weight(2), before.weight(2));
        assert_ne!(net.weight(1), before.weight(1));
    }

    #[test]
    fn training_reduces_error_on_blobs() {
        let ds = SyntheticBlobs {
            count: 200,
            width: 30,
            noise: 0.35,
        }
        .generate(&mut Rng::new(12));
        let mut net = LocalErrorNet::new(&tiny_cfg(30, &[16, 16, 16], 4)).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 20,
            eta0: 0.1,
            decay: 0.8,
            decay_every: 10,
        };
        let mut rng = Rng::new(5);
        let digest = net.classifier_digest();
        let first = train_epoch(&mut net, &ds, &cfg, 0, &mut rng).unwrap();
        let mut last = first.clone();
        for e in 1..5 {
            last = train_epoch(&mut net, &ds, &cfg, e, &mut rng).unwrap();
        }
        assert!(last[2] < first[2], "{first:?} -> {last:?}");
        assert_eq!(net.classifier_digest(), digest);
    }

    #[test]
    fn divergence_is_reported() {
        let ds = SyntheticBlobs {
            count: 20,
            width: 10,
            noise: 0.2,
        }
        .generate(&mut Rng::new(1));
        let mut net = LocalErrorNet::new(&NetConfig {
            init_std_w: 1e4,
            ..tiny_cfg(10, &[8, 8], 2)
        })
        .unwrap();
        let cfg = TrainConfig {
            eta0: 1e6,
            batch_size: 5,
            ..Default::default()
        };
        let mut rng = Rng::new(0);
        let err = (0..5)
            .find_map(|e| train_epoch(&mut net, &ds, &cfg, e, &mut rng).err())
            .expect("training should diverge");
        assert!(matches!(err, NetworkError::Divergence { .. }), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = LocalErrorNet::new(&tiny_cfg(7, &[5, 3], 77)).unwrap();
        let meta = CheckpointMeta {
            net_seed: 77,
            shuffle_seed: 5,
            replicate: 2,
            epochs_trained: 3,
            train: Some(TrainConfig::default()),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.ckpt");
        net.save_checkpoint(&meta, &p).unwrap();
        let (back, m) = LocalErrorNet::load_checkpoint(&p).unwrap();
        assert_eq!(back, net);
        assert_eq!(m, meta);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(LocalErrorNet::load_checkpoint(&p).is_err());
    }
}
