//! Layer-wise additive perturbations of a layer's immediate input:
//! Gaussian white noise `δI = ε z` (black-box) and the fast gradient sign
//! method `δI = ε sgn(∂E^l/∂I^l)` (white-box, through layer `l` only).
//!
//! Under the default [`Protocol::Independent`] the clean input of every layer
//! comes from propagating the unperturbed image; the perturbation of layer
//! `l` is seen only by layer `l`'s own units and classifier.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{one_hot_matrix, LabeledDataset, OneHot};
use crate::network::{classify_at_layer, relu, LocalErrorNet, NetworkError};
use crate::numerics::{Matrix, NumericsError, Rng};
use crate::parallel;

/// Substream tag for Gaussian attack noise.
const GAUSSIAN_TAG: u64 = 0x0067_6175_7373;

/// Rows per task in batched attack evaluation.
const ATTACK_CHUNK: usize = 500;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid attack: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Gaussian,
    Fgsm,
}

impl AttackKind {
    pub const ALL: [AttackKind; 2] = [AttackKind::Gaussian, AttackKind::Fgsm];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Gaussian => "gaussian",
            AttackKind::Fgsm => "fgsm",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(AttackKind::Gaussian),
            "fgsm" => Ok(AttackKind::Fgsm),
            other => Err(AttackError::Invalid(format!("unknown attack kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f64,
    /// Noise seed; ignored by FGSM.
    #[serde(default)]
    pub seed: u64,
}

impl AttackSpec {
    pub fn gaussian(epsilon: f64, seed: u64) -> Self {
        Self {
            kind: AttackKind::Gaussian,
            epsilon,
            seed,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(AttackError::Invalid(format!(
                "epsilon {} must be finite and >= 0",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// How perturbations reach deeper layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Each layer is attacked on its clean input; nothing propagates.
    #[default]
    Independent,
    /// Every layer's input is perturbed and the perturbed activation feeds the
    /// next layer, so layer `l` sees the accumulated effect of layers `1..=l`.
    Cascade,
}

/// `sgn(x) = |x| / x`, with `sgn(0) = 0`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `ε z` with `z` drawn from `rng`.
pub fn gaussian_perturbation(rng: &mut Rng, epsilon: f64, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| epsilon * rng.normal()).collect()
}

/// Unit Gaussian directions for rows `ids` at layer `layer`; row `i` uses the
/// substream `(seed, GAUSSIAN_TAG, layer, ids[i])`, so noise depends only on
/// the image identity and never on labels or evaluation order.
pub fn gaussian_directions(seed: u64, layer: usize, ids: &[usize], dim: usize) -> Matrix {
    let mut m = Matrix::zeros(ids.len(), dim);
    for (r, &id) in ids.iter().enumerate() {
        let mut rng = Rng::substream(seed, &[GAUSSIAN_TAG, layer as u64, id as u64]);
        rng.fill_normal(m.row_mut(r));
    }
    m
}

/// `ε · sgn(∂E^l/∂I^l)` for one clean layer input.
pub fn fgsm_perturbation(
    net: &LocalErrorNet,
    layer: usize,
    input: &[f64],
    h: &OneHot,
    epsilon: f64,
) -> Result<Vec<f64>, AttackError> {
    let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
    let t = Matrix::from_vec(1, h.as_slice().len(), h.as_slice().to_vec())?;
    let g = net.input_gradient_at(layer, &x, &t)?;
    Ok(g.data().iter().map(|&gi| epsilon * sign(gi)).collect())
}

/// Sign of the local input gradient for every row.
pub fn fgsm_directions(net: &LocalErrorNet, layer: usize, inputs: &Matrix, labels: &[u8]) -> Result<Matrix, AttackError> {
    let g = net.input_gradient_at(layer, inputs, &one_hot_matrix(labels))?;
    Ok(g.map(sign))
}

/// Unit perturbation directions (to be scaled by ε) for one layer's inputs.
fn directions(
    net: &LocalErrorNet,
    kind: AttackKind,
    seed: u64,
    layer: usize,
    inputs: &Matrix,
    labels: &[u8],
    ids: &[usize],
) -> Result<Matrix, AttackError> {
    match kind {
        AttackKind::Gaussian => Ok(gaussian_directions(seed, layer, ids, inputs.cols())),
        AttackKind::Fgsm => fgsm_directions(net, layer, inputs, labels),
    }
}

/// One layer's response to a family of perturbations `ε · D` of its clean
/// inputs. Pre-activations are affine in ε, so the probe stores `I W` and
/// `D W` once and evaluates any ε with one axpy and a ReLU.
#[derive(Clone, Debug)]
pub struct LayerProbe {
    layer: usize,
    clean_pre: Matrix,
    direction_pre: Matrix,
}

impl LayerProbe {
    pub fn new(
        net: &LocalErrorNet,
        layer: usize,
        clean_inputs: &Matrix,
        labels: &[u8],
        ids: &[usize],
        kind: AttackKind,
        seed: u64,
    ) -> Result<Self, AttackError> {
        let d = directions(net, kind, seed, layer, clean_inputs, labels, ids)?;
        Ok(Self {
            layer,
            clean_pre: clean_inputs.matmul(net.weight(layer))?,
            direction_pre: d.matmul(net.weight(layer))?,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    /// Pre-activations at strength `epsilon`; `epsilon = 0` returns the clean
    /// pre-activations bit for bit.
    pub fn pre_activations(&self, epsilon: f64) -> Matrix {
        if epsilon == 0.0 {
            return self.clean_pre.clone();
        }
        let mut z = self.clean_pre.clone();
        z.add_scaled(epsilon, &self.direction_pre)
            .expect("probe matrices share a shape");
        z
    }

    pub fn activations(&self, epsilon: f64) -> Matrix {
        relu(&self.pre_activations(epsilon))
    }

    pub fn predictions(&self, net: &LocalErrorNet, epsilon: f64) -> Result<Vec<usize>, AttackError> {
        let scores = self.activations(epsilon).matmul(net.classifier(self.layer))?;
        Ok((0..scores.rows()).map(|r| classify_at_layer(scores.row(r))).collect())
    }
}

/// Per-layer accuracy on `ds` when each layer's input is perturbed by `spec`.
pub fn attacked_accuracy(
    net: &LocalErrorNet,
    ds: &LabeledDataset,
    spec: &AttackSpec,
    protocol: Protocol,
) -> Result<Vec<f64>, AttackError> {
    spec.validate()?;
    let n = ds.len();
    let chunks = n.div_ceil(ATTACK_CHUNK);
    let parts = parallel::map_indices(chunks, |c| -> Result<Vec<usize>, AttackError> {
        let ids: Vec<usize> = (c * ATTACK_CHUNK..((c + 1) * ATTACK_CHUNK).min(n)).collect();
        let labels: Vec<u8> = ids.iter().map(|&i| ds.labels()[i]).collect();
        let mut input = ds.images().select_rows(&ids);
        let mut correct = vec![0usize; net.depth()];
        for l in 0..net.depth() {
            let d = directions(net, spec.kind, spec.seed, l, &input, &labels, &ids)?;
            let mut perturbed = input.clone();
            if spec.epsilon != 0.0 {
                perturbed.add_scaled(spec.epsilon, &d)?;
            }
            let act = relu(&perturbed.matmul(net.weight(l))?);
            let scores = act.matmul(net.classifier(l))?;
            correct[l] = (0..scores.rows())
                .filter(|&r| classify_at_layer(scores.row(r)) == labels[r] as usize)
                .count();
            input = match protocol {
                Protocol::Independent => relu(&input.matmul(net.weight(l))?),
                Protocol::Cascade => act,
            };
        }
        Ok(correct)
    });
    let mut total = vec![0usize; net.depth()];
    for part in parts {
        for (t, c) in total.iter_mut().zip(part?) {
            *t += c;
        }
    }
    let denom = n.max(1) as f64;
    Ok(total.iter().map(|&c| c as f64 / denom).collect())
}

/// Activations `y^l` of layer `layer` for every stimulus when its clean input
/// is perturbed by `spec` (independent protocol).
pub fn attacked_activations(
    net: &LocalErrorNet,
    stimuli: &LabeledDataset,
    spec: &AttackSpec,
    layer: usize,
) -> Result<Matrix, AttackError> {
    spec.validate()?;
    if layer >= net.depth() {
        return Err(AttackError::Invalid(format!(
            "layer {layer} out of range for depth {}",
            net.depth()
        )));
    }
    let inputs = net.layer_inputs(stimuli.images())?;
    let ids: Vec<usize> = (0..stimuli.len()).collect();
    let probe = LayerProbe::new(
        net,
        layer,
        &inputs[layer],
        stimuli.labels(),
        &ids,
        spec.kind,
        spec.seed,
    )?;
    Ok(probe.activations(spec.epsilon))
}

/// Attacked activations `y^1..y^L` of every row of `ds` under
/// [`Protocol::Cascade`]: each layer perturbs its (already perturbed) input
/// and passes the result on.
pub fn cascade_activations(net: &LocalErrorNet, ds: &LabeledDataset, spec: &AttackSpec) -> Result<Vec<Matrix>, AttackError> {
    spec.validate()?;
    let ids: Vec<usize> = (0..ds.len()).collect();
    let mut input = ds.images().clone();
    let mut out = Vec::with_capacity(net.depth());
    for l in 0..net.depth() {
        let mut perturbed = input;
        if spec.epsilon != 0.0 {
            let d = directions(net, spec.kind, spec.seed, l, &perturbed, ds.labels(), &ids)?;
            perturbed.add_scaled(spec.epsilon, &d)?;
        }
        let act = relu(&perturbed.matmul(net.weight(l))?);
        input = act.clone();
        out.push(act);
    }
    Ok(out)
}
