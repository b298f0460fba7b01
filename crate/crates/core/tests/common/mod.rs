#![allow(dead_code)]

use locerr::data::one_hot_matrix;
use locerr::network::{local_loss, local_loss_batch, LocalErrorNet, NetConfig};
use locerr::numerics::{gaussian_matrix, Matrix, Rng};

/// Central-difference step.
const FD_STEP: f64 = 1e-5;
/// Pre-activations closer than this to the ReLU kink void a layer's check.
const KINK_GUARD: f64 = 1e-4;

/// Worst relative discrepancy between analytic and finite-difference
/// gradients of one random tiny network.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradientCheck {
    pub weight_rel_err: f64,
    pub input_rel_err: f64,
    pub layers_checked: usize,
    pub layers_skipped: usize,
}

impl GradientCheck {
    pub fn worst(&self) -> f64 {
        self.weight_rel_err.max(self.input_rel_err)
    }
}

/// `max|a - b| / max(max|a|, max|b|)`, with a tiny floor so that two
/// all-zero gradients compare as equal.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-12, f64::max);
    diff / scale
}

/// A random net with depth ≤ 3 and every width ≤ 8, plus a batch of inputs
/// and one-hot targets, all drawn from `seed`.
pub fn tiny_problem(seed: u64) -> (LocalErrorNet, Matrix, Matrix) {
    let mut rng = Rng::new(seed);
    let depth = 1 + rng.below(3);
    let input_width = 1 + rng.below(8);
    let widths: Vec<usize> = (0..depth).map(|_| 1 + rng.below(8)).collect();
    let cfg = NetConfig {
        input_width,
        widths,
        classifier_width: 10,
        seed,
        init_std_w: 1.0,
        std_j: 1.0,
    };
    let net = LocalErrorNet::new(&cfg).expect("valid tiny config");
    let rows = 1 + rng.below(4);
    let x = gaussian_matrix(&mut rng, rows, input_width, 0.0, 1.0);
    let labels: Vec<u8> = (0..rows).map(|_| rng.below(10) as u8).collect();
    (net, x, one_hot_matrix(&labels))
}

/// Checks `∂E^l/∂W^l` (batch mean) and `∂E^l/∂I^l` (per row) at every layer
/// against central differences.
pub fn gradient_check(seed: u64) -> GradientCheck {
    let (net, x, targets) = tiny_problem(seed);
    let acts = net.forward(&x).expect("forward");
    let mut out = GradientCheck::default();
    for l in 0..net.depth() {
        let rec = &acts.layers[l];
        if rec.pre.data().iter().any(|z| z.abs() < KINK_GUARD) {
            out.layers_skipped += 1;
            continue;
        }
        out.layers_checked += 1;
        let input = acts.input(l).clone();

        let analytic = net.local_gradient(l, &acts, &targets).expect("gradient");
        let mut numeric = vec![0.0; analytic.data().len()];
        for (k, g) in numeric.iter_mut().enumerate() {
            let loss_at = |delta: f64| {
                let mut probe = net.clone();
                probe.weight_mut(l).data_mut()[k] += delta;
                let rec = probe.layer_forward(l, &input).expect("forward");
                local_loss_batch(&rec.probs, &targets)
            };
            *g = (loss_at(FD_STEP) - loss_at(-FD_STEP)) / (2.0 * FD_STEP);
        }
        out.weight_rel_err = out.weight_rel_err.max(rel_err(analytic.data(), &numeric));

        let analytic = net.input_gradient(l, &acts, &targets).expect("input gradient");
        let cols = input.cols();
        let mut numeric = vec![0.0; analytic.data().len()];
        for (k, g) in numeric.iter_mut().enumerate() {
            let row = k / cols;
            let loss_at = |delta: f64| {
                let mut probe = input.clone();
                probe.data_mut()[k] += delta;
                let rec = net.layer_forward(l, &probe).expect("forward");
                local_loss(rec.probs.row(row), targets.row(row))
            };
            *g = (loss_at(FD_STEP) - loss_at(-FD_STEP)) / (2.0 * FD_STEP);
        }
        out.input_rel_err = out.input_rel_err.max(rel_err(analytic.data(), &numeric));
    }
    out
}

/// Random symmetric `n × n` matrix with entries of order one.
pub fn random_symmetric(rng: &mut Rng, n: usize) -> Matrix {
    let a = gaussian_matrix(rng, n, n, 0.0, 1.0);
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s.set(i, j, 0.5 * (a.get(i, j) + a.get(j, i)));
        }
    }
    s
}

/// `Pᵀ S P` for the permutation matrix of `perm`.
pub fn permute_similar(s: &Matrix, perm: &[usize]) -> Matrix {
    let n = perm.len();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, s.get(perm[i], perm[j]));
        }
    }
    out
}

/// Largest elementwise difference relative to the largest magnitude.
pub fn spectrum_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(1e-300, f64::max);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}
