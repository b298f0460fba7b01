//! Geometry of layer representations: PCA eigen-spectrum of the activation
//! cloud, power-law exponent of its leading part, explained variance, and
//! the participation-ratio dimensionality with its power-law predictions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{covariance, linfit, psd_eigvals, uncentered_second_moment, Matrix, NumericsError};

/// Number of leading principal components used for the exponent fit.
pub const DEFAULT_FIT_WINDOW: usize = 10;

#[derive(Debug, Error)]
pub enum ManifoldError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("activation dump I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("activation dump format: {0}")]
    Format(String),
}

/// Whether the activation cloud is mean-subtracted before PCA.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    #[default]
    Centered,
    Uncentered,
}

/// Descending eigenvalues of the `N × N` covariance of the `k` rows of
/// `activations`, negative round-off clamped to zero.
pub fn eigen_spectrum(activations: &Matrix) -> Result<Vec<f64>, ManifoldError> {
    eigen_spectrum_with(activations, Centering::Centered)
}

pub fn eigen_spectrum_with(activations: &Matrix, centering: Centering) -> Result<Vec<f64>, ManifoldError> {
    let s = match centering {
        Centering::Centered => covariance(activations)?,
        Centering::Uncentered => uncentered_second_moment(activations)?,
    };
    let spec = psd_eigvals(&s)?;
    if spec.clamped_beyond_tolerance {
        log::warn!("covariance spectrum had negative eigenvalues beyond round-off");
    }
    Ok(spec.values)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub r_squared: f64,
    /// Intercept of `ln λ_n = intercept - alpha · ln n`.
    pub intercept: f64,
}

/// Least-squares fit of `ln λ_n` against `ln n` over `n = 1..=n_fit`;
/// `alpha` is the negated slope.
pub fn fit_power_law(eigenvalues: &[f64], n_fit: usize) -> Result<PowerLawFit, ManifoldError> {
    if n_fit < 2 {
        return Err(ManifoldError::Domain(format!("fit window {n_fit} < 2")));
    }
    if eigenvalues.len() < n_fit {
        return Err(ManifoldError::DegenerateSpectrum(format!(
            "{} eigenvalues for a window of {n_fit}",
            eigenvalues.len()
        )));
    }
    let window = &eigenvalues[..n_fit];
    if let Some(pos) = window.iter().position(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(ManifoldError::DegenerateSpectrum(format!(
            "eigenvalue {} = {} inside the fit window",
            pos + 1,
            window[pos]
        )));
    }
    let xs: Vec<f64> = (1..=n_fit).map(|n| (n as f64).ln()).collect();
    let ys: Vec<f64> = window.iter().map(|l| l.ln()).collect();
    let fit = linfit(&xs, &ys)?;
    Ok(PowerLawFit {
        alpha: -fit.slope,
        r_squared: fit.r_squared,
        intercept: fit.intercept,
    })
}

/// `D = (Σλ)² / Σλ²`.
pub fn participation_dimensionality(eigenvalues: &[f64]) -> Result<f64, ManifoldError> {
    let sum: f64 = eigenvalues.iter().sum();
    let sum_sq: f64 = eigenvalues.iter().map(|l| l * l).sum();
    if !(sum_sq > 0.0) {
        return Err(ManifoldError::DegenerateSpectrum("all eigenvalues are zero".into()));
    }
    Ok(sum * sum / sum_sq)
}

/// Share of the total variance carried by the first `m` eigenvalues.
pub fn explained_variance_fraction(eigenvalues: &[f64], m: usize) -> Result<f64, ManifoldError> {
    if m > eigenvalues.len() {
        return Err(ManifoldError::Domain(format!(
            "m = {m} exceeds {} eigenvalues",
            eigenvalues.len()
        )));
    }
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(ManifoldError::DegenerateSpectrum("zero total variance".into()));
    }
    Ok(eigenvalues[..m].iter().sum::<f64>() / total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionalityMode {
    /// `(Σ n^-α)² / Σ n^-2α` over `n = 1..=N`.
    ExactSum,
    /// Both sums replaced by `∫_1^N n^-a dn`.
    Integral,
}

/// Width of the band around a singular exponent where the integral form is
/// evaluated by its Taylor series.
const SINGULAR_BAND: f64 = 1e-6;

/// `∫_1^N n^{x-1} dn = (N^x - 1) / x`, equal to `ln N` at `x = 0`.
fn power_integral(x: f64, ln_n: f64) -> f64 {
    if x.abs() < SINGULAR_BAND {
        let t = x * ln_n;
        ln_n * (1.0 + t / 2.0 + t * t / 6.0)
    } else {
        (x * ln_n).exp_m1() / x
    }
}

/// Sum `Σ_{n=1}^{N} n^{-s}`, accumulated from the smallest term up.
pub fn power_sum(s: f64, n: usize) -> f64 {
    (1..=n).rev().map(|k| (k as f64).powf(-s)).sum()
}

/// Participation dimensionality of the spectrum `λ_n = n^{-α}`, `n ≤ N`.
pub fn theoretical_dimensionality(alpha: f64, n: usize, mode: DimensionalityMode) -> Result<f64, ManifoldError> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(ManifoldError::Domain(format!("alpha = {alpha} must be >= 0")));
    }
    if n < 2 {
        return Err(ManifoldError::Domain(format!("N = {n} must be >= 2")));
    }
    Ok(match mode {
        DimensionalityMode::ExactSum => {
            let s1 = power_sum(alpha, n);
            s1 * s1 / power_sum(2.0 * alpha, n)
        }
        DimensionalityMode::Integral => {
            let ln_n = (n as f64).ln();
            let a = power_integral(1.0 - alpha, ln_n);
            a * a / power_integral(1.0 - 2.0 * alpha, ln_n)
        }
    })
}

/// Bernoulli numbers `B_2, B_4, …, B_14`.
const BERNOULLI_EVEN: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

/// Terms summed directly before the Euler–Maclaurin tail takes over.
const ZETA_HEAD: usize = 16;

/// Riemann zeta for real `s > 1`: a direct sum over `n < M` plus the
/// Euler–Maclaurin tail at `M = 16` with seven Bernoulli corrections
/// (truncation error far below 1e-12 for every `s > 1`).
pub fn zeta(s: f64) -> Result<f64, ManifoldError> {
    if !(s > 1.0) {
        return Err(ManifoldError::Domain(format!("zeta({s}) diverges; need s > 1")));
    }
    let m = ZETA_HEAD as f64;
    let head: f64 = (1..ZETA_HEAD).rev().map(|k| (k as f64).powf(-s)).sum();
    let mut tail = m.powf(1.0 - s) / (s - 1.0) + 0.5 * m.powf(-s);
    // Term k: B_2k / (2k)! · s(s+1)…(s+2k-2) · M^{-s-2k+1}
    let mut rising = s; // s(s+1)…(s+2k-2)
    let mut factorial = 2.0; // (2k)!
    let mut m_pow = m.powf(-s - 1.0);
    for (k, b) in BERNOULLI_EVEN.iter().enumerate() {
        tail += b / factorial * rising * m_pow;
        let next = 2.0 * (k as f64 + 1.0);
        rising *= (s + next - 1.0) * (s + next);
        factorial *= (next + 1.0) * (next + 2.0);
        m_pow /= m * m;
    }
    Ok(head + tail)
}

/// Large-`N` limit of the power-law dimensionality: `ζ(α)² / ζ(2α)`.
pub fn zeta_dimensionality(alpha: f64) -> Result<f64, ManifoldError> {
    let z = zeta(alpha)?;
    Ok(z * z / zeta(2.0 * alpha)?)
}

/// Integer `N` in `range` whose exact-sum curve best matches the measured
/// `(alpha, D)` points in least squares. Returns `(N, sum of squared errors)`.
pub fn best_fit_effective_n(
    points: &[(f64, f64)],
    range: std::ops::RangeInclusive<usize>,
) -> Result<(usize, f64), ManifoldError> {
    let mut best: Option<(usize, f64)> = None;
    for n in range {
        let mut sse = 0.0;
        for &(alpha, d) in points {
            let pred = theoretical_dimensionality(alpha.max(0.0), n, DimensionalityMode::ExactSum)?;
            sse += (pred - d).powi(2);
        }
        if best.is_none_or(|(_, b)| sse < b) {
            best = Some((n, sse));
        }
    }
    best.ok_or_else(|| ManifoldError::Domain("empty N range".into()))
}

/// Spectrum statistics of one layer's activation cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub layer: usize,
    pub epsilon: f64,
    pub eigenvalues: Vec<f64>,
    pub alpha: f64,
    pub r_squared: f64,
    pub top10_fraction: f64,
    pub dimensionality: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumOptions {
    pub n_fit: usize,
    pub centering: Centering,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self {
            n_fit: DEFAULT_FIT_WINDOW,
            centering: Centering::Centered,
        }
    }
}

impl SpectrumReport {
    pub fn from_eigenvalues(eigenvalues: Vec<f64>, layer: usize, epsilon: f64, n_fit: usize) -> Result<Self, ManifoldError> {
        let fit = fit_power_law(&eigenvalues, n_fit)?;
        let top10_fraction = explained_variance_fraction(&eigenvalues, DEFAULT_FIT_WINDOW.min(eigenvalues.len()))?;
        let dimensionality = participation_dimensionality(&eigenvalues)?;
        Ok(Self {
            layer,
            epsilon,
            eigenvalues,
            alpha: fit.alpha,
            r_squared: fit.r_squared,
            top10_fraction,
            dimensionality,
        })
    }

    /// Full analysis of a `k × N` activation cloud.
    pub fn analyze(activations: &Matrix, layer: usize, epsilon: f64, opts: SpectrumOptions) -> Result<Self, ManifoldError> {
        let eig = eigen_spectrum_with(activations, opts.centering)?;
        Self::from_eigenvalues(eig, layer, epsilon, opts.n_fit)
    }

    pub fn to_json(&self) -> Result<String, ManifoldError> {
        serde_json::to_string_pretty(self).map_err(|e| ManifoldError::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, ManifoldError> {
        serde_json::from_str(s).map_err(|e| ManifoldError::Format(e.to_string()))
    }
}

/// Activations of one layer for offline analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub layer: u32,
    pub epsilon: f64,
    pub seed: u64,
    pub activations: Matrix,
}

const DUMP_MAGIC: &[u8; 4] = b"LEAD";

impl ActivationDump {
    /// Layout (little-endian): `LEAD`, k u64, N u64, layer u32, epsilon f64,
    /// seed u64, then `k × N` f64 in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (k, n) = self.activations.shape();
        let mut buf = Vec::with_capacity(36 + 8 * k * n);
        buf.extend_from_slice(DUMP_MAGIC);
        buf.extend_from_slice(&(k as u64).to_le_bytes());
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&self.layer.to_le_bytes());
        buf.extend_from_slice(&self.epsilon.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for x in self.activations.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ManifoldError> {
        if bytes.len() < 40 || &bytes[..4] != DUMP_MAGIC {
            return Err(ManifoldError::Format("not an activation dump".into()));
        }
        let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let k = u64_at(4) as usize;
        let n = u64_at(12) as usize;
        let layer = u32::from_le_bytes(bytes[20..24].try_into().unwrap());
        let epsilon = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let seed = u64_at(32);
        let body = &bytes[40..];
        if body.len() != 8 * k * n {
            return Err(ManifoldError::Format(format!(
                "expected {} bytes of activations, found {}",
                8 * k * n,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            layer,
            epsilon,
            seed,
            activations: Matrix::from_vec(k, n, data)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifoldError> {
        fs::write(path, self.to_bytes()).map_err(|source| ManifoldError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ManifoldError> {
        let bytes = fs::read(path).map_err(|source| ManifoldError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
