use serde::{Deserialize, Serialize};

use super::matrix::dot;
use super::{Matrix, NumericsError};
use crate::parallel;

/// Ordinary least-squares line `y = slope * x + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Sample covariance of the rows of `samples` (k observations of N variables),
/// normalized by `k - 1`.
pub fn covariance(samples: &Matrix) -> Result<Matrix, NumericsError> {
    second_moment(samples, true)
}

/// Uncentered second-moment matrix `XᵀX / (k - 1)`.
pub fn uncentered_second_moment(samples: &Matrix) -> Result<Matrix, NumericsError> {
    second_moment(samples, false)
}

fn second_moment(samples: &Matrix, center: bool) -> Result<Matrix, NumericsError> {
    let (k, n) = samples.shape();
    if k < 2 {
        return Err(NumericsError::InsufficientSamples { got: k, need: 2 });
    }
    let means = if center {
        samples.column_means()
    } else {
        vec![0.0; n]
    };
    // Centered columns stored contiguously: cols[i] is variable i over samples.
    let mut cols = vec![0.0; n * k];
    for s in 0..k {
        for (i, (&x, m)) in samples.row(s).iter().zip(&means).enumerate() {
            cols[i * k + s] = x - m;
        }
    }
    let denom = (k - 1) as f64;
    let upper: Vec<Vec<f64>> = parallel::map_indices(n, |i| {
        let ci = &cols[i * k..(i + 1) * k];
        (i..n)
            .map(|j| dot(ci, &cols[j * k..(j + 1) * k]) / denom)
            .collect()
    });
    let mut out = Matrix::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            out.set(i, i + off, v);
            out.set(i + off, i, v);
        }
    }
    Ok(out)
}

/// Least-squares fit of `ys` against `xs`; `r_squared = 1 - SS_res / SS_tot`.
///
/// A constant `ys` is fitted exactly and reported with `r_squared = 1`.
pub fn linfit(xs: &[f64], ys: &[f64]) -> Result<LineFit, NumericsError> {
    if xs.len() != ys.len() {
        return Err(NumericsError::Shape(format!(
            "linfit with {} xs and {} ys",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    if n < 2 {
        return Err(NumericsError::DegenerateFit(format!("{n} points")));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if !(sxx > 0.0) || !sxx.is_finite() {
        return Err(NumericsError::DegenerateFit("all xs equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum();
    let r_squared = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(LineFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Mean and sample standard deviation (`n - 1` divisor; 0 for one value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}
