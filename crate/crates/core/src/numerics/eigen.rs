//! Symmetric eigensolver: Householder reduction to tridiagonal form followed
//! by implicit QL iterations with Wilkinson-style shifts (the EISPACK
//! `tred2`/`tql2` pair). O(n³), which is comfortable for the layer widths
//! used here (n ≤ 1000).

use super::{Matrix, NumericsError};

/// Relative asymmetry tolerated before the input is rejected.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Eigenvalues at or above `-PSD_CLAMP_REL * λ_max` are treated as round-off
/// when a positive-semidefinite input is expected.
pub const PSD_CLAMP_REL: f64 = 1e-9;

const MAX_QL_ITERATIONS: usize = 60;

/// Eigenvalues (descending) and, optionally, matching unit eigenvectors
/// stored as the columns of `vectors`.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Option<Matrix>,
}

/// Spectrum of a matrix expected to be PSD, with small negative values zeroed.
#[derive(Clone, Debug, PartialEq)]
pub struct PsdSpectrum {
    pub values: Vec<f64>,
    /// Set when any eigenvalue was negative and got clamped to zero.
    pub clamped: bool,
    /// Set when some eigenvalue fell below `-PSD_CLAMP_REL * λ_max`, i.e. the
    /// input was not PSD up to round-off.
    pub clamped_beyond_tolerance: bool,
}

fn symmetrized(s: &Matrix) -> Result<Matrix, NumericsError> {
    let (n, m) = s.shape();
    if n != m {
        return Err(NumericsError::Shape(format!(
            "eigendecomposition needs a square matrix, got {n}x{m}"
        )));
    }
    if !s.is_finite() {
        return Err(NumericsError::NonFinite("eigensolver input".into()));
    }
    let scale = s.max_abs().max(1.0);
    let mut out = s.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (s.get(i, j), s.get(j, i));
            if (a - b).abs() > SYMMETRY_TOL * scale {
                return Err(NumericsError::NotSymmetric { row: i, col: j });
            }
            let avg = 0.5 * (a + b);
            out.set(i, j, avg);
            out.set(j, i, avg);
        }
    }
    Ok(out)
}

/// Full real spectrum of a symmetric matrix, sorted descending.
pub fn sym_eigvals(s: &Matrix) -> Result<Vec<f64>, NumericsError> {
    Ok(decompose(s, false)?.values)
}

/// Eigenvalues and eigenvectors of a symmetric matrix.
pub fn sym_eigen(s: &Matrix) -> Result<SymmetricEigen, NumericsError> {
    decompose(s, true)
}

/// Descending spectrum of a PSD matrix (e.g. a covariance), negatives zeroed.
pub fn psd_eigvals(s: &Matrix) -> Result<PsdSpectrum, NumericsError> {
    let mut values = sym_eigvals(s)?;
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let mut clamped = false;
    let mut beyond = false;
    for v in &mut values {
        if *v < 0.0 {
            clamped = true;
            if *v < -PSD_CLAMP_REL * top {
                beyond = true;
            }
            *v = 0.0;
        }
    }
    Ok(PsdSpectrum {
        values,
        clamped,
        clamped_beyond_tolerance: beyond,
    })
}

fn decompose(s: &Matrix, want_vectors: bool) -> Result<SymmetricEigen, NumericsError> {
    let a = symmetrized(s)?;
    let n = a.rows();
    if n == 0 {
        return Ok(SymmetricEigen {
            values: Vec::new(),
            vectors: want_vectors.then(|| Matrix::zeros(0, 0)),
        });
    }
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    ql_implicit(&mut v, &mut d, &mut e, want_vectors)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = want_vectors.then(|| {
        let mut m = Matrix::zeros(n, n);
        for (col, &src) in order.iter().enumerate() {
            for (row, vr) in v.iter().enumerate() {
                m.set(row, col, vr[src]);
            }
        }
        m
    });
    Ok(SymmetricEigen { values, vectors })
}

/// Householder reduction. On exit `d` holds the diagonal, `e[1..]` the
/// sub-diagonal and `v` the accumulated orthogonal transform.
fn tridiagonalize(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    d.copy_from_slice(&v[n - 1]);

    for i in (1..n).rev() {
        let scale: f64 = d[..i].iter().map(|x| x.abs()).sum();
        let mut h = 0.0;
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for dk in d[..i].iter_mut() {
                *dk /= scale;
                h += *dk * *dk;
            }
            let f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            e[..i].iter_mut().for_each(|x| *x = 0.0);

            for j in 0..i {
                let f = d[j];
                v[j][i] = f;
                let mut g = e[j] + v[j][j] * f;
                for k in (j + 1)..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let (f, g) = (d[j], e[j]);
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..(n - 1) {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[k][i + 1] * v[k][j];
                }
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for row in v.iter_mut().take(i + 1) {
            row[i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

fn ql_implicit(
    v: &mut [Vec<f64>],
    d: &mut [f64],
    e: &mut [f64],
    want_vectors: bool,
) -> Result<(), NumericsError> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_QL_ITERATIONS {
                    return Err(NumericsError::NoConvergence {
                        iterations: MAX_QL_ITERATIONS,
                    });
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    let h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    if want_vectors {
                        for row in v.iter_mut() {
                            let h = row[i + 1];
                            row[i + 1] = s * row[i] + c * h;
                            row[i] = c * row[i] - s * h;
                        }
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}
