//! Deterministic linear-algebra and statistics kernel.

mod eigen;
mod matrix;
mod rng;
mod stats;

use thiserror::Error;

pub use eigen::{
    psd_eigvals, sym_eigen, sym_eigvals, PsdSpectrum, SymmetricEigen, PSD_CLAMP_REL, SYMMETRY_TOL,
};
pub use matrix::Matrix;
pub use rng::{derive_seed, gaussian_matrix, mix64, Rng};
pub use stats::{covariance, linfit, mean_std, uncentered_second_moment, LineFit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("need at least {need} samples, got {got}")]
    InsufficientSamples { got: usize, need: usize },
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("eigensolver did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
}
