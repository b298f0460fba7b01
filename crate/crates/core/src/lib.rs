//! Deep networks trained with per-layer local errors through fixed random
//! classifiers, Gaussian and FGSM layer-wise attacks, and the eigen-spectrum
//! statistics (power-law exponent, explained variance, participation-ratio
//! dimensionality) of each layer's representation.

pub mod attacks;
pub mod data;
pub mod harness;
pub mod manifold;
pub mod network;
pub mod numerics;
pub mod parallel;
