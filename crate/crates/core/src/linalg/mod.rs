//! Dense linear algebra and deterministic random numbers.

mod matrix;
mod rng;
mod svd;

pub use matrix::Matrix;
pub use rng::{derive_seed, gaussian_matrix, splitmix64, Rng};
pub use svd::{
    approx_error, svd, truncate_svd, ErrorMetric, SvdResult, MAX_SWEEPS, SWEEP_TOLERANCE,
};
