//! Covariance estimation with localization.
//!
//! Sample, Schur-product, hybrid, inverse-Wishart and quadratically
//! constrained MAP covariance estimators, a set of one-dimensional benchmark
//! covariance models, and the Monte Carlo harness that tunes localization
//! parameters as a function of ensemble size.

pub mod covmodels;
pub mod ensembles;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod linalg;
pub mod matrix_io;
pub mod qc;
pub mod sweeps;

pub use error::{Error, Result};
