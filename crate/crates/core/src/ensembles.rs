//! Reproducible Gaussian ensembles and the known-mean sample covariance.
//!
//! Every column of an ensemble comes from its own ChaCha8 stream. The 256-bit
//! key packs `(seed, stream)` with a fixed tag and the column index selects
//! the ChaCha stream, so column `i` of trial `stream` is the same no matter
//! which thread draws it or in which order.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::covmodels::{CovarianceModel, JITTER_REL};
use crate::error::{arg_err, Error, Result};
use crate::linalg;

const DOMAIN_TAG: [u8; 16] = *b"covloc/ensemble\0";

/// Lower-triangular factor `L` with `L L^T` equal to a model matrix plus jitter.
#[derive(Debug, Clone)]
pub struct FactorizedModel {
    lower: DMatrix<f64>,
    jitter: f64,
    label: String,
}

impl FactorizedModel {
    /// Wrap an existing lower factor without checks. Used for degenerate test
    /// factors such as the zero matrix.
    pub fn from_lower(lower: DMatrix<f64>, label: impl Into<String>) -> Result<Self> {
        if !lower.is_square() {
            return arg_err(format!("factor must be square, got {}x{}", lower.nrows(), lower.ncols()));
        }
        Ok(Self { lower, jitter: 0.0, label: label.into() })
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Diagonal shift that was needed for the factorization to succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }
}

/// Cholesky factorization of a model matrix.
///
/// Rank-deficient models (pressure-wind is rank `d` out of `2d`) fail the
/// plain factorization at machine precision. The factorization is retried
/// with diagonal shifts `delta`, `10 delta` and `100 delta`, where
/// `delta = 1e-12 * trace / d`.
pub fn factorize(model: &CovarianceModel) -> Result<FactorizedModel> {
    factorize_matrix(model.matrix(), model.label().name())
}

pub fn factorize_matrix(matrix: &DMatrix<f64>, label: &str) -> Result<FactorizedModel> {
    if !matrix.is_square() || matrix.nrows() == 0 {
        return arg_err(format!("cannot factorize a {}x{} matrix", matrix.nrows(), matrix.ncols()));
    }
    let d = matrix.nrows();
    let delta = JITTER_REL * matrix.trace() / d as f64;
    let mut last = match linalg::cholesky_lower(matrix) {
        Ok(lower) => return Ok(FactorizedModel { lower, jitter: 0.0, label: label.into() }),
        Err(p) => p,
    };
    if delta > 0.0 {
        for mult in [1.0, 10.0, 100.0] {
            let jitter = delta * mult;
            let mut shifted = matrix.clone();
            for i in 0..d {
                shifted[(i, i)] += jitter;
            }
            match linalg::cholesky_lower(&shifted) {
                Ok(lower) => return Ok(FactorizedModel { lower, jitter, label: label.into() }),
                Err(p) => last = p,
            }
        }
    }
    Err(Error::Factorization { pivot: last.0, value: last.1 })
}

/// A `d x n` sample matrix and the identifiers that reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleData {
    data: DMatrix<f64>,
    model_label: String,
    seed: u64,
    stream: u64,
}

impl EnsembleData {
    /// Wrap externally supplied samples (columns are members).
    pub fn from_samples(data: DMatrix<f64>, model_label: impl Into<String>) -> Result<Self> {
        if data.ncols() == 0 || data.nrows() == 0 {
            return arg_err("an ensemble needs at least one member and one coordinate");
        }
        if data.iter().any(|v| !v.is_finite()) {
            return arg_err("ensemble contains non-finite values");
        }
        Ok(Self { data, model_label: model_label.into(), seed: 0, stream: 0 })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn model_label(&self) -> &str {
        &self.model_label
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn size(&self) -> usize {
        self.data.ncols()
    }

    /// FNV-1a hash of the raw bits, column-major.
    pub fn checksum(&self) -> u64 {
        fnv1a(&self.data)
    }
}

pub(crate) fn fnv1a(m: &DMatrix<f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in m.iter() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn member_rng(seed: u64, stream: u64, member: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..].copy_from_slice(&DOMAIN_TAG);
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(member);
    rng
}

/// `d x n` matrix of independent standard normals keyed by `(seed, stream)`.
pub fn standard_normals(d: usize, n: usize, seed: u64, stream: u64) -> DMatrix<f64> {
    let mut z = DMatrix::<f64>::zeros(d, n);
    for (j, mut col) in z.column_iter_mut().enumerate() {
        let mut rng = member_rng(seed, stream, j as u64);
        for v in col.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
    z
}

/// `n` samples `L z_i` with `z_i` standard normal.
pub fn draw_ensemble(factor: &FactorizedModel, n: usize, seed: u64, stream: u64) -> Result<EnsembleData> {
    if n == 0 {
        return arg_err("ensemble size must be at least 1");
    }
    let z = standard_normals(factor.dim(), n, seed, stream);
    Ok(EnsembleData {
        data: factor.lower() * z,
        model_label: factor.label.clone(),
        seed,
        stream,
    })
}

/// `(1/n) X X^T`, without centering. Exactly symmetric.
pub fn sample_covariance(ens: &EnsembleData) -> DMatrix<f64> {
    sample_covariance_of(&ens.data)
}

pub fn sample_covariance_of(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.ncols() as f64;
    let mut s = x * x.transpose();
    s /= n;
    linalg::mirror_lower_to_upper(&mut s);
    s
}
