//! Closed-form covariance estimators.
//!
//! All estimators act on a sample covariance `S`:
//!
//! * Schur product `S ∘ L` with a localization matrix `L`,
//! * hybrid `alpha P + (1 - alpha) S` with a static prior `P`,
//! * inverse-Wishart posterior mode, which is the hybrid with `alpha = m / (m + n)`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::covmodels::{kernel_matrix, replicate_blocks, CovarianceModel, GridGeometry, KernelSpec};
use crate::ensembles::{draw_ensemble, factorize, sample_covariance};
use crate::error::{arg_err, check_same_shape, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalizationLayout {
    /// One field on the grid.
    Scalar,
    /// Two stacked fields; all four blocks are the scalar kernel matrix.
    PressureWindBlock,
}

/// Symmetric matrix with unit diagonal and entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMatrix {
    matrix: DMatrix<f64>,
    kernel: Option<KernelSpec>,
    layout: LocalizationLayout,
}

impl LocalizationMatrix {
    /// Validate an explicit localization matrix.
    pub fn from_matrix(matrix: DMatrix<f64>, layout: LocalizationLayout) -> Result<Self> {
        if !linalg::is_exactly_symmetric(&matrix) {
            return arg_err("localization matrix must be square and symmetric");
        }
        if (0..matrix.nrows()).any(|i| matrix[(i, i)] != 1.0) {
            return arg_err("localization matrix must have a unit diagonal");
        }
        if matrix.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return arg_err("localization entries must lie in [0, 1]");
        }
        Ok(Self { matrix, kernel: None, layout })
    }

    /// All-ones matrix: no localization.
    pub fn ones(d: usize) -> Self {
        Self { matrix: DMatrix::from_element(d, d, 1.0), kernel: None, layout: LocalizationLayout::Scalar }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kernel(&self) -> Option<&KernelSpec> {
        self.kernel.as_ref()
    }

    pub fn layout(&self) -> LocalizationLayout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

pub fn build_localization(
    kernel: KernelSpec,
    geometry: GridGeometry,
    layout: LocalizationLayout,
) -> LocalizationMatrix {
    let k = kernel_matrix(&kernel, &geometry);
    let matrix = match layout {
        LocalizationLayout::Scalar => k,
        LocalizationLayout::PressureWindBlock => replicate_blocks(&k),
    };
    LocalizationMatrix { matrix, kernel: Some(kernel), layout }
}

/// `S ∘ L`.
pub fn schur_estimate(s: &DMatrix<f64>, l: &LocalizationMatrix) -> Result<DMatrix<f64>> {
    check_same_shape(s, &l.matrix)?;
    Ok(linalg::hadamard(s, &l.matrix))
}

#[derive(Debug, Clone)]
pub struct HybridSpec {
    prior: CovarianceModel,
    alpha: f64,
}

impl HybridSpec {
    pub fn new(prior: CovarianceModel, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self { prior, alpha })
    }

    pub fn prior(&self) -> &CovarianceModel {
        &self.prior
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return arg_err(format!("alpha must lie in [0, 1], got {alpha}"));
    }
    Ok(())
}

/// `alpha P + (1 - alpha) S`, evaluated entrywise in that order.
pub fn blend(prior: &DMatrix<f64>, s: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    check_same_shape(prior, s)?;
    check_alpha(alpha)?;
    let beta = 1.0 - alpha;
    Ok(prior.zip_map(s, |p, x| alpha * p + beta * x))
}

pub fn hybrid_estimate(s: &DMatrix<f64>, spec: &HybridSpec) -> Result<DMatrix<f64>> {
    blend(spec.prior.matrix(), s, spec.alpha)
}

#[derive(Debug, Clone)]
pub struct InverseWishartSpec {
    prior: CovarianceModel,
    m: f64,
}

impl InverseWishartSpec {
    pub fn new(prior: CovarianceModel, m: f64) -> Result<Self> {
        if !(m > 0.0) || !m.is_finite() {
            return arg_err(format!("sample-size parameter m must be positive, got {m}"));
        }
        Ok(Self { prior, m })
    }

    pub fn prior(&self) -> &CovarianceModel {
        &self.prior
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    /// Prior weight `m / (m + n)`.
    pub fn alpha(&self, n: usize) -> f64 {
        self.m / (self.m + n as f64)
    }
}

/// Posterior mode under the inverse-Wishart prior. Shares the hybrid code
/// path, so the result is bitwise equal to `hybrid_estimate` at `alpha(n)`.
pub fn iw_map_estimate(s: &DMatrix<f64>, spec: &InverseWishartSpec, n: usize) -> Result<DMatrix<f64>> {
    if n == 0 {
        return arg_err("ensemble size must be at least 1");
    }
    blend(spec.prior.matrix(), s, spec.alpha(n))
}

/// An estimator applied to a sample covariance.
#[derive(Debug, Clone)]
pub enum Estimator {
    Sample,
    Schur(LocalizationMatrix),
    Hybrid(HybridSpec),
}

impl Estimator {
    pub fn apply(&self, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Estimator::Sample => Ok(s.clone()),
            Estimator::Schur(l) => schur_estimate(s, l),
            Estimator::Hybrid(h) => hybrid_estimate(s, h),
        }
    }
}

/// Monte Carlo bias and variance of an estimator, entry by entry.
#[derive(Debug, Clone)]
pub struct BiasVarianceReport {
    /// `mean(estimate) - Sigma`.
    pub bias: DMatrix<f64>,
    /// Standard error of each bias entry.
    pub bias_standard_error: DMatrix<f64>,
    /// `Var(estimate) / Var(sample covariance)`; NaN where `|Sigma_ij| <= 1e-8` off the diagonal.
    pub variance_ratio: DMatrix<f64>,
    pub trials: usize,
}

/// Threshold below which an off-diagonal variance ratio is masked.
pub const VARIANCE_RATIO_MASK: f64 = 1e-8;

const CHUNK: usize = 512;

#[derive(Clone)]
struct Moments {
    count: f64,
    mean: DMatrix<f64>,
    m2: DMatrix<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self { count: 0.0, mean: DMatrix::zeros(d, d), m2: DMatrix::zeros(d, d) }
    }

    fn push(&mut self, x: &DMatrix<f64>) {
        self.count += 1.0;
        let c = self.count;
        for ((m, q), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x.iter()) {
            let delta = v - *m;
            *m += delta / c;
            *q += delta * (v - *m);
        }
    }

    fn merge(&mut self, other: &Moments) {
        if other.count == 0.0 {
            return;
        }
        let (na, nb) = (self.count, other.count);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count = n;
    }

    fn variance(&self) -> DMatrix<f64> {
        &self.m2 / (self.count - 1.0)
    }
}

/// Entrywise Monte Carlo bias and variance ratio. Both the estimator and the
/// raw sample covariance see the same ensembles (stream = trial index).
/// Trials are processed in fixed-size chunks merged in trial order, so the
/// result does not depend on the thread count.
pub fn elementwise_bias_variance(
    model: &CovarianceModel,
    estimator: &Estimator,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<BiasVarianceReport> {
    if trials < 2 {
        return arg_err("at least two trials are needed for a variance");
    }
    if n == 0 {
        return arg_err("ensemble size must be at least 1");
    }
    let d = model.dim();
    estimator.apply(&DMatrix::zeros(d, d))?;
    let factor = factorize(model)?;
    let chunks: Vec<(usize, usize)> = (0..trials)
        .step_by(CHUNK)
        .map(|start| (start, (start + CHUNK).min(trials)))
        .collect();
    let partials = chunks
        .par_iter()
        .map(|&(start, end)| -> Result<(Moments, Moments)> {
            let mut est = Moments::new(d);
            let mut raw = Moments::new(d);
            for t in start..end {
                let s = sample_covariance(&draw_ensemble(&factor, n, seed, t as u64)?);
                est.push(&estimator.apply(&s)?);
                raw.push(&s);
            }
            Ok((est, raw))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut est = Moments::new(d);
    let mut raw = Moments::new(d);
    for (e, r) in &partials {
        est.merge(e);
        raw.merge(r);
    }
    let sigma = model.matrix();
    let var_est = est.variance();
    let var_raw = raw.variance();
    let bias = &est.mean - sigma;
    let bias_standard_error = var_est.map(|v| (v / trials as f64).sqrt());
    let variance_ratio = DMatrix::from_fn(d, d, |i, j| {
        if i == j || sigma[(i, j)].abs() > VARIANCE_RATIO_MASK {
            var_est[(i, j)] / var_raw[(i, j)]
        } else {
            f64::NAN
        }
    });
    Ok(BiasVarianceReport { bias, bias_standard_error, variance_ratio, trials })
}

impl From<LocalizationMatrix> for Estimator {
    fn from(l: LocalizationMatrix) -> Self {
        Estimator::Schur(l)
    }
}

impl From<HybridSpec> for Estimator {
    fn from(h: HybridSpec) -> Self {
        Estimator::Hybrid(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covmodels::{build_single_scale, KernelFamily};
    use crate::error::Error;

    fn m2(v: [f64; 4]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &v)
    }

    fn scaled_identity(d: usize, c: f64) -> CovarianceModel {
        CovarianceModel::custom(DMatrix::identity(d, d) * c).unwrap()
    }

    #[test]
    fn localization_entries() {
        let g = GridGeometry::periodic(40).unwrap();
        let l = build_localization(KernelSpec::laplacian(10.0).unwrap(), g, LocalizationLayout::Scalar);
        assert_eq!(l.matrix()[(3, 3)], 1.0);
        assert!((l.matrix()[(0, 10)] - (-1.0f64).exp()).abs() < 1e-15);
        let wide = build_localization(KernelSpec::gaussian(1e9).unwrap(), g, LocalizationLayout::Scalar);
        assert!(wide.matrix().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(LocalizationMatrix::from_matrix(l.matrix().clone(), LocalizationLayout::Scalar).is_ok());
    }

    #[test]
    fn block_layout_replicates() {
        let g = GridGeometry::periodic(8).unwrap();
        let k = KernelSpec::new(KernelFamily::Gaussian, 2.0).unwrap();
        let l = build_localization(k, g, LocalizationLayout::PressureWindBlock);
        assert_eq!(l.dim(), 16);
        let s = l.matrix().view((0, 0), (8, 8)).clone_owned();
        for (r, c) in [(0, 8), (8, 0), (8, 8)] {
            assert_eq!(l.matrix().view((r, c), (8, 8)), s);
        }
    }

    #[test]
    fn schur_examples() {
        let s = m2([2.0, 1.0, 1.0, 2.0]);
        let l = LocalizationMatrix::from_matrix(m2([1.0, 0.5, 0.5, 1.0]), LocalizationLayout::Scalar).unwrap();
        assert_eq!(schur_estimate(&s, &l).unwrap(), m2([2.0, 0.5, 0.5, 2.0]));
        assert_eq!(schur_estimate(&s, &LocalizationMatrix::ones(2)).unwrap(), s);
        let id = LocalizationMatrix::from_matrix(DMatrix::identity(2, 2), LocalizationLayout::Scalar).unwrap();
        assert_eq!(schur_estimate(&s, &id).unwrap(), m2([2.0, 0.0, 0.0, 2.0]));
        assert!(matches!(
            schur_estimate(&DMatrix::zeros(3, 3), &l),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn hybrid_examples() {
        let s = DMatrix::identity(3, 3);
        let p = scaled_identity(3, 3.0);
        assert_eq!(hybrid_estimate(&s, &HybridSpec::new(p.clone(), 0.0).unwrap()).unwrap(), s);
        assert_eq!(hybrid_estimate(&s, &HybridSpec::new(p.clone(), 1.0).unwrap()).unwrap(), *p.matrix());
        assert_eq!(
            hybrid_estimate(&s, &HybridSpec::new(p.clone(), 0.5).unwrap()).unwrap(),
            DMatrix::identity(3, 3) * 2.0
        );
        assert!(HybridSpec::new(p, 1.5).is_err());
    }

    #[test]
    fn iw_examples() {
        let s = DMatrix::identity(2, 2);
        let spec = InverseWishartSpec::new(scaled_identity(2, 5.0), 2.0).unwrap();
        let est = iw_map_estimate(&s, &spec, 8).unwrap();
        assert!((est - DMatrix::identity(2, 2) * 1.8).abs().max() < 1e-15);
        let eq = InverseWishartSpec::new(scaled_identity(2, 5.0), 8.0).unwrap();
        assert_eq!(iw_map_estimate(&s, &eq, 8).unwrap(), DMatrix::identity(2, 2) * 3.0);
        assert!(InverseWishartSpec::new(scaled_identity(2, 1.0), 0.0).is_err());
    }

    #[test]
    fn iw_adjustment_is_order_inverse_n() {
        let s = m2([2.0, 0.3, 0.3, 1.0]);
        let spec = InverseWishartSpec::new(scaled_identity(2, 4.0), 3.0).unwrap();
        for n in [10usize, 100, 1000, 10_000] {
            let diff = linalg::frobenius_norm(&(iw_map_estimate(&s, &spec, n).unwrap() - &s));
            let bound = 3.0 / (3.0 + n as f64) * (spec.prior().matrix().norm() + s.norm());
            assert!(diff <= bound);
        }
    }

    #[test]
    fn identity_localization_has_no_bias() {
        let model = build_single_scale(KernelSpec::laplacian(2.0).unwrap(), GridGeometry::periodic(5).unwrap()).unwrap();
        let r = elementwise_bias_variance(&model, &Estimator::Schur(LocalizationMatrix::ones(5)), 10, 2000, 3).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!(r.bias[(i, j)].abs() <= 4.0 * r.bias_standard_error[(i, j)]);
                assert!((r.variance_ratio[(i, j)] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn variance_ratio_is_masked_for_zero_truth() {
        let model = scaled_identity(3, 1.0);
        let r = elementwise_bias_variance(&model, &Estimator::Sample, 4, 50, 1).unwrap();
        assert!(r.variance_ratio[(0, 1)].is_nan());
        assert!((r.variance_ratio[(1, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bias_variance_is_thread_count_independent() {
        let model = build_single_scale(KernelSpec::laplacian(2.0).unwrap(), GridGeometry::periodic(4).unwrap()).unwrap();
        let est = Estimator::Hybrid(HybridSpec::new(scaled_identity(4, 1.0), 0.3).unwrap());
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| elementwise_bias_variance(&model, &est, 6, 3000, 5).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.bias, b.bias);
        assert_eq!(a.variance_ratio.map(f64::to_bits), b.variance_ratio.map(f64::to_bits));
    }
}
