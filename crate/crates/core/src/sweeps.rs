//! Monte Carlo tuning sweeps and scaling-law fits.
//!
//! For every ensemble size `n` and every grid parameter (an interpolation
//! factor or a localization length scale) the mean relative Frobenius error
//! is averaged over independent trials. All parameters of one trial share the
//! same ensemble. Trial `t` at size `n` always uses stream `t` and the seed
//! [`ensemble_seed`]`(seed, n)`, so reruns and thread counts do not change
//! the result.

use std::fmt;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::covmodels::{CovarianceModel, GridGeometry, KernelFamily, KernelSpec, ModelParams};
use crate::ensembles::{draw_ensemble, factorize, sample_covariance, FactorizedModel};
use crate::error::{arg_err, check_same_shape, Error, Result};
use crate::estimators::{blend, build_localization, schur_estimate, LocalizationLayout, LocalizationMatrix};
use crate::linalg;

/// `||estimate - truth||_F / ||truth||_F`.
pub fn relative_frobenius_error(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(truth, estimate)?;
    let denom = linalg::frobenius_norm(truth);
    if denom == 0.0 {
        return arg_err("truth matrix is zero");
    }
    let num: f64 = estimate.iter().zip(truth.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(num.sqrt() / denom)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the ensembles at size `n`. Ensembles are shared across grid
/// parameters but independent across ensemble sizes.
pub fn ensemble_seed(seed: u64, n: usize) -> u64 {
    splitmix64(seed.wrapping_add((n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

#[derive(Debug, Clone)]
pub enum EstimatorFamily {
    /// Parameter is the interpolation factor `alpha`.
    Hybrid { prior: CovarianceModel },
    /// Parameter is the localization length scale.
    Schur { kernel: KernelFamily, geometry: GridGeometry, layout: LocalizationLayout },
}

impl EstimatorFamily {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorFamily::Hybrid { .. } => "hybrid",
            EstimatorFamily::Schur { .. } => "schur",
        }
    }

    /// Kernel column of the sweep CSV: the prior's kernel for hybrid sweeps,
    /// the localization kernel for Schur sweeps.
    pub fn kernel_name(&self) -> &'static str {
        match self {
            EstimatorFamily::Hybrid { prior } => match prior.params() {
                ModelParams::SingleScale { kernel } | ModelParams::BlockReplicated { kernel } => kernel.family().name(),
                ModelParams::Multiscale { family, .. } => family.name(),
                ModelParams::Nonstationary { .. } | ModelParams::PressureWind { .. } => "gaussian",
                ModelParams::Custom => "custom",
            },
            EstimatorFamily::Schur { kernel, .. } => kernel.name(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub model: CovarianceModel,
    pub family: EstimatorFamily,
    /// Strictly increasing parameter values.
    pub parameter_grid: Vec<f64>,
    pub ensemble_sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    /// Schur only: after the coarse pass, evaluate this many geometrically
    /// spaced length scales strictly between the argmin's two neighbours.
    pub refine: Option<usize>,
}

impl SweepConfig {
    fn validate(&self) -> Result<()> {
        if self.parameter_grid.is_empty() {
            return arg_err("parameter grid is empty");
        }
        if self.parameter_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return arg_err("parameter grid must be strictly increasing");
        }
        if self.trials == 0 {
            return arg_err("trials must be at least 1");
        }
        if self.ensemble_sizes.is_empty() || self.ensemble_sizes.contains(&0) {
            return arg_err("ensemble sizes must be a nonempty list of positive integers");
        }
        let d = self.model.dim();
        match &self.family {
            EstimatorFamily::Hybrid { prior } => {
                check_same_shape(self.model.matrix(), prior.matrix())?;
                if self.parameter_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
                    return arg_err("interpolation factors must lie in [0, 1]");
                }
            }
            EstimatorFamily::Schur { geometry, layout, .. } => {
                let per_field = match layout {
                    LocalizationLayout::Scalar => d,
                    LocalizationLayout::PressureWindBlock => d / 2,
                };
                if geometry.d() != per_field || (*layout == LocalizationLayout::PressureWindBlock && d % 2 != 0) {
                    return Err(Error::DimensionMismatch {
                        expected: format!("{d}x{d}"),
                        found: format!("localization on {} points ({layout:?})", geometry.d()),
                    });
                }
                if self.parameter_grid.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
                    return arg_err("length scales must be positive and finite");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub parameter: f64,
    pub mean_error: f64,
    /// Standard error of the mean over trials.
    pub standard_error: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub model: String,
    pub estimator: String,
    pub kernel: String,
    /// Sorted by `(n, parameter)`.
    pub rows: Vec<SweepRow>,
    pub trials: usize,
    pub seed: u64,
}

impl SweepResult {
    /// Argmin per ensemble size; ties go to the smaller parameter.
    pub fn optimal_points(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, f64)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some(last) if last.0 == r.n => {
                    if r.mean_error < last.2 {
                        *last = (r.n, r.parameter, r.mean_error);
                    }
                }
                _ => out.push((r.n, r.parameter, r.mean_error)),
            }
        }
        out.into_iter().map(|(n, p, _)| (n, p)).collect()
    }

    pub fn ensemble_sizes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.rows.iter().map(|r| r.n).collect();
        v.dedup();
        v
    }

    pub fn rows_for(&self, n: usize) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.n == n)
    }

    pub fn mean_error(&self, n: usize, parameter: f64) -> Option<f64> {
        self.rows_for(n).find(|r| r.parameter == parameter).map(|r| r.mean_error)
    }

    /// Smallest mean error at each ensemble size.
    pub fn optimal_errors(&self) -> Vec<(usize, f64)> {
        self.optimal_points()
            .into_iter()
            .map(|(n, p)| (n, self.mean_error(n, p).unwrap_or(f64::NAN)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.model, self.estimator, self.kernel, r.n, r.parameter, r.mean_error, self.trials, self.seed
            );
        }
        out
    }
}

pub const SWEEP_CSV_HEADER: &str = "model,estimator,kernel,n,parameter,mean_error,trials,seed";
pub const FIT_CSV_HEADER: &str = "model,estimator,exponent_form,coefficient,r_squared,n_min,n_max";

/// Mean and standard error of each column of per-trial errors, accumulated in trial order.
fn column_stats(per_trial: &[Vec<f64>], k: usize) -> Vec<(f64, f64)> {
    let t = per_trial.len() as f64;
    (0..k)
        .map(|j| {
            let mean = per_trial.iter().map(|v| v[j]).sum::<f64>() / t;
            let var = if per_trial.len() > 1 {
                per_trial.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (t - 1.0)
            } else {
                0.0
            };
            (mean, (var / t).sqrt())
        })
        .collect()
}

enum Evaluators {
    Hybrid(DMatrix<f64>),
    Schur(Vec<LocalizationMatrix>),
}

fn evaluate(
    factor: &FactorizedModel,
    truth: &DMatrix<f64>,
    n: usize,
    trials: usize,
    seed: u64,
    grid: &[f64],
    eval: &Evaluators,
) -> Result<Vec<(f64, f64)>> {
    let per_trial = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<Vec<f64>> {
            let s = sample_covariance(&draw_ensemble(factor, n, seed, t as u64)?);
            match eval {
                Evaluators::Hybrid(prior) => grid
                    .iter()
                    .map(|&a| relative_frobenius_error(&blend(prior, &s, a)?, truth))
                    .collect(),
                Evaluators::Schur(locs) => locs
                    .iter()
                    .map(|l| relative_frobenius_error(&schur_estimate(&s, l)?, truth))
                    .collect(),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(column_stats(&per_trial, grid.len()))
}

fn localizations(grid: &[f64], kernel: KernelFamily, geometry: GridGeometry, layout: LocalizationLayout) -> Result<Vec<LocalizationMatrix>> {
    grid.iter()
        .map(|&l| Ok(build_localization(KernelSpec::new(kernel, l)?, geometry, layout)))
        .collect()
}

/// Geometrically spaced points strictly between `lo` and `hi`.
fn refinement_points(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let ratio = (hi / lo).powf(1.0 / (count + 1) as f64);
    (1..=count).map(|k| lo * ratio.powi(k as i32)).collect()
}

pub fn run_sweep(config: &SweepConfig) -> Result<SweepResult> {
    config.validate()?;
    let factor = factorize(&config.model)?;
    let truth = config.model.matrix();
    let grid = &config.parameter_grid;
    let mut rows = Vec::new();
    let coarse_eval = match &config.family {
        EstimatorFamily::Hybrid { prior } => Evaluators::Hybrid(prior.matrix().clone()),
        EstimatorFamily::Schur { kernel, geometry, layout } => {
            Evaluators::Schur(localizations(grid, *kernel, *geometry, *layout)?)
        }
    };
    for &n in &config.ensemble_sizes {
        let seed = ensemble_seed(config.seed, n);
        let stats = evaluate(&factor, truth, n, config.trials, seed, grid, &coarse_eval)?;
        let mut these: Vec<SweepRow> = grid
            .iter()
            .zip(&stats)
            .map(|(&parameter, &(mean_error, standard_error))| SweepRow { n, parameter, mean_error, standard_error })
            .collect();
        if let (Some(count), EstimatorFamily::Schur { kernel, geometry, layout }) = (config.refine, &config.family) {
            if count > 0 && grid.len() >= 2 {
                let best = argmin(&these);
                let lo = grid[best.saturating_sub(1)];
                let hi = grid[(best + 1).min(grid.len() - 1)];
                let mut fine = Vec::new();
                if best > 0 {
                    fine.extend(refinement_points(lo, grid[best], count));
                }
                if best + 1 < grid.len() {
                    fine.extend(refinement_points(grid[best], hi, count));
                }
                let eval = Evaluators::Schur(localizations(&fine, *kernel, *geometry, *layout)?);
                let fine_stats = evaluate(&factor, truth, n, config.trials, seed, &fine, &eval)?;
                these.extend(fine.iter().zip(&fine_stats).map(|(&parameter, &(mean_error, standard_error))| {
                    SweepRow { n, parameter, mean_error, standard_error }
                }));
                these.sort_by(|a, b| a.parameter.total_cmp(&b.parameter));
            }
        }
        rows.extend(these);
    }
    if rows.iter().any(|r| !r.mean_error.is_finite() || r.mean_error < 0.0) {
        return Err(Error::ModelValidity("sweep produced a non-finite error".into()));
    }
    Ok(SweepResult {
        model: config.model.label().name().to_string(),
        estimator: config.family.name().to_string(),
        kernel: config.family.kernel_name().to_string(),
        rows,
        trials: config.trials,
        seed: config.seed,
    })
}

fn argmin(rows: &[SweepRow]) -> usize {
    let mut best = 0;
    for (k, r) in rows.iter().enumerate() {
        if r.mean_error < rows[best].mean_error {
            best = k;
        }
    }
    best
}

/// Per-trial minimizer of `||alpha P + (1 - alpha) S - Sigma||_F` over `alpha` in `[0, 1]`.
pub fn optimal_alpha_closed_form(s: &DMatrix<f64>, prior: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(s, prior)?;
    check_same_shape(s, truth)?;
    let b: f64 = prior.iter().zip(s.iter()).map(|(p, x)| (p - x) * (p - x)).sum();
    if b == 0.0 {
        return Ok(0.0);
    }
    let a: f64 = (0..s.len()).map(|k| (s[k] - truth[k]) * (prior[k] - s[k])).sum();
    Ok((-a / b).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExponentForm {
    /// `c / n`
    InverseN,
    /// `c n`
    LinearN,
    /// `c sqrt(n)`
    SqrtN,
}

impl ExponentForm {
    pub fn exponent(&self) -> f64 {
        match self {
            ExponentForm::InverseN => -1.0,
            ExponentForm::LinearN => 1.0,
            ExponentForm::SqrtN => 0.5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExponentForm::InverseN => "inverse_n",
            ExponentForm::LinearN => "linear_n",
            ExponentForm::SqrtN => "sqrt_n",
        }
    }

    fn basis(&self, n: f64) -> f64 {
        match self {
            ExponentForm::InverseN => 1.0 / n,
            ExponentForm::LinearN => n,
            ExponentForm::SqrtN => n.sqrt(),
        }
    }
}

impl fmt::Display for ExponentForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Least-squares fit `parameter ≈ c n^p` with a fixed exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFit {
    pub exponent_form: ExponentForm,
    pub coefficient: f64,
    /// `1 - SS_res / SS_tot` in the original scale; `-inf` when all parameters are equal.
    pub r_squared: f64,
    pub n_min: usize,
    pub n_max: usize,
}

impl ScalingFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.coefficient * self.exponent_form.basis(n)
    }

    pub fn csv_row(&self, model: &str, estimator: &str) -> String {
        format!(
            "{model},{estimator},{},{},{},{},{}",
            self.exponent_form, self.coefficient, self.r_squared, self.n_min, self.n_max
        )
    }
}

pub fn fit_scaling(points: &[(usize, f64)], form: ExponentForm) -> Result<ScalingFit> {
    if points.len() < 2 {
        return arg_err("a scaling fit needs at least two points");
    }
    let mut ns: Vec<usize> = points.iter().map(|p| p.0).collect();
    ns.sort_unstable();
    if ns.windows(2).any(|w| w[0] == w[1]) || ns[0] == 0 {
        return arg_err("ensemble sizes in a scaling fit must be positive and distinct");
    }
    if points.iter().all(|p| p.1 == 0.0) {
        return arg_err("all parameters are zero");
    }
    if points.iter().any(|p| !p.1.is_finite()) {
        return arg_err("parameters must be finite");
    }
    let (mut num, mut den) = (0.0, 0.0);
    for &(n, y) in points {
        let x = form.basis(n as f64);
        num += y * x;
        den += x * x;
    }
    let c = num / den;
    let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean).powi(2)).sum();
    let ss_res: f64 = points.iter().map(|&(n, y)| (y - c * form.basis(n as f64)).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NEG_INFINITY };
    Ok(ScalingFit { exponent_form: form, coefficient: c, r_squared, n_min: ns[0], n_max: *ns.last().unwrap() })
}

/// Interpolation factors `0, step, 2 step, ..., 1`.
pub fn alpha_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return arg_err(format!("alpha step must lie in (0, 1], got {step}"));
    }
    let k = (1.0 / step).round() as usize;
    if ((k as f64) * step - 1.0).abs() > 1e-9 {
        return arg_err(format!("alpha step {step} does not divide 1"));
    }
    Ok((0..=k).map(|i| i as f64 / k as f64).collect())
}

/// `count` geometrically spaced values from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo) || count < 2 {
        return arg_err("geometric grid needs 0 < lo < hi and at least two points");
    }
    let ratio = (hi / lo).ln() / (count - 1) as f64;
    let mut g: Vec<f64> = (0..count).map(|k| lo * (ratio * k as f64).exp()).collect();
    g[0] = lo;
    g[count - 1] = hi;
    Ok(g)
}

/// Consecutive pairs that break an ordering, as `(index, v[k+1] - v[k])`.
/// With `strictly_decreasing` a pair breaks when `v[k+1] >= v[k]`;
/// otherwise the check is for nondecreasing values and a pair breaks when
/// `v[k+1] < v[k]`.
pub fn monotone_violations(values: &[f64], strictly_decreasing: bool) -> Vec<(usize, f64)> {
    values
        .windows(2)
        .enumerate()
        .filter_map(|(k, w)| {
            let bad = if strictly_decreasing { w[1] >= w[0] } else { w[1] < w[0] };
            bad.then_some((k, w[1] - w[0]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covmodels::{build_single_scale, GridGeometry, KernelSpec};

    #[test]
    fn error_metric_examples() {
        let t = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        assert_eq!(relative_frobenius_error(&t, &t).unwrap(), 0.0);
        assert_eq!(relative_frobenius_error(&DMatrix::zeros(2, 2), &t).unwrap(), 1.0);
        assert_eq!(relative_frobenius_error(&(&t * 2.0), &t).unwrap(), 1.0);
        assert!(relative_frobenius_error(&t, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn exact_inverse_fit() {
        let pts: Vec<(usize, f64)> = [10usize, 20, 40, 80].iter().map(|&n| (n, 3.0 / n as f64)).collect();
        let f = fit_scaling(&pts, ExponentForm::InverseN).unwrap();
        assert!((f.coefficient - 3.0).abs() < 1e-14);
        assert!((f.r_squared - 1.0).abs() < 1e-14);
        assert_eq!((f.n_min, f.n_max), (10, 80));
    }

    #[test]
    fn sqrt_fit_normal_equation() {
        let pts = [(10usize, 5.0), (40usize, 10.0)];
        let f = fit_scaling(&pts, ExponentForm::SqrtN).unwrap();
        let expect = (5.0 * 10f64.sqrt() + 10.0 * 40f64.sqrt()) / 50.0;
        assert!((f.coefficient - expect).abs() < 1e-15);
        assert!((f.coefficient - 1.5811).abs() < 1e-4);
    }

    #[test]
    fn constant_parameters_do_not_fit() {
        let f = fit_scaling(&[(10, 0.5), (20, 0.5), (40, 0.5)], ExponentForm::InverseN).unwrap();
        assert!(f.r_squared <= 0.0);
        assert!(fit_scaling(&[(10, 0.0), (20, 0.0)], ExponentForm::InverseN).is_err());
        assert!(fit_scaling(&[(10, 1.0)], ExponentForm::InverseN).is_err());
        assert!(fit_scaling(&[(10, 1.0), (10, 2.0)], ExponentForm::InverseN).is_err());
    }

    #[test]
    fn grids() {
        let a = alpha_grid(0.05).unwrap();
        assert_eq!(a.len(), 21);
        assert_eq!(a[0], 0.0);
        assert_eq!(a[20], 1.0);
        let g = geometric_grid(1.0, 200.0, 25).unwrap();
        assert_eq!((g[0], g[24]), (1.0, 200.0));
        assert!(g.windows(2).all(|w| (w[1] / w[0] - 200f64.powf(1.0 / 24.0)).abs() < 1e-12));
        assert!(alpha_grid(0.3).is_err());
    }

    fn small_model() -> CovarianceModel {
        build_single_scale(KernelSpec::laplacian(3.0).unwrap(), GridGeometry::periodic(20).unwrap()).unwrap()
    }

    #[test]
    fn single_point_hybrid_grid_is_sample_error() {
        let model = small_model();
        let cfg = SweepConfig {
            model: model.clone(),
            family: EstimatorFamily::Hybrid { prior: CovarianceModel::custom(DMatrix::identity(20, 20)).unwrap() },
            parameter_grid: vec![0.0],
            ensemble_sizes: vec![5],
            trials: 7,
            seed: 3,
            refine: None,
        };
        let r = run_sweep(&cfg).unwrap();
        let factor = factorize(&model).unwrap();
        let seed = ensemble_seed(3, 5);
        let mean = (0..7)
            .map(|t| {
                let s = sample_covariance(&draw_ensemble(&factor, 5, seed, t).unwrap());
                relative_frobenius_error(&s, model.matrix()).unwrap()
            })
            .sum::<f64>()
            / 7.0;
        assert_eq!(r.rows[0].mean_error, mean);
        assert_eq!(r.optimal_points(), vec![(5, 0.0)]);
    }

    #[test]
    fn ties_go_to_smaller_parameter() {
        let r = SweepResult {
            model: "m".into(),
            estimator: "e".into(),
            kernel: "k".into(),
            rows: vec![
                SweepRow { n: 1, parameter: 0.1, mean_error: 0.5, standard_error: 0.0 },
                SweepRow { n: 1, parameter: 0.2, mean_error: 0.5, standard_error: 0.0 },
                SweepRow { n: 2, parameter: 0.1, mean_error: 0.6, standard_error: 0.0 },
                SweepRow { n: 2, parameter: 0.2, mean_error: 0.4, standard_error: 0.0 },
            ],
            trials: 1,
            seed: 0,
        };
        assert_eq!(r.optimal_points(), vec![(1, 0.1), (2, 0.2)]);
        assert_eq!(
            r.to_csv().lines().next().unwrap(),
            "model,estimator,kernel,n,parameter,mean_error,trials,seed"
        );
        assert_eq!(r.to_csv().lines().nth(1).unwrap(), "m,e,k,1,0.1,0.5,1,0");
    }

    #[test]
    fn schur_refinement_adds_points_near_argmin() {
        let model = small_model();
        let g = GridGeometry::periodic(20).unwrap();
        let cfg = SweepConfig {
            model,
            family: EstimatorFamily::Schur { kernel: KernelFamily::Gaussian, geometry: g, layout: LocalizationLayout::Scalar },
            parameter_grid: geometric_grid(1.0, 40.0, 8).unwrap(),
            ensemble_sizes: vec![10],
            trials: 20,
            seed: 1,
            refine: Some(3),
        };
        let r = run_sweep(&cfg).unwrap();
        assert!(r.rows.len() > 8);
        assert!(r.rows.windows(2).all(|w| w[1].parameter > w[0].parameter));
        let coarse = SweepConfig { refine: None, ..cfg };
        let c = run_sweep(&coarse).unwrap();
        // coarse rows are unchanged by refinement
        for row in &c.rows {
            assert_eq!(r.mean_error(10, row.parameter), Some(row.mean_error));
        }
    }

    #[test]
    fn invalid_configs() {
        let model = small_model();
        let base = SweepConfig {
            model: model.clone(),
            family: EstimatorFamily::Hybrid { prior: model },
            parameter_grid: vec![0.0, 0.5],
            ensemble_sizes: vec![5],
            trials: 1,
            seed: 0,
            refine: None,
        };
        assert!(run_sweep(&SweepConfig { parameter_grid: vec![0.5, 0.5], ..base.clone() }).is_err());
        assert!(run_sweep(&SweepConfig { parameter_grid: vec![], ..base.clone() }).is_err());
        assert!(run_sweep(&SweepConfig { trials: 0, ..base.clone() }).is_err());
        assert!(run_sweep(&SweepConfig { parameter_grid: vec![0.5, 1.5], ..base }).is_err());
    }

    #[test]
    fn closed_form_alpha() {
        let truth = DMatrix::identity(2, 2);
        let s = DMatrix::identity(2, 2) * 2.0;
        let p = DMatrix::identity(2, 2) * 0.0;
        assert!((optimal_alpha_closed_form(&s, &p, &truth).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn violations() {
        assert!(monotone_violations(&[0.5, 0.3, 0.1], true).is_empty());
        assert_eq!(monotone_violations(&[0.5, 0.5, 0.1], true), vec![(0, 0.0)]);
        assert_eq!(monotone_violations(&[1.0, 2.0, 1.5], false).len(), 1);
    }
}
