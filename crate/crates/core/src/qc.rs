//! MAP estimation under the quadratically constrained (QC) prior.
//!
//! The QC prior penalizes squared entries of the precision matrix
//! `Omega = Sigma^-1` with weights `Theta`. In precision coordinates the log
//! posterior
//!
//! ```text
//! f(Omega) = (n/2) log|Omega| - (n/2) tr(S Omega) - 1/4 sum_ij Theta_ij Omega_ij^2
//! ```
//!
//! is strictly concave, and its stationary point satisfies the implicit
//! equation `Sigma = S + (1/n) Sigma^-1 ∘ Theta`. For large penalties the
//! solution approaches a Schur product `S ∘ L` with
//! `L_ij = 1 / (1 + Theta_ij / (n S_ii S_jj))`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{arg_err, check_same_shape, Error, Result};
use crate::estimators::{LocalizationLayout, LocalizationMatrix};
use crate::linalg;

/// `Theta = strength * Theta_ref`, with `Theta_ref` symmetric and nonnegative with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    theta_ref: DMatrix<f64>,
    strength: f64,
}

impl PenaltyMatrix {
    pub fn new(theta_ref: DMatrix<f64>, strength: f64) -> Result<Self> {
        if !linalg::is_exactly_symmetric(&theta_ref) {
            return arg_err("penalty reference matrix must be square and symmetric");
        }
        if (0..theta_ref.nrows()).any(|i| theta_ref[(i, i)] != 0.0) {
            return arg_err("penalty reference matrix must have a zero diagonal");
        }
        if theta_ref.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return arg_err("penalty entries must be finite and nonnegative");
        }
        if !(strength >= 0.0) || !strength.is_finite() {
            return arg_err(format!("penalty strength must be finite and nonnegative, got {strength}"));
        }
        Ok(Self { theta_ref, strength })
    }

    /// `Theta_ref_ij = 1` off the diagonal.
    pub fn uniform(d: usize, strength: f64) -> Result<Self> {
        let mut t = DMatrix::from_element(d, d, 1.0);
        t.fill_diagonal(0.0);
        Self::new(t, strength)
    }

    pub fn theta_ref(&self) -> &DMatrix<f64> {
        &self.theta_ref
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    /// Same reference pattern at a different strength.
    pub fn with_strength(&self, strength: f64) -> Result<Self> {
        Self::new(self.theta_ref.clone(), strength)
    }

    /// Effective penalty `s * Theta_ref`.
    pub fn theta(&self) -> DMatrix<f64> {
        &self.theta_ref * self.strength
    }

    pub fn dim(&self) -> usize {
        self.theta_ref.nrows()
    }

    pub fn is_zero(&self) -> bool {
        self.strength == 0.0 || self.theta_ref.iter().all(|v| *v == 0.0)
    }

    /// Every off-diagonal reference entry is strictly positive.
    pub fn is_fully_penalized(&self) -> bool {
        let d = self.dim();
        (0..d).all(|j| (0..d).all(|i| i == j || self.theta_ref[(i, j)] > 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QcAlgorithm {
    /// Damped iteration on the implicit equation in covariance space.
    FixedPoint,
    /// Newton steps on the concave objective in precision space.
    NewtonOnPrecision,
}

impl QcAlgorithm {
    pub fn name(&self) -> &'static str {
        match self {
            QcAlgorithm::FixedPoint => "fixed-point",
            QcAlgorithm::NewtonOnPrecision => "newton",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QcSolveOptions {
    /// Relative fixed-point residual at which the solve stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial relaxation factor of the fixed-point iteration.
    pub damping: f64,
    pub algorithm: QcAlgorithm,
    /// The start is `init_scale * diag(S)`.
    pub init_scale: f64,
}

impl Default for QcSolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 500,
            damping: 0.5,
            algorithm: QcAlgorithm::NewtonOnPrecision,
            init_scale: 1.0,
        }
    }
}

impl QcSolveOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return arg_err(format!("tolerance must be positive, got {}", self.tol));
        }
        if self.max_iter == 0 {
            return arg_err("max_iter must be at least 1");
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return arg_err(format!("damping must lie in (0, 1], got {}", self.damping));
        }
        if !(self.init_scale > 0.0) || !self.init_scale.is_finite() {
            return arg_err(format!("init_scale must be positive, got {}", self.init_scale));
        }
        Ok(())
    }
}

/// Solution of the QC MAP problem with convergence diagnostics.
#[derive(Debug, Clone)]
pub struct QcReport {
    pub estimate: DMatrix<f64>,
    pub iterations: usize,
    pub final_residual: f64,
    pub final_gradient_norm: f64,
    pub objective: f64,
    /// Relative fixed-point residual, starting with the initial point.
    pub residual_trace: Vec<f64>,
    /// Log posterior, starting with the initial point.
    pub objective_trace: Vec<f64>,
    pub algorithm: QcAlgorithm,
}

impl QcReport {
    /// Plain-text summary followed by the iteration trace as CSV rows.
    pub fn diagnostics_block(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "algorithm = {}", self.algorithm.name());
        let _ = writeln!(out, "iterations = {}", self.iterations);
        let _ = writeln!(out, "final_residual = {:e}", self.final_residual);
        let _ = writeln!(out, "final_gradient_norm = {:e}", self.final_gradient_norm);
        let _ = writeln!(out, "objective = {}", self.objective);
        out.push_str(&trace_csv(&self.residual_trace, &self.objective_trace));
        out
    }
}

/// `iteration,residual,objective` rows.
pub fn trace_csv(residuals: &[f64], objectives: &[f64]) -> String {
    let mut out = String::from("iteration,residual,objective\n");
    for (k, r) in residuals.iter().enumerate() {
        let f = objectives.get(k).copied().unwrap_or(f64::NAN);
        let _ = writeln!(out, "{k},{r:e},{f}");
    }
    out
}

fn check_problem(s: &DMatrix<f64>, penalty: &PenaltyMatrix, n: usize) -> Result<()> {
    if !s.is_square() {
        return arg_err("sample covariance must be square");
    }
    check_same_shape(s, penalty.theta_ref())?;
    if n == 0 {
        return arg_err("ensemble size must be at least 1");
    }
    Ok(())
}

fn spd_factor(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    linalg::cholesky_lower(a).map_err(|(pivot, value)| {
        Error::NotPositiveDefinite(format!("{what}: pivot {pivot} has value {value:e}"))
    })
}

/// Sum of `a_ij b_ij`.
fn dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn objective_from_parts(log_det: f64, omega: &DMatrix<f64>, s: &DMatrix<f64>, theta: &DMatrix<f64>, n: f64) -> f64 {
    let quad: f64 = theta.iter().zip(omega.iter()).map(|(t, w)| t * w * w).sum();
    0.5 * n * log_det - 0.5 * n * dot(s, omega) - 0.25 * quad
}

/// Log posterior in precision coordinates, up to an additive constant.
pub fn qc_log_posterior(
    omega: &DMatrix<f64>,
    s: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    n: usize,
) -> Result<f64> {
    check_problem(s, penalty, n)?;
    check_same_shape(s, omega)?;
    let l = spd_factor(omega, "precision")?;
    Ok(objective_from_parts(
        linalg::log_det_from_cholesky(&l),
        omega,
        s,
        &penalty.theta(),
        n as f64,
    ))
}

fn gradient_parts(
    sigma: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    s: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    n: f64,
) -> DMatrix<f64> {
    let mut g = DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| {
        0.5 * n * (sigma[(i, j)] - s[(i, j)]) - 0.5 * theta[(i, j)] * omega[(i, j)]
    });
    linalg::symmetrize(&mut g);
    g
}

/// `(n/2) Omega^-1 - (n/2) S - (1/2) Theta ∘ Omega`.
pub fn qc_gradient(
    omega: &DMatrix<f64>,
    s: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    n: usize,
) -> Result<DMatrix<f64>> {
    check_problem(s, penalty, n)?;
    check_same_shape(s, omega)?;
    let l = spd_factor(omega, "precision")?;
    let sigma = linalg::inverse_from_cholesky(&l);
    Ok(gradient_parts(&sigma, omega, s, &penalty.theta(), n as f64))
}

fn residual_parts(sigma: &DMatrix<f64>, omega: &DMatrix<f64>, s: &DMatrix<f64>, theta: &DMatrix<f64>, n: f64, s_norm: f64) -> f64 {
    let r: f64 = (0..s.len())
        .map(|k| {
            let v = sigma[k] - s[k] - theta[k] * omega[k] / n;
            v * v
        })
        .sum();
    r.sqrt() / s_norm
}

/// `||Sigma - S - (1/n) Sigma^-1 ∘ Theta||_F / ||S||_F`.
pub fn fixed_point_residual(
    sigma: &DMatrix<f64>,
    s: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    n: usize,
) -> Result<f64> {
    check_problem(s, penalty, n)?;
    check_same_shape(s, sigma)?;
    let s_norm = linalg::frobenius_norm(s);
    if s_norm == 0.0 {
        return arg_err("sample covariance is zero");
    }
    let omega = linalg::inverse_from_cholesky(&spd_factor(sigma, "covariance")?);
    Ok(residual_parts(sigma, &omega, s, &penalty.theta(), n as f64, s_norm))
}

/// Precision-space iterate with its inverse and objective.
struct State {
    omega: DMatrix<f64>,
    chol: DMatrix<f64>,
    sigma: DMatrix<f64>,
    objective: f64,
}

impl State {
    fn from_omega(omega: DMatrix<f64>, s: &DMatrix<f64>, theta: &DMatrix<f64>, n: f64) -> Option<Self> {
        let chol = linalg::cholesky_lower(&omega).ok()?;
        let sigma = linalg::inverse_from_cholesky(&chol);
        let objective = objective_from_parts(linalg::log_det_from_cholesky(&chol), &omega, s, theta, n);
        objective.is_finite().then_some(Self { omega, chol, sigma, objective })
    }

    fn from_sigma(sigma: DMatrix<f64>, s: &DMatrix<f64>, theta: &DMatrix<f64>, n: f64) -> Option<Self> {
        let sc = linalg::cholesky_lower(&sigma).ok()?;
        let omega = linalg::inverse_from_cholesky(&sc);
        let mut st = Self::from_omega(omega, s, theta, n)?;
        st.sigma = sigma;
        Some(st)
    }
}

struct Problem<'a> {
    s: &'a DMatrix<f64>,
    theta: DMatrix<f64>,
    n: f64,
    s_norm: f64,
}

impl Problem<'_> {
    fn residual(&self, st: &State) -> f64 {
        residual_parts(&st.sigma, &st.omega, self.s, &self.theta, self.n, self.s_norm)
    }

    fn gradient(&self, st: &State) -> DMatrix<f64> {
        gradient_parts(&st.sigma, &st.omega, self.s, &self.theta, self.n)
    }

    /// Negative Hessian applied to a symmetric direction: `(n/2) Sigma E Sigma + (1/2) Theta ∘ E`.
    fn hess(&self, sigma: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = sigma * e * sigma * (0.5 * self.n) + self.theta.component_mul(e) * 0.5;
        linalg::symmetrize(&mut out);
        out
    }

    /// `f(Omega + t E) - f(Omega)` without cancellation in the log-determinant.
    /// `None` when `Omega + t E` is not positive definite.
    fn increment(&self, st: &State, e: &DMatrix<f64>, eig: &[f64], t: f64) -> Option<f64> {
        let mut log_det = 0.0;
        for &lam in eig {
            let x = t * lam;
            if !(x > -1.0) {
                return None;
            }
            log_det += x.ln_1p();
        }
        let lin = dot(self.s, e);
        let quad: f64 = (0..e.len())
            .map(|k| self.theta[k] * (2.0 * st.omega[k] * e[k] + t * e[k] * e[k]))
            .sum();
        Some(0.5 * self.n * log_det - 0.5 * self.n * t * lin - 0.25 * t * quad)
    }
}

/// Jacobi-preconditioned conjugate gradients for the Newton system.
fn newton_direction(p: &Problem<'_>, st: &State, g: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let d = g.nrows();
    let sigma = &st.sigma;
    let precond = DMatrix::from_fn(d, d, |i, j| {
        0.5 * p.n * (sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)] * sigma[(i, j)]) + 0.5 * p.theta[(i, j)]
    });
    let mut x = DMatrix::<f64>::zeros(d, d);
    let mut r = g.clone();
    let mut z = r.component_div(&precond);
    let mut dir = z.clone();
    let mut rz = dot(&r, &z);
    let g_norm = linalg::frobenius_norm(g);
    let max_iter = (d * (d + 1) / 2).clamp(50, 2000);
    for _ in 0..max_iter {
        let ad = p.hess(sigma, &dir);
        let curv = dot(&dir, &ad);
        if !(curv > 0.0) {
            break;
        }
        let a = rz / curv;
        x += &dir * a;
        r -= &ad * a;
        if linalg::frobenius_norm(&r) <= rel_tol * g_norm {
            break;
        }
        z = r.component_div(&precond);
        let rz_new = dot(&r, &z);
        dir = &z + &dir * (rz_new / rz);
        rz = rz_new;
    }
    linalg::symmetrize(&mut x);
    if dot(&x, g) > 0.0 {
        x
    } else {
        g.clone()
    }
}

/// Eigenvalues of `L^-1 E L^-T` where `Omega = L L^T`.
fn relative_eigenvalues(chol: &DMatrix<f64>, e: &DMatrix<f64>) -> Vec<f64> {
    let li = chol
        .clone()
        .solve_lower_triangular(&DMatrix::identity(chol.nrows(), chol.nrows()))
        .expect("cholesky factor has a positive diagonal");
    let mut m = &li * e * li.transpose();
    linalg::symmetrize(&mut m);
    SymmetricEigen::new(m).eigenvalues.iter().copied().collect()
}

struct Trace {
    residuals: Vec<f64>,
    objectives: Vec<f64>,
}

fn initial_state(p: &Problem<'_>, opts: &QcSolveOptions) -> Result<State> {
    let d = p.s.nrows();
    let sigma0 = DMatrix::from_fn(d, d, |i, j| if i == j { opts.init_scale * p.s[(i, i)] } else { 0.0 });
    State::from_sigma(sigma0, p.s, &p.theta, p.n)
        .ok_or_else(|| Error::NotPositiveDefinite("initial point diag(S)".into()))
}

fn solve_newton(p: &Problem<'_>, opts: &QcSolveOptions, trace: &mut Trace) -> Result<(State, usize)> {
    let mut st = initial_state(p, opts)?;
    let mut res = p.residual(&st);
    trace.residuals.push(res);
    trace.objectives.push(st.objective);
    let g0 = linalg::frobenius_norm(&p.gradient(&st)).max(f64::MIN_POSITIVE);
    for it in 1..=opts.max_iter {
        if res <= opts.tol {
            return Ok((st, it - 1));
        }
        let g = p.gradient(&st);
        let gn = linalg::frobenius_norm(&g);
        let forcing = (gn / g0).sqrt().min(0.5).max(1e-14);
        let e = newton_direction(p, &st, &g, forcing);
        let slope = dot(&g, &e);
        let eig = relative_eigenvalues(&st.chol, &e);
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-20 {
            if let Some(inc) = p.increment(&st, &e, &eig, t) {
                if inc >= 1e-4 * t * slope {
                    if let Some(next) = State::from_omega(&st.omega + &e * t, p.s, &p.theta, p.n) {
                        let r = p.residual(&next);
                        accepted = Some((next, r));
                        break;
                    }
                } else if inc >= 0.0 {
                    // the increment is below what the slope predicts only through
                    // rounding once the residual is already tiny
                    if let Some(next) = State::from_omega(&st.omega + &e * t, p.s, &p.theta, p.n) {
                        let r = p.residual(&next);
                        if r < res {
                            accepted = Some((next, r));
                            break;
                        }
                    }
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((next, r)) => {
                st = next;
                res = r;
                trace.residuals.push(res);
                trace.objectives.push(st.objective);
            }
            None => {
                return Err(Error::NonConvergence {
                    iterations: it,
                    residual: res,
                    residual_trace: trace.residuals.clone(),
                })
            }
        }
    }
    if res <= opts.tol {
        return Ok((st, opts.max_iter));
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual: res,
        residual_trace: trace.residuals.clone(),
    })
}

fn solve_fixed_point(p: &Problem<'_>, opts: &QcSolveOptions, trace: &mut Trace) -> Result<(State, usize)> {
    let mut st = initial_state(p, opts)?;
    let mut res = p.residual(&st);
    trace.residuals.push(res);
    trace.objectives.push(st.objective);
    let mut gamma = opts.damping;
    for it in 1..=opts.max_iter {
        if res <= opts.tol {
            return Ok((st, it - 1));
        }
        let mut target = p.s + p.theta.component_mul(&st.omega) / p.n;
        linalg::symmetrize(&mut target);
        let mut step = gamma;
        let mut accepted = None;
        while step > 1e-12 {
            let cand = &st.sigma * (1.0 - step) + &target * step;
            if let Some(next) = State::from_sigma(cand, p.s, &p.theta, p.n) {
                let r = p.residual(&next);
                if next.objective >= st.objective || (r < res && next.objective >= st.objective - 1e-14 * st.objective.abs()) {
                    accepted = Some((next, r, step));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((next, r, used)) => {
                st = next;
                res = r;
                gamma = if used == gamma { (2.0 * gamma).min(1.0) } else { used };
                trace.residuals.push(res);
                trace.objectives.push(st.objective);
            }
            None => {
                return Err(Error::NonConvergence {
                    iterations: it,
                    residual: res,
                    residual_trace: trace.residuals.clone(),
                })
            }
        }
    }
    if res <= opts.tol {
        return Ok((st, opts.max_iter));
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual: res,
        residual_trace: trace.residuals.clone(),
    })
}

/// Solve `Sigma = S + (1/n) Sigma^-1 ∘ Theta` for the QC MAP estimate.
///
/// A zero penalty (or a one-dimensional problem, where nothing off the
/// diagonal exists to penalize) returns `S` after a single iteration.
pub fn qc_map_estimate(
    s: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    n: usize,
    opts: &QcSolveOptions,
) -> Result<QcReport> {
    check_problem(s, penalty, n)?;
    opts.validate()?;
    if !linalg::is_exactly_symmetric(s) {
        return arg_err("sample covariance must be exactly symmetric");
    }
    let d = s.nrows();
    if let Some(i) = (0..d).find(|&i| !(s[(i, i)] > 0.0)) {
        return arg_err(format!("sample variance {i} is not positive ({})", s[(i, i)]));
    }
    let theta = penalty.theta();
    if penalty.is_zero() || d == 1 {
        let objective = linalg::cholesky_lower(s)
            .map(|l| {
                let omega = linalg::inverse_from_cholesky(&l);
                objective_from_parts(-linalg::log_det_from_cholesky(&l), &omega, s, &theta, n as f64)
            })
            .unwrap_or(f64::NAN);
        return Ok(QcReport {
            estimate: s.clone(),
            iterations: 1,
            final_residual: 0.0,
            final_gradient_norm: 0.0,
            objective,
            residual_trace: vec![0.0],
            objective_trace: vec![objective],
            algorithm: opts.algorithm,
        });
    }
    let p = Problem { s, theta, n: n as f64, s_norm: linalg::frobenius_norm(s) };
    let mut trace = Trace { residuals: Vec::new(), objectives: Vec::new() };
    let (st, iterations) = match opts.algorithm {
        QcAlgorithm::NewtonOnPrecision => solve_newton(&p, opts, &mut trace)?,
        QcAlgorithm::FixedPoint => solve_fixed_point(&p, opts, &mut trace)?,
    };
    let final_gradient_norm = linalg::frobenius_norm(&p.gradient(&st));
    Ok(QcReport {
        final_residual: p.residual(&st),
        final_gradient_norm,
        objective: st.objective,
        estimate: st.sigma,
        iterations,
        residual_trace: trace.residuals,
        objective_trace: trace.objectives,
        algorithm: opts.algorithm,
    })
}

fn check_positive_diagonal(s: &DMatrix<f64>) -> Result<()> {
    if let Some(i) = (0..s.nrows()).find(|&i| !(s[(i, i)] > 0.0)) {
        return arg_err(format!("sample variance {i} is not positive ({})", s[(i, i)]));
    }
    Ok(())
}

/// Large-penalty limit `L_ij = 1 / (1 + Theta_ij / (n S_ii S_jj))`.
pub fn asymptotic_schur_localization(
    s: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    n: usize,
) -> Result<LocalizationMatrix> {
    check_problem(s, penalty, n)?;
    check_positive_diagonal(s)?;
    let theta = penalty.theta();
    let nf = n as f64;
    let mut l = DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| {
        if i == j {
            1.0
        } else {
            1.0 / (1.0 + theta[(i, j)] / (nf * s[(i, i)] * s[(j, j)]))
        }
    });
    linalg::mirror_lower_to_upper(&mut l);
    LocalizationMatrix::from_matrix(l, LocalizationLayout::Scalar)
}

/// Penalty whose large-strength limit is the given localization matrix:
/// `Theta_ij = n S_ii S_jj (1 / L_ij - 1)` at strength 1.
pub fn theta_for_target_localization(
    s: &DMatrix<f64>,
    target: &LocalizationMatrix,
    n: usize,
) -> Result<PenaltyMatrix> {
    check_same_shape(s, target.matrix())?;
    if n == 0 {
        return arg_err("ensemble size must be at least 1");
    }
    check_positive_diagonal(s)?;
    let l = target.matrix();
    if l.iter().any(|v| *v == 0.0) {
        return arg_err("a zero localization entry needs an infinite penalty");
    }
    let nf = n as f64;
    let mut t = DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| {
        if i == j {
            0.0
        } else {
            nf * s[(i, i)] * s[(j, j)] * (1.0 / l[(i, j)] - 1.0)
        }
    });
    linalg::mirror_lower_to_upper(&mut t);
    PenaltyMatrix::new(t, 1.0)
}

/// Largest off-diagonal `|Sigma_QC_ij - L_ij S_ij|` at the given penalty.
pub fn schur_limit_discrepancy(
    s: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    n: usize,
    opts: &QcSolveOptions,
) -> Result<f64> {
    let report = qc_map_estimate(s, penalty, n, opts)?;
    let l = asymptotic_schur_localization(s, penalty, n)?;
    Ok(off_diagonal_gap(&report.estimate, s, l.matrix()))
}

fn off_diagonal_gap(sigma: &DMatrix<f64>, s: &DMatrix<f64>, l: &DMatrix<f64>) -> f64 {
    let d = s.nrows();
    let mut gap = 0.0_f64;
    for j in 0..d {
        for i in 0..d {
            if i != j {
                gap = gap.max((sigma[(i, j)] - l[(i, j)] * s[(i, j)]).abs());
            }
        }
    }
    gap
}

/// Outcome of [`schur_limit_study`].
#[derive(Debug, Clone)]
pub struct SchurLimitStudy {
    /// Strength at which the discrepancy first dropped below the threshold.
    pub strength: f64,
    pub disc: f64,
    pub disc_tenfold: f64,
    pub ratio: f64,
    /// Every `(strength, disc)` pair visited while doubling.
    pub path: Vec<(f64, f64)>,
    /// Largest `|Sigma_QC_ij - S_ij|` over entries with `Theta_ij = 0`, at both strengths.
    pub unpenalized_gap: f64,
}

/// Double the strength, starting from `start`, until
/// `disc(s) < threshold_rel * max|S|`, then compare with `disc(10 s)`.
pub fn schur_limit_study(
    s: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    n: usize,
    start: f64,
    threshold_rel: f64,
    opts: &QcSolveOptions,
) -> Result<SchurLimitStudy> {
    if !(start > 0.0) {
        return arg_err("starting strength must be positive");
    }
    let target = threshold_rel * linalg::max_abs(s);
    let mut strength = start;
    let mut path = Vec::new();
    for _ in 0..200 {
        let pen = penalty.with_strength(strength)?;
        let report = qc_map_estimate(s, &pen, n, opts)?;
        let l = asymptotic_schur_localization(s, &pen, n)?;
        let disc = off_diagonal_gap(&report.estimate, s, l.matrix());
        path.push((strength, disc));
        if disc < target {
            let pen10 = penalty.with_strength(10.0 * strength)?;
            let report10 = qc_map_estimate(s, &pen10, n, opts)?;
            let l10 = asymptotic_schur_localization(s, &pen10, n)?;
            let disc_tenfold = off_diagonal_gap(&report10.estimate, s, l10.matrix());
            let theta_ref = penalty.theta_ref();
            let mut unpenalized_gap = 0.0_f64;
            for k in 0..s.len() {
                if theta_ref[k] == 0.0 {
                    unpenalized_gap = unpenalized_gap
                        .max((report.estimate[k] - s[k]).abs())
                        .max((report10.estimate[k] - s[k]).abs());
                }
            }
            return Ok(SchurLimitStudy {
                strength,
                disc,
                disc_tenfold,
                ratio: disc_tenfold / disc,
                path,
                unpenalized_gap,
            });
        }
        strength *= 2.0;
    }
    Err(Error::NonConvergence {
        iterations: path.len(),
        residual: path.last().map_or(f64::NAN, |p| p.1),
        residual_trace: path.iter().map(|p| p.1).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covmodels::{build_single_scale, GridGeometry, KernelSpec};
    use crate::ensembles::{draw_ensemble, factorize, sample_covariance};

    fn sample(d: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let m = build_single_scale(KernelSpec::laplacian(3.0).unwrap(), GridGeometry::periodic(d).unwrap()).unwrap();
        sample_covariance(&draw_ensemble(&factorize(&m).unwrap(), n, seed, 0).unwrap())
    }

    #[test]
    fn penalty_validation() {
        assert!(PenaltyMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]), 1.0).is_err());
        assert!(PenaltyMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]), 1.0).is_err());
        assert!(PenaltyMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]), 1.0).is_err());
        assert!(PenaltyMatrix::uniform(3, -1.0).is_err());
        let p = PenaltyMatrix::uniform(3, 2.0).unwrap();
        assert!(p.is_fully_penalized());
        assert_eq!(p.theta()[(0, 1)], 2.0);
        assert!(PenaltyMatrix::uniform(3, 0.0).unwrap().is_zero());
    }

    #[test]
    fn log_posterior_identity_example() {
        let d = 4;
        let id = DMatrix::identity(d, d);
        let v = qc_log_posterior(&id, &id, &PenaltyMatrix::uniform(d, 0.0).unwrap(), 2).unwrap();
        assert!((v + d as f64).abs() < 1e-15);
    }

    #[test]
    fn scalar_maximizer_is_s() {
        let s = DMatrix::from_element(1, 1, 2.0);
        let pen = PenaltyMatrix::new(DMatrix::zeros(1, 1), 1.0).unwrap();
        let f = |w: f64| qc_log_posterior(&DMatrix::from_element(1, 1, w), &s, &pen, 4).unwrap();
        assert!(f(0.5) > f(0.49) && f(0.5) > f(0.51));
        let r = qc_map_estimate(&s, &pen, 4, &QcSolveOptions::default()).unwrap();
        assert_eq!(r.estimate, s);
    }

    #[test]
    fn log_posterior_matches_eigen_evaluation() {
        let s = sample(4, 9, 3);
        let mut omega = sample(4, 12, 4);
        omega += DMatrix::identity(4, 4) * 0.3;
        let t = DMatrix::from_fn(4, 4, |i, j| if i == j { 0.0 } else { 0.5 + (i + j) as f64 });
        let pen = PenaltyMatrix::new(t.clone(), 1.7).unwrap();
        let n = 9.0;
        let logdet: f64 = SymmetricEigen::new(omega.clone()).eigenvalues.iter().map(|v| v.ln()).sum();
        let mut tr = 0.0;
        let mut quad = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                tr += s[(i, j)] * omega[(j, i)];
                quad += 1.7 * t[(i, j)] * omega[(i, j)].powi(2);
            }
        }
        let expect = n / 2.0 * logdet - n / 2.0 * tr - quad / 4.0;
        let got = qc_log_posterior(&omega, &s, &pen, 9).unwrap();
        assert!((got - expect).abs() < 1e-12 * expect.abs().max(1.0), "{got} {expect}");
    }

    #[test]
    fn non_spd_precision_is_rejected() {
        let s = DMatrix::identity(2, 2);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let pen = PenaltyMatrix::uniform(2, 1.0).unwrap();
        assert!(matches!(qc_log_posterior(&bad, &s, &pen, 3), Err(Error::NotPositiveDefinite(_))));
        assert!(matches!(qc_gradient(&bad, &s, &pen, 3), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn gradient_vanishes_at_ml_point() {
        let s = sample(5, 30, 1);
        let omega = s.clone().try_inverse().unwrap();
        let g = qc_gradient(&omega, &s, &PenaltyMatrix::uniform(5, 0.0).unwrap(), 30).unwrap();
        assert!(linalg::max_abs(&g) < 1e-10, "{}", linalg::max_abs(&g));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let s = sample(5, 12, seed);
            let mut omega = sample(5, 15, seed + 100).try_inverse().unwrap();
            linalg::symmetrize(&mut omega);
            let pen = PenaltyMatrix::uniform(5, 3.0).unwrap();
            let mut dir = sample(5, 3, seed + 200);
            dir -= DMatrix::identity(5, 5) * 0.1;
            let h = 1e-6;
            let f = |w: &DMatrix<f64>| qc_log_posterior(w, &s, &pen, 12).unwrap();
            let fd = (f(&(&omega + &dir * h)) - f(&(&omega - &dir * h))) / (2.0 * h);
            let g = qc_gradient(&omega, &s, &pen, 12).unwrap();
            let an = dot(&g, &dir);
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} {an}");
        }
    }

    #[test]
    fn gradient_is_linear_in_n_and_theta() {
        let s = sample(4, 10, 7);
        let omega = DMatrix::identity(4, 4) * 1.3;
        let g1 = qc_gradient(&omega, &s, &PenaltyMatrix::uniform(4, 2.0).unwrap(), 10).unwrap();
        let g2 = qc_gradient(&omega, &s, &PenaltyMatrix::uniform(4, 4.0).unwrap(), 20).unwrap();
        assert!(linalg::max_abs(&(g2 - g1 * 2.0)) < 1e-14);
    }

    #[test]
    fn zero_penalty_returns_sample_covariance() {
        let s = sample(6, 3, 2);
        let r = qc_map_estimate(&s, &PenaltyMatrix::uniform(6, 0.0).unwrap(), 3, &QcSolveOptions::default()).unwrap();
        assert_eq!(r.estimate, s);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn solution_satisfies_implicit_equation() {
        let s = sample(10, 20, 11);
        let pen = PenaltyMatrix::uniform(10, 100.0).unwrap();
        let r = qc_map_estimate(&s, &pen, 20, &QcSolveOptions::default()).unwrap();
        assert!(r.final_residual <= 1e-10);
        let check = fixed_point_residual(&r.estimate, &s, &pen, 20).unwrap();
        assert!(check <= 1e-10, "{check}");
        for i in 0..10 {
            assert!((r.estimate[(i, i)] - s[(i, i)]).abs() <= 1e-10 * s.norm());
        }
        assert!(r.final_gradient_norm <= 10.0 * 1e-10 * 20.0 * s.norm());
        assert!(linalg::is_exactly_symmetric(&r.estimate));
        let w = r.objective_trace.windows(2).all(|w| w[1] >= w[0] - 1e-12 * w[0].abs());
        assert!(w, "{:?}", r.objective_trace);
    }

    #[test]
    fn fixed_point_algorithm_agrees_with_newton() {
        let s = sample(8, 30, 5);
        let pen = PenaltyMatrix::uniform(8, 10.0).unwrap();
        let newton = qc_map_estimate(&s, &pen, 30, &QcSolveOptions::default()).unwrap();
        let opts = QcSolveOptions { algorithm: QcAlgorithm::FixedPoint, max_iter: 5000, ..Default::default() };
        let fp = qc_map_estimate(&s, &pen, 30, &opts).unwrap();
        assert!(fp.final_residual <= 1e-10);
        assert!(linalg::frobenius_norm(&(&fp.estimate - &newton.estimate)) < 1e-8);
    }

    #[test]
    fn exhausted_budget_reports_trace() {
        let s = sample(8, 4, 5);
        let opts = QcSolveOptions { max_iter: 1, ..Default::default() };
        match qc_map_estimate(&s, &PenaltyMatrix::uniform(8, 1.0).unwrap(), 4, &opts) {
            Err(Error::NonConvergence { residual_trace, iterations, .. }) => {
                assert_eq!(iterations, 1);
                assert!(!residual_trace.is_empty());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn localization_examples() {
        let s = DMatrix::identity(3, 3);
        let l = asymptotic_schur_localization(&s, &PenaltyMatrix::uniform(3, 90.0).unwrap(), 10).unwrap();
        assert!((l.matrix()[(0, 1)] - 0.1).abs() < 1e-15);
        assert_eq!(l.matrix()[(1, 1)], 1.0);
        let half = asymptotic_schur_localization(&s, &PenaltyMatrix::uniform(3, 10.0).unwrap(), 10).unwrap();
        assert_eq!(half.matrix()[(0, 2)], 0.5);
        let none = asymptotic_schur_localization(&s, &PenaltyMatrix::uniform(3, 0.0).unwrap(), 10).unwrap();
        assert!(none.matrix().iter().all(|v| *v == 1.0));
        let bad = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 0.0, 1.0]));
        assert!(asymptotic_schur_localization(&bad, &PenaltyMatrix::uniform(3, 1.0).unwrap(), 10).is_err());
    }

    #[test]
    fn theta_for_target_examples() {
        let s = DMatrix::identity(3, 3);
        let half = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.5 });
        let target = LocalizationMatrix::from_matrix(half, LocalizationLayout::Scalar).unwrap();
        let p = theta_for_target_localization(&s, &target, 10).unwrap();
        assert_eq!(p.theta()[(0, 1)], 10.0);
        let ones = theta_for_target_localization(&s, &LocalizationMatrix::ones(3), 10).unwrap();
        assert!(ones.is_zero());
        let zero = LocalizationMatrix::from_matrix(DMatrix::identity(3, 3), LocalizationLayout::Scalar).unwrap();
        assert!(theta_for_target_localization(&s, &zero, 10).is_err());
    }

    #[test]
    fn theta_round_trip() {
        let s = sample(6, 20, 8);
        let g = GridGeometry::periodic(6).unwrap();
        let target = crate::estimators::build_localization(
            KernelSpec::laplacian(2.0).unwrap(),
            g,
            LocalizationLayout::Scalar,
        );
        let pen = theta_for_target_localization(&s, &target, 20).unwrap();
        let back = asymptotic_schur_localization(&s, &pen, 20).unwrap();
        assert!(linalg::max_abs(&(back.matrix() - target.matrix())) < 1e-14);
    }

    #[test]
    fn diagnostics_block_lists_trace() {
        let s = sample(5, 10, 1);
        let r = qc_map_estimate(&s, &PenaltyMatrix::uniform(5, 5.0).unwrap(), 10, &QcSolveOptions::default()).unwrap();
        let text = r.diagnostics_block();
        assert!(text.contains("iterations = "));
        assert!(text.contains("iteration,residual,objective\n0,"));
        assert_eq!(text.lines().filter(|l| l.contains(',')).count(), r.residual_trace.len() + 1);
    }
}
