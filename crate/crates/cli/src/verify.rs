//! Invariant suites behind `covloc verify`.

use covloc::covmodels::{
    build_single_scale, kernel_matrix, laplacian_grid_precision, CovarianceModel, GridGeometry, KernelSpec,
};
use covloc::ensembles::{draw_ensemble, factorize, sample_covariance};
use covloc::estimators::{
    blend, build_localization, elementwise_bias_variance, hybrid_estimate, iw_map_estimate, schur_estimate, Estimator,
    HybridSpec, InverseWishartSpec, LocalizationLayout,
};
use covloc::linalg;
use covloc::qc::{fixed_point_residual, qc_map_estimate, schur_limit_study, PenaltyMatrix, QcSolveOptions};
use covloc::Result;
use nalgebra::DMatrix;

use crate::config::arg_err;

pub const SUITES: [&str; 6] = ["screening", "iw-hybrid", "psd-closure", "qc-fixed-point", "qc-limit", "bias-variance"];

pub struct Check {
    pub name: String,
    pub pass: bool,
    pub measured: String,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, measured: String) -> Self {
        Self { name: name.into(), pass, measured }
    }

    pub fn line(&self) -> String {
        format!("[{}] {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.measured)
    }
}

pub fn run(suite: &str, seed: u64) -> Result<Vec<Check>> {
    match suite {
        "screening" => screening(),
        "iw-hybrid" => iw_hybrid(seed),
        "psd-closure" => psd_closure(seed),
        "qc-fixed-point" => qc_fixed_point(seed),
        "qc-limit" => qc_limit(seed),
        "bias-variance" => bias_variance(seed),
        "all" => {
            let mut all = Vec::new();
            for s in SUITES {
                all.extend(run(s, seed)?);
            }
            Ok(all)
        }
        other => arg_err(format!("unknown verify suite {other:?} (expected one of {} or all)", SUITES.join(", "))),
    }
}

fn screening() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for d in [5usize, 10, 50] {
        for h in [0.2, 0.5, 1.0] {
            let g = GridGeometry::non_periodic(d)?;
            let p = laplacian_grid_precision(1.0 / h, g)?;
            let sigma = kernel_matrix(&KernelSpec::laplacian(1.0 / h)?, &g);
            let err = linalg::max_abs(&(&p * &sigma - DMatrix::identity(d, d)));
            let inv = linalg::inverse_from_cholesky(
                &linalg::cholesky_lower(&sigma).map_err(|(i, v)| covloc::Error::Factorization { pivot: i, value: v })?,
            );
            let mut band = 0.0_f64;
            for i in 0..d {
                for j in 0..d {
                    if i.abs_diff(j) >= 2 {
                        band = band.max(inv[(i, j)].abs());
                    }
                }
            }
            out.push(Check::new(
                format!("screening d={d} h={h}"),
                err <= 1e-10 && band <= 1e-10,
                format!("max|P*Sigma - I| = {err:.3e}, max off-band |Sigma^-1| = {band:.3e}"),
            ));
        }
    }
    Ok(out)
}

fn iw_hybrid(seed: u64) -> Result<Vec<Check>> {
    let mut combos = 0;
    let mut mismatches = 0;
    for d in [3usize, 8, 20] {
        let g = GridGeometry::periodic(d)?;
        let prior = build_single_scale(KernelSpec::laplacian(1.5)?, g)?;
        let f = factorize(&build_single_scale(KernelSpec::laplacian(4.0)?, g)?)?;
        for n in [1usize, 5, 40, 500] {
            let s = sample_covariance(&draw_ensemble(&f, n, seed, d as u64)?);
            for m in [0.5, 3.0, 20.0, 1e4] {
                let a = iw_map_estimate(&s, &InverseWishartSpec::new(prior.clone(), m)?, n)?;
                let b = hybrid_estimate(&s, &HybridSpec::new(prior.clone(), m / (m + n as f64))?)?;
                combos += 1;
                if a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                    mismatches += 1;
                }
            }
        }
    }
    Ok(vec![Check::new(
        "iw-hybrid",
        mismatches == 0,
        format!("{combos} (m, n, d) combinations, {mismatches} not bitwise equal"),
    )])
}

fn min_relative_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let (lo, hi) = linalg::eigen_extremes(m);
    if hi > 0.0 {
        lo / hi
    } else {
        lo
    }
}

fn psd_closure(seed: u64) -> Result<Vec<Check>> {
    let g = GridGeometry::periodic(40)?;
    let truth = build_single_scale(KernelSpec::laplacian(5.0)?, g)?;
    let prior = build_single_scale(KernelSpec::laplacian(2.0)?, g)?;
    let loc = build_localization(KernelSpec::laplacian(3.0)?, g, LocalizationLayout::Scalar);
    let f = factorize(&truth)?;
    let (mut worst_s, mut worst_schur, mut worst_hyb) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for trial in 0..20u64 {
        let s = sample_covariance(&draw_ensemble(&f, 5, seed, trial)?);
        worst_s = worst_s.min(min_relative_eigenvalue(&s));
        worst_schur = worst_schur.min(min_relative_eigenvalue(&schur_estimate(&s, &loc)?));
        worst_hyb = worst_hyb.min(min_relative_eigenvalue(&blend(prior.matrix(), &s, 0.3)?));
    }
    let tol = -1e-12;
    Ok(vec![
        Check::new("psd-closure sample", worst_s >= tol, format!("min eigenvalue / max = {worst_s:.3e}")),
        Check::new("psd-closure schur", worst_schur >= tol, format!("min eigenvalue / max = {worst_schur:.3e}")),
        Check::new("psd-closure hybrid", worst_hyb >= tol, format!("min eigenvalue / max = {worst_hyb:.3e}")),
    ])
}

fn qc_fixed_point(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (d, n, strength) in [(6usize, 5usize, 1.0), (12, 5, 10.0), (20, 50, 100.0), (8, 50, 10.0)] {
        let truth = build_single_scale(KernelSpec::laplacian(3.0)?, GridGeometry::non_periodic(d)?)?;
        let s = sample_covariance(&draw_ensemble(&factorize(&truth)?, n, seed, d as u64)?);
        let pen = PenaltyMatrix::uniform(d, strength)?;
        let a = qc_map_estimate(&s, &pen, n, &QcSolveOptions::default())?;
        let b = qc_map_estimate(&s, &pen, n, &QcSolveOptions { init_scale: 2.0, ..Default::default() })?;
        let res = fixed_point_residual(&a.estimate, &s, &pen, n)?;
        let spd = linalg::cholesky_lower(&a.estimate).is_ok();
        let gap = linalg::frobenius_norm(&(&a.estimate - &b.estimate));
        out.push(Check::new(
            format!("qc-fixed-point d={d} n={n} s={strength}"),
            res <= 1e-10 && spd && gap <= 1e-8,
            format!("residual = {res:.3e}, spd = {spd}, two-start gap = {gap:.3e}, iterations = {}", a.iterations),
        ));
    }
    Ok(out)
}

fn qc_limit(seed: u64) -> Result<Vec<Check>> {
    let truth = build_single_scale(KernelSpec::laplacian(3.0)?, GridGeometry::periodic(10)?)?;
    let s = sample_covariance(&draw_ensemble(&factorize(&truth)?, 20, seed, 0)?);
    let pen = PenaltyMatrix::uniform(10, 1.0)?;
    let st = schur_limit_study(&s, &pen, 20, 1.0, 1e-3, &QcSolveOptions::default())?;
    let zero_tol = 1e-10 * linalg::frobenius_norm(&s);
    Ok(vec![
        Check::new(
            "qc-limit ratio",
            st.ratio <= 1.0 / 30.0,
            format!("s = {}, disc(s) = {:.4e}, disc(10s) = {:.4e}, ratio = {:.4}", st.strength, st.disc, st.disc_tenfold, st.ratio),
        ),
        Check::new(
            "qc-limit unpenalized entries",
            st.unpenalized_gap <= zero_tol,
            format!("max gap = {:.3e} (limit {zero_tol:.3e})", st.unpenalized_gap),
        ),
    ])
}

fn bias_variance(seed: u64) -> Result<Vec<Check>> {
    let g = GridGeometry::periodic(5)?;
    let model = build_single_scale(KernelSpec::laplacian(3.0)?, g)?;
    let loc = build_localization(KernelSpec::gaussian(1.5)?, g, LocalizationLayout::Scalar);
    let alpha = 0.4;
    let trials = 100_000;
    let schur = elementwise_bias_variance(&model, &Estimator::Schur(loc.clone()), 20, trials, seed)?;
    let prior = CovarianceModel::custom(DMatrix::identity(5, 5))?;
    let hyb = elementwise_bias_variance(&model, &Estimator::Hybrid(HybridSpec::new(prior, alpha)?), 20, trials, seed)?;
    let (sigma, l) = (model.matrix(), loc.matrix());
    let (mut z, mut vs, mut vh) = (0.0_f64, 0.0_f64, 0.0_f64);
    for i in 0..5 {
        for j in 0..5 {
            z = z.max((schur.bias[(i, j)] - (l[(i, j)] - 1.0) * sigma[(i, j)]).abs() / schur.bias_standard_error[(i, j)]);
            vs = vs.max((schur.variance_ratio[(i, j)] / l[(i, j)].powi(2) - 1.0).abs());
            vh = vh.max((hyb.variance_ratio[(i, j)] / (1.0 - alpha).powi(2) - 1.0).abs());
        }
    }
    Ok(vec![
        Check::new("bias-variance schur bias", z <= 3.0, format!("max |bias - (L-1)Sigma| / SE = {z:.3}")),
        Check::new("bias-variance schur variance", vs <= 0.05, format!("max relative deviation from L^2 = {vs:.3e}")),
        Check::new("bias-variance hybrid variance", vh <= 0.05, format!("max relative deviation from (1-alpha)^2 = {vh:.3e}")),
    ])
}
