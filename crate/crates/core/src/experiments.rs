//! Benchmark truth models with their hybrid priors, and suites that run
//! sweeps and export CSV artifacts.
//!
//! The `paper` scale uses 200 grid points per field and 1000 trials. The `ci`
//! scale uses 50 grid points and 100 trials. A periodic Gaussian kernel whose length
//! scale is large relative to a small circle is not positive semidefinite, so
//! below 200 points any periodic Gaussian length scale above `d / 10` is
//! shrunk by the factor `d / 200`.

use std::fmt;

use nalgebra::DMatrix;

use crate::covmodels::{
    build_block_replicated, build_multiscale, build_nonstationary, build_pressure_wind, build_single_scale,
    CovarianceModel, GridGeometry, KernelFamily, KernelSpec,
};
use crate::ensembles::{draw_ensemble, factorize, sample_covariance};
use crate::error::{arg_err, Result};
use crate::estimators::{blend, build_localization, schur_estimate, LocalizationLayout};
use crate::matrix_io;
use crate::sweeps::{
    alpha_grid, ensemble_seed, fit_scaling, geometric_grid, relative_frobenius_error, run_sweep, EstimatorFamily,
    ExponentForm, ScalingFit, SweepConfig, SweepResult, FIT_CSV_HEADER,
};

/// Grid size at which the benchmark length scales are used unchanged.
pub const PAPER_GRID: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Laplacian,
    Gaussian,
    Multiscale,
    Nonstationary,
    PressureWind,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Laplacian,
        ModelKind::Gaussian,
        ModelKind::Multiscale,
        ModelKind::Nonstationary,
        ModelKind::PressureWind,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Laplacian => "laplacian",
            ModelKind::Gaussian => "gaussian",
            ModelKind::Multiscale => "multiscale",
            ModelKind::Nonstationary => "nonstationary",
            ModelKind::PressureWind => "pressure-wind",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .map_or_else(|| arg_err(format!("unknown model {s:?}")), Ok)
    }

    pub fn is_periodic(&self) -> bool {
        !matches!(self, ModelKind::Nonstationary)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Periodic Gaussian length scale used on a grid of `d` points.
pub fn desk_length_scale(l: f64, d: usize) -> f64 {
    if d < PAPER_GRID && l > d as f64 / 10.0 {
        l * d as f64 / PAPER_GRID as f64
    } else {
        l
    }
}

fn geometry_for(kind: ModelKind, d: usize) -> Result<GridGeometry> {
    GridGeometry::new(d, kind.is_periodic(), 1.0)
}

/// Benchmark truth model on `d` points per field.
pub fn benchmark_model(kind: ModelKind, d: usize) -> Result<CovarianceModel> {
    let g = geometry_for(kind, d)?;
    match kind {
        ModelKind::Laplacian => build_single_scale(KernelSpec::laplacian(5.0)?, g),
        ModelKind::Gaussian => build_single_scale(KernelSpec::gaussian(desk_length_scale(5.0, d))?, g),
        ModelKind::Multiscale => build_multiscale(
            desk_length_scale(2.0, d),
            desk_length_scale(20.0, d),
            g,
            KernelFamily::Gaussian,
        ),
        ModelKind::Nonstationary => build_nonstationary(2.1, 22.0, g),
        ModelKind::PressureWind => build_pressure_wind(desk_length_scale(5.0, d), g),
    }
}

/// Hybrid prior: single-scale Gaussian models, block-replicated for pressure-wind.
pub fn hybrid_prior(kind: ModelKind, d: usize) -> Result<CovarianceModel> {
    let g = geometry_for(kind, d)?;
    let gauss = |l: f64| KernelSpec::gaussian(if kind.is_periodic() { desk_length_scale(l, d) } else { l });
    match kind {
        ModelKind::Laplacian => build_single_scale(gauss(1.0)?, g),
        ModelKind::Gaussian => build_single_scale(gauss(16.0)?, g),
        ModelKind::Multiscale => build_single_scale(gauss(4.0)?, g),
        ModelKind::Nonstationary => build_single_scale(gauss(8.0)?, g),
        ModelKind::PressureWind => build_block_replicated(gauss(5.0)?, g),
    }
}

/// Schur localization family matching the model's layout.
pub fn schur_family(kind: ModelKind, d: usize, kernel: KernelFamily) -> Result<EstimatorFamily> {
    let layout = match kind {
        ModelKind::PressureWind => LocalizationLayout::PressureWindBlock,
        _ => LocalizationLayout::Scalar,
    };
    Ok(EstimatorFamily::Schur { kernel, geometry: geometry_for(kind, d)?, layout })
}

/// Fit form the theory predicts for a localization kernel.
pub fn schur_exponent(kernel: KernelFamily) -> ExponentForm {
    match kernel {
        KernelFamily::Laplacian => ExponentForm::LinearN,
        KernelFamily::Gaussian => ExponentForm::SqrtN,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Ci,
    Paper,
}

impl Scale {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ci" => Ok(Scale::Ci),
            "paper" => Ok(Scale::Paper),
            other => arg_err(format!("unknown scale {other:?} (expected ci or paper)")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scale::Ci => "ci",
            Scale::Paper => "paper",
        }
    }

    pub fn grid_points(&self) -> usize {
        match self {
            Scale::Ci => 50,
            Scale::Paper => PAPER_GRID,
        }
    }

    pub fn trials(&self) -> usize {
        match self {
            Scale::Ci => 100,
            Scale::Paper => 1000,
        }
    }

    pub fn ensemble_sizes(&self) -> Vec<usize> {
        match self {
            Scale::Ci => vec![10, 20, 40, 80],
            Scale::Paper => vec![10, 20, 40, 80, 160, 320],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteName {
    Fig2Hybrid,
    Fig3Schur,
    Fig1Illustration,
}

impl SuiteName {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fig2-hybrid" | "fig2" | "hybrid" => Ok(SuiteName::Fig2Hybrid),
            "fig3-schur" | "fig3" | "schur" => Ok(SuiteName::Fig3Schur),
            "fig1-illustration" | "fig1" | "illustration" => Ok(SuiteName::Fig1Illustration),
            other => arg_err(format!("unknown experiment {other:?}")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SuiteName::Fig2Hybrid => "fig2-hybrid",
            SuiteName::Fig3Schur => "fig3-schur",
            SuiteName::Fig1Illustration => "fig1-illustration",
        }
    }
}

/// Settings of a suite run. Missing values come from the scale.
#[derive(Debug, Clone)]
pub struct SuiteOverrides {
    pub scale: Scale,
    pub d: Option<usize>,
    pub trials: Option<usize>,
    pub ensemble_sizes: Option<Vec<usize>>,
    pub seed: u64,
    pub models: Option<Vec<ModelKind>>,
    /// Schur suites: localization kernels to sweep (default both).
    pub kernels: Option<Vec<KernelFamily>>,
    pub alpha_step: f64,
    pub schur_grid: (f64, f64, usize),
    pub refine: Option<usize>,
    /// Ensemble size of the illustration.
    pub illustration_n: usize,
}

impl Default for SuiteOverrides {
    fn default() -> Self {
        Self {
            scale: Scale::Ci,
            d: None,
            trials: None,
            ensemble_sizes: None,
            seed: 1,
            models: None,
            kernels: None,
            alpha_step: 0.05,
            schur_grid: (1.0, 200.0, 25),
            refine: Some(4),
            illustration_n: 30,
        }
    }
}

impl SuiteOverrides {
    pub fn grid_points(&self) -> usize {
        self.d.unwrap_or_else(|| self.scale.grid_points())
    }

    pub fn trials(&self) -> usize {
        self.trials.unwrap_or_else(|| self.scale.trials())
    }

    pub fn ensemble_sizes(&self) -> Vec<usize> {
        self.ensemble_sizes.clone().unwrap_or_else(|| self.scale.ensemble_sizes())
    }

    pub fn models(&self) -> Vec<ModelKind> {
        self.models.clone().unwrap_or_else(|| ModelKind::ALL.to_vec())
    }

    pub fn kernels(&self) -> Vec<KernelFamily> {
        self.kernels.clone().unwrap_or_else(|| vec![KernelFamily::Laplacian, KernelFamily::Gaussian])
    }
}

/// A fitted scaling law tagged with the sweep it came from.
#[derive(Debug, Clone)]
pub struct FitRecord {
    pub model: String,
    pub estimator: String,
    pub fit: ScalingFit,
}

pub fn fits_to_csv(fits: &[FitRecord]) -> String {
    let mut out = String::from(FIT_CSV_HEADER);
    out.push('\n');
    for f in fits {
        out.push_str(&f.fit.csv_row(&f.model, &f.estimator));
        out.push('\n');
    }
    out
}

/// A named output file.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub file_name: String,
    pub bytes: Vec<u8>,
}

/// One matrix of the illustration with its error against the truth.
#[derive(Debug, Clone)]
pub struct IllustrationPanel {
    pub name: &'static str,
    pub matrix: DMatrix<f64>,
    pub relative_error: f64,
    /// Tuned parameter (`alpha` or length scale); NaN for truth and sample.
    pub parameter: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOutput {
    pub sweeps: Vec<SweepResult>,
    pub fits: Vec<FitRecord>,
    pub panels: Vec<IllustrationPanel>,
    pub artifacts: Vec<Artifact>,
}

pub fn hybrid_sweep_config(kind: ModelKind, o: &SuiteOverrides) -> Result<SweepConfig> {
    let d = o.grid_points();
    Ok(SweepConfig {
        model: benchmark_model(kind, d)?,
        family: EstimatorFamily::Hybrid { prior: hybrid_prior(kind, d)? },
        parameter_grid: alpha_grid(o.alpha_step)?,
        ensemble_sizes: o.ensemble_sizes(),
        trials: o.trials(),
        seed: o.seed,
        refine: None,
    })
}

pub fn schur_sweep_config(kind: ModelKind, kernel: KernelFamily, o: &SuiteOverrides) -> Result<SweepConfig> {
    let d = o.grid_points();
    let (lo, hi, count) = o.schur_grid;
    Ok(SweepConfig {
        model: benchmark_model(kind, d)?,
        family: schur_family(kind, d, kernel)?,
        parameter_grid: geometric_grid(lo, hi, count)?,
        ensemble_sizes: o.ensemble_sizes(),
        trials: o.trials(),
        seed: o.seed,
        refine: o.refine,
    })
}

fn sweep_artifact(prefix: &str, r: &SweepResult) -> Artifact {
    let kernel = if r.estimator == "schur" { format!("_{}", r.kernel) } else { String::new() };
    Artifact { file_name: format!("{prefix}_{}{kernel}.csv", r.model), bytes: r.to_csv().into_bytes() }
}

pub fn experiment_suite(name: SuiteName, o: &SuiteOverrides) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::default();
    match name {
        SuiteName::Fig2Hybrid => {
            for kind in o.models() {
                let r = run_sweep(&hybrid_sweep_config(kind, o)?)?;
                let fit = fit_scaling(&r.optimal_points(), ExponentForm::InverseN)?;
                out.artifacts.push(sweep_artifact("fig2_hybrid", &r));
                out.fits.push(FitRecord { model: r.model.clone(), estimator: r.estimator.clone(), fit });
                out.sweeps.push(r);
            }
            out.artifacts.push(Artifact { file_name: "fig2_hybrid_fits.csv".into(), bytes: fits_to_csv(&out.fits).into_bytes() });
        }
        SuiteName::Fig3Schur => {
            for kind in o.models() {
                for kernel in o.kernels() {
                    let r = run_sweep(&schur_sweep_config(kind, kernel, o)?)?;
                    let fit = fit_scaling(&r.optimal_points(), schur_exponent(kernel))?;
                    out.artifacts.push(sweep_artifact("fig3_schur", &r));
                    out.fits.push(FitRecord { model: r.model.clone(), estimator: r.estimator.clone(), fit });
                    out.sweeps.push(r);
                }
            }
            out.artifacts.push(Artifact { file_name: "fig3_schur_fits.csv".into(), bytes: fits_to_csv(&out.fits).into_bytes() });
        }
        SuiteName::Fig1Illustration => illustration(o, &mut out)?,
    }
    Ok(out)
}

/// Tune both estimators at one ensemble size on the single-scale Gaussian
/// model, then apply the tuned estimators to one fresh ensemble.
fn illustration(o: &SuiteOverrides, out: &mut SuiteOutput) -> Result<()> {
    let d = o.d.unwrap_or(PAPER_GRID);
    let n = o.illustration_n;
    let local = SuiteOverrides { d: Some(d), ensemble_sizes: Some(vec![n]), ..o.clone() };
    let hyb = run_sweep(&hybrid_sweep_config(ModelKind::Gaussian, &local)?)?;
    let sch = run_sweep(&schur_sweep_config(ModelKind::Gaussian, KernelFamily::Gaussian, &local)?)?;
    let alpha = hyb.optimal_points()[0].1;
    let ell = sch.optimal_points()[0].1;

    let truth = benchmark_model(ModelKind::Gaussian, d)?;
    let prior = hybrid_prior(ModelKind::Gaussian, d)?;
    let factor = factorize(&truth)?;
    // a draw outside the tuning trials
    let ens = draw_ensemble(&factor, n, ensemble_seed(o.seed, n), local.trials() as u64)?;
    let s = sample_covariance(&ens);
    let loc = build_localization(KernelSpec::gaussian(ell)?, *truth.geometry(), LocalizationLayout::Scalar);
    let t = truth.matrix();
    let panels = [
        ("truth", t.clone(), f64::NAN),
        ("sample", s.clone(), f64::NAN),
        ("hybrid", blend(prior.matrix(), &s, alpha)?, alpha),
        ("schur", schur_estimate(&s, &loc)?, ell),
    ];
    let mut summary = String::from("matrix,relative_error,parameter\n");
    for (name, matrix, parameter) in panels {
        let relative_error = relative_frobenius_error(&matrix, t)?;
        summary.push_str(&format!("{name},{relative_error},{parameter}\n"));
        out.artifacts.push(Artifact { file_name: format!("fig1_{name}.bin"), bytes: matrix_io::encode_binary(&matrix)? });
        out.panels.push(IllustrationPanel { name, matrix, relative_error, parameter });
    }
    out.artifacts.push(Artifact { file_name: "fig1_summary.csv".into(), bytes: summary.into_bytes() });
    for r in [&hyb, &sch] {
        out.artifacts.push(Artifact { file_name: format!("fig1_tuning_{}.csv", r.estimator), bytes: r.to_csv().into_bytes() });
    }
    out.sweeps.push(hyb);
    out.sweeps.push(sch);
    Ok(())
}
