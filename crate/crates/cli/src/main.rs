//! `covloc` command-line tool.
//!
//! Exit codes: 0 success, 1 verification failure, 2 argument error,
//! 3 model-validity error, 4 solver non-convergence.

mod config;
mod verify;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use covloc::covmodels::{
    build_multiscale, build_nonstationary, build_pressure_wind, build_single_scale, CovarianceModel, GridGeometry,
    KernelFamily, KernelSpec,
};
use covloc::ensembles::{draw_ensemble, factorize, sample_covariance_of};
use covloc::estimators::{
    build_localization, hybrid_estimate, iw_map_estimate, schur_estimate, HybridSpec, InverseWishartSpec,
    LocalizationLayout,
};
use covloc::experiments::{experiment_suite, ModelKind, Scale, SuiteName, SuiteOverrides, SuiteOutput};
use covloc::matrix_io;
use covloc::qc::{qc_map_estimate, trace_csv, PenaltyMatrix, QcAlgorithm, QcSolveOptions};
use covloc::{Error, Result};
use nalgebra::DMatrix;

use config::{arg_err, RunConfig};

#[derive(Parser)]
#[command(name = "covloc", version, about = "Covariance localization and Bayesian covariance estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a benchmark covariance matrix and write it as a binary matrix file.
    BuildCov {
        /// laplacian, gaussian, multiscale, nonstationary or pressure-wind
        model: String,
        #[command(flatten)]
        common: Common,
    },
    /// Draw an ensemble (d x n, one member per column) from a model.
    Sample {
        model: String,
        /// Trial index, used as the random stream.
        #[arg(long)]
        trial: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate a covariance matrix from an ensemble file.
    Estimate {
        /// sample, schur, hybrid, iw or qc
        estimator: String,
        /// Ensemble file (binary or CSV, one member per column).
        #[arg(long)]
        ensemble: PathBuf,
        /// Prior covariance for hybrid and iw; defaults to a single-scale model built from --kernel and --l.
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Localization layout for schur: scalar or pressure-wind.
        #[arg(long)]
        layout: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Tuning sweep over the benchmark models; writes sweep and fit CSVs.
    Sweep {
        /// hybrid or schur
        family: String,
        /// Restrict to one model.
        #[arg(long)]
        model: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Reproduce a figure's numerical experiment (fig1, fig2 or fig3).
    Experiment {
        name: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run invariant suites and report measured values.
    Verify {
        /// screening, iw-hybrid, psd-closure, qc-fixed-point, qc-limit, bias-variance or all
        suite: String,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Default)]
struct Common {
    /// Configuration file (`[section]` headers, `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    l: Option<f64>,
    #[arg(long)]
    l1: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    m: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// ci or paper
    #[arg(long)]
    scale: Option<String>,
    /// laplacian or gaussian
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long, overrides_with = "no_periodic")]
    periodic: bool,
    #[arg(long, overrides_with = "periodic")]
    no_periodic: bool,
    /// Uniform QC penalty strength (zero diagonal, ones elsewhere).
    #[arg(long)]
    theta_uniform: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output file (or directory for sweep and experiment).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn periodic(&self) -> Option<bool> {
        match (self.periodic, self.no_periodic) {
            (true, _) => Some(true),
            (_, true) => Some(false),
            _ => None,
        }
    }

    /// File values first, then flags on top.
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        c.overlay("run", "seed", self.seed)?;
        c.overlay("run", "threads", self.threads)?;
        c.overlay("model", "d", self.d)?;
        c.overlay("model", "l", self.l)?;
        c.overlay("model", "l1", self.l1)?;
        c.overlay("model", "l2", self.l2)?;
        c.overlay("model", "periodic", self.periodic())?;
        c.overlay("model", "kernel", self.kernel.as_ref())?;
        c.overlay("sample", "n", self.n)?;
        c.overlay("estimate", "alpha", self.alpha)?;
        c.overlay("estimate", "m", self.m)?;
        c.overlay("sweep", "scale", self.scale.as_ref())?;
        c.overlay("sweep", "trials", self.trials)?;
        c.overlay("sweep", "d", self.d)?;
        c.overlay("sweep", "kernels", self.kernel.as_ref())?;
        c.overlay("qc", "theta_uniform", self.theta_uniform)?;
        c.overlay("qc", "tol", self.tol)?;
        c.overlay("qc", "max_iter", self.max_iter)?;
        c.default_to("run", "seed", 1);
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::DimensionMismatch { .. } | Error::Format(_) | Error::Io(_) => 2,
        Error::ModelValidity(_) | Error::Factorization { .. } | Error::NotPositiveDefinite(_) => 3,
        Error::NonConvergence { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<u8> {
    let common = match &command {
        Command::BuildCov { common, .. }
        | Command::Sample { common, .. }
        | Command::Estimate { common, .. }
        | Command::Sweep { common, .. }
        | Command::Experiment { common, .. }
        | Command::Verify { common, .. } => common,
    };
    let mut cfg = common.resolve()?;
    if let Some(t) = cfg.usize("run", "threads") {
        if t == 0 {
            return arg_err("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Argument(format!("cannot size the thread pool: {e}")))?;
    }
    match &command {
        Command::BuildCov { model, .. } => cmd_build_cov(model, &mut cfg, common.out.as_deref()),
        Command::Sample { model, trial, .. } => {
            cfg.overlay("sample", "trial", *trial)?;
            cmd_sample(model, &mut cfg, common.out.as_deref())
        }
        Command::Estimate { estimator, ensemble, prior, layout, .. } => {
            cfg.overlay("estimate", "layout", layout.as_ref())?;
            cmd_estimate(estimator, ensemble, prior.as_deref(), &mut cfg, common.out.as_deref())
        }
        Command::Sweep { family, model, .. } => {
            if let Some(m) = model {
                cfg.set("sweep", "models", m)?;
            }
            let suite = match family.as_str() {
                "hybrid" => SuiteName::Fig2Hybrid,
                "schur" => SuiteName::Fig3Schur,
                other => return arg_err(format!("unknown sweep family {other:?} (expected hybrid or schur)")),
            };
            cmd_suite(suite, Scale::Ci, &mut cfg, common.out.as_deref())
        }
        Command::Experiment { name, .. } => {
            let suite = SuiteName::parse(name)?;
            cmd_suite(suite, Scale::Paper, &mut cfg, common.out.as_deref())
        }
        Command::Verify { suite, .. } => cmd_verify(suite, &cfg),
    }
}

fn echo(cfg: &RunConfig, sections: &[&str]) {
    for line in cfg.echo(sections).lines() {
        println!("# {line}");
    }
}

/// Binary unless the name ends in `.csv`.
fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        matrix_io::write_csv(path, m)
    } else {
        matrix_io::write_binary(path, m)
    }
}

fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let text = fs::read_to_string(path)?;
        matrix_io::from_csv(&text)
    } else {
        matrix_io::read_binary(path)
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

/// Fill model defaults into the config and build the model it describes.
fn build_model(name: &str, cfg: &mut RunConfig) -> Result<CovarianceModel> {
    let kind = ModelKind::parse(name)?;
    cfg.default_to("model", "name", kind.name());
    cfg.default_to("model", "d", 200);
    cfg.default_to("model", "periodic", kind.is_periodic());
    let d = cfg.usize("model", "d").unwrap_or(200);
    let periodic = cfg.bool("model", "periodic").unwrap_or(true);
    let g = GridGeometry::new(d, periodic, 1.0)?;
    match kind {
        ModelKind::Laplacian | ModelKind::Gaussian | ModelKind::PressureWind => {
            cfg.default_to("model", "l", 5.0);
            let l = cfg.f64("model", "l").unwrap_or(5.0);
            match kind {
                ModelKind::Laplacian => build_single_scale(KernelSpec::laplacian(l)?, g),
                ModelKind::Gaussian => build_single_scale(KernelSpec::gaussian(l)?, g),
                _ => build_pressure_wind(l, g),
            }
        }
        ModelKind::Multiscale => {
            cfg.default_to("model", "l1", 2.0);
            cfg.default_to("model", "l2", 20.0);
            cfg.default_to("model", "kernel", "gaussian");
            let family = KernelFamily::parse(&cfg.text("model", "kernel").unwrap_or_default())?;
            build_multiscale(cfg.f64("model", "l1").unwrap_or(2.0), cfg.f64("model", "l2").unwrap_or(20.0), g, family)
        }
        ModelKind::Nonstationary => {
            cfg.default_to("model", "l1", 2.1);
            cfg.default_to("model", "l2", 22.0);
            build_nonstationary(cfg.f64("model", "l1").unwrap_or(2.1), cfg.f64("model", "l2").unwrap_or(22.0), g)
        }
    }
}

fn cmd_build_cov(name: &str, cfg: &mut RunConfig, out: Option<&Path>) -> Result<u8> {
    let model = build_model(name, cfg)?;
    echo(cfg, &["model"]);
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(format!("{name}.bin")));
    write_matrix(&path, model.matrix())?;
    let meta = sidecar(&path, ".meta.txt");
    fs::write(&meta, model.metadata())?;
    println!("wrote {} ({}x{}) and {}", path.display(), model.dim(), model.dim(), meta.display());
    Ok(0)
}

fn cmd_sample(name: &str, cfg: &mut RunConfig, out: Option<&Path>) -> Result<u8> {
    let model = build_model(name, cfg)?;
    cfg.default_to("sample", "n", 10);
    cfg.default_to("sample", "trial", 0);
    echo(cfg, &["run", "model", "sample"]);
    let n = cfg.usize("sample", "n").unwrap_or(10);
    let trial = cfg.u64("sample", "trial").unwrap_or(0);
    let seed = cfg.u64("run", "seed").unwrap_or(1);
    let ens = draw_ensemble(&factorize(&model)?, n, seed, trial)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("ensemble.bin"));
    write_matrix(&path, ens.data())?;
    println!("wrote {} ({}x{}), checksum {:016x}", path.display(), ens.dim(), ens.size(), ens.checksum());
    Ok(0)
}

/// Prior from a file, or a single-scale model on the ensemble's grid.
fn load_prior(path: Option<&Path>, d: usize, cfg: &mut RunConfig) -> Result<CovarianceModel> {
    if let Some(p) = path {
        return CovarianceModel::custom(read_matrix(p)?);
    }
    cfg.default_to("model", "kernel", "gaussian");
    cfg.default_to("model", "l", 5.0);
    cfg.default_to("model", "periodic", true);
    let kernel = KernelSpec::new(
        KernelFamily::parse(&cfg.text("model", "kernel").unwrap_or_default())?,
        cfg.f64("model", "l").unwrap_or(5.0),
    )?;
    build_single_scale(kernel, GridGeometry::new(d, cfg.bool("model", "periodic").unwrap_or(true), 1.0)?)
}

fn cmd_estimate(
    estimator: &str,
    ensemble: &Path,
    prior: Option<&Path>,
    cfg: &mut RunConfig,
    out: Option<&Path>,
) -> Result<u8> {
    let x = read_matrix(ensemble)?;
    let (d, n) = (x.nrows(), x.ncols());
    if d == 0 || n == 0 {
        return arg_err("ensemble file is empty");
    }
    let s = sample_covariance_of(&x);
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("estimate.bin"));
    let estimate = match estimator {
        "sample" => {
            echo(cfg, &[]);
            s
        }
        "schur" => {
            cfg.default_to("model", "kernel", "gaussian");
            cfg.default_to("model", "l", 5.0);
            cfg.default_to("model", "periodic", true);
            cfg.default_to("estimate", "layout", "scalar");
            echo(cfg, &["model", "estimate"]);
            let layout = match cfg.text("estimate", "layout").as_deref() {
                Some("scalar") => LocalizationLayout::Scalar,
                Some("pressure-wind") => LocalizationLayout::PressureWindBlock,
                other => return arg_err(format!("unknown layout {other:?} (expected scalar or pressure-wind)")),
            };
            let points = match layout {
                LocalizationLayout::Scalar => d,
                LocalizationLayout::PressureWindBlock if d % 2 == 0 => d / 2,
                LocalizationLayout::PressureWindBlock => return arg_err("pressure-wind layout needs an even dimension"),
            };
            let kernel = KernelSpec::new(
                KernelFamily::parse(&cfg.text("model", "kernel").unwrap_or_default())?,
                cfg.f64("model", "l").unwrap_or(5.0),
            )?;
            let g = GridGeometry::new(points, cfg.bool("model", "periodic").unwrap_or(true), 1.0)?;
            schur_estimate(&s, &build_localization(kernel, g, layout))?
        }
        "hybrid" => {
            let Some(alpha) = cfg.f64("estimate", "alpha") else {
                return arg_err("hybrid needs --alpha");
            };
            let p = load_prior(prior, d, cfg)?;
            echo(cfg, &["model", "estimate"]);
            hybrid_estimate(&s, &HybridSpec::new(p, alpha)?)?
        }
        "iw" => {
            let Some(m) = cfg.f64("estimate", "m") else {
                return arg_err("iw needs --m");
            };
            let p = load_prior(prior, d, cfg)?;
            echo(cfg, &["model", "estimate"]);
            iw_map_estimate(&s, &InverseWishartSpec::new(p, m)?, n)?
        }
        "qc" => return estimate_qc(&s, n, cfg, &path),
        other => return arg_err(format!("unknown estimator {other:?} (expected sample, schur, hybrid, iw or qc)")),
    };
    write_matrix(&path, &estimate)?;
    println!("wrote {} ({d}x{d}) from {n} members", path.display());
    Ok(0)
}

fn estimate_qc(s: &DMatrix<f64>, n: usize, cfg: &mut RunConfig, path: &Path) -> Result<u8> {
    let defaults = QcSolveOptions::default();
    cfg.default_to("qc", "theta_uniform", 1.0);
    cfg.default_to("qc", "tol", format!("{:e}", defaults.tol));
    cfg.default_to("qc", "max_iter", defaults.max_iter);
    cfg.default_to("qc", "damping", defaults.damping);
    cfg.default_to("qc", "algorithm", defaults.algorithm.name());
    cfg.default_to("qc", "init_scale", defaults.init_scale);
    echo(cfg, &["qc"]);
    let algorithm = match cfg.text("qc", "algorithm").as_deref() {
        Some(a) if a == QcAlgorithm::NewtonOnPrecision.name() => QcAlgorithm::NewtonOnPrecision,
        Some(a) if a == QcAlgorithm::FixedPoint.name() => QcAlgorithm::FixedPoint,
        other => return arg_err(format!("unknown qc algorithm {other:?}")),
    };
    let opts = QcSolveOptions {
        tol: cfg.f64("qc", "tol").unwrap_or(defaults.tol),
        max_iter: cfg.usize("qc", "max_iter").unwrap_or(defaults.max_iter),
        damping: cfg.f64("qc", "damping").unwrap_or(defaults.damping),
        algorithm,
        init_scale: cfg.f64("qc", "init_scale").unwrap_or(defaults.init_scale),
    };
    let penalty = PenaltyMatrix::uniform(s.nrows(), cfg.f64("qc", "theta_uniform").unwrap_or(1.0))?;
    let diagnostics = sidecar(path, ".qc.txt");
    match qc_map_estimate(s, &penalty, n, &opts) {
        Ok(report) => {
            write_matrix(path, &report.estimate)?;
            fs::write(&diagnostics, report.diagnostics_block())?;
            println!(
                "wrote {} and {}: {} iterations, residual {:e}",
                path.display(),
                diagnostics.display(),
                report.iterations,
                report.final_residual
            );
            Ok(0)
        }
        Err(e @ Error::NonConvergence { .. }) => {
            if let Error::NonConvergence { iterations, residual, residual_trace } = &e {
                let mut block = format!("converged = false\niterations = {iterations}\nfinal_residual = {residual:e}\n");
                block.push_str(&trace_csv(residual_trace, &[]));
                fs::write(&diagnostics, block)?;
                eprintln!("residual trace written to {}", diagnostics.display());
            }
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn suite_overrides(cfg: &mut RunConfig, default_scale: Scale) -> Result<SuiteOverrides> {
    cfg.default_to("sweep", "scale", default_scale.name());
    let scale = Scale::parse(&cfg.text("sweep", "scale").unwrap_or_default())?;
    let base = SuiteOverrides { scale, ..Default::default() };
    cfg.default_to("sweep", "alpha_step", base.alpha_step);
    let (lo, hi, count) = base.schur_grid;
    cfg.default_to("sweep", "schur_grid", format!("{lo}, {hi}, {count}"));
    cfg.default_to("sweep", "refine", base.refine.unwrap_or(0));
    cfg.default_to("sweep", "illustration_n", base.illustration_n);
    let trials = cfg.usize("sweep", "trials").unwrap_or_else(|| scale.trials());
    cfg.default_to("sweep", "trials", trials);
    let sizes = cfg.usize_list("sweep", "ensemble_sizes").unwrap_or_else(|| scale.ensemble_sizes());
    cfg.default_to("sweep", "ensemble_sizes", sizes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(", "));
    let models = match cfg.text_list("sweep", "models") {
        Some(names) => Some(names.iter().map(|m| ModelKind::parse(m)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let kernels = match cfg.text_list("sweep", "kernels") {
        Some(names) => Some(names.iter().map(|k| KernelFamily::parse(k)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let refine = cfg.usize("sweep", "refine").filter(|&r| r > 0);
    Ok(SuiteOverrides {
        scale,
        d: cfg.usize("sweep", "d"),
        trials: Some(trials),
        ensemble_sizes: Some(sizes),
        seed: cfg.u64("run", "seed").unwrap_or(1),
        models,
        kernels,
        alpha_step: cfg.f64("sweep", "alpha_step").unwrap_or(base.alpha_step),
        schur_grid: cfg.grid("sweep", "schur_grid").unwrap_or(base.schur_grid),
        refine,
        illustration_n: cfg.usize("sweep", "illustration_n").unwrap_or(base.illustration_n),
    })
}

fn cmd_suite(suite: SuiteName, default_scale: Scale, cfg: &mut RunConfig, out: Option<&Path>) -> Result<u8> {
    let o = suite_overrides(cfg, default_scale)?;
    echo(cfg, &["run", "sweep"]);
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(suite.name()));
    let result = experiment_suite(suite, &o)?;
    fs::create_dir_all(&dir)?;
    for a in &result.artifacts {
        fs::write(dir.join(&a.file_name), &a.bytes)?;
    }
    print!("{}", summary_table(&result));
    println!("wrote {} files to {}", result.artifacts.len(), dir.display());
    Ok(0)
}

fn summary_table(r: &SuiteOutput) -> String {
    let mut t = String::new();
    for sw in &r.sweeps {
        let _ = writeln!(t, "{} / {} ({}):", sw.model, sw.estimator, sw.kernel);
        let _ = writeln!(t, "  {:>6}  {:>10}  {:>10}", "n", "optimum", "error");
        for ((n, p), (_, e)) in sw.optimal_points().iter().zip(sw.optimal_errors()) {
            let _ = writeln!(t, "  {n:>6}  {p:>10.4}  {e:>10.5}");
        }
    }
    if !r.fits.is_empty() {
        let _ = writeln!(t, "{:<14} {:<16} {:<10} {:>10} {:>8}", "model", "estimator", "form", "c", "r2");
        for f in &r.fits {
            let _ = writeln!(
                t,
                "{:<14} {:<16} {:<10} {:>10.4} {:>8.3}",
                f.model,
                f.estimator,
                f.fit.exponent_form.name(),
                f.fit.coefficient,
                f.fit.r_squared
            );
        }
    }
    for p in &r.panels {
        let _ = writeln!(t, "{:<8} relative error {:.4} (parameter {})", p.name, p.relative_error, p.parameter);
    }
    t
}

fn cmd_verify(suite: &str, cfg: &RunConfig) -> Result<u8> {
    echo(cfg, &["run"]);
    let checks = verify::run(suite, cfg.u64("run", "seed").unwrap_or(1))?;
    let failed = checks.iter().filter(|c| !c.pass).count();
    for c in &checks {
        println!("{}", c.line());
    }
    println!("{} passed, {failed} failed", checks.len() - failed);
    Ok(if failed == 0 { 0 } else { 1 })
}
