//! Benchmark covariance models on one-dimensional grids.
//!
//! Five truth models are provided: single-scale Laplacian and Gaussian
//! kernels, an equal-weight two-scale Gaussian mixture, a nonstationary
//! kernel whose local length scale varies linearly across the domain, and a
//! coupled pressure-wind model in which wind is the centered derivative of
//! pressure. Every constructor returns a validated [`CovarianceModel`]:
//! exactly symmetric, strictly positive diagonal and positive semidefinite
//! to within [`PSD_REL_TOL`] of the largest eigenvalue.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{arg_err, Error, Result};
use crate::linalg;

/// Relative tolerance on the smallest eigenvalue accepted by model validation.
pub const PSD_REL_TOL: f64 = 1e-10;

/// Jitter added when validation fails, as a multiple of `trace / d`.
pub const JITTER_REL: f64 = 1e-12;

/// A uniform one-dimensional grid, optionally periodic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    d: usize,
    periodic: bool,
    mesh: f64,
}

impl GridGeometry {
    pub fn new(d: usize, periodic: bool, mesh: f64) -> Result<Self> {
        if d < 2 {
            return arg_err(format!("grid needs at least 2 points, got {d}"));
        }
        if !(mesh > 0.0) || !mesh.is_finite() {
            return arg_err(format!("mesh spacing must be positive, got {mesh}"));
        }
        Ok(Self { d, periodic, mesh })
    }

    /// Periodic grid with unit spacing.
    pub fn periodic(d: usize) -> Result<Self> {
        Self::new(d, true, 1.0)
    }

    /// Non-periodic grid with unit spacing.
    pub fn non_periodic(d: usize) -> Result<Self> {
        Self::new(d, false, 1.0)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    pub fn mesh(&self) -> f64 {
        self.mesh
    }

    fn distance_unchecked(&self, i: usize, j: usize) -> f64 {
        let k = i.abs_diff(j);
        let k = if self.periodic { k.min(self.d - k) } else { k };
        self.mesh * k as f64
    }
}

/// Distance between grid points `i` and `j`; periodic grids use the shorter arc.
pub fn grid_distance(i: usize, j: usize, geometry: &GridGeometry) -> Result<f64> {
    if i >= geometry.d || j >= geometry.d {
        return arg_err(format!(
            "grid index out of range: ({i}, {j}) on a grid of {} points",
            geometry.d
        ));
    }
    Ok(geometry.distance_unchecked(i, j))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    /// `exp(-r / l)`
    Laplacian,
    /// `exp(-(r / l)^2)`
    Gaussian,
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Laplacian => "laplacian",
            KernelFamily::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "laplacian" => Ok(KernelFamily::Laplacian),
            "gaussian" => Ok(KernelFamily::Gaussian),
            other => arg_err(format!("unknown kernel family {other:?}")),
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A correlation kernel with a single length scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    family: KernelFamily,
    length_scale: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, length_scale: f64) -> Result<Self> {
        if !(length_scale > 0.0) || length_scale.is_nan() {
            return arg_err(format!("length scale must be positive, got {length_scale}"));
        }
        Ok(Self { family, length_scale })
    }

    pub fn laplacian(length_scale: f64) -> Result<Self> {
        Self::new(KernelFamily::Laplacian, length_scale)
    }

    pub fn gaussian(length_scale: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, length_scale)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    /// Kernel value at distance `r >= 0`.
    pub fn eval(&self, r: f64) -> f64 {
        let x = r / self.length_scale;
        match self.family {
            KernelFamily::Laplacian => (-x).exp(),
            KernelFamily::Gaussian => (-x * x).exp(),
        }
    }
}

/// The kernel evaluated on every pair of grid points. No PSD validation.
pub fn kernel_matrix(kernel: &KernelSpec, geometry: &GridGeometry) -> DMatrix<f64> {
    let d = geometry.d;
    let mut m = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        for i in j..d {
            let v = kernel.eval(geometry.distance_unchecked(i, j));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelLabel {
    SingleScaleLaplacian,
    SingleScaleGaussian,
    Multiscale,
    Nonstationary,
    PressureWind,
    Custom,
}

impl ModelLabel {
    pub fn name(&self) -> &'static str {
        match self {
            ModelLabel::SingleScaleLaplacian => "laplacian",
            ModelLabel::SingleScaleGaussian => "gaussian",
            ModelLabel::Multiscale => "multiscale",
            ModelLabel::Nonstationary => "nonstationary",
            ModelLabel::PressureWind => "pressure-wind",
            ModelLabel::Custom => "custom",
        }
    }
}

impl fmt::Display for ModelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Construction metadata kept alongside a model matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    SingleScale { kernel: KernelSpec },
    Multiscale { family: KernelFamily, l1: f64, l2: f64 },
    Nonstationary { l_start: f64, l_end: f64 },
    PressureWind { length_scale: f64 },
    /// Two-by-two block replication of a single-scale kernel; used as the
    /// pressure-wind hybrid prior.
    BlockReplicated { kernel: KernelSpec },
    Custom,
}

/// A labeled, validated covariance matrix on a grid.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    label: ModelLabel,
    matrix: DMatrix<f64>,
    geometry: GridGeometry,
    params: ModelParams,
    jitter: f64,
}

impl CovarianceModel {
    /// Validate `matrix` and wrap it. The lower triangle is mirrored onto the
    /// upper so the stored matrix is exactly symmetric. If the PSD check fails,
    /// `JITTER_REL * trace / d` is added to the diagonal once and the check is
    /// repeated; a second failure is a [`Error::ModelValidity`].
    pub fn new(
        label: ModelLabel,
        mut matrix: DMatrix<f64>,
        geometry: GridGeometry,
        params: ModelParams,
    ) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::ModelValidity(format!(
                "matrix must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModelValidity("matrix has non-finite entries".into()));
        }
        linalg::mirror_lower_to_upper(&mut matrix);
        let d = matrix.nrows();
        if let Some(i) = (0..d).find(|&i| !(matrix[(i, i)] > 0.0)) {
            return Err(Error::ModelValidity(format!(
                "diagonal entry {i} is not strictly positive ({})",
                matrix[(i, i)]
            )));
        }
        let mut jitter = 0.0;
        let (min, max) = linalg::eigen_extremes(&matrix);
        if min < -PSD_REL_TOL * max {
            jitter = JITTER_REL * matrix.trace() / d as f64;
            for i in 0..d {
                matrix[(i, i)] += jitter;
            }
            let (min2, max2) = linalg::eigen_extremes(&matrix);
            if min2 < -PSD_REL_TOL * max2 {
                return Err(Error::ModelValidity(format!(
                    "{label} matrix is indefinite: smallest eigenvalue {min2:e}, largest {max2:e} \
                     (relative {:e} < -{PSD_REL_TOL:e}) even after jitter {jitter:e}",
                    min2 / max2
                )));
            }
        }
        Ok(Self { label, matrix, geometry, params, jitter })
    }

    /// An arbitrary user-supplied covariance matrix on a non-periodic unit grid.
    pub fn custom(matrix: DMatrix<f64>) -> Result<Self> {
        let geometry = GridGeometry::non_periodic(matrix.nrows().max(2))?;
        Self::new(ModelLabel::Custom, matrix, geometry, ModelParams::Custom)
    }

    pub fn label(&self) -> ModelLabel {
        self.label
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    /// Geometry of the underlying grid (per field, for pressure-wind).
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Diagonal jitter applied during validation (zero when none was needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Total dimension of the matrix.
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Multi-line description of how the model was built.
    pub fn metadata(&self) -> String {
        let mut out = format!(
            "label = {}\nrows = {}\ncols = {}\ngrid_points = {}\nperiodic = {}\nmesh = {}\n",
            self.label,
            self.matrix.nrows(),
            self.matrix.ncols(),
            self.geometry.d,
            self.geometry.periodic,
            self.geometry.mesh
        );
        match &self.params {
            ModelParams::SingleScale { kernel } | ModelParams::BlockReplicated { kernel } => {
                out += &format!("kernel = {}\nl = {}\n", kernel.family, kernel.length_scale);
            }
            ModelParams::Multiscale { family, l1, l2 } => {
                out += &format!("kernel = {family}\nl1 = {l1}\nl2 = {l2}\n");
            }
            ModelParams::Nonstationary { l_start, l_end } => {
                out += &format!("l_start = {l_start}\nl_end = {l_end}\n");
            }
            ModelParams::PressureWind { length_scale } => {
                out += &format!("kernel = gaussian\nl = {length_scale}\n");
            }
            ModelParams::Custom => {}
        }
        out += &format!("jitter = {:e}\n", self.jitter);
        out
    }
}

fn single_scale_label(family: KernelFamily) -> ModelLabel {
    match family {
        KernelFamily::Laplacian => ModelLabel::SingleScaleLaplacian,
        KernelFamily::Gaussian => ModelLabel::SingleScaleGaussian,
    }
}

/// `Sigma_ij = k(d_ij)` with unit diagonal.
pub fn build_single_scale(kernel: KernelSpec, geometry: GridGeometry) -> Result<CovarianceModel> {
    CovarianceModel::new(
        single_scale_label(kernel.family),
        kernel_matrix(&kernel, &geometry),
        geometry,
        ModelParams::SingleScale { kernel },
    )
}

/// Equal-weight average of two single-scale kernels of the same family.
pub fn build_multiscale(
    l1: f64,
    l2: f64,
    geometry: GridGeometry,
    family: KernelFamily,
) -> Result<CovarianceModel> {
    let a = kernel_matrix(&KernelSpec::new(family, l1)?, &geometry);
    let b = kernel_matrix(&KernelSpec::new(family, l2)?, &geometry);
    let m = (a + b) * 0.5;
    CovarianceModel::new(
        ModelLabel::Multiscale,
        m,
        geometry,
        ModelParams::Multiscale { family, l1, l2 },
    )
}

/// Local length-scale parameters, linear in the grid index and inclusive of both ends.
pub fn nonstationary_schedule(l_start: f64, l_end: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| l_start + (l_end - l_start) * i as f64 / (d - 1) as f64)
        .collect()
}

/// Nonstationary Gaussian-type kernel
/// `(4 l_i l_j)^(1/4) / (l_i + l_j)^(1/2) * exp(-2 r_ij^2 / (l_i + l_j))`
/// on a non-periodic grid.
pub fn build_nonstationary(
    l_start: f64,
    l_end: f64,
    geometry: GridGeometry,
) -> Result<CovarianceModel> {
    if !(l_start > 0.0) || !(l_end > 0.0) {
        return arg_err(format!(
            "nonstationary length scales must be positive, got {l_start} and {l_end}"
        ));
    }
    if geometry.periodic {
        return arg_err("nonstationary model requires a non-periodic grid");
    }
    let d = geometry.d;
    let ls = nonstationary_schedule(l_start, l_end, d);
    let mut m = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        for i in j..d {
            let sum = ls[i] + ls[j];
            let r = geometry.distance_unchecked(i, j);
            m[(i, j)] = (4.0 * ls[i] * ls[j]).powf(0.25) / sum.sqrt() * (-2.0 * r * r / sum).exp();
        }
    }
    CovarianceModel::new(
        ModelLabel::Nonstationary,
        m,
        geometry,
        ModelParams::Nonstationary { l_start, l_end },
    )
}

/// Centered second-order first-derivative stencil on a periodic grid.
pub fn build_derivative_operator(geometry: GridGeometry) -> Result<DMatrix<f64>> {
    if !geometry.periodic {
        return arg_err("derivative operator requires a periodic grid");
    }
    let d = geometry.d;
    let h = 1.0 / (2.0 * geometry.mesh);
    let mut m = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        m[(i, (i + 1) % d)] += h;
        m[(i, (i + d - 1) % d)] -= h;
    }
    Ok(m)
}

/// Pressure and wind (`w = du/dx`) stacked into one `2d x 2d` covariance:
/// `[[S, S D^T], [D S, D S D^T]]` with `S` the Gaussian single-scale model.
pub fn build_pressure_wind(length_scale: f64, geometry: GridGeometry) -> Result<CovarianceModel> {
    if !geometry.periodic {
        return arg_err("pressure-wind model requires a periodic grid");
    }
    let d = geometry.d;
    let sigma = kernel_matrix(&KernelSpec::gaussian(length_scale)?, &geometry);
    let dop = build_derivative_operator(geometry)?;
    let ds = &dop * &sigma;
    let mut dsd = &ds * dop.transpose();
    linalg::symmetrize(&mut dsd);
    let mut m = DMatrix::<f64>::zeros(2 * d, 2 * d);
    m.view_mut((0, 0), (d, d)).copy_from(&sigma);
    m.view_mut((d, 0), (d, d)).copy_from(&ds);
    m.view_mut((0, d), (d, d)).copy_from(&ds.transpose());
    m.view_mut((d, d), (d, d)).copy_from(&dsd);
    CovarianceModel::new(
        ModelLabel::PressureWind,
        m,
        geometry,
        ModelParams::PressureWind { length_scale },
    )
}

/// `[[K, K], [K, K]]` for a single-scale kernel `K` on `geometry`.
pub fn build_block_replicated(kernel: KernelSpec, geometry: GridGeometry) -> Result<CovarianceModel> {
    let k = kernel_matrix(&kernel, &geometry);
    CovarianceModel::new(
        ModelLabel::Custom,
        replicate_blocks(&k),
        geometry,
        ModelParams::BlockReplicated { kernel },
    )
}

pub(crate) fn replicate_blocks(k: &DMatrix<f64>) -> DMatrix<f64> {
    let d = k.nrows();
    DMatrix::from_fn(2 * d, 2 * d, |i, j| k[(i % d, j % d)])
}

/// Exact inverse of the non-periodic Laplacian-kernel covariance
/// `Sigma_ij = exp(-|i - j| h)`, `h = mesh / l`.
///
/// With `rho = exp(-h)` the inverse is tridiagonal with prefactor
/// `1 / (1 - rho^2)`: diagonal `1, 1 + rho^2, ..., 1 + rho^2, 1` and
/// off-diagonal `-rho`.
pub fn laplacian_grid_precision(length_scale: f64, geometry: GridGeometry) -> Result<DMatrix<f64>> {
    if !(length_scale > 0.0) {
        return arg_err(format!("length scale must be positive, got {length_scale}"));
    }
    if geometry.periodic {
        return arg_err("the tridiagonal precision exists only on a non-periodic grid");
    }
    let d = geometry.d;
    let h = geometry.mesh / length_scale;
    let rho = (-h).exp();
    // 1 - rho^2 without cancellation for small h
    let scale = 1.0 / -(-2.0 * h).exp_m1();
    let mut p = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        p[(i, i)] = if i == 0 || i == d - 1 { scale } else { scale * (1.0 + rho * rho) };
        if i + 1 < d {
            p[(i, i + 1)] = -scale * rho;
            p[(i + 1, i)] = -scale * rho;
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn per(d: usize) -> GridGeometry {
        GridGeometry::periodic(d).unwrap()
    }

    fn nonper(d: usize) -> GridGeometry {
        GridGeometry::non_periodic(d).unwrap()
    }

    #[test]
    fn geometry_invariants() {
        assert!(GridGeometry::new(1, true, 1.0).is_err());
        assert!(GridGeometry::new(10, true, 0.0).is_err());
        assert!(GridGeometry::new(10, true, -1.0).is_err());
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::laplacian(-2.0).is_err());
    }

    #[test]
    fn grid_distance_examples() {
        assert_eq!(grid_distance(7, 7, &per(200)).unwrap(), 0.0);
        assert_eq!(grid_distance(0, 199, &per(200)).unwrap(), 1.0);
        assert_eq!(grid_distance(10, 60, &nonper(200)).unwrap(), 50.0);
        assert_eq!(grid_distance(0, 100, &per(200)).unwrap(), 100.0);
        assert_eq!(grid_distance(0, 199, &nonper(200)).unwrap(), 199.0);
        let g = GridGeometry::new(10, true, 0.5).unwrap();
        assert_eq!(grid_distance(1, 9, &g).unwrap(), 1.0);
        assert!(grid_distance(0, 200, &per(200)).is_err());
    }

    #[test]
    fn grid_distance_symmetric() {
        let g = per(13);
        for i in 0..13 {
            for j in 0..13 {
                let a = grid_distance(i, j, &g).unwrap();
                assert_eq!(a, grid_distance(j, i, &g).unwrap());
                assert_eq!(a == 0.0, i == j);
            }
        }
    }

    #[test]
    fn single_scale_entries() {
        let lap = build_single_scale(KernelSpec::laplacian(5.0).unwrap(), per(200)).unwrap();
        assert!((0..200).all(|i| lap.matrix()[(i, i)] == 1.0));
        let g = KernelSpec::gaussian(5.0).unwrap();
        assert_relative_eq!(g.eval(5.0), 0.367_879_441_171_442_3, epsilon = 1e-15);
        assert_eq!(lap.label(), ModelLabel::SingleScaleLaplacian);
    }

    #[test]
    fn single_scale_matches_double_loop() {
        let model = build_single_scale(KernelSpec::laplacian(5.0).unwrap(), per(200)).unwrap();
        for i in 0..200usize {
            for j in 0..200usize {
                let k = (i as i64 - j as i64).unsigned_abs() as f64;
                let dist = k.min(200.0 - k);
                assert_eq!(model.matrix()[(i, j)], (-dist / 5.0).exp());
            }
        }
        assert_eq!(model.jitter(), 0.0);
    }

    #[test]
    fn single_scale_monotone_in_length_scale() {
        let g = per(40);
        for fam in [KernelFamily::Laplacian, KernelFamily::Gaussian] {
            let a = kernel_matrix(&KernelSpec::new(fam, 3.0).unwrap(), &g);
            let b = kernel_matrix(&KernelSpec::new(fam, 4.5).unwrap(), &g);
            assert!(a.iter().zip(b.iter()).all(|(x, y)| y >= x));
        }
    }

    #[test]
    fn multiscale_is_mean_of_factors() {
        let g = per(200);
        let ms = build_multiscale(2.0, 20.0, g, KernelFamily::Gaussian).unwrap();
        assert!((0..200).all(|i| ms.matrix()[(i, i)] == 1.0));
        for (i, j) in [(0, 1), (3, 17), (0, 100), (150, 20)] {
            let r = grid_distance(i, j, &g).unwrap();
            let expect = 0.5 * ((-(r / 2.0).powi(2)).exp() + (-(r / 20.0).powi(2)).exp());
            assert_relative_eq!(ms.matrix()[(i, j)], expect, epsilon = 1e-15);
        }
        let same = build_multiscale(5.0, 5.0, g, KernelFamily::Gaussian).unwrap();
        let single = build_single_scale(KernelSpec::gaussian(5.0).unwrap(), g).unwrap();
        assert_eq!(same.matrix(), single.matrix());
    }

    #[test]
    fn nonstationary_entries() {
        let g = nonper(200);
        let m = build_nonstationary(2.1, 22.0, g).unwrap();
        for i in 0..200 {
            assert_relative_eq!(m.matrix()[(i, i)], 1.0, epsilon = 1e-14);
        }
        // independent scalar evaluation of the formula
        let li = |i: usize| 2.1 + (22.0 - 2.1) * i as f64 / 199.0;
        for (i, j) in [(0usize, 1usize), (10, 14), (100, 103), (199, 190), (50, 50)] {
            let (a, b) = (li(i), li(j));
            let r = (i as f64 - j as f64).abs();
            let expect = (4.0 * a * b).sqrt().sqrt() / (a + b).sqrt() * (-2.0 * r * r / (a + b)).exp();
            assert_relative_eq!(m.matrix()[(i, j)], expect, max_relative = 1e-13);
        }
        let schedule = nonstationary_schedule(2.1, 22.0, 200);
        assert_eq!(schedule[0], 2.1);
        assert_eq!(schedule[199], 22.0);
    }

    #[test]
    fn nonstationary_constant_schedule_is_stationary() {
        let c = 3.0;
        let m = build_nonstationary(c, c, nonper(30)).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                let r = (i as f64 - j as f64).abs();
                assert_relative_eq!(m.matrix()[(i, j)], (-r * r / c).exp(), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn nonstationary_rejects_periodic() {
        assert!(matches!(build_nonstationary(2.1, 22.0, per(50)), Err(Error::Argument(_))));
    }

    #[test]
    fn derivative_operator_properties() {
        let g = per(64);
        let dop = build_derivative_operator(g).unwrap();
        for i in 0..64 {
            assert_eq!(dop.row(i).sum(), 0.0);
        }
        assert_eq!(dop.transpose(), -&dop);
        assert!(build_derivative_operator(nonper(10)).is_err());
    }

    #[test]
    fn derivative_operator_second_order_accuracy() {
        let tau = std::f64::consts::TAU;
        let err_at = |d: usize| {
            let dop = build_derivative_operator(per(d)).unwrap();
            let x = nalgebra::DVector::from_fn(d, |i, _| (tau * i as f64 / d as f64).sin());
            let y = &dop * x;
            (0..d)
                .map(|i| (y[i] - tau / d as f64 * (tau * i as f64 / d as f64).cos()).abs())
                .fold(0.0, f64::max)
                / (tau / d as f64)
        };
        // relative error of the stencil behaves like (2 pi / d)^2 / 6
        let (e1, e2) = (err_at(64), err_at(128));
        assert!(e1 < 2e-3, "{e1}");
        assert!((e1 / e2 - 4.0).abs() < 0.05, "ratio {}", e1 / e2);
    }

    #[test]
    fn pressure_wind_blocks() {
        let d = 50;
        let g = per(d);
        let pw = build_pressure_wind(5.0, g).unwrap();
        assert_eq!(pw.dim(), 2 * d);
        let sigma = build_single_scale(KernelSpec::gaussian(5.0).unwrap(), g).unwrap();
        assert_eq!(pw.matrix().view((0, 0), (d, d)), sigma.matrix().view((0, 0), (d, d)));
        let dop = build_derivative_operator(g).unwrap();
        // explicit triple product for the wind block
        let mut dsd = DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    for l in 0..d {
                        acc += dop[(i, k)] * sigma.matrix()[(k, l)] * dop[(j, l)];
                    }
                }
                dsd[(i, j)] = acc;
            }
        }
        let diff = (pw.matrix().view((d, d), (d, d)) - &dsd).abs().max();
        assert!(diff < 1e-14, "{diff}");
        // whole matrix equals B S B^T with B = [I; D]
        let mut b = DMatrix::<f64>::zeros(2 * d, d);
        b.view_mut((0, 0), (d, d)).copy_from(&DMatrix::identity(d, d));
        b.view_mut((d, 0), (d, d)).copy_from(&dop);
        let full = &b * sigma.matrix() * b.transpose();
        assert!((pw.matrix() - full).abs().max() < 1e-14);
        assert!(linalg::is_exactly_symmetric(pw.matrix()));
    }

    #[test]
    fn pressure_wind_full_grid_dimension() {
        let pw = build_pressure_wind(5.0, per(200)).unwrap();
        assert_eq!(pw.dim(), 400);
        assert!(linalg::is_psd_within(pw.matrix(), PSD_REL_TOL));
    }

    #[test]
    fn benchmark_models_are_valid_at_full_size() {
        let models = [
            build_single_scale(KernelSpec::laplacian(5.0).unwrap(), per(200)).unwrap(),
            build_single_scale(KernelSpec::gaussian(5.0).unwrap(), per(200)).unwrap(),
            build_multiscale(2.0, 20.0, per(200), KernelFamily::Gaussian).unwrap(),
            build_nonstationary(2.1, 22.0, nonper(200)).unwrap(),
        ];
        for m in &models {
            assert!(linalg::is_exactly_symmetric(m.matrix()));
            assert!(linalg::is_psd_within(m.matrix(), PSD_REL_TOL), "{}", m.label());
        }
    }

    #[test]
    fn indefinite_gaussian_on_small_circle_fails_loudly() {
        // l = 20 on a 50-point circle has eigenvalues of relative size -2e-2
        let err = build_single_scale(KernelSpec::gaussian(20.0).unwrap(), per(50)).unwrap_err();
        assert!(matches!(err, Error::ModelValidity(_)));
    }

    #[test]
    fn custom_model_validation() {
        assert!(CovarianceModel::custom(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        assert!(CovarianceModel::custom(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0])).is_err());
        let ok = CovarianceModel::custom(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert_eq!(ok.dim(), 2);
    }

    #[test]
    fn precision_two_by_two() {
        let p = laplacian_grid_precision(1.0, nonper(2)).unwrap();
        let e = (-1.0f64).exp();
        let c = 1.0 / (1.0 - (-2.0f64).exp());
        assert_relative_eq!(p[(0, 0)], c, max_relative = 1e-15);
        assert_relative_eq!(p[(0, 1)], -c * e, max_relative = 1e-15);
        assert_relative_eq!(p[(1, 1)], c, max_relative = 1e-15);
    }

    #[test]
    fn precision_is_tridiagonal_inverse() {
        let g = nonper(10);
        // h_eff = 0.5 with unit mesh means l = 2
        let p = laplacian_grid_precision(2.0, g).unwrap();
        for i in 0..10usize {
            for j in 0..10usize {
                if i.abs_diff(j) >= 2 {
                    assert_eq!(p[(i, j)], 0.0);
                }
            }
        }
        let sigma = kernel_matrix(&KernelSpec::laplacian(2.0).unwrap(), &g);
        // dense inversion oracle
        let dense = sigma.clone().try_inverse().unwrap();
        assert!((&p - &dense).abs().max() < 1e-10);
        let err = (&p * &sigma - DMatrix::identity(10, 10)).abs().max();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn precision_uses_effective_spacing() {
        let a = laplacian_grid_precision(2.0, GridGeometry::new(6, false, 1.0).unwrap()).unwrap();
        let b = laplacian_grid_precision(4.0, GridGeometry::new(6, false, 2.0).unwrap()).unwrap();
        assert!((&a - &b).abs().max() < 1e-15);
        assert!(laplacian_grid_precision(2.0, per(6)).is_err());
    }
}
