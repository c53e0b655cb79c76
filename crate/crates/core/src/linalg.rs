//! Small dense linear-algebra helpers shared by the estimator modules.

use nalgebra::{DMatrix, SymmetricEigen};

/// Lower Cholesky factor of a symmetric matrix, reading only the lower triangle.
///
/// Returns the offending pivot index and value when a pivot is not strictly
/// positive (or not finite).
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>, (usize, f64)> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err((j, diag));
        }
        let pivot = diag.sqrt();
        l[(j, j)] = pivot;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / pivot;
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive definite matrix from its lower Cholesky factor.
/// The result is exactly symmetric.
pub fn inverse_from_cholesky(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut linv = DMatrix::<f64>::identity(n, n);
    // forward substitution column by column: L * Linv = I
    for c in 0..n {
        for i in c..n {
            let mut v = if i == c { 1.0 } else { 0.0 };
            for k in c..i {
                v -= l[(i, k)] * linv[(k, c)];
            }
            linv[(i, c)] = v / l[(i, i)];
        }
    }
    let mut inv = linv.transpose() * &linv;
    mirror_lower_to_upper(&mut inv);
    inv
}

/// `log |A|` from a lower Cholesky factor.
pub fn log_det_from_cholesky(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Copy the lower triangle into the upper triangle.
pub fn mirror_lower_to_upper(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            a[(j, i)] = a[(i, j)];
        }
    }
}

/// Replace `a` by `(a + a^T) / 2`, which is exactly symmetric.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn is_exactly_symmetric(a: &DMatrix<f64>) -> bool {
    a.is_square() && (0..a.nrows()).all(|j| (j + 1..a.nrows()).all(|i| a[(i, j)] == a[(j, i)]))
}

pub fn frobenius_norm(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Entrywise (Schur/Hadamard) product.
pub fn hadamard(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.component_mul(b)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_extremes(a: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(a.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// True when the smallest eigenvalue is at least `-rel_tol * max(|largest|, tiny)`.
pub fn is_psd_within(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    let (min, max) = eigen_extremes(a);
    min >= -rel_tol * max.abs().max(f64::MIN_POSITIVE)
}
