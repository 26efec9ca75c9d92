//! Symmetric inverse and spectrum helpers, backed by `nalgebra`.

use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

/// Relative asymmetry tolerated by [`sym_inverse`].
const SYMMETRY_TOL: f64 = 1e-8;

fn to_na(a: &Matrix) -> DMatrix<f64> {
    DMatrix::from_column_slice(a.rows(), a.cols(), a.as_slice())
}

fn from_na(a: &DMatrix<f64>) -> Matrix {
    Matrix::from_col_major(a.nrows(), a.ncols(), a.as_slice().to_vec()).expect("nalgebra buffer matches its shape")
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return shape_err(format!("expected a square matrix, got {}x{}", a.rows(), a.cols()));
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL * a.max_abs().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Inverse of a symmetric positive definite matrix through a Cholesky
/// factorization of `a + jitter·I`.
pub fn sym_inverse(a: &Matrix, jitter: f64) -> Result<Matrix> {
    check_symmetric(a)?;
    let mut m = to_na(a);
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    let chol = m.cholesky().ok_or(Error::Singular { jitter })?;
    let mut inv = from_na(&chol.inverse());
    inv.symmetrize();
    if !inv.is_finite() {
        return Err(Error::Singular { jitter });
    }
    Ok(inv)
}

/// [`sym_inverse`] with jitter escalation: starts at zero, then tries
/// `1e-12·d̄`, growing ×10 per attempt up to `1e-6·d̄`, where `d̄` is the mean
/// diagonal. Returns the inverse and the jitter that succeeded.
pub fn sym_inverse_escalating(a: &Matrix) -> Result<(Matrix, f64)> {
    check_symmetric(a)?;
    let n = a.rows().max(1);
    let mean_diag = (a.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    match sym_inverse(a, 0.0) {
        Ok(inv) => return Ok((inv, 0.0)),
        Err(Error::Singular { .. }) => {}
        Err(e) => return Err(e),
    }
    let ceiling = 1e-6 * mean_diag;
    let mut jitter = 1e-12 * mean_diag;
    while jitter <= ceiling * (1.0 + 1e-9) {
        if let Ok(inv) = sym_inverse(a, jitter) {
            return Ok((inv, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Singular { jitter: ceiling })
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    check_symmetric(a)?;
    let mut ev: Vec<f64> = to_na(a).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

pub fn min_eigenvalue(a: &Matrix) -> Result<f64> {
    Ok(sym_eigenvalues(a)?.first().copied().unwrap_or(f64::INFINITY))
}

/// Cholesky succeeds without jitter.
pub fn is_positive_definite(a: &Matrix) -> bool {
    a.is_square() && a.asymmetry() <= SYMMETRY_TOL * a.max_abs().max(1.0) && to_na(a).cholesky().is_some()
}
