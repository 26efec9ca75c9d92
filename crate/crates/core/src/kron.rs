//! Kronecker-specific operators: `kron`, `vec`, the partial trace and the
//! commutation matrix.
//!
//! `vec` stacks columns, so for vectors `a`, `g` we have `vec(g aᵀ) = a ⊗ g`
//! and more generally `vec(A B C) = (Cᵀ ⊗ A) vec(B)`.

use crate::error::{shape_err, Result};
use crate::matrix::Matrix;

/// `A ⊗ B`: block `(i, j)` of the result is `a[i, j] · B`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, n) = a.shape();
    let (p, q) = b.shape();
    let mut out = Matrix::zeros(m * p, n * q);
    for j in 0..n {
        for s in 0..q {
            let col = out.col_mut(j * q + s);
            for i in 0..m {
                let aij = a[(i, j)];
                let bcol = b.col(s);
                let dst = &mut col[i * p..(i + 1) * p];
                for (d, &bv) in dst.iter_mut().zip(bcol) {
                    *d = aij * bv;
                }
            }
        }
    }
    out
}

/// Kronecker product of two vectors, `u ⊗ v`.
pub fn kron_vec(u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(u.len() * v.len());
    for &x in u {
        out.extend(v.iter().map(|&y| x * y));
    }
    out
}

/// Column-stacking vectorization.
pub fn vec(a: &Matrix) -> Vec<f64> {
    a.as_slice().to_vec()
}

/// Inverse of [`vec`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    Matrix::from_col_major(rows, cols, v.to_vec())
}

/// Partial trace over the trailing factor of size `q`: maps an `mq x nq`
/// matrix of `q x q` blocks to the `m x n` matrix of block traces.
/// `partial_trace(A ⊗ B, rows(B)) = tr(B) · A`.
pub fn partial_trace(a: &Matrix, q: usize) -> Result<Matrix> {
    if q == 0 || !a.rows().is_multiple_of(q) || !a.cols().is_multiple_of(q) {
        return shape_err(format!("partial_trace: block size {q} does not divide {}x{}", a.rows(), a.cols()));
    }
    let (m, n) = (a.rows() / q, a.cols() / q);
    Ok(Matrix::from_fn(m, n, |i, j| (0..q).map(|k| a[(i * q + k, j * q + k)]).sum()))
}

/// `‖F - scale · (A ⊗ B)‖_F`, evaluated entrywise without allocating the
/// Kronecker product.
pub fn kron_residual_norm(f: &Matrix, scale: f64, a: &Matrix, b: &Matrix) -> Result<f64> {
    let (m, n) = a.shape();
    let (p, q) = b.shape();
    if f.shape() != (m * p, n * q) {
        return shape_err(format!("kron_residual_norm: {}x{} vs ({m}x{n}) ⊗ ({p}x{q})", f.rows(), f.cols()));
    }
    let mut acc = 0.0;
    for j in 0..n {
        for s in 0..q {
            let fcol = f.col(j * q + s);
            let bcol = b.col(s);
            for i in 0..m {
                let aij = scale * a[(i, j)];
                for (fv, &bv) in fcol[i * p..(i + 1) * p].iter().zip(bcol) {
                    let d = fv - aij * bv;
                    acc += d * d;
                }
            }
        }
    }
    Ok(acc.sqrt())
}

/// The commutation matrix `K_{mn}`, the permutation with
/// `K_{mn} vec(A) = vec(Aᵀ)` for every `m x n` matrix `A`.
///
/// Stored as an index map; [`CommutationMatrix::densify`] materializes it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommutationMatrix {
    m: usize,
    n: usize,
    /// `out[k] = input[source[k]]`
    source: Vec<usize>,
}

impl CommutationMatrix {
    pub fn new(m: usize, n: usize) -> Self {
        let mut source = vec![0; m * n];
        for i in 0..m {
            for j in 0..n {
                // vec(Aᵀ)[j + i n] = A[i, j] = vec(A)[i + j m]
                source[j + i * n] = i + j * m;
            }
        }
        Self { m, n, source }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.m * self.n
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return shape_err(format!("commutation K_({},{}) applied to vector of length {}", self.m, self.n, v.len()));
        }
        Ok(self.source.iter().map(|&s| v[s]).collect())
    }

    /// `K · X`: permutes the rows of `x`.
    pub fn apply_rows(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.dim() {
            return shape_err("commutation: row count mismatch");
        }
        Ok(Matrix::from_fn(x.rows(), x.cols(), |r, c| x[(self.source[r], c)]))
    }

    /// `X · K`: permutes the columns of `x`.
    pub fn apply_cols(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim() {
            return shape_err("commutation: column count mismatch");
        }
        // (X K)[r, c] = Σ_k X[r, k] K[k, c]; K[k, c] = 1 iff source[k] == c.
        let mut inverse = vec![0; self.dim()];
        for (k, &s) in self.source.iter().enumerate() {
            inverse[s] = k;
        }
        Ok(Matrix::from_fn(x.rows(), x.cols(), |r, c| x[(r, inverse[c])]))
    }

    /// `K_{pm} (A ⊗ B) K_{nq}` for `A: m x n`, `B: p x q`, which equals `B ⊗ A`.
    pub fn conjugate_kron(x: &Matrix, a_shape: (usize, usize), b_shape: (usize, usize)) -> Result<Matrix> {
        let (m, n) = a_shape;
        let (p, q) = b_shape;
        if x.shape() != (m * p, n * q) {
            return shape_err("conjugate_kron: shape does not match factor shapes");
        }
        let left = CommutationMatrix::new(p, m);
        let right = CommutationMatrix::new(n, q);
        right.apply_cols(&left.apply_rows(x)?)
    }

    pub fn densify(&self) -> Matrix {
        let d = self.dim();
        let mut k = Matrix::zeros(d, d);
        for (r, &s) in self.source.iter().enumerate() {
            k[(r, s)] = 1.0;
        }
        k
    }
}
