//! First-order reference updates used by the comparison runs.

use crate::error::Result;
use crate::matrix::Matrix;

/// Momentum SGD in the same form as the natural-gradient update:
/// `m ← τm − αg`, `W ← W + m`.
pub fn baseline_step_sgdm(w: &mut Matrix, m: &mut Matrix, g: &Matrix, lr: f64, tau: f64) -> Result<()> {
    m.scale_in_place(tau);
    m.axpy(-lr, g)?;
    w.axpy(1.0, m)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates of one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub t: u32,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { m: Matrix::zeros(rows, cols), v: Matrix::zeros(rows, cols), t: 0 }
    }
}

/// Bias-corrected Adam:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `W ← W − α m̂ / (√v̂ + eps)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
pub fn baseline_step_adam(w: &mut Matrix, st: &mut AdamState, g: &Matrix, lr: f64, p: AdamParams) -> Result<()> {
    if w.shape() != g.shape() || st.m.shape() != g.shape() {
        return crate::error::shape_err("adam: shape mismatch");
    }
    st.t += 1;
    let c1 = 1.0 - p.beta1.powi(st.t as i32);
    let c2 = 1.0 - p.beta2.powi(st.t as i32);
    let (ms, vs, ws) = (st.m.as_mut_slice(), st.v.as_mut_slice(), w.as_mut_slice());
    for (k, &gk) in g.as_slice().iter().enumerate() {
        ms[k] = p.beta1 * ms[k] + (1.0 - p.beta1) * gk;
        vs[k] = p.beta2 * vs[k] + (1.0 - p.beta2) * gk * gk;
        ws[k] -= lr * (ms[k] / c1) / ((vs[k] / c2).sqrt() + p.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_never_moves() {
        let mut w = Matrix::from_rows(&[&[1.0, -2.0]]);
        let before = w.clone();
        let mut st = AdamState::new(1, 2);
        for _ in 0..50 {
            baseline_step_adam(&mut w, &mut st, &Matrix::zeros(1, 2), 0.1, AdamParams::default()).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn adam_first_step_closed_form() {
        for g in [0.3, -2.0, 1e-4] {
            let mut w = Matrix::zeros(1, 1);
            let mut st = AdamState::new(1, 1);
            let p = AdamParams { eps: 1e-3, ..Default::default() };
            baseline_step_adam(&mut w, &mut st, &Matrix::from_rows(&[&[g]]), 0.01, p).unwrap();
            let want = -0.01 * g / (g.abs() + 1e-3);
            assert!((w[(0, 0)] - want).abs() <= 1e-15 * want.abs().max(1e-300) + 1e-18);
        }
    }

    #[test]
    fn sgdm_without_momentum_is_sgd() {
        let mut w = Matrix::from_rows(&[&[1.0, 2.0]]);
        let mut m = Matrix::zeros(1, 2);
        let g = Matrix::from_rows(&[&[0.5, -1.0]]);
        baseline_step_sgdm(&mut w, &mut m, &g, 0.1, 0.0).unwrap();
        assert_eq!(w, Matrix::from_rows(&[&[0.95, 2.1]]));
        // a second step with τ=0 forgets the first
        baseline_step_sgdm(&mut w, &mut m, &g, 0.1, 0.0).unwrap();
        assert!((w[(0, 0)] - 0.9).abs() < 1e-15);
    }
}
