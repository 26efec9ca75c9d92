//! Per-layer Fisher blocks: the exact block, the trace-restricted
//! factorization `δ·Φ⊗Ψ` and the KFAC baseline `A⊗G`.
//!
//! Expectations are batch means. For a dense layer with per-sample input
//! `a` and pre-activation derivative `g`, write `Λ = a aᵀ` and `Γ = g gᵀ`:
//!
//! ```text
//! F   = E[Λ ⊗ Γ]
//! δ   = E[tr(Λ) tr(Γ)]
//! Φ   = E[tr(Γ) Λ] / δ        (tr Φ = 1)
//! Ψ   = E[tr(Λ) Γ] / δ        (tr Ψ = 1)
//! ```
//!
//! so `tr(δ Φ⊗Ψ) = tr(F)`. Conv layers use the same construction per
//! spatial location and sum over locations.

use crate::error::{Error, Result};
use crate::kron::kron;
use crate::matrix::Matrix;
use crate::net::{BatchTrace, LayerTrace};

/// `δ` below this is treated as zero.
pub const DEGENERATE_DELTA: f64 = 1e-30;

#[derive(Clone, Debug, PartialEq)]
pub struct ExactFisherBlock {
    pub layer: usize,
    /// `(in_dim·out_dim)` square, ordered as `vec(DW)` (column-major).
    pub matrix: Matrix,
    pub samples: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// `(tr Λ⁽ⁱ⁾, tr Γ⁽ⁱ⁾)` per sample; only dense layers have rank-one pairs.
    pub sample_traces: Option<Vec<(f64, f64)>>,
}

impl ExactFisherBlock {
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }
}

/// `δ · Φ ⊗ Ψ` with unit-trace `Φ` (input side) and `Ψ` (output side).
#[derive(Clone, Debug, PartialEq)]
pub struct FisherFactors {
    pub delta: f64,
    pub phi: Matrix,
    pub psi: Matrix,
}

impl FisherFactors {
    pub fn materialize(&self) -> Matrix {
        kron(&self.phi, &self.psi).scale(self.delta)
    }

    /// `tr(δ Φ⊗Ψ) = δ tr(Φ) tr(Ψ)`.
    pub fn trace(&self) -> f64 {
        self.delta * self.phi.trace() * self.psi.trace()
    }
}

/// KFAC baseline factors, `F ≈ A ⊗ G`.
#[derive(Clone, Debug, PartialEq)]
pub struct KfacFactors {
    pub a: Matrix,
    pub g: Matrix,
}

impl KfacFactors {
    pub fn materialize(&self) -> Matrix {
        kron(&self.a, &self.g)
    }
}

fn layer(trace: &BatchTrace, l: usize) -> Result<&LayerTrace> {
    trace.layers.get(l).ok_or_else(|| Error::DimensionMismatch(format!("no parametric layer {l}")))
}

fn dense_layer(trace: &BatchTrace, l: usize) -> Result<&LayerTrace> {
    let lt = layer(trace, l)?;
    if lt.is_conv {
        return Err(Error::LayerKind { layer: l, expected: "dense" });
    }
    Ok(lt)
}

fn conv_layer(trace: &BatchTrace, l: usize) -> Result<&LayerTrace> {
    let lt = layer(trace, l)?;
    if !lt.is_conv {
        return Err(Error::LayerKind { layer: l, expected: "conv" });
    }
    Ok(lt)
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// `(1/N) V Vᵀ`, symmetrized.
fn gram(v: &Matrix, n: usize) -> Result<Matrix> {
    let mut f = v.matmul_nt(v)?;
    f.scale_in_place(1.0 / n as f64);
    f.symmetrize();
    Ok(f)
}

/// Writes `a ⊗ g` (= `vec(g aᵀ)`) into `out`.
fn write_kron(a: &[f64], g: &[f64], out: &mut [f64]) {
    let m = g.len();
    for (c, &ac) in a.iter().enumerate() {
        for (o, &gr) in out[c * m..(c + 1) * m].iter_mut().zip(g) {
            *o = gr * ac;
        }
    }
}

/// `vec(DW⁽ⁱ⁾)` for every sample, one column each.
fn weight_grad_columns(lt: &LayerTrace) -> Matrix {
    let mut v = Matrix::zeros(lt.block_dim(), lt.samples);
    for i in 0..lt.samples {
        if lt.locations == 1 {
            let c = lt.column(i, 0);
            write_kron(lt.inputs.col(c), lt.grads.col(c), v.col_mut(i));
        } else {
            v.col_mut(i).copy_from_slice(lt.sample_weight_grad(i).as_slice());
        }
    }
    v
}

fn exact_block(lt: &LayerTrace, l: usize) -> Result<ExactFisherBlock> {
    let v = weight_grad_columns(lt);
    let sample_traces =
        (!lt.is_conv).then(|| (0..lt.samples).map(|i| (sq_norm(lt.inputs.col(i)), sq_norm(lt.grads.col(i)))).collect());
    Ok(ExactFisherBlock {
        layer: l,
        matrix: gram(&v, lt.samples.max(1))?,
        samples: lt.samples,
        in_dim: lt.in_dim(),
        out_dim: lt.out_dim(),
        sample_traces,
    })
}

/// `F_l = (1/N) Σ_i Λ⁽ⁱ⁾ ⊗ Γ⁽ⁱ⁾` for a dense layer.
pub fn exact_fim_dense(trace: &BatchTrace, l: usize) -> Result<ExactFisherBlock> {
    exact_block(dense_layer(trace, l)?, l)
}

/// `F_l = (1/N) Σ_i vec(DW⁽ⁱ⁾) vec(DW⁽ⁱ⁾)ᵀ` with `DW⁽ⁱ⁾ = DS⁽ⁱ⁾ Â⁽ⁱ⁾ᵀ`; no
/// assumption about spatial correlations.
pub fn exact_fim_conv(trace: &BatchTrace, l: usize) -> Result<ExactFisherBlock> {
    exact_block(conv_layer(trace, l)?, l)
}

/// Exact block of any parametric layer.
pub fn exact_fim(trace: &BatchTrace, l: usize) -> Result<ExactFisherBlock> {
    exact_block(layer(trace, l)?, l)
}

/// Per-sample `(Λ⁽ⁱ⁾, Γ⁽ⁱ⁾)` of a dense layer.
pub fn per_sample_factors(trace: &BatchTrace, l: usize) -> Result<Vec<(Matrix, Matrix)>> {
    let lt = dense_layer(trace, l)?;
    Ok((0..lt.samples)
        .map(|i| {
            let (a, g) = (lt.inputs.col(i), lt.grads.col(i));
            (Matrix::outer(a, a), Matrix::outer(g, g))
        })
        .collect())
}

/// `Σ_p E[â_p â_pᵀ ⊗ ŭ_p ŭ_pᵀ]`, the conv block with every cross-location
/// term dropped. Equals [`exact_fim_conv`] when those terms vanish.
pub fn sum_kron_fim_conv(trace: &BatchTrace, l: usize) -> Result<Matrix> {
    let lt = conv_layer(trace, l)?;
    if lt.locations == 1 {
        return Ok(exact_block(lt, l)?.matrix);
    }
    let cols = lt.samples * lt.locations;
    let mut v = Matrix::zeros(lt.block_dim(), cols);
    for c in 0..cols {
        write_kron(lt.inputs.col(c), lt.grads.col(c), v.col_mut(c));
    }
    gram(&v, lt.samples.max(1))
}

/// Trace-restricted factors from per-location statistics. A dense layer is
/// the single-location case.
fn tkfac_factors(lt: &LayerTrace, l: usize) -> Result<FisherFactors> {
    let n = lt.samples as f64;
    let o = lt.locations;
    let tl: Vec<f64> = (0..lt.inputs.cols()).map(|c| sq_norm(lt.inputs.col(c))).collect();
    let tg: Vec<f64> = (0..lt.grads.cols()).map(|c| sq_norm(lt.grads.col(c))).collect();

    // δ_p = E[tr(Λ_p) tr(Γ_p)]
    let mut delta_p = vec![0.0; o];
    for i in 0..lt.samples {
        for (p, d) in delta_p.iter_mut().enumerate() {
            let c = lt.column(i, p);
            *d += tl[c] * tg[c];
        }
    }
    delta_p.iter_mut().for_each(|d| *d /= n);
    let delta: f64 = delta_p.iter().sum();
    if !(delta >= DEGENERATE_DELTA) {
        return Err(Error::DegenerateBlock { layer: l, delta });
    }

    // Φ = Σ_p E[tr(Γ_p) Λ_p] / δ_p, Ψ = Σ_p E[tr(Λ_p) Γ_p] / δ_p, as
    // weighted Gram matrices. Locations with δ_p = 0 contribute nothing.
    let mut a_scaled = lt.inputs.clone();
    let mut g_scaled = lt.grads.clone();
    for i in 0..lt.samples {
        for (p, &dp) in delta_p.iter().enumerate() {
            let c = lt.column(i, p);
            let (wa, wg) = if dp >= DEGENERATE_DELTA { (tg[c] / (n * dp), tl[c] / (n * dp)) } else { (0.0, 0.0) };
            a_scaled.col_mut(c).iter_mut().for_each(|x| *x *= wa);
            g_scaled.col_mut(c).iter_mut().for_each(|x| *x *= wg);
        }
    }
    let mut phi = a_scaled.matmul_nt(&lt.inputs)?;
    let mut psi = g_scaled.matmul_nt(&lt.grads)?;
    phi.symmetrize();
    psi.symmetrize();
    // unit trace; a no-op up to rounding for a single location
    let (tp, ts) = (phi.trace(), psi.trace());
    phi.scale_in_place(1.0 / tp);
    psi.scale_in_place(1.0 / ts);
    Ok(FisherFactors { delta, phi, psi })
}

pub fn tkfac_factors_dense(trace: &BatchTrace, l: usize) -> Result<FisherFactors> {
    tkfac_factors(dense_layer(trace, l)?, l)
}

/// Conv factors from the sum-of-Kroneckers form: `δ = Σ_p δ_p` and the
/// location sums of `Φ_p`, `Ψ_p` rescaled to unit trace, so that
/// `tr(δ Φ⊗Ψ) = tr(sum_kron_fim_conv)`.
pub fn tkfac_factors_conv(trace: &BatchTrace, l: usize) -> Result<FisherFactors> {
    tkfac_factors(conv_layer(trace, l)?, l)
}

/// TKFAC factors of any parametric layer.
pub fn tkfac_factors_any(trace: &BatchTrace, l: usize) -> Result<FisherFactors> {
    tkfac_factors(layer(trace, l)?, l)
}

/// KFAC baseline: `A = (1/N) Σ_i Σ_p â âᵀ` and `G = (1/(N·o)) Σ_i Σ_p ŭ ŭᵀ`
/// (for dense layers, `E[Λ]` and `E[Γ]`).
pub fn kfac_factors(trace: &BatchTrace, l: usize) -> Result<KfacFactors> {
    let lt = layer(trace, l)?;
    let n = lt.samples.max(1);
    let a = gram(&lt.inputs, n)?;
    let g = gram(&lt.grads, n * lt.locations)?;
    Ok(KfacFactors { a, g })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_trace(a: &[&[f64]], g: &[&[f64]]) -> BatchTrace {
        let n = a.len();
        let inputs = Matrix::from_fn(a[0].len(), n, |r, c| a[c][r]);
        let grads = Matrix::from_fn(g[0].len(), n, |r, c| g[c][r]);
        BatchTrace {
            layers: vec![LayerTrace { inputs, grads, locations: 1, samples: n, is_conv: false }],
            mean_grads: vec![],
            loss: 0.0,
        }
    }

    #[test]
    fn single_sample_hand_expansion() {
        let t = dense_trace(&[&[1.0, 0.0]], &[&[2.0, 0.0]]);
        let f = exact_fim_dense(&t, 0).unwrap();
        assert_eq!(f.matrix, Matrix::from_diag(&[4.0, 0.0, 0.0, 0.0]));
        let tk = tkfac_factors_dense(&t, 0).unwrap();
        assert_eq!(tk.delta, 4.0);
        assert_eq!(tk.phi, Matrix::from_diag(&[1.0, 0.0]));
        assert_eq!(tk.psi, Matrix::from_diag(&[1.0, 0.0]));
    }

    #[test]
    fn zero_gradients() {
        let t = dense_trace(&[&[1.0, 2.0], &[0.5, 0.0]], &[&[0.0], &[0.0]]);
        assert_eq!(exact_fim_dense(&t, 0).unwrap().matrix, Matrix::zeros(2, 2));
        assert!(matches!(tkfac_factors_dense(&t, 0), Err(Error::DegenerateBlock { .. })));
    }

    #[test]
    fn kfac_hand_average() {
        let t = dense_trace(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0], &[1.0]]);
        let k = kfac_factors(&t, 0).unwrap();
        assert_eq!(k.a, Matrix::from_diag(&[0.5, 0.5]));
        assert_eq!(k.g, Matrix::from_rows(&[&[1.0]]));
    }

    #[test]
    fn layer_kind_is_checked() {
        let t = dense_trace(&[&[1.0]], &[&[1.0]]);
        assert!(matches!(exact_fim_conv(&t, 0), Err(Error::LayerKind { .. })));
        assert!(matches!(sum_kron_fim_conv(&t, 0), Err(Error::LayerKind { .. })));
        assert!(exact_fim_dense(&t, 3).is_err());
    }
}
