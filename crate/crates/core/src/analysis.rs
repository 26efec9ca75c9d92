//! Approximation quality of the factored Fisher blocks.
//!
//! For a dense layer with rank-one per-sample pairs, writing
//! `c = 2(N−1)/N` and maximizing over sample pairs `i < j`,
//!
//! ```text
//! ‖F − δΦ⊗Ψ‖_F ≤ c · max √(trΛᵢ trΛⱼ trΓᵢ trΓⱼ)
//! ‖F − A⊗G‖_F  ≤ c · max (trΛᵢ + trΛⱼ)(trΓᵢ + trΓⱼ) / 4
//! ```
//!
//! The first bound never exceeds the second (AM–GM).

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fisher::{exact_fim, kfac_factors, tkfac_factors_any, ExactFisherBlock, FisherFactors, KfacFactors};
use crate::kron::kron_residual_norm;
use crate::matrix::Matrix;
use crate::net::{BatchTrace, LabelMode};
use crate::optim::{Observer, StepContext};
use crate::{seeded_rng, RngStream};

/// Default limit on the dimension of an exact Fisher block.
pub const DEFAULT_FIM_CAP: usize = 2048;

/// A Kronecker-factored approximation `s · A ⊗ B`.
pub trait Factored {
    fn parts(&self) -> (f64, &Matrix, &Matrix);
}

impl Factored for FisherFactors {
    fn parts(&self) -> (f64, &Matrix, &Matrix) {
        (self.delta, &self.phi, &self.psi)
    }
}

impl Factored for KfacFactors {
    fn parts(&self) -> (f64, &Matrix, &Matrix) {
        (1.0, &self.a, &self.g)
    }
}

/// `‖F − s·A⊗B‖_F`.
pub fn approx_error(exact: &ExactFisherBlock, approx: &impl Factored) -> Result<f64> {
    let (s, a, b) = approx.parts();
    kron_residual_norm(&exact.matrix, s, a, b)
}

fn pair_max(traces: &[(f64, f64)], f: impl Fn((f64, f64), (f64, f64)) -> f64) -> f64 {
    let n = traces.len();
    if n < 2 {
        return 0.0;
    }
    let mut best = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            best = best.max(f(traces[i], traces[j]));
        }
    }
    2.0 * (n - 1) as f64 / n as f64 * best
}

/// Upper bound on the TKFAC error from per-sample `(tr Λ, tr Γ)`.
pub fn tkfac_bound(traces: &[(f64, f64)]) -> f64 {
    pair_max(traces, |(li, gi), (lj, gj)| (li * lj * gi * gj).sqrt())
}

/// Upper bound on the KFAC error from per-sample `(tr Λ, tr Γ)`.
pub fn kfac_bound(traces: &[(f64, f64)]) -> f64 {
    pair_max(traces, |(li, gi), (lj, gj)| (li + lj) * (gi + gj) / 4.0)
}

/// `(tr Λ, tr Γ)` of explicit per-sample pairs.
pub fn pair_traces(pairs: &[(Matrix, Matrix)]) -> Vec<(f64, f64)> {
    pairs.iter().map(|(l, g)| (l.trace(), g.trace())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerError {
    pub layer: usize,
    pub dim: usize,
    pub tkfac_error: f64,
    pub kfac_error: f64,
    /// Only dense layers have rank-one per-sample pairs.
    pub tkfac_bound: Option<f64>,
    pub kfac_bound: Option<f64>,
    pub trace_exact: f64,
    pub trace_tkfac: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorReport {
    pub iteration: usize,
    pub layers: Vec<LayerError>,
    pub sum_tkfac: f64,
    pub sum_kfac: f64,
}

/// Errors and bounds of every parametric layer of one Fisher trace.
pub fn error_report(trace: &BatchTrace, iteration: usize, cap: usize) -> Result<ErrorReport> {
    for (l, lt) in trace.layers.iter().enumerate() {
        if lt.block_dim() > cap {
            return Err(Error::CapExceeded { layer: l, dim: lt.block_dim(), cap });
        }
    }
    let mut layers = Vec::with_capacity(trace.layers.len());
    for l in 0..trace.layers.len() {
        let exact = exact_fim(trace, l)?;
        let (tkfac_error, trace_tkfac) = match tkfac_factors_any(trace, l) {
            Ok(f) => (approx_error(&exact, &f)?, f.trace()),
            // δ = 0: the approximation is the zero matrix
            Err(Error::DegenerateBlock { .. }) => (exact.matrix.frob_norm(), 0.0),
            Err(e) => return Err(e),
        };
        let kfac_error = approx_error(&exact, &kfac_factors(trace, l)?)?;
        let traces = exact.sample_traces.as_deref();
        layers.push(LayerError {
            layer: l,
            dim: exact.dim(),
            tkfac_error,
            kfac_error,
            tkfac_bound: traces.map(tkfac_bound),
            kfac_bound: traces.map(kfac_bound),
            trace_exact: exact.trace(),
            trace_tkfac,
        });
    }
    Ok(ErrorReport {
        iteration,
        sum_tkfac: layers.iter().map(|e| e.tkfac_error).sum(),
        sum_kfac: layers.iter().map(|e| e.kfac_error).sum(),
        layers,
    })
}

/// Training hook that records an [`ErrorReport`] every `every` iterations,
/// using the pre-update network and its own label stream.
pub struct ErrorCurve {
    pub every: usize,
    pub cap: usize,
    pub label_mode: LabelMode,
    pub reports: Vec<ErrorReport>,
    rng: ChaCha8Rng,
}

impl ErrorCurve {
    pub fn new(every: usize, cap: usize, label_mode: LabelMode, seed: u64) -> Self {
        Self { every: every.max(1), cap, label_mode, reports: Vec::new(), rng: seeded_rng(seed, RngStream::Analysis) }
    }

    /// Records one report for the given network and batch.
    pub fn record(&mut self, ctx: &StepContext<'_>) -> Result<&ErrorReport> {
        let cache = ctx.net.forward(ctx.inputs)?;
        let trace = ctx.net.backward(&cache, ctx.targets, self.label_mode, &mut self.rng)?;
        self.reports.push(error_report(&trace, ctx.iteration, self.cap)?);
        Ok(self.reports.last().unwrap())
    }
}

impl Observer for ErrorCurve {
    fn on_step(&mut self, ctx: &StepContext<'_>) -> Result<()> {
        if ctx.iteration.is_multiple_of(self.every) {
            self.record(ctx)?;
        }
        Ok(())
    }
}

/// Absolute correlations between spatial locations of a conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationCorrelation {
    /// `o x o`, unit diagonal except at degenerate locations.
    pub matrix: Matrix,
    /// Locations whose product statistic has zero variance over the batch.
    pub degenerate: Vec<bool>,
}

/// Correlation between the per-location products `vec(ŭ_p â_pᵀ)`.
///
/// Each location's product is centered over the batch; the entry for
/// locations `p, q` is `|Σ_i ⟨x_ip, x_iq⟩| / √(Σ_i ‖x_ip‖² Σ_i ‖x_iq‖²)`, the
/// Pearson correlation of the two flattened statistics. Zero-variance
/// locations get correlation 0 (including on the diagonal).
pub fn location_correlation(trace: &BatchTrace, l: usize) -> Result<LocationCorrelation> {
    let lt = trace.layers.get(l).ok_or_else(|| Error::DimensionMismatch(format!("no parametric layer {l}")))?;
    if !lt.is_conv {
        return Err(Error::LayerKind { layer: l, expected: "conv" });
    }
    let (n, o) = (lt.samples, lt.locations);
    let d = lt.block_dim();
    // column p stacks the centered products of all samples at location p
    let mut y = Matrix::zeros(n * d, o);
    for p in 0..o {
        let col = y.col_mut(p);
        let mut mean = vec![0.0; d];
        for i in 0..n {
            let c = lt.column(i, p);
            let (a, g) = (lt.inputs.col(c), lt.grads.col(c));
            let block = &mut col[i * d..(i + 1) * d];
            for (ci, &ac) in a.iter().enumerate() {
                for (r, &gr) in g.iter().enumerate() {
                    block[ci * g.len() + r] = gr * ac;
                }
            }
            mean.iter_mut().zip(block.iter()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for i in 0..n {
            col[i * d..(i + 1) * d].iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
        }
    }
    let gram = y.matmul_tn(&y)?;
    let scale = (0..o).map(|p| gram[(p, p)]).fold(0.0f64, f64::max);
    let degenerate: Vec<bool> = (0..o).map(|p| gram[(p, p)] <= 1e-24 * scale.max(f64::MIN_POSITIVE)).collect();
    let matrix = Matrix::from_fn(o, o, |p, q| {
        if degenerate[p] || degenerate[q] {
            0.0
        } else if p == q {
            1.0
        } else {
            (gram[(p, q)] / (gram[(p, p)] * gram[(q, q)]).sqrt()).abs().min(1.0)
        }
    });
    Ok(LocationCorrelation { matrix, degenerate })
}
