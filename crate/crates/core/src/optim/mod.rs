//! Training loop: trace-restricted natural gradient with damping, moving
//! averages and periodically refreshed factor inverses, plus KFAC, SGDM and
//! Adam for comparison.
//!
//! At iteration `t` the curvature factors are recomputed when
//! `t % t_fim == 0` and inverted when `t % t_inv == 0`. Each parametric
//! layer is then updated with
//!
//! ```text
//! ΔW = Ψ̂⁻¹ ∇W Φ̂⁻¹,   m ← τm − αΔW,   W ← W + m
//! ```

mod baseline;
mod damping;

pub use baseline::{baseline_step_adam, baseline_step_sgdm, AdamParams, AdamState};
pub use damping::{damp_new_conv, damp_normal, ema_update, fc_beta_expansion, DampedPair, DampingMode, DampingPolicy};

use std::str::FromStr;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fisher::{kfac_factors, tkfac_factors_any, FisherFactors, DEGENERATE_DELTA};
use crate::linalg::{min_eigenvalue, sym_inverse_escalating};
use crate::matrix::Matrix;
use crate::net::{BatchTrace, LabelMode, Network, Targets};
use crate::{seeded_rng, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Trace-restricted factors with normal damping.
    TkfacNor,
    /// Trace-restricted factors with the trace-scaled conv damping.
    TkfacNew,
    Kfac,
    Sgdm,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [Self::TkfacNor, Self::TkfacNew, Self::Kfac, Self::Sgdm, Self::Adam];

    pub fn name(self) -> &'static str {
        match self {
            Self::TkfacNor => "tkfac_nor",
            Self::TkfacNew => "tkfac_new",
            Self::Kfac => "kfac",
            Self::Sgdm => "sgdm",
            Self::Adam => "adam",
        }
    }

    pub fn uses_curvature(self) -> bool {
        matches!(self, Self::TkfacNor | Self::TkfacNew | Self::Kfac)
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::Config(format!("unknown optimizer {s:?}")))
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    /// Learning rate `α`.
    pub lr: f64,
    /// Multiply `α` by 0.1 every this many epochs; 0 keeps it constant.
    pub lr_decay_epochs: usize,
    /// Damping `λ` (normal mode and KFAC), or Adam's epsilon.
    pub lambda: f64,
    /// Clamp threshold `ν` of the trace-scaled damping.
    pub nu: f64,
    /// Moving-average weight `ε` on the old factors.
    pub epsilon: f64,
    /// Momentum `τ`.
    pub tau: f64,
    pub t_fim: usize,
    pub t_inv: usize,
    pub batch_size: usize,
    /// Epoch limit; 0 means "use `max_iterations` only".
    pub epochs: usize,
    /// Iteration limit; 0 means "use `epochs` only".
    pub max_iterations: usize,
    pub seed: u64,
    pub label_mode: LabelMode,
    /// Average the undamped statistics and damp afterwards.
    pub ema_before_damping: bool,
    /// Record minimum eigenvalues of every damped factor at each refresh.
    pub curvature_eigs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::TkfacNor,
            lr: 0.03,
            lr_decay_epochs: 0,
            lambda: 0.03,
            nu: 1.0,
            epsilon: 0.95,
            tau: 0.9,
            t_fim: 100,
            t_inv: 100,
            batch_size: 500,
            epochs: 200,
            max_iterations: 0,
            seed: 0,
            label_mode: LabelMode::ModelSample,
            ema_before_damping: false,
            curvature_eigs: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must be in [0, 1), got {}", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return bad(format!("tau must be in [0, 1), got {}", self.tau));
        }
        if self.t_fim == 0 || self.t_inv == 0 {
            return bad("t_fim and t_inv must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 && self.max_iterations == 0 {
            return bad("set epochs or max_iterations".into());
        }
        self.damping().validate()?;
        if self.optimizer == OptimizerKind::Adam && !(self.lambda > 0.0) {
            return bad("adam needs lambda > 0 as its epsilon".into());
        }
        Ok(())
    }

    pub fn damping(&self) -> DampingPolicy {
        DampingPolicy {
            mode: if self.optimizer == OptimizerKind::TkfacNew { DampingMode::NewConv } else { DampingMode::Normal },
            lambda: self.lambda,
            nu: self.nu,
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        match self.lr_decay_epochs {
            0 => self.lr,
            k => self.lr * 0.1f64.powi((epoch / k) as i32),
        }
    }
}

/// Damped, smoothed factors of one layer and their cached inverses.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCurvature {
    /// `Φ̂` (or KFAC's damped `A`).
    pub input: Matrix,
    /// `Ψ̂` (or KFAC's damped `G`).
    pub output: Matrix,
    pub input_inv: Option<Matrix>,
    pub output_inv: Option<Matrix>,
    pub refreshed_at: usize,
    pub inverted_at: Option<usize>,
    /// Smoothed undamped statistics, kept only when averaging before damping.
    raw: Option<FisherFactors>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DampedFactors {
    pub layers: Vec<LayerCurvature>,
}

impl DampedFactors {
    /// Identity factors with identity inverses computed at iteration `at`;
    /// `dims` holds `(input, output)` sizes per layer.
    pub fn identity(dims: &[(usize, usize)], at: usize) -> Self {
        Self {
            layers: dims
                .iter()
                .map(|&(i, o)| LayerCurvature {
                    input: Matrix::identity(i),
                    output: Matrix::identity(o),
                    input_inv: Some(Matrix::identity(i)),
                    output_inv: Some(Matrix::identity(o)),
                    refreshed_at: at,
                    inverted_at: Some(at),
                    raw: None,
                })
                .collect(),
        }
    }

    /// Inverts every factor; returns the jitter used per layer and side.
    pub fn invert(&mut self, t: usize) -> Result<Vec<(f64, f64)>> {
        self.layers
            .iter_mut()
            .map(|lc| {
                let (ii, ji) = sym_inverse_escalating(&lc.input)?;
                let (oi, jo) = sym_inverse_escalating(&lc.output)?;
                lc.input_inv = Some(ii);
                lc.output_inv = Some(oi);
                lc.inverted_at = Some(t);
                Ok((ji, jo))
            })
            .collect()
    }

    /// Fails unless every inverse was computed within the last `t_inv` steps.
    pub fn check_fresh(&self, t: usize, t_inv: usize) -> Result<()> {
        for (l, lc) in self.layers.iter().enumerate() {
            match lc.inverted_at {
                Some(s) if s <= t && t - s < t_inv && lc.input_inv.is_some() && lc.output_inv.is_some() => {}
                computed_at => return Err(Error::StaleInverse { layer: l, computed_at, now: t, interval: t_inv }),
            }
        }
        Ok(())
    }
}

/// `Ψ̂⁻¹ ∇W Φ̂⁻¹`, equal to `(Φ̂⁻¹ ⊗ Ψ̂⁻¹) vec(∇W)` in column-major vec.
pub fn precondition(grad: &Matrix, input_inv: &Matrix, output_inv: &Matrix) -> Result<Matrix> {
    output_inv.matmul(grad)?.matmul(input_inv)
}

/// One preconditioned momentum step on every parametric layer.
#[allow(clippy::too_many_arguments)]
pub fn natural_gradient_step(
    net: &mut Network,
    momentum: &mut [Matrix],
    damped: &DampedFactors,
    grads: &[Matrix],
    lr: f64,
    tau: f64,
    t: usize,
    t_inv: usize,
) -> Result<()> {
    if damped.layers.len() != net.num_parametric() || grads.len() != damped.layers.len() {
        return Err(Error::DimensionMismatch("layer count differs between net, factors and gradients".into()));
    }
    damped.check_fresh(t, t_inv)?;
    for (l, lc) in damped.layers.iter().enumerate() {
        let (ii, oi) = (lc.input_inv.as_ref().unwrap(), lc.output_inv.as_ref().unwrap());
        let step = precondition(&grads[l], ii, oi)?;
        momentum[l].scale_in_place(tau);
        momentum[l].axpy(-lr, &step)?;
        net.weights_mut(l).axpy(1.0, &momentum[l])?;
    }
    Ok(())
}

/// Per-layer curvature diagnostics at a factor refresh.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvatureRecord {
    pub iteration: usize,
    pub layer: usize,
    pub conv: bool,
    /// `δ` of this refresh (1 for KFAC).
    pub delta: f64,
    /// Coefficient used for damping: `δ`, `δ̃ = max(ν, δ)` or `βδ`.
    pub delta_used: f64,
    pub beta: f64,
    pub trace_in: f64,
    pub trace_out: f64,
    pub damping_in: f64,
    pub damping_out: f64,
    pub ratio_in: f64,
    pub ratio_out: f64,
    pub min_eig_in: Option<f64>,
    pub min_eig_out: Option<f64>,
}

/// Raw statistics of every layer from a Fisher trace.
fn layer_statistics(kind: OptimizerKind, trace: &BatchTrace) -> Result<Vec<FisherFactors>> {
    (0..trace.layers.len())
        .map(|l| match kind {
            OptimizerKind::Kfac => {
                let k = kfac_factors(trace, l)?;
                Ok(FisherFactors { delta: 1.0, phi: k.a, psi: k.g })
            }
            _ => match tkfac_factors_any(trace, l) {
                Ok(f) => Ok(f),
                Err(Error::DegenerateBlock { .. }) => {
                    let lt = &trace.layers[l];
                    Ok(FisherFactors {
                        delta: 0.0,
                        phi: Matrix::zeros(lt.in_dim(), lt.in_dim()),
                        psi: Matrix::zeros(lt.out_dim(), lt.out_dim()),
                    })
                }
                Err(e) => Err(e),
            },
        })
        .collect()
}

/// Damps every layer under `policy`; returns the pairs and `β`.
pub fn damp_layers(stats: &[FisherFactors], conv: &[bool], policy: &DampingPolicy) -> (Vec<DampedPair>, f64) {
    match policy.mode {
        DampingMode::Normal => (stats.iter().map(|f| damping::damp_normal_pair(f, policy.lambda)).collect(), 1.0),
        DampingMode::NewConv => {
            let (mut d, mut dt) = (Vec::new(), Vec::new());
            for (f, &c) in stats.iter().zip(conv) {
                if c {
                    d.push(f.delta);
                    dt.push(policy.nu.max(f.delta));
                }
            }
            let beta = fc_beta_expansion(&d, &dt);
            let pairs = stats
                .iter()
                .zip(conv)
                .map(|(f, &c)| {
                    let coef = if c {
                        policy.nu.max(f.delta)
                    } else if beta * f.delta >= DEGENERATE_DELTA {
                        beta * f.delta
                    } else {
                        policy.nu
                    };
                    damping::damp_scaled(f, coef)
                })
                .collect();
            (pairs, beta)
        }
    }
}

fn ema_factors(old: &FisherFactors, fresh: &FisherFactors, eps: f64) -> Result<FisherFactors> {
    Ok(FisherFactors {
        delta: eps * old.delta + (1.0 - eps) * fresh.delta,
        phi: ema_update(&old.phi, &fresh.phi, eps)?,
        psi: ema_update(&old.psi, &fresh.psi, eps)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub iteration: usize,
    /// Mean mini-batch loss under the data labels, before the update.
    pub loss: f64,
    pub refreshed: bool,
    pub inverted: bool,
}

/// Optimizer state plus the network it trains.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    net: Network,
    t: usize,
    momentum: Vec<Matrix>,
    adam: Vec<AdamState>,
    curvature: Option<DampedFactors>,
    label_rng: ChaCha8Rng,
    factor_refreshes: usize,
    inverse_refreshes: usize,
    records: Vec<CurvatureRecord>,
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let momentum = net.all_weights().iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        let adam = net.all_weights().iter().map(|w| AdamState::new(w.rows(), w.cols())).collect();
        let label_rng = seeded_rng(cfg.seed, RngStream::Labels);
        Ok(Self {
            cfg,
            net,
            t: 0,
            momentum,
            adam,
            curvature: None,
            label_rng,
            factor_refreshes: 0,
            inverse_refreshes: 0,
            records: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.t
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn into_net(self) -> Network {
        self.net
    }

    pub fn curvature(&self) -> Option<&DampedFactors> {
        self.curvature.as_ref()
    }

    pub fn factor_refreshes(&self) -> usize {
        self.factor_refreshes
    }

    pub fn inverse_refreshes(&self) -> usize {
        self.inverse_refreshes
    }

    /// Curvature records produced since the last call.
    pub fn take_records(&mut self) -> Vec<CurvatureRecord> {
        std::mem::take(&mut self.records)
    }

    /// One iteration on the given mini-batch with learning rate `lr`.
    pub fn step(&mut self, x: &Matrix, targets: &Targets, lr: f64) -> Result<StepInfo> {
        let t = self.t;
        let cache = self.net.forward(x)?;
        // data labels leave the rng untouched
        let grad_trace = self.net.backward(&cache, targets, LabelMode::Data, &mut self.label_rng)?;
        if !grad_trace.loss.is_finite() {
            return Err(Error::NonFiniteLoss(t));
        }
        let mut info = StepInfo { iteration: t, loss: grad_trace.loss, refreshed: false, inverted: false };
        let grads = &grad_trace.mean_grads;
        let (tau, kind) = (self.cfg.tau, self.cfg.optimizer);
        match kind {
            OptimizerKind::Sgdm => {
                for (l, g) in grads.iter().enumerate() {
                    baseline_step_sgdm(self.net.weights_mut(l), &mut self.momentum[l], g, lr, tau)?;
                }
            }
            OptimizerKind::Adam => {
                let p = AdamParams { eps: self.cfg.lambda, ..Default::default() };
                for (l, g) in grads.iter().enumerate() {
                    baseline_step_adam(self.net.weights_mut(l), &mut self.adam[l], g, lr, p)?;
                }
            }
            _ => {
                if t.is_multiple_of(self.cfg.t_fim) {
                    let fisher = match self.cfg.label_mode {
                        LabelMode::Data => None,
                        mode => Some(self.net.backward(&cache, targets, mode, &mut self.label_rng)?),
                    };
                    self.refresh(fisher.as_ref().unwrap_or(&grad_trace))?;
                    info.refreshed = true;
                }
                let cur = self.curvature.as_mut().expect("first iteration refreshes");
                if t.is_multiple_of(self.cfg.t_inv) {
                    cur.invert(t)?;
                    self.inverse_refreshes += 1;
                    info.inverted = true;
                }
                natural_gradient_step(&mut self.net, &mut self.momentum, cur, grads, lr, tau, t, self.cfg.t_inv)?;
            }
        }
        // ReLU maps NaN to 0, so blown-up weights can hide behind a finite loss
        if !self.net.all_weights().iter().all(Matrix::is_finite) {
            return Err(Error::NonFiniteLoss(t));
        }
        self.t += 1;
        Ok(info)
    }

    fn refresh(&mut self, trace: &BatchTrace) -> Result<()> {
        let t = self.t;
        let kind = self.cfg.optimizer;
        let eps = self.cfg.epsilon;
        let policy = self.cfg.damping();
        let conv: Vec<bool> = trace.layers.iter().map(|lt| lt.is_conv).collect();
        let mut stats = layer_statistics(kind, trace)?;
        let previous = self.curvature.take();

        if self.cfg.ema_before_damping {
            if let Some(prev) = &previous {
                for (s, lc) in stats.iter_mut().zip(&prev.layers) {
                    if let Some(raw) = &lc.raw {
                        *s = ema_factors(raw, s, eps)?;
                    }
                }
            }
        }
        let (pairs, beta) = damp_layers(&stats, &conv, &policy);

        let mut layers = Vec::with_capacity(pairs.len());
        for (l, (pair, f)) in pairs.iter().zip(&stats).enumerate() {
            let (ratio_in, ratio_out) = pair.damping_ratios();
            let (mut input, mut output) = (pair.input.clone(), pair.output.clone());
            let mut inverses = (None, None, None);
            if let Some(prev) = &previous {
                let old = &prev.layers[l];
                if !self.cfg.ema_before_damping {
                    input = ema_update(&old.input, &input, eps)?;
                    output = ema_update(&old.output, &output, eps)?;
                }
                inverses = (old.input_inv.clone(), old.output_inv.clone(), old.inverted_at);
            }
            let eigs = self.cfg.curvature_eigs;
            self.records.push(CurvatureRecord {
                iteration: t,
                layer: l,
                conv: conv[l],
                delta: f.delta,
                delta_used: pair.delta_used,
                beta,
                trace_in: input.trace(),
                trace_out: output.trace(),
                damping_in: pair.added_in,
                damping_out: pair.added_out,
                ratio_in,
                ratio_out,
                min_eig_in: if eigs { Some(min_eigenvalue(&input)?) } else { None },
                min_eig_out: if eigs { Some(min_eigenvalue(&output)?) } else { None },
            });
            layers.push(LayerCurvature {
                input,
                output,
                input_inv: inverses.0,
                output_inv: inverses.1,
                refreshed_at: t,
                inverted_at: inverses.2,
                raw: self.cfg.ema_before_damping.then(|| f.clone()),
            });
        }
        self.curvature = Some(DampedFactors { layers });
        self.factor_refreshes += 1;
        Ok(())
    }
}

/// Mean loss and error of `net` over a dataset, evaluated in chunks.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<(f64, f64)> {
    const CHUNK: usize = 1000;
    let n = data.len();
    let (mut loss, mut err) = (0.0, 0.0);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let part = data.select(&idx);
        let logits = net.predict(&part.inputs)?;
        let w = idx.len() as f64;
        loss += net.loss_kind().value(&logits, &part.targets)? * w;
        err += net.loss_kind().error(&logits, &part.targets)? * w;
        start += CHUNK;
    }
    let n = n.max(1) as f64;
    Ok((loss / n, err / n))
}

/// End-of-epoch metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    /// Mean mini-batch loss over the epoch (`None` before training).
    pub batch_loss: Option<f64>,
    pub train_loss: f64,
    pub train_error: f64,
    pub test_loss: Option<f64>,
    pub test_error: Option<f64>,
}

/// Cumulative time spent inside optimizer steps.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub step_seconds: f64,
}

/// Pre-update view of one iteration.
pub struct StepContext<'a> {
    pub iteration: usize,
    pub epoch: usize,
    pub net: &'a Network,
    pub inputs: &'a Matrix,
    pub targets: &'a Targets,
}

/// Hooks called by [`run_training`].
pub trait Observer {
    fn on_step(&mut self, _ctx: &StepContext<'_>) -> Result<()> {
        Ok(())
    }
    fn on_refresh(&mut self, _records: &[CurvatureRecord]) {}
    fn on_epoch(&mut self, _record: &MetricsRecord) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network,
    pub metrics: Vec<MetricsRecord>,
    pub curvature: Vec<CurvatureRecord>,
    pub timing: Vec<TimingRecord>,
    pub iterations: usize,
    pub factor_refreshes: usize,
    pub inverse_refreshes: usize,
}

/// Runs the full loop: seeded shuffling into mini-batches (a trailing
/// partial batch is dropped), one [`Trainer::step`] per batch, and a
/// metrics row after every epoch plus one for the initial network.
pub fn run_training(
    net: Network,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    observer: &mut dyn Observer,
) -> Result<TrainOutcome> {
    use rand::seq::SliceRandom;

    let mut trainer = Trainer::new(net, cfg.clone())?;
    let mut batch_rng = seeded_rng(cfg.seed, RngStream::Batches);
    let b = cfg.batch_size.min(train.len()).max(1);
    let per_epoch = train.len() / b;
    if per_epoch == 0 {
        return Err(Error::Config("training set is empty".into()));
    }

    let mut metrics = Vec::new();
    let mut curvature = Vec::new();
    let mut timing = Vec::new();
    let mut step_seconds = 0.0;

    let eval = |net: &Network, epoch: usize, it: usize, lr: f64, batch_loss: Option<f64>| -> Result<MetricsRecord> {
        let (train_loss, train_error) = evaluate(net, train)?;
        let (test_loss, test_error) = match test {
            Some(d) => {
                let (l, e) = evaluate(net, d)?;
                (Some(l), Some(e))
            }
            None => (None, None),
        };
        Ok(MetricsRecord { epoch, iteration: it, lr, batch_loss, train_loss, train_error, test_loss, test_error })
    };

    let first = eval(trainer.net(), 0, 0, cfg.lr_at_epoch(0), None)?;
    observer.on_epoch(&first);
    metrics.push(first);

    let done = |t: usize| cfg.max_iterations > 0 && t >= cfg.max_iterations;
    let mut epoch = 0;
    while (cfg.epochs == 0 || epoch < cfg.epochs) && !done(trainer.iteration()) {
        let lr = cfg.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut batch_rng);
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks_exact(b) {
            if done(trainer.iteration()) {
                break;
            }
            let batch = train.select(chunk);
            observer.on_step(&StepContext {
                iteration: trainer.iteration(),
                epoch,
                net: trainer.net(),
                inputs: &batch.inputs,
                targets: &batch.targets,
            })?;
            let start = Instant::now();
            let info = trainer.step(&batch.inputs, &batch.targets, lr)?;
            step_seconds += start.elapsed().as_secs_f64();
            loss_sum += info.loss;
            steps += 1;
            if info.refreshed {
                let recs = trainer.take_records();
                observer.on_refresh(&recs);
                curvature.extend(recs);
            }
        }
        epoch += 1;
        let rec = eval(trainer.net(), epoch, trainer.iteration(), lr, (steps > 0).then(|| loss_sum / steps as f64))?;
        if !rec.train_loss.is_finite() {
            return Err(Error::NonFiniteLoss(trainer.iteration()));
        }
        observer.on_epoch(&rec);
        metrics.push(rec);
        timing.push(TimingRecord { epoch, iteration: trainer.iteration(), step_seconds });
    }

    let iterations = trainer.iteration();
    let (factor_refreshes, inverse_refreshes) = (trainer.factor_refreshes(), trainer.inverse_refreshes());
    Ok(TrainOutcome {
        net: trainer.into_net(),
        metrics,
        curvature,
        timing,
        iterations,
        factor_refreshes,
        inverse_refreshes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kron::{kron, vec};

    #[test]
    fn staleness_is_enforced() {
        let d = DampedFactors::identity(&[(2, 2)], 0);
        assert!(d.check_fresh(0, 10).is_ok());
        assert!(d.check_fresh(9, 10).is_ok());
        assert!(matches!(d.check_fresh(10, 10), Err(Error::StaleInverse { layer: 0, .. })));
        let mut never = d.clone();
        never.layers[0].inverted_at = None;
        assert!(matches!(never.check_fresh(0, 10), Err(Error::StaleInverse { computed_at: None, .. })));
    }

    #[test]
    fn matrix_form_matches_kronecker_form() {
        let g = Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let pi = Matrix::from_rows(&[&[2.0, 0.5], &[0.5, 1.0]]);
        let po = Matrix::from_rows(&[&[1.5, -0.2], &[-0.2, 0.7]]);
        let m = precondition(&g, &pi, &po).unwrap();
        let k = kron(&pi, &po).mul_vec(&vec(&g)).unwrap();
        for (a, b) in vec(&m).iter().zip(&k) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn optimizer_names_round_trip() {
        for k in OptimizerKind::ALL {
            assert_eq!(k.name().parse::<OptimizerKind>().unwrap(), k);
        }
        assert!("sgd".parse::<OptimizerKind>().is_err());
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig { lr: 1.0, lr_decay_epochs: 40, ..Default::default() };
        assert_eq!(cfg.lr_at_epoch(39), 1.0);
        assert!((cfg.lr_at_epoch(40) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_at_epoch(80) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epsilon: 1.0, ..Default::default() },
            TrainConfig { t_fim: 0, ..Default::default() },
            TrainConfig { epochs: 0, max_iterations: 0, ..Default::default() },
            TrainConfig { lambda: -1.0, ..Default::default() },
            TrainConfig { optimizer: OptimizerKind::TkfacNew, nu: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
