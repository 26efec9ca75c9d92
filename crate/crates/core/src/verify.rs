//! Randomized self-checks of the algebraic invariants, run by `tkfac verify`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::analysis::{approx_error, kfac_bound, tkfac_bound};
use crate::error::Result;
use crate::fisher::{
    exact_fim_conv, exact_fim_dense, kfac_factors, per_sample_factors, sum_kron_fim_conv, tkfac_factors_conv,
    tkfac_factors_dense,
};
use crate::kron::{kron, partial_trace, vec, CommutationMatrix};
use crate::linalg::sym_inverse;
use crate::matrix::Matrix;
use crate::net::{Activation, BiasMode, ConvGeometry, LabelMode, LayerSpec, Loss, Network, Targets};
use crate::optim::{natural_gradient_step, precondition, DampedFactors};
use crate::{seeded_rng, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub instances: usize,
    /// Largest relative deviation seen (or violation count for bounds).
    pub worst: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let b = gauss(rng, n, n);
    let mut s = b.matmul_nt(&b).unwrap();
    s.add_diag(n as f64);
    s
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    a.frob_dist(b).unwrap() / b.frob_norm().max(1e-300)
}

fn dims(rng: &mut ChaCha8Rng, max: usize) -> usize {
    rng.random_range(1..=max)
}

fn random_mlp(rng: &mut ChaCha8Rng, loss: Loss, max_width: usize) -> Network {
    let depth = rng.random_range(1..=3);
    let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(2..=max_width)).collect();
    let mut net = Network::mlp(&widths, Activation::Sigmoid, loss, BiasMode::None).unwrap();
    net.init_weights(rng);
    net
}

fn targets_for(rng: &mut ChaCha8Rng, loss: Loss, outputs: usize, n: usize) -> Targets {
    match loss {
        Loss::SoftmaxCrossEntropy => Targets::Classes((0..n).map(|_| rng.random_range(0..outputs)).collect()),
        Loss::BinaryCrossEntropy => Targets::Dense(Matrix::from_fn(outputs, n, |_, _| rng.random::<f64>())),
    }
}

/// `‖A⊗B‖_F = ‖A‖_F‖B‖_F` and the other Kronecker identities on `n`
/// random instances with factor sides up to 4.
pub fn kron_identities(rng: &mut ChaCha8Rng, n: usize) -> Vec<Check> {
    let mut worst = [0.0f64; 8];
    for _ in 0..n {
        let (m, k, p, q) = (dims(rng, 4), dims(rng, 4), dims(rng, 4), dims(rng, 4));
        let (r, s) = (dims(rng, 3), dims(rng, 3));
        let a = gauss(rng, m, k);
        let b = gauss(rng, p, q);
        let c = gauss(rng, k, r);
        let d = gauss(rng, q, s);
        let ab = kron(&a, &b);
        let lhs = ab.matmul(&kron(&c, &d)).unwrap();
        worst[0] = worst[0].max(rel(&lhs, &kron(&a.matmul(&c).unwrap(), &b.matmul(&d).unwrap())));
        worst[1] = worst[1].max(rel(&ab.transpose(), &kron(&a.transpose(), &b.transpose())));
        let (sa, sb) = (spd(rng, m), spd(rng, p));
        let inv = sym_inverse(&kron(&sa, &sb), 0.0).unwrap();
        let want = kron(&sym_inverse(&sa, 0.0).unwrap(), &sym_inverse(&sb, 0.0).unwrap());
        worst[2] = worst[2].max(rel(&inv, &want));
        let t = kron(&sa, &sb).trace();
        worst[3] = worst[3].max((t - sa.trace() * sb.trace()).abs() / t.abs());
        let f = a.frob_norm() * b.frob_norm();
        worst[4] = worst[4].max((ab.frob_norm() - f).abs() / f);
        // vec(B X Aᵀ) = (A ⊗ B) vec(X)
        let x = gauss(rng, q, k);
        let lhs = vec(&b.matmul(&x).unwrap().matmul_nt(&a).unwrap());
        let rhs = ab.mul_vec(&vec(&x)).unwrap();
        worst[5] = worst[5].max(rel(&Matrix::column(&lhs), &Matrix::column(&rhs)));
        let swapped = CommutationMatrix::conjugate_kron(&ab, (m, k), (p, q)).unwrap();
        worst[6] = worst[6].max(rel(&swapped, &kron(&b, &a)));
        let pt = partial_trace(&kron(&sa, &sb), p).unwrap();
        worst[7] = worst[7].max(rel(&pt, &sa.scale(sb.trace())));
    }
    let names = [
        "kron mixed product",
        "kron transpose",
        "kron inverse",
        "kron trace",
        "kron Frobenius norm",
        "vec of matrix product",
        "commutation swap",
        "partial trace",
    ];
    names
        .iter()
        .zip(worst)
        .enumerate()
        .map(|(i, (&name, w))| Check { name, instances: n, worst: w, tolerance: if i == 2 { 1e-8 } else { 1e-10 } })
        .collect()
}

/// Trace of a random batch of up to `max_batch` samples with sampled labels.
fn model_trace(rng: &mut ChaCha8Rng, net: &Network, max_batch: usize) -> crate::net::BatchTrace {
    let batch = rng.random_range(1..=max_batch);
    let x = gauss(rng, net.input_features(), batch);
    let cache = net.forward(&x).unwrap();
    let t = Targets::Classes(vec![0; batch]);
    net.backward(&cache, &t, LabelMode::ModelSample, rng).unwrap()
}

/// Both partial traces of exact dense blocks on `n` random networks
/// (widths up to 6, batches up to 8): over the output side directly, and
/// over the input side after commutation conjugation.
pub fn partial_trace_identities(rng: &mut ChaCha8Rng, n: usize) -> Vec<Check> {
    let (mut input_side, mut output_side) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let net = random_mlp(rng, Loss::SoftmaxCrossEntropy, 6);
        let t = model_trace(rng, &net, 8);
        let batch = t.samples();
        for l in 0..net.num_parametric() {
            let f = exact_fim_dense(&t, l).unwrap();
            let pairs = per_sample_factors(&t, l).unwrap();
            let (din, dout) = (pairs[0].0.rows(), pairs[0].1.rows());
            let mut want_in = Matrix::zeros(din, din);
            let mut want_out = Matrix::zeros(dout, dout);
            for (lam, gam) in &pairs {
                want_in.axpy(gam.trace() / batch as f64, lam).unwrap();
                want_out.axpy(lam.trace() / batch as f64, gam).unwrap();
            }
            if want_in.frob_norm() == 0.0 {
                continue;
            }
            input_side = input_side.max(rel(&partial_trace(&f.matrix, dout).unwrap(), &want_in));
            let swapped = CommutationMatrix::conjugate_kron(&f.matrix, (din, din), (dout, dout)).unwrap();
            output_side = output_side.max(rel(&partial_trace(&swapped, din).unwrap(), &want_out));
        }
    }
    vec![
        Check { name: "partial trace gives E[tr(Γ)Λ]", instances: n, worst: input_side, tolerance: 1e-12 },
        Check { name: "commuted partial trace gives E[tr(Λ)Γ]", instances: n, worst: output_side, tolerance: 1e-12 },
    ]
}

fn conv_net(rng: &mut ChaCha8Rng, g: ConvGeometry, loss: Loss, bias: BiasMode) -> Network {
    let layers =
        vec![LayerSpec::conv(g, Activation::Sigmoid), LayerSpec::dense(g.out_features(), 3, Activation::Identity)];
    let mut net = Network::new(layers, loss, bias).unwrap();
    net.init_weights(rng);
    net
}

/// Trace of the factored block against the exact block: dense layers,
/// single-location convolutions, and convolutions whose samples each touch
/// one location (so every cross-location term vanishes). General conv
/// layers are compared with the sum-of-Kroneckers form.
pub fn trace_preservation(rng: &mut ChaCha8Rng, n: usize) -> Vec<Check> {
    let mut worst = [0.0f64; 4];
    let rd = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
    for _ in 0..n {
        let net = random_mlp(rng, Loss::SoftmaxCrossEntropy, 6);
        let t = model_trace(rng, &net, 8);
        for l in 0..net.num_parametric() {
            if let Ok(tk) = tkfac_factors_dense(&t, l) {
                worst[0] = worst[0].max(rd(tk.trace(), exact_fim_dense(&t, l).unwrap().trace()));
            }
        }

        // one location: kernel covers the whole input
        let side = rng.random_range(1..=3);
        let g = ConvGeometry::new(rng.random_range(1..=2), rng.random_range(1..=3), side, (side, side), 1, 0).unwrap();
        let net = conv_net(rng, g, Loss::SoftmaxCrossEntropy, BiasMode::Homogeneous);
        let t = model_trace(rng, &net, 6);
        if let Ok(tk) = tkfac_factors_conv(&t, 0) {
            worst[1] = worst[1].max(rd(tk.trace(), exact_fim_conv(&t, 0).unwrap().trace()));
        }

        // non-overlapping patches, each sample nonzero on a single patch
        let (k, cells) = (2, rng.random_range(2..=3));
        let g = ConvGeometry::new(1, 2, k, (k * cells, k * cells), k, 0).unwrap();
        let net = conv_net(rng, g, Loss::SoftmaxCrossEntropy, BiasMode::None);
        let batch = rng.random_range(1..=6);
        let side = k * cells;
        let mut x = Matrix::zeros(side * side, batch);
        for i in 0..batch {
            let (pr, pc) = (rng.random_range(0..cells), rng.random_range(0..cells));
            for dr in 0..k {
                for dc in 0..k {
                    // row-major pixels within a channel-major image
                    x[((pr * k + dr) * side + pc * k + dc, i)] = rng.sample(StandardNormal);
                }
            }
        }
        let cache = net.forward(&x).unwrap();
        let t = net.backward(&cache, &Targets::Classes(vec![0; batch]), LabelMode::ModelSample, rng).unwrap();
        let exact = exact_fim_conv(&t, 0).unwrap();
        let sum = sum_kron_fim_conv(&t, 0).unwrap();
        if let Ok(tk) = tkfac_factors_conv(&t, 0) {
            worst[2] = worst[2].max(rd(tk.trace(), exact.trace())).max(rel(&sum, &exact.matrix));
        }

        // general conv: the factored trace matches the sum of Kroneckers
        let g = ConvGeometry::new(2, 2, 2, (4, 4), 1, rng.random_range(0..=1)).unwrap();
        let net = conv_net(rng, g, Loss::BinaryCrossEntropy, BiasMode::Homogeneous);
        let t = model_trace(rng, &net, 4);
        if let Ok(tk) = tkfac_factors_conv(&t, 0) {
            worst[3] = worst[3].max(rd(tk.trace(), sum_kron_fim_conv(&t, 0).unwrap().trace()));
        }
    }
    vec![
        Check { name: "trace preservation, dense", instances: n, worst: worst[0], tolerance: 1e-10 },
        Check { name: "trace preservation, conv with one location", instances: n, worst: worst[1], tolerance: 1e-10 },
        Check { name: "trace preservation, decorrelated conv", instances: n, worst: worst[2], tolerance: 1e-10 },
        Check { name: "conv trace equals sum-of-Kroneckers trace", instances: n, worst: worst[3], tolerance: 1e-10 },
    ]
}

/// Error bounds on dense blocks of random networks until `n` layer
/// instances have been checked, plus `tuples` random trace tuples for the
/// ordering of the two bounds.
pub fn error_bounds(rng: &mut ChaCha8Rng, n: usize, tuples: usize) -> Vec<Check> {
    let (mut tk_viol, mut kf_viol, mut single, mut order, mut equal) = (0.0, 0.0, 0.0f64, 0.0, 0.0f64);
    let (mut seen, mut singles) = (0, 0);
    while seen < n {
        let net = random_mlp(rng, Loss::SoftmaxCrossEntropy, 6);
        let t = model_trace(rng, &net, if seen % 10 == 0 { 1 } else { 8 });
        let batch = t.samples();
        for l in 0..net.num_parametric() {
            seen += 1;
            let f = exact_fim_dense(&t, l).unwrap();
            let traces = f.sample_traces.clone().unwrap();
            let (b, kb) = (tkfac_bound(&traces), kfac_bound(&traces));
            let scale = f.matrix.frob_norm();
            let slack = 1e-12 * kb.max(scale);
            let err = match tkfac_factors_dense(&t, l) {
                Ok(tk) => approx_error(&f, &tk).unwrap(),
                Err(_) => scale,
            };
            if err > b + slack {
                tk_viol += 1.0;
            }
            if approx_error(&f, &kfac_factors(&t, l).unwrap()).unwrap() > kb + slack {
                kf_viol += 1.0;
            }
            if batch == 1 {
                singles += 1;
                single = single.max(b).max(err / scale.max(1e-300));
            }
        }
    }
    for i in 0..tuples {
        let k = rng.random_range(1..=8);
        let traces: Vec<(f64, f64)> = if i % 10 == 0 {
            let v = (rng.random::<f64>() * 5.0, rng.random::<f64>() * 5.0);
            vec![v; k]
        } else {
            (0..k).map(|_| (rng.random::<f64>() * 5.0, rng.random::<f64>() * 5.0)).collect()
        };
        let (b, kb) = (tkfac_bound(&traces), kfac_bound(&traces));
        if b > kb * (1.0 + 1e-12) {
            order += 1.0;
        }
        if i % 10 == 0 {
            equal = equal.max((b - kb).abs() / kb.max(1e-300));
        }
    }
    vec![
        Check { name: "TKFAC error bound violations", instances: seen, worst: tk_viol, tolerance: 0.0 },
        Check { name: "KFAC error bound violations", instances: seen, worst: kf_viol, tolerance: 0.0 },
        Check { name: "single-sample bound and error vanish", instances: singles, worst: single, tolerance: 1e-12 },
        Check { name: "TKFAC bound above KFAC bound", instances: tuples, worst: order, tolerance: 0.0 },
        Check { name: "bounds equal for equal traces", instances: tuples.div_ceil(10), worst: equal, tolerance: 1e-12 },
    ]
}

/// Largest relative gap between backprop and central differences over all
/// weights of `net` (relative to the larger magnitude, floored at 1e-4).
pub fn gradient_check(net: &Network, x: &Matrix, targets: &Targets, h: f64) -> Result<f64> {
    let cache = net.forward(x)?;
    let mut unused = seeded_rng(0, RngStream::Labels);
    let trace = net.backward(&cache, targets, LabelMode::Data, &mut unused)?;
    let mut worst = 0.0f64;
    let mut probe = net.clone();
    for l in 0..net.num_parametric() {
        for k in 0..net.weights(l).as_slice().len() {
            let w0 = net.weights(l).as_slice()[k];
            probe.weights_mut(l).as_mut_slice()[k] = w0 + h;
            let up = probe.loss(x, targets)?;
            probe.weights_mut(l).as_mut_slice()[k] = w0 - h;
            let down = probe.loss(x, targets)?;
            probe.weights_mut(l).as_mut_slice()[k] = w0;
            let fd = (up - down) / (2.0 * h);
            let an = trace.mean_grads[l].as_slice()[k];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4));
        }
    }
    Ok(worst)
}

pub fn gradients(rng: &mut ChaCha8Rng, n: usize) -> Check {
    let mut worst = 0.0f64;
    for i in 0..n {
        let loss = if i % 2 == 0 { Loss::SoftmaxCrossEntropy } else { Loss::BinaryCrossEntropy };
        let net = if i % 4 < 2 {
            random_mlp(rng, loss, 5)
        } else {
            let g = ConvGeometry::new(2, 3, 2, (4, 4), 1 + i % 2, i % 3 / 2).unwrap();
            conv_net(rng, g, loss, BiasMode::Homogeneous)
        };
        let batch = rng.random_range(1..=4);
        let x = gauss(rng, net.input_features(), batch);
        let t = targets_for(rng, loss, net.output_features(), batch);
        worst = worst.max(gradient_check(&net, &x, &t, 1e-5).unwrap());
    }
    Check { name: "gradients vs central differences", instances: n, worst, tolerance: 1e-5 }
}

/// Identity preconditioning against plain SGD over `steps` steps, and the
/// matrix-form update against the explicit Kronecker inverse.
pub fn optimizer_reduction(rng: &mut ChaCha8Rng, steps: usize) -> Vec<Check> {
    let mut net = random_mlp(rng, Loss::SoftmaxCrossEntropy, 5);
    let mut sgd = net.clone();
    let dims: Vec<(usize, usize)> = net.all_weights().iter().map(|w| (w.cols(), w.rows())).collect();
    let mut momentum: Vec<Matrix> = net.all_weights().iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
    let x = gauss(rng, net.input_features(), 6);
    let t = targets_for(rng, Loss::SoftmaxCrossEntropy, net.output_features(), 6);
    let mut worst = 0.0f64;
    for s in 0..steps {
        let damped = DampedFactors::identity(&dims, s);
        let mut unused = seeded_rng(0, RngStream::Labels);
        let g = net.backward(&net.forward(&x).unwrap(), &t, LabelMode::Data, &mut unused).unwrap().mean_grads;
        natural_gradient_step(&mut net, &mut momentum, &damped, &g, 0.1, 0.0, s, 1).unwrap();
        let gs = sgd.backward(&sgd.forward(&x).unwrap(), &t, LabelMode::Data, &mut unused).unwrap().mean_grads;
        for (l, gl) in gs.iter().enumerate() {
            sgd.weights_mut(l).axpy(-0.1, gl).unwrap();
            worst = worst.max(net.weights(l).frob_dist(sgd.weights(l)).unwrap());
        }
    }
    let mut kron_gap = 0.0f64;
    for _ in 0..steps {
        let (m, p) = (dims_rand(rng), dims_rand(rng));
        let g = gauss(rng, p, m);
        let (ai, gi) = (sym_inverse(&spd(rng, m), 0.0).unwrap(), sym_inverse(&spd(rng, p), 0.0).unwrap());
        let fast = vec(&precondition(&g, &ai, &gi).unwrap());
        let slow = kron(&ai, &gi).mul_vec(&vec(&g)).unwrap();
        kron_gap = kron_gap.max(rel(&Matrix::column(&fast), &Matrix::column(&slow)));
    }
    vec![
        Check { name: "identity preconditioner equals SGD", instances: steps, worst, tolerance: 1e-12 },
        Check { name: "matrix-form update equals Kronecker form", instances: steps, worst: kron_gap, tolerance: 1e-10 },
    ]
}

fn dims_rand(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=5)
}

/// Instance counts for [`run_all`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Counts {
    pub kron: usize,
    pub nets: usize,
    pub bound_layers: usize,
    pub bound_tuples: usize,
    pub gradients: usize,
    pub steps: usize,
}

impl Counts {
    pub const FULL: Counts =
        Counts { kron: 1000, nets: 100, bound_layers: 200, bound_tuples: 10_000, gradients: 50, steps: 100 };
    pub const QUICK: Counts =
        Counts { kron: 100, nets: 10, bound_layers: 20, bound_tuples: 1000, gradients: 8, steps: 20 };
}

pub fn run_all(seed: u64, counts: Counts) -> Vec<Check> {
    let mut rng = seeded_rng(seed, RngStream::Analysis);
    let mut out = kron_identities(&mut rng, counts.kron);
    out.extend(partial_trace_identities(&mut rng, counts.nets));
    out.extend(trace_preservation(&mut rng, counts.nets));
    out.extend(error_bounds(&mut rng, counts.bound_layers, counts.bound_tuples));
    out.push(gradients(&mut rng, counts.gradients));
    out.extend(optimizer_reduction(&mut rng, counts.steps));
    out
}
#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_all(3, Counts::QUICK) {
            assert!(c.passed(), "{} worst {:e} > {:e}", c.name, c.worst, c.tolerance);
        }
    }
}
