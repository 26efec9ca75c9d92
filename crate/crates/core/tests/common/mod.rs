#![allow(dead_code)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tkfac::net::{Activation, BatchTrace, BiasMode, LabelMode, Loss, Network, Targets};
use tkfac::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

pub fn spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let b = gauss(rng, n, n);
    let mut s = b.matmul_nt(&b).unwrap();
    s.add_diag(0.5);
    s
}

pub fn rel(a: &Matrix, b: &Matrix) -> f64 {
    a.frob_dist(b).unwrap() / b.frob_norm().max(1e-300)
}

pub fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
    let r = rel(a, b);
    assert!(r <= tol, "relative distance {r:e} above {tol:e}\n{a:?}\n{b:?}");
}

/// Gaussian matrix with the given shape from a proptest-chosen seed.
pub fn matrix_strategy(
    rows: std::ops::RangeInclusive<usize>,
    cols: std::ops::RangeInclusive<usize>,
) -> impl Strategy<Value = Matrix> {
    (rows, cols, any::<u64>()).prop_map(|(r, c, s)| gauss(&mut rng(s), r, c))
}

/// A classifier MLP of the given widths with random weights.
pub fn mlp(widths: &[usize], act: Activation, loss: Loss, bias: BiasMode, seed: u64) -> Network {
    let mut net = Network::mlp(widths, act, loss, bias).unwrap();
    net.init_weights(&mut rng(seed));
    net
}

/// Targets matching the loss: class labels or Bernoulli probabilities.
pub fn random_targets(rng: &mut ChaCha8Rng, loss: Loss, outputs: usize, n: usize) -> Targets {
    match loss {
        Loss::SoftmaxCrossEntropy => Targets::Classes((0..n).map(|_| rng.random_range(0..outputs)).collect()),
        Loss::BinaryCrossEntropy => Targets::Dense(Matrix::from_fn(outputs, n, |_, _| rng.random::<f64>())),
    }
}

/// Backward pass on a random batch with labels sampled from the model.
pub fn sampled_trace(net: &Network, n: usize, seed: u64) -> BatchTrace {
    let mut r = rng(seed);
    let x = gauss(&mut r, net.input_features(), n);
    let cache = net.forward(&x).unwrap();
    let t = random_targets(&mut r, net.loss_kind(), net.output_features(), n);
    net.backward(&cache, &t, LabelMode::ModelSample, &mut r).unwrap()
}

/// Backward pass on the given inputs with data labels.
pub fn data_trace(net: &Network, x: &Matrix, t: &Targets) -> BatchTrace {
    let cache = net.forward(x).unwrap();
    net.backward(&cache, t, LabelMode::Data, &mut rng(0)).unwrap()
}

/// `(1/N) Σ_i vec(DW_i) vec(DW_i)ᵀ` computed from per-sample weight gradients.
pub fn brute_force_fim(trace: &BatchTrace, l: usize) -> Matrix {
    let lt = &trace.layers[l];
    let d = lt.block_dim();
    let mut f = Matrix::zeros(d, d);
    for i in 0..lt.samples {
        let v = lt.sample_weight_grad(i).into_vec();
        f.axpy(1.0 / lt.samples as f64, &Matrix::outer(&v, &v)).unwrap();
    }
    f
}
