mod common;

use common::*;
use proptest::prelude::*;
use tkfac::fisher::{
    exact_fim_conv, exact_fim_dense, kfac_factors, per_sample_factors, sum_kron_fim_conv, tkfac_factors_conv,
    tkfac_factors_dense,
};
use tkfac::kron::{kron, kron_vec, partial_trace, CommutationMatrix};
use tkfac::linalg::sym_eigenvalues;
use tkfac::net::{
    Activation, BatchTrace, BiasMode, ConvGeometry, LabelMode, LayerSpec, LayerTrace, Loss, Network, Targets,
};
use tkfac::Matrix;

fn conv_net(g: ConvGeometry, bias: BiasMode, seed: u64) -> Network {
    let layers =
        vec![LayerSpec::conv(g, Activation::Sigmoid), LayerSpec::dense(g.out_features(), 3, Activation::Identity)];
    let mut net = Network::new(layers, Loss::SoftmaxCrossEntropy, bias).unwrap();
    net.init_weights(&mut rng(seed));
    net
}

fn trace_on(net: &Network, x: &Matrix, seed: u64) -> BatchTrace {
    let cache = net.forward(x).unwrap();
    let t = Targets::Classes(vec![0; x.cols()]);
    net.backward(&cache, &t, LabelMode::ModelSample, &mut rng(seed)).unwrap()
}

/// A trace holding a single layer built from explicit columns.
fn literal_trace(inputs: Matrix, grads: Matrix, locations: usize, is_conv: bool) -> BatchTrace {
    let samples = inputs.cols() / locations;
    let g = Matrix::zeros(grads.rows(), inputs.rows());
    BatchTrace {
        layers: vec![LayerTrace { inputs, grads, locations, samples, is_conv }],
        mean_grads: vec![g],
        loss: 0.0,
    }
}

/// `(1/N) Σ_i Σ_{p≠q} (â_p ⊗ ŭ_p)(â_q ⊗ ŭ_q)ᵀ`.
fn cross_location_terms(lt: &LayerTrace) -> Matrix {
    let d = lt.block_dim();
    let mut out = Matrix::zeros(d, d);
    for i in 0..lt.samples {
        for p in 0..lt.locations {
            for q in 0..lt.locations {
                if p == q {
                    continue;
                }
                let (cp, cq) = (lt.column(i, p), lt.column(i, q));
                let vp = kron_vec(lt.inputs.col(cp), lt.grads.col(cp));
                let vq = kron_vec(lt.inputs.col(cq), lt.grads.col(cq));
                out.axpy(1.0 / lt.samples as f64, &Matrix::outer(&vp, &vq)).unwrap();
            }
        }
    }
    out
}

#[test]
fn dense_block_matches_vec_outer_products() {
    let net = mlp(&[3, 2], Activation::Identity, Loss::SoftmaxCrossEntropy, BiasMode::None, 1);
    let t = sampled_trace(&net, 8, 2);
    assert_close(&exact_fim_dense(&t, 0).unwrap().matrix, &brute_force_fim(&t, 0), 1e-14);
}

#[test]
fn conv_block_matches_vec_outer_products() {
    let g = ConvGeometry::new(1, 2, 2, (3, 3), 1, 0).unwrap();
    let net = conv_net(g, BiasMode::None, 3);
    let t = trace_on(&net, &gauss(&mut rng(4), 9, 5), 5);
    assert_eq!(t.layers[0].locations, 4);
    assert_close(&exact_fim_conv(&t, 0).unwrap().matrix, &brute_force_fim(&t, 0), 1e-14);
}

#[test]
fn single_location_conv_matches_dense_block() {
    let (a, g) = (gauss(&mut rng(6), 3, 4), gauss(&mut rng(7), 2, 4));
    let conv = literal_trace(a.clone(), g.clone(), 1, true);
    let dense = literal_trace(a, g, 1, false);
    let fc = exact_fim_conv(&conv, 0).unwrap().matrix;
    assert_eq!(fc, exact_fim_dense(&dense, 0).unwrap().matrix);
    assert_eq!(sum_kron_fim_conv(&conv, 0).unwrap(), fc);
    let (tc, td) = (tkfac_factors_conv(&conv, 0).unwrap(), tkfac_factors_dense(&dense, 0).unwrap());
    assert_eq!((tc.delta, &tc.phi, &tc.psi), (td.delta, &td.phi, &td.psi));
}

#[test]
fn zero_conv_gradients_give_zero_block() {
    let a = gauss(&mut rng(8), 4, 6);
    let t = literal_trace(a, Matrix::zeros(2, 6), 3, true);
    assert_eq!(exact_fim_conv(&t, 0).unwrap().matrix, Matrix::zeros(8, 8));
    assert!(tkfac_factors_conv(&t, 0).is_err());
}

#[test]
fn zero_patches_at_one_location_remove_cross_terms() {
    // two locations; the second location's patches are zero for every sample
    let mut r = rng(9);
    let (n, o) = (5, 2);
    let mut a = gauss(&mut r, 3, n * o);
    let g = gauss(&mut r, 2, n * o);
    for i in 0..n {
        a.col_mut(i * o + 1).fill(0.0);
    }
    let t = literal_trace(a, g, o, true);
    assert_close(&sum_kron_fim_conv(&t, 0).unwrap(), &exact_fim_conv(&t, 0).unwrap().matrix, 1e-14);
    // the zero location contributes nothing to the factors either
    let mut dropped = t.layers[0].clone();
    let keep: Vec<usize> = (0..n).map(|i| i * o).collect();
    dropped.inputs = Matrix::from_fn(3, n, |r, c| t.layers[0].inputs[(r, keep[c])]);
    dropped.grads = Matrix::from_fn(2, n, |r, c| t.layers[0].grads[(r, keep[c])]);
    dropped.locations = 1;
    let single = BatchTrace { layers: vec![dropped], ..t.clone() };
    let (full, one) = (tkfac_factors_conv(&t, 0).unwrap(), tkfac_factors_conv(&single, 0).unwrap());
    assert!((full.delta - one.delta).abs() <= 1e-14 * one.delta);
    assert_close(&full.phi, &one.phi, 1e-14);
    assert_close(&full.psi, &one.psi, 1e-14);
}

#[test]
fn sum_of_kroneckers_is_exact_minus_cross_terms() {
    let g = ConvGeometry::new(2, 2, 2, (3, 3), 1, 0).unwrap();
    let net = conv_net(g, BiasMode::Homogeneous, 10);
    let t = trace_on(&net, &gauss(&mut rng(11), g.in_features(), 4), 12);
    let exact = exact_fim_conv(&t, 0).unwrap().matrix;
    let want = exact.sub(&cross_location_terms(&t.layers[0])).unwrap();
    assert_close(&sum_kron_fim_conv(&t, 0).unwrap(), &want, 1e-12);
}

#[test]
fn conv_factors_match_literal_summation() {
    let g = ConvGeometry::new(2, 3, 2, (4, 4), 1, 1).unwrap();
    let net = conv_net(g, BiasMode::Homogeneous, 13);
    let t = trace_on(&net, &gauss(&mut rng(14), g.in_features(), 5), 15);
    let lt = &t.layers[0];
    let (n, o) = (lt.samples, lt.locations);
    let mut delta = 0.0;
    let mut phi = Matrix::zeros(lt.in_dim(), lt.in_dim());
    let mut psi = Matrix::zeros(lt.out_dim(), lt.out_dim());
    for p in 0..o {
        let mut dp = 0.0;
        let mut num_phi = Matrix::zeros(lt.in_dim(), lt.in_dim());
        let mut num_psi = Matrix::zeros(lt.out_dim(), lt.out_dim());
        for i in 0..n {
            let c = lt.column(i, p);
            let lam = Matrix::outer(lt.inputs.col(c), lt.inputs.col(c));
            let gam = Matrix::outer(lt.grads.col(c), lt.grads.col(c));
            dp += lam.trace() * gam.trace() / n as f64;
            num_phi.axpy(gam.trace() / n as f64, &lam).unwrap();
            num_psi.axpy(lam.trace() / n as f64, &gam).unwrap();
        }
        delta += dp;
        phi.axpy(1.0 / dp, &num_phi).unwrap();
        psi.axpy(1.0 / dp, &num_psi).unwrap();
    }
    let f = tkfac_factors_conv(&t, 0).unwrap();
    assert!((f.delta - delta).abs() <= 1e-13 * delta);
    assert_close(&f.phi, &phi.scale(1.0 / phi.trace()), 1e-13);
    assert_close(&f.psi, &psi.scale(1.0 / psi.trace()), 1e-13);
}

#[test]
fn identical_samples_are_reproduced_exactly() {
    let (a, g) = (gauss(&mut rng(16), 3, 1), gauss(&mut rng(17), 2, 1));
    let rep = |m: &Matrix| Matrix::from_fn(m.rows(), 4, |r, _| m[(r, 0)]);
    let t = literal_trace(rep(&a), rep(&g), 1, false);
    let f = tkfac_factors_dense(&t, 0).unwrap();
    let exact = exact_fim_dense(&t, 0).unwrap().matrix;
    assert_close(&f.materialize(), &exact, 1e-14);
}

#[test]
fn partial_trace_identity_on_sixteen_samples() {
    let net = mlp(&[5, 4, 3], Activation::Sigmoid, Loss::SoftmaxCrossEntropy, BiasMode::Homogeneous, 18);
    let t = sampled_trace(&net, 16, 19);
    for l in 0..2 {
        let f = exact_fim_dense(&t, l).unwrap();
        let mut want = Matrix::zeros(t.layers[l].in_dim(), t.layers[l].in_dim());
        for (lam, gam) in per_sample_factors(&t, l).unwrap() {
            want.axpy(gam.trace() / 16.0, &lam).unwrap();
        }
        assert_close(&partial_trace(&f.matrix, t.layers[l].out_dim()).unwrap(), &want, 1e-12);
    }
}

#[test]
fn single_sample_kfac_is_exact() {
    let net = mlp(&[3, 2, 2], Activation::Sigmoid, Loss::SoftmaxCrossEntropy, BiasMode::None, 20);
    let t = sampled_trace(&net, 1, 21);
    for l in 0..2 {
        let exact = exact_fim_dense(&t, l).unwrap().matrix;
        assert_close(&kfac_factors(&t, l).unwrap().materialize(), &exact, 1e-14);
    }
}

#[test]
fn kfac_factors_are_plain_averages() {
    let net = mlp(&[4, 3], Activation::Identity, Loss::SoftmaxCrossEntropy, BiasMode::Homogeneous, 22);
    let t = sampled_trace(&net, 7, 23);
    let lt = &t.layers[0];
    let mut a = Matrix::zeros(lt.in_dim(), lt.in_dim());
    let mut g = Matrix::zeros(lt.out_dim(), lt.out_dim());
    for i in 0..7 {
        a.axpy(1.0 / 7.0, &Matrix::outer(lt.inputs.col(i), lt.inputs.col(i))).unwrap();
        g.axpy(1.0 / 7.0, &Matrix::outer(lt.grads.col(i), lt.grads.col(i))).unwrap();
    }
    let k = kfac_factors(&t, 0).unwrap();
    assert_close(&k.a, &a, 1e-14);
    assert_close(&k.g, &g, 1e-14);
}

fn dense_trace_strategy() -> impl Strategy<Value = BatchTrace> {
    (prop::collection::vec(1usize..=5, 2..=4), 1usize..=8, any::<bool>(), any::<u64>()).prop_map(|(w, n, bias, s)| {
        let bias = if bias { BiasMode::Homogeneous } else { BiasMode::None };
        let net = mlp(&w, Activation::Sigmoid, Loss::SoftmaxCrossEntropy, bias, s);
        sampled_trace(&net, n, s ^ 5)
    })
}

fn conv_trace_strategy() -> impl Strategy<Value = BatchTrace> {
    (1usize..=2, 1usize..=3, 1usize..=3, 3usize..=5, 0usize..=1, 1usize..=4, any::<u64>()).prop_map(
        |(cin, cout, k, side, pad, n, s)| {
            let g = ConvGeometry::new(cin, cout, k, (side, side), 1, pad).unwrap();
            let net = conv_net(g, BiasMode::Homogeneous, s);
            trace_on(&net, &gauss(&mut rng(s ^ 6), g.in_features(), n), s ^ 7)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn dense_trace_is_preserved(t in dense_trace_strategy()) {
        for l in 0..t.layers.len() {
            let exact = exact_fim_dense(&t, l).unwrap();
            if let Ok(f) = tkfac_factors_dense(&t, l) {
                prop_assert!((f.trace() - exact.trace()).abs() <= 1e-10 * exact.trace());
                prop_assert!((f.materialize().trace() - exact.trace()).abs() <= 1e-10 * exact.trace());
            }
        }
    }

    #[test]
    fn conv_trace_matches_sum_of_kroneckers(t in conv_trace_strategy()) {
        if let Ok(f) = tkfac_factors_conv(&t, 0) {
            let want = sum_kron_fim_conv(&t, 0).unwrap().trace();
            prop_assert!((f.trace() - want).abs() <= 1e-10 * want);
        }
    }

    #[test]
    fn partial_traces_of_exact_block(t in dense_trace_strategy()) {
        for l in 0..t.layers.len() {
            let f = exact_fim_dense(&t, l).unwrap().matrix;
            let (din, dout) = (t.layers[l].in_dim(), t.layers[l].out_dim());
            let n = t.samples() as f64;
            let mut want_in = Matrix::zeros(din, din);
            let mut want_out = Matrix::zeros(dout, dout);
            let mut swapped_want = Matrix::zeros(din * dout, din * dout);
            for (lam, gam) in per_sample_factors(&t, l).unwrap() {
                want_in.axpy(gam.trace() / n, &lam).unwrap();
                want_out.axpy(lam.trace() / n, &gam).unwrap();
                swapped_want.axpy(1.0 / n, &kron(&gam, &lam)).unwrap();
            }
            let swapped = CommutationMatrix::conjugate_kron(&f, (din, din), (dout, dout)).unwrap();
            let scale = 1.0 + f.frob_norm();
            prop_assert!(swapped.frob_dist(&swapped_want).unwrap() <= 1e-12 * scale);
            prop_assert!(partial_trace(&f, dout).unwrap().frob_dist(&want_in).unwrap() <= 1e-12 * scale);
            prop_assert!(partial_trace(&swapped, din).unwrap().frob_dist(&want_out).unwrap() <= 1e-12 * scale);
        }
    }

    #[test]
    fn scaling_gradients_scales_delta_only(t in dense_trace_strategy(), c in 0.01f64..100.0) {
        let mut scaled = t.clone();
        scaled.layers.iter_mut().for_each(|l| l.scale_grads(c));
        for l in 0..t.layers.len() {
            if let (Ok(a), Ok(b)) = (tkfac_factors_dense(&t, l), tkfac_factors_dense(&scaled, l)) {
                prop_assert!((b.delta - c * c * a.delta).abs() <= 1e-12 * b.delta);
                prop_assert!(b.phi.frob_dist(&a.phi).unwrap() <= 1e-12);
                prop_assert!(b.psi.frob_dist(&a.psi).unwrap() <= 1e-12);
            }
        }
    }

    #[test]
    fn factors_are_psd_with_unit_trace(t in prop_oneof![dense_trace_strategy(), conv_trace_strategy()]) {
        for l in 0..t.layers.len() {
            let f = if t.layers[l].is_conv { tkfac_factors_conv(&t, l) } else { tkfac_factors_dense(&t, l) };
            if let Ok(f) = f {
                prop_assert!((f.phi.trace() - 1.0).abs() <= 1e-12 && (f.psi.trace() - 1.0).abs() <= 1e-12);
                for m in [&f.phi, &f.psi] {
                    prop_assert!(sym_eigenvalues(m).unwrap()[0] >= -1e-12);
                }
            }
        }
    }
}
