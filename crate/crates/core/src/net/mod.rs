//! Feed-forward network of dense and convolutional layers with analytic
//! backprop.
//!
//! Batches are matrices with one column per sample. A parametric layer
//! computes `s_l = W_l a_{l-1}` (dense) or `S_l = W_l · im2col(A_{l-1})`
//! (conv), followed by `a_l = φ_l(s_l)`. Backprop records, per sample, the
//! layer inputs and the pre-activation derivatives `g_l = ∂L/∂s_l`, so that
//! the per-sample weight gradient is `g_l a_{l-1}ᵀ`.

mod im2col;
mod layer;
mod loss;
mod trace;

pub use im2col::im2col;
pub use layer::{sigmoid, Activation, BiasMode, ConvGeometry, LayerKind, LayerSpec};
pub use loss::{sample_labels, softmax, LabelMode, Loss, Targets};
pub use trace::{BatchTrace, LayerTrace};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    /// `W_l` per parametric layer, shape `weight_out x (weight_in + bias)`.
    weights: Vec<Matrix>,
    /// Parametric index -> position in `layers`.
    param_layers: Vec<usize>,
    loss: Loss,
    bias: BiasMode,
}

/// Intermediate values of a forward pass, consumed by [`Network::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `acts[0]` is the input batch, `acts[k + 1]` the output of layer `k`.
    acts: Vec<Matrix>,
    pre: Vec<Matrix>,
    /// Columns multiplied by `W_l`, per parametric layer.
    cols: Vec<Matrix>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        self.acts.last().expect("forward cache holds the input")
    }

    pub fn batch_size(&self) -> usize {
        self.acts[0].cols()
    }

    pub fn input(&self) -> &Matrix {
        &self.acts[0]
    }
}

impl Network {
    /// Validates the architecture and allocates zero weights.
    pub fn new(layers: Vec<LayerSpec>, loss: Loss, bias: BiasMode) -> Result<Self> {
        if layers.is_empty() {
            return shape_err("network needs at least one layer");
        }
        for (k, spec) in layers.iter().enumerate() {
            spec.validate()?;
            if k > 0 && layers[k - 1].out_features() != spec.in_features() {
                return shape_err(format!(
                    "layer {} emits {} features but layer {k} expects {}",
                    k - 1,
                    layers[k - 1].out_features(),
                    spec.in_features()
                ));
            }
        }
        let param_layers: Vec<usize> = (0..layers.len()).filter(|&k| layers[k].is_parametric()).collect();
        let weights = param_layers
            .iter()
            .map(|&k| Matrix::zeros(layers[k].weight_out(), layers[k].weight_in() + bias.extra()))
            .collect();
        Ok(Self { layers, weights, param_layers, loss, bias })
    }

    /// Fully connected network `widths[0] -> widths[1] -> ...` with `hidden`
    /// activations and identity (logit) output.
    pub fn mlp(widths: &[usize], hidden: Activation, loss: Loss, bias: BiasMode) -> Result<Self> {
        if widths.len() < 2 {
            return shape_err("an MLP needs at least input and output widths");
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| LayerSpec::dense(w[0], w[1], if k == last { Activation::Identity } else { hidden }))
            .collect();
        Self::new(layers, loss, bias)
    }

    /// Normal initialization with variance `gain / fan_in` (gain 2 for ReLU,
    /// 1 otherwise); bias columns start at zero.
    pub fn init_weights<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for (p, &k) in self.param_layers.iter().enumerate() {
            let spec = self.layers[k];
            let fan_in = spec.weight_in() as f64;
            let gain = if spec.activation == Activation::Relu { 2.0 } else { 1.0 };
            let std = (gain / fan_in).sqrt();
            let w = &mut self.weights[p];
            let real_cols = spec.weight_in();
            for j in 0..real_cols {
                for v in w.col_mut(j) {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = std * z;
                }
            }
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn loss_kind(&self) -> Loss {
        self.loss
    }

    pub fn bias_mode(&self) -> BiasMode {
        self.bias
    }

    pub fn input_features(&self) -> usize {
        self.layers[0].in_features()
    }

    pub fn output_features(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_features())
    }

    pub fn num_parametric(&self) -> usize {
        self.weights.len()
    }

    /// Spec of the `l`-th parametric layer.
    pub fn param_spec(&self, l: usize) -> &LayerSpec {
        &self.layers[self.param_layers[l]]
    }

    pub fn weights(&self, l: usize) -> &Matrix {
        &self.weights[l]
    }

    pub fn all_weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut Matrix {
        &mut self.weights[l]
    }

    pub fn set_weights(&mut self, l: usize, w: Matrix) -> Result<()> {
        if w.shape() != self.weights[l].shape() {
            return shape_err(format!("layer {l} weights are {:?}, got {:?}", self.weights[l].shape(), w.shape()));
        }
        self.weights[l] = w;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum()
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.rows() != self.input_features() {
            return shape_err(format!("input has {} features, network expects {}", x.rows(), self.input_features()));
        }
        let n = x.cols();
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cols = Vec::with_capacity(self.weights.len());
        acts.push(x.clone());
        let mut p = 0;
        for spec in &self.layers {
            let a = acts.last().expect("nonempty");
            let s = match spec.kind {
                LayerKind::Dense { .. } => {
                    let c = self.with_bias_row(a.clone());
                    let s = self.weights[p].matmul(&c)?;
                    cols.push(c);
                    p += 1;
                    s
                }
                LayerKind::Conv(g) => {
                    let c = self.with_bias_row(batch_im2col(a, &g));
                    let s = self.weights[p].matmul(&c)?.reshape(g.out_features(), n)?;
                    cols.push(c);
                    p += 1;
                    s
                }
                LayerKind::ActivationOnly { .. } => a.clone(),
            };
            let act = spec.activation;
            let out = if act == Activation::Identity { s.clone() } else { s.map(|v| act.apply(v)) };
            pre.push(s);
            acts.push(out);
        }
        Ok(ForwardCache { acts, pre, cols })
    }

    fn with_bias_row(&self, c: Matrix) -> Matrix {
        match self.bias {
            BiasMode::None => c,
            BiasMode::Homogeneous => {
                let (r, n) = c.shape();
                Matrix::from_fn(r + 1, n, |i, j| if i == r { 1.0 } else { c[(i, j)] })
            }
        }
    }

    /// Output logits for a batch.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut cache = self.forward(x)?;
        Ok(cache.acts.pop().expect("nonempty"))
    }

    /// Mean loss of the batch under the given targets.
    pub fn loss(&self, x: &Matrix, targets: &Targets) -> Result<f64> {
        self.loss.value(&self.predict(x)?, targets)
    }

    /// Backpropagates through the cached forward pass.
    ///
    /// With [`LabelMode::ModelSample`] the labels are drawn from the network's
    /// predictive distribution using `rng` and `targets` is ignored; with
    /// [`LabelMode::Data`] the given targets are used and `rng` is untouched.
    pub fn backward<R: Rng + ?Sized>(
        &self,
        cache: &ForwardCache,
        targets: &Targets,
        mode: LabelMode,
        rng: &mut R,
    ) -> Result<BatchTrace> {
        let logits = cache.logits();
        let sampled;
        let labels = match mode {
            LabelMode::Data => targets,
            LabelMode::ModelSample => {
                sampled = sample_labels(self.loss, logits, rng);
                &sampled
            }
        };
        let loss = self.loss.value(logits, labels)?;
        let n = cache.batch_size();
        let mut delta = self.loss.logit_grad(logits, labels)?;

        let np = self.weights.len();
        let mut layer_traces: Vec<Option<LayerTrace>> = vec![None; np];
        let mut mean_grads: Vec<Option<Matrix>> = vec![None; np];
        let mut p = np;
        for k in (0..self.layers.len()).rev() {
            let spec = self.layers[k];
            let mut g = delta;
            if spec.activation != Activation::Identity {
                for (gv, &s) in g.as_mut_slice().iter_mut().zip(cache.pre[k].as_slice()) {
                    *gv *= spec.activation.derivative(s);
                }
            }
            if !spec.is_parametric() {
                delta = g;
                continue;
            }
            p -= 1;
            let cols = &cache.cols[p];
            let locations = spec.locations();
            let g = g.reshape(spec.weight_out(), n * locations)?;
            let mut mean = g.matmul_nt(cols)?;
            mean.scale_in_place(1.0 / n as f64);
            mean_grads[p] = Some(mean);

            delta = if k > 0 {
                let w = &self.weights[p];
                let w_real = Matrix::from_col_major(
                    w.rows(),
                    spec.weight_in(),
                    w.as_slice()[..w.rows() * spec.weight_in()].to_vec(),
                )?;
                let dcols = w_real.matmul_tn(&g)?;
                match spec.kind {
                    LayerKind::Conv(geom) => batch_col2im(&dcols, &geom, n),
                    _ => dcols,
                }
            } else {
                Matrix::zeros(0, 0)
            };
            layer_traces[p] = Some(LayerTrace {
                inputs: cols.clone(),
                grads: g,
                locations,
                samples: n,
                is_conv: matches!(spec.kind, LayerKind::Conv(_)),
            });
        }
        Ok(BatchTrace {
            layers: layer_traces.into_iter().map(|t| t.expect("every layer visited")).collect(),
            mean_grads: mean_grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
            loss,
        })
    }
}

/// im2col of every sample, concatenated: `patch_len x (N · o)`.
fn batch_im2col(a: &Matrix, g: &ConvGeometry) -> Matrix {
    let n = a.cols();
    let (rows, o) = (g.patch_len(), g.locations());
    let mut out = Matrix::zeros(rows, n * o);
    let buf = out.as_mut_slice();
    for i in 0..n {
        im2col::im2col_into(a.col(i), g, &mut buf[i * rows * o..(i + 1) * rows * o]);
    }
    out
}

fn batch_col2im(dcols: &Matrix, g: &ConvGeometry, n: usize) -> Matrix {
    let (rows, o) = (g.patch_len(), g.locations());
    let mut out = Matrix::zeros(g.in_features(), n);
    for i in 0..n {
        im2col::col2im_add(&dcols.as_slice()[i * rows * o..(i + 1) * rows * o], g, out.col_mut(i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn identity_network_is_identity() {
        let mut net =
            Network::mlp(&[3, 3, 3], Activation::Identity, Loss::SoftmaxCrossEntropy, BiasMode::None).unwrap();
        net.set_weights(0, Matrix::identity(3)).unwrap();
        net.set_weights(1, Matrix::identity(3)).unwrap();
        let x = Matrix::from_fn(3, 4, |i, j| (i as f64) - 2.0 * j as f64);
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn single_dense_layer_hand_expansion() {
        let mut net = Network::mlp(&[2, 2], Activation::Identity, Loss::SoftmaxCrossEntropy, BiasMode::None).unwrap();
        net.set_weights(0, Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let s = net.predict(&Matrix::column(&[1.0, 1.0])).unwrap();
        assert_eq!(s.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let bad = vec![LayerSpec::dense(3, 4, Activation::Relu), LayerSpec::dense(5, 2, Activation::Identity)];
        assert!(Network::new(bad, Loss::SoftmaxCrossEntropy, BiasMode::None).is_err());
        let net = Network::mlp(&[3, 2], Activation::Relu, Loss::SoftmaxCrossEntropy, BiasMode::None).unwrap();
        assert!(net.forward(&Matrix::zeros(4, 1)).is_err());
        let mut net = net;
        assert!(net.set_weights(0, Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn zero_network_sigmoid_bce_closed_form() {
        // all weights zero, zero input: hidden sigmoid outputs 1/2, logits 0,
        // so dL/dz = 1/2 - x = 1/2 and ∇W_last = 1/2 · 1/2 everywhere.
        let net = Network::mlp(&[3, 4, 3], Activation::Sigmoid, Loss::BinaryCrossEntropy, BiasMode::None).unwrap();
        let x = Matrix::zeros(3, 5);
        let cache = net.forward(&x).unwrap();
        let trace = net.backward(&cache, &Targets::Dense(x.clone()), LabelMode::Data, &mut rng()).unwrap();
        assert!(trace.mean_grads[1].as_slice().iter().all(|&v| v == 0.25));
        assert!(trace.mean_grads[0].as_slice().iter().all(|&v| v == 0.0));
        assert!(trace.layers.iter().all(|l| l.grads.is_finite()));
        assert!((trace.loss - 3.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn single_sample_trace_reconstructs_gradient() {
        let mut net = Network::mlp(&[3, 2], Activation::Identity, Loss::SoftmaxCrossEntropy, BiasMode::None).unwrap();
        net.init_weights(&mut rng());
        let x = Matrix::column(&[0.5, -1.0, 2.0]);
        let cache = net.forward(&x).unwrap();
        let trace = net.backward(&cache, &Targets::Classes(vec![1]), LabelMode::Data, &mut rng()).unwrap();
        let lt = &trace.layers[0];
        let dw = Matrix::outer(lt.grads.col(0), lt.inputs.col(0));
        assert_eq!(dw, trace.mean_grads[0]);
        assert_eq!(lt.sample_weight_grad(0), dw);
    }

    #[test]
    fn data_mode_leaves_rng_untouched() {
        let mut net = Network::mlp(&[2, 3], Activation::Identity, Loss::SoftmaxCrossEntropy, BiasMode::None).unwrap();
        net.init_weights(&mut rng());
        let cache = net.forward(&Matrix::from_fn(2, 4, |i, j| (i + j) as f64)).unwrap();
        let mut r = rng();
        net.backward(&cache, &Targets::Classes(vec![0, 1, 2, 0]), LabelMode::Data, &mut r).unwrap();
        assert_eq!(r.random::<u64>(), rng().random::<u64>());
    }

    #[test]
    fn homogeneous_bias_shifts_output() {
        let mut net =
            Network::mlp(&[2, 2], Activation::Identity, Loss::SoftmaxCrossEntropy, BiasMode::Homogeneous).unwrap();
        assert_eq!(net.weights(0).shape(), (2, 3));
        net.set_weights(0, Matrix::from_rows(&[&[1.0, 0.0, 5.0], &[0.0, 1.0, -1.0]])).unwrap();
        let y = net.predict(&Matrix::column(&[1.0, 2.0])).unwrap();
        assert_eq!(y.as_slice(), &[6.0, 1.0]);
    }
}
