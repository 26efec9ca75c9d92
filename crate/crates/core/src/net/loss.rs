use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::sigmoid;
use crate::error::{shape_err, Result};
use crate::matrix::Matrix;

/// Negative log-likelihood attached to the network output. The last layer's
/// output is always read as logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    /// Categorical likelihood over softmax(logits).
    SoftmaxCrossEntropy,
    /// Factorized Bernoulli likelihood over sigmoid(logits), summed over outputs.
    BinaryCrossEntropy,
}

/// Where the labels used for per-sample gradients come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Dataset labels (empirical Fisher).
    Data,
    /// Labels drawn from the model's predictive distribution (true Fisher).
    #[default]
    ModelSample,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Per-output targets in `[0, 1]`, one column per sample.
    Dense(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Dense(m) => m.cols(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Dense(m) => {
                let mut out = Matrix::zeros(m.rows(), idx.len());
                for (k, &i) in idx.iter().enumerate() {
                    out.col_mut(k).copy_from_slice(m.col(i));
                }
                Targets::Dense(out)
            }
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|&v| (v - lse).exp()).collect()
}

impl Loss {
    fn check(&self, logits: &Matrix, targets: &Targets) -> Result<()> {
        match (self, targets) {
            (Loss::SoftmaxCrossEntropy, Targets::Classes(c)) => {
                if c.len() != logits.cols() {
                    return shape_err("label count differs from batch size");
                }
                if let Some(&bad) = c.iter().find(|&&y| y >= logits.rows()) {
                    return shape_err(format!("class {bad} out of range for {} outputs", logits.rows()));
                }
                Ok(())
            }
            (Loss::BinaryCrossEntropy, Targets::Dense(t)) => {
                if t.shape() != logits.shape() {
                    return shape_err("target matrix shape differs from logits");
                }
                Ok(())
            }
            _ => shape_err(format!("targets do not fit loss {self:?}")),
        }
    }

    /// Per-sample losses.
    pub fn per_sample(&self, logits: &Matrix, targets: &Targets) -> Result<Vec<f64>> {
        self.check(logits, targets)?;
        Ok((0..logits.cols())
            .map(|i| {
                let z = logits.col(i);
                match targets {
                    Targets::Classes(c) => log_sum_exp(z) - z[c[i]],
                    Targets::Dense(t) => z.iter().zip(t.col(i)).map(|(&zj, &xj)| softplus(zj) - xj * zj).sum(),
                }
            })
            .collect())
    }

    /// Mean loss over the batch.
    pub fn value(&self, logits: &Matrix, targets: &Targets) -> Result<f64> {
        let l = self.per_sample(logits, targets)?;
        Ok(l.iter().sum::<f64>() / l.len().max(1) as f64)
    }

    /// Per-sample derivative of the loss w.r.t. the logits (not divided by N).
    pub fn logit_grad(&self, logits: &Matrix, targets: &Targets) -> Result<Matrix> {
        self.check(logits, targets)?;
        let mut g = Matrix::zeros(logits.rows(), logits.cols());
        for i in 0..logits.cols() {
            let z = logits.col(i);
            let out = g.col_mut(i);
            match targets {
                Targets::Classes(c) => {
                    out.copy_from_slice(&softmax(z));
                    out[c[i]] -= 1.0;
                }
                Targets::Dense(t) => {
                    for ((o, &zj), &xj) in out.iter_mut().zip(z).zip(t.col(i)) {
                        *o = sigmoid(zj) - xj;
                    }
                }
            }
        }
        Ok(g)
    }

    /// Classification error rate, or mean squared reconstruction error
    /// `Σ_j (sigmoid(z_j) - x_j)²` per sample for the Bernoulli loss.
    pub fn error(&self, logits: &Matrix, targets: &Targets) -> Result<f64> {
        self.check(logits, targets)?;
        let n = logits.cols().max(1) as f64;
        Ok(match targets {
            Targets::Classes(c) => {
                let wrong = (0..logits.cols())
                    .filter(|&i| {
                        let z = logits.col(i);
                        let arg = (0..z.len()).fold(0, |b, j| if z[j] > z[b] { j } else { b });
                        arg != c[i]
                    })
                    .count();
                wrong as f64 / n
            }
            Targets::Dense(t) => {
                let total: f64 = logits
                    .as_slice()
                    .iter()
                    .zip(t.as_slice())
                    .map(|(&z, &x)| {
                        let d = sigmoid(z) - x;
                        d * d
                    })
                    .sum();
                total / n
            }
        })
    }
}

/// Draws targets from the model's predictive distribution: a categorical
/// sample from softmax(logits) per column, or independent Bernoulli samples
/// of sigmoid(logits) per entry.
pub fn sample_labels<R: Rng + ?Sized>(loss: Loss, logits: &Matrix, rng: &mut R) -> Targets {
    match loss {
        Loss::SoftmaxCrossEntropy => Targets::Classes(
            (0..logits.cols())
                .map(|i| {
                    let p = softmax(logits.col(i));
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    for (k, &pk) in p.iter().enumerate() {
                        acc += pk;
                        if u < acc {
                            return k;
                        }
                    }
                    // rounding left u above the accumulated mass
                    p.iter().enumerate().rev().find(|(_, &pk)| pk > 0.0).map_or(p.len() - 1, |(k, _)| k)
                })
                .collect(),
        ),
        Loss::BinaryCrossEntropy => Targets::Dense(bernoulli(logits, rng)),
    }
}

fn bernoulli<R: Rng + ?Sized>(logits: &Matrix, rng: &mut R) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for (o, &z) in out.as_mut_slice().iter_mut().zip(logits.as_slice()) {
        let u: f64 = rng.random();
        *o = if u < sigmoid(z) { 1.0 } else { 0.0 };
    }
    out
}
