use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{FisherFactors, DEGENERATE_DELTA};
use crate::matrix::Matrix;
use crate::net::{LayerKind, LayerSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DampingMode {
    /// `√δ Φ + √λ I`, `√δ Ψ + √λ I`.
    #[default]
    Normal,
    /// Trace-scaled damping with `δ̃ = max(ν, δ)` on conv layers and the `β`
    /// expansion on dense layers.
    NewConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DampingPolicy {
    pub mode: DampingMode,
    pub lambda: f64,
    pub nu: f64,
}

impl DampingPolicy {
    pub fn normal(lambda: f64) -> Self {
        Self { mode: DampingMode::Normal, lambda, nu: 1.0 }
    }

    pub fn new_conv(nu: f64) -> Self {
        Self { mode: DampingMode::NewConv, lambda: 0.0, nu }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(Error::Config(format!("nu must be > 0, got {}", self.nu)));
        }
        Ok(())
    }
}

/// A damped factor pair together with what was added to each diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DampedPair {
    pub input: Matrix,
    pub output: Matrix,
    /// Coefficient actually used for the curvature part (`δ`, `δ̃` or `βδ`).
    pub delta_used: f64,
    pub added_in: f64,
    pub added_out: f64,
}

impl DampedPair {
    /// Added diagonal over the mean diagonal of the curvature part, per side.
    pub fn damping_ratios(&self) -> (f64, f64) {
        let ratio = |m: &Matrix, added: f64| {
            let curv = (m.trace() - added * m.rows() as f64) / m.rows() as f64;
            if curv > 0.0 {
                added / curv
            } else {
                f64::INFINITY
            }
        };
        (ratio(&self.input, self.added_in), ratio(&self.output, self.added_out))
    }
}

fn shifted(m: &Matrix, scale: f64, shift: f64) -> Matrix {
    let mut out = m.scale(scale);
    out.add_diag(shift);
    out
}

/// `Φ̂ = √δ Φ + √λ I`, `Ψ̂ = √δ Ψ + √λ I`.
pub fn damp_normal(f: &FisherFactors, lambda: f64) -> (Matrix, Matrix) {
    let p = damp_normal_pair(f, lambda);
    (p.input, p.output)
}

pub(crate) fn damp_normal_pair(f: &FisherFactors, lambda: f64) -> DampedPair {
    let s = f.delta.max(0.0).sqrt();
    let d = lambda.sqrt();
    DampedPair {
        input: shifted(&f.phi, s, d),
        output: shifted(&f.psi, s, d),
        delta_used: f.delta,
        added_in: d,
        added_out: d,
    }
}

/// Trace-scaled damping with coefficient `c`:
/// `√c Φ + (c / dim Φ) I`, `√c Ψ + (c / dim Ψ) I`.
pub(crate) fn damp_scaled(f: &FisherFactors, c: f64) -> DampedPair {
    let s = c.sqrt();
    let (din, dout) = (f.phi.rows() as f64, f.psi.rows() as f64);
    DampedPair {
        input: shifted(&f.phi, s, c / din),
        output: shifted(&f.psi, s, c / dout),
        delta_used: c,
        added_in: c / din,
        added_out: c / dout,
    }
}

/// `δ̃ = max(ν, δ)`, `Φ̃ = √δ̃ Φ + δ̃/(n_{l-1}k²) I`, `Ψ̃ = √δ̃ Ψ + δ̃/n_l I`.
///
/// The identity weights come from the factor dimensions, which include the
/// bias row when one is folded into the weights.
pub fn damp_new_conv(f: &FisherFactors, nu: f64, layer: &LayerSpec) -> Result<(Matrix, Matrix, f64)> {
    let LayerKind::Conv(g) = &layer.kind else {
        return Err(Error::LayerKind { layer: 0, expected: "conv" });
    };
    if f.phi.rows() < g.patch_len() || f.psi.rows() != g.out_channels {
        return Err(Error::DimensionMismatch(format!(
            "factors {}x{} do not fit conv layer ({} patch, {} channels)",
            f.phi.rows(),
            f.psi.rows(),
            g.patch_len(),
            g.out_channels
        )));
    }
    let delta_tilde = nu.max(f.delta);
    let p = damp_scaled(f, delta_tilde);
    Ok((p.input, p.output, delta_tilde))
}

/// `β = max_l δ̃_l / δ_l`, skipping layers with `δ_l = 0`; 1 when no layer
/// qualifies.
pub fn fc_beta_expansion(deltas: &[f64], deltas_tilde: &[f64]) -> f64 {
    deltas.iter().zip(deltas_tilde).filter(|(&d, _)| d >= DEGENERATE_DELTA).map(|(&d, &dt)| dt / d).fold(1.0, f64::max)
}

/// `εold + (1 - ε)fresh`.
pub fn ema_update(old: &Matrix, fresh: &Matrix, eps: f64) -> Result<Matrix> {
    let mut out = fresh.scale(1.0 - eps);
    out.axpy(eps, old)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, ConvGeometry};

    fn factors(delta: f64, phi: Matrix, psi: Matrix) -> FisherFactors {
        FisherFactors { delta, phi, psi }
    }

    #[test]
    fn normal_plug_in() {
        let d = Matrix::from_diag(&[1.0, 0.0]);
        let (p, s) = damp_normal(&factors(4.0, d.clone(), d), 0.01);
        let want = Matrix::from_diag(&[2.1, 0.1]);
        assert!(p.frob_dist(&want).unwrap() < 1e-15);
        assert!(s.frob_dist(&want).unwrap() < 1e-15);
    }

    #[test]
    fn normal_without_damping_is_identity_map() {
        let phi = Matrix::from_rows(&[&[0.7, 0.1], &[0.1, 0.3]]);
        let psi = Matrix::from_diag(&[0.25, 0.75]);
        let (p, s) = damp_normal(&factors(1.0, phi.clone(), psi.clone()), 0.0);
        assert_eq!((p, s), (phi, psi));
    }

    #[test]
    fn normal_degenerate_falls_back_to_pure_damping() {
        let (p, s) = damp_normal(&factors(0.0, Matrix::zeros(3, 3), Matrix::zeros(2, 2)), 0.01);
        assert!(p.frob_dist(&Matrix::identity(3).scale(0.1)).unwrap() < 1e-16);
        assert!(s.frob_dist(&Matrix::identity(2).scale(0.1)).unwrap() < 1e-16);
    }

    fn conv_spec() -> LayerSpec {
        // 1 input channel, 2x2 kernel: n_{l-1}k² = 4; 2 output channels
        LayerSpec::conv(ConvGeometry::new(1, 2, 2, (3, 3), 1, 0).unwrap(), Activation::Relu)
    }

    #[test]
    fn new_conv_plug_in() {
        let f = factors(4.0, Matrix::identity(4).scale(0.25), Matrix::identity(2).scale(0.5));
        let (p, s, dt) = damp_new_conv(&f, 1.0, &conv_spec()).unwrap();
        assert_eq!(dt, 4.0);
        assert!(p.frob_dist(&Matrix::identity(4).scale(1.5)).unwrap() < 1e-15);
        assert!(s.frob_dist(&Matrix::identity(2).scale(3.0)).unwrap() < 1e-15);
    }

    #[test]
    fn new_conv_clamps_delta() {
        let f = factors(0.5, Matrix::identity(4).scale(0.25), Matrix::identity(2).scale(0.5));
        assert_eq!(damp_new_conv(&f, 1.0, &conv_spec()).unwrap().2, 1.0);
        let dense = LayerSpec::dense(4, 2, Activation::Relu);
        assert!(damp_new_conv(&f, 1.0, &dense).is_err());
    }

    #[test]
    fn new_conv_formula_at_several_deltas() {
        let phi = Matrix::identity(4).scale(0.25);
        let psi = Matrix::identity(2).scale(0.5);
        for delta in [10.0, 1e3, 1e6] {
            let (p, s, dt) = damp_new_conv(&factors(delta, phi.clone(), psi.clone()), 1.0, &conv_spec()).unwrap();
            let want_p = dt.sqrt() * 0.25 + dt / 4.0;
            let want_s = dt.sqrt() * 0.5 + dt / 2.0;
            assert!((p[(0, 0)] - want_p).abs() <= 1e-12 * want_p);
            assert!((s[(1, 1)] - want_s).abs() <= 1e-12 * want_s);
        }
    }

    #[test]
    fn beta_examples() {
        let nu: f64 = 1.0;
        let d = [2.0, 3.0];
        let dt: Vec<f64> = d.iter().map(|&x: &f64| x.max(nu)).collect();
        assert_eq!(fc_beta_expansion(&d, &dt), 1.0);
        assert_eq!(fc_beta_expansion(&[0.5, 2.0], &[1.0, 2.0]), 2.0);
        assert!((fc_beta_expansion(&[1e-3], &[1.0]) - 1000.0).abs() < 1e-9);
        assert_eq!(fc_beta_expansion(&[0.0, 2.0], &[1.0, 2.0]), 1.0);
    }

    #[test]
    fn ema_examples() {
        let fresh = Matrix::identity(2).scale(3.0);
        assert_eq!(ema_update(&Matrix::identity(2), &fresh, 0.0).unwrap(), fresh);
        assert_eq!(ema_update(&Matrix::identity(2), &fresh, 0.5).unwrap(), Matrix::identity(2).scale(2.0));
    }

    #[test]
    fn policy_validation() {
        assert!(DampingPolicy::normal(0.0).validate().is_ok());
        assert!(DampingPolicy::normal(-1.0).validate().is_err());
        assert!(DampingPolicy::new_conv(0.0).validate().is_err());
    }
}
