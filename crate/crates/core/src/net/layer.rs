use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the pre-activation `x`. ReLU'(0) = 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Whether a constant-1 input is appended to every parametric layer, which
/// folds the bias into the last column of `W_l`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMode {
    #[default]
    None,
    Homogeneous,
}

impl BiasMode {
    pub fn extra(self) -> usize {
        match self {
            BiasMode::None => 0,
            BiasMode::Homogeneous => 1,
        }
    }
}

/// 2-D convolution geometry. Activations are stored channel-fastest: entry
/// `(c, y, x)` of a sample sits at `c + channels * (y * width + x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        (in_height, in_width): (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let g = Self { in_channels, out_channels, kernel, in_height, in_width, stride, padding };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidGeometry(format!("channels, kernel and stride must be positive: {self:?}")));
        }
        if self.in_height == 0 || self.in_width == 0 {
            return Err(Error::InvalidGeometry("empty input image".into()));
        }
        if self.kernel > self.in_height + 2 * self.padding || self.kernel > self.in_width + 2 * self.padding {
            return Err(Error::InvalidGeometry(format!(
                "kernel {} larger than padded input {}x{}",
                self.kernel,
                self.in_height + 2 * self.padding,
                self.in_width + 2 * self.padding
            )));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Number of output spatial locations `o`.
    pub fn locations(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Rows of the im2col matrix, `n_in · k²`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn in_features(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    pub fn out_features(&self) -> usize {
        self.out_channels * self.locations()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LayerKind {
    Dense {
        in_width: usize,
        out_width: usize,
    },
    Conv(ConvGeometry),
    /// Parameter-free elementwise activation over `width` features.
    ActivationOnly {
        width: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(in_width: usize, out_width: usize, activation: Activation) -> Self {
        Self { kind: LayerKind::Dense { in_width, out_width }, activation }
    }

    pub fn conv(geometry: ConvGeometry, activation: Activation) -> Self {
        Self { kind: LayerKind::Conv(geometry), activation }
    }

    pub fn activation_only(width: usize, activation: Activation) -> Self {
        Self { kind: LayerKind::ActivationOnly { width }, activation }
    }

    pub fn is_parametric(&self) -> bool {
        !matches!(self.kind, LayerKind::ActivationOnly { .. })
    }

    pub fn in_features(&self) -> usize {
        match self.kind {
            LayerKind::Dense { in_width, .. } => in_width,
            LayerKind::Conv(g) => g.in_features(),
            LayerKind::ActivationOnly { width } => width,
        }
    }

    pub fn out_features(&self) -> usize {
        match self.kind {
            LayerKind::Dense { out_width, .. } => out_width,
            LayerKind::Conv(g) => g.out_features(),
            LayerKind::ActivationOnly { width } => width,
        }
    }

    /// Spatial locations per sample (1 for dense layers).
    pub fn locations(&self) -> usize {
        match self.kind {
            LayerKind::Conv(g) => g.locations(),
            _ => 1,
        }
    }

    /// Columns of `W_l` before any bias column: `m_{l-1}` or `n_{l-1} k²`.
    pub fn weight_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense { in_width, .. } => in_width,
            LayerKind::Conv(g) => g.patch_len(),
            LayerKind::ActivationOnly { .. } => 0,
        }
    }

    /// Rows of `W_l`: `m_l` or `n_l`.
    pub fn weight_out(&self) -> usize {
        match self.kind {
            LayerKind::Dense { out_width, .. } => out_width,
            LayerKind::Conv(g) => g.out_channels,
            LayerKind::ActivationOnly { .. } => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LayerKind::Dense { in_width, out_width } if in_width == 0 || out_width == 0 => {
                Err(Error::DimensionMismatch("dense layer widths must be positive".into()))
            }
            LayerKind::Conv(g) => g.validate(),
            LayerKind::ActivationOnly { width: 0 } => {
                Err(Error::DimensionMismatch("activation width must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}
