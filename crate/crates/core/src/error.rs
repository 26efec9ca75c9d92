use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is singular: factorization failed with jitter {jitter:e}")]
    Singular { jitter: f64 },

    #[error("invalid convolution geometry: {0}")]
    InvalidGeometry(String),

    #[error("layer {layer} is not a {expected} layer")]
    LayerKind { layer: usize, expected: &'static str },

    #[error("degenerate Fisher block at layer {layer} (delta = {delta:e})")]
    DegenerateBlock { layer: usize, delta: f64 },

    #[error("stale inverse for layer {layer}: computed at iteration {computed_at:?}, now {now}, interval {interval}")]
    StaleInverse { layer: usize, computed_at: Option<usize>, now: usize, interval: usize },

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("Fisher block of layer {layer} has dimension {dim}, above the cap of {cap}")]
    CapExceeded { layer: usize, dim: usize, cap: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::DimensionMismatch(msg.into()))
}
