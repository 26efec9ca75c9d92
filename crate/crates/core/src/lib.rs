//! Trace-restricted Kronecker-factored approximate curvature (TKFAC).
//!
//! The crate is organized bottom-up:
//!
//! * [`matrix`], [`kron`], [`linalg`]: dense column-major linear algebra plus
//!   the Kronecker operators (`kron`, `vec`, partial trace, commutation).
//! * [`net`]: dense/conv networks with backprop that records per-sample
//!   layer inputs and pre-activation derivatives ([`net::BatchTrace`]).
//! * [`fisher`]: exact per-layer Fisher blocks and the TKFAC / KFAC factors.
//! * [`optim`]: damping, moving averages, the natural-gradient step and the
//!   training loop, plus SGDM/Adam baselines.
//! * [`analysis`]: approximation errors, their upper bounds and the
//!   spatial-decorrelation diagnostic for conv layers.
//! * [`data`], [`config`], [`experiment`]: datasets, configuration and the
//!   experiment runner behind the `tkfac` binary.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fisher;
pub mod kron;
pub mod linalg;
pub mod matrix;
pub mod net;
pub mod optim;
pub mod verify;

pub use error::{Error, Result};
pub use matrix::Matrix;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RngStream {
    Init = 0,
    Batches = 1,
    Labels = 2,
    Analysis = 3,
    Data = 4,
}

pub fn seeded_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
