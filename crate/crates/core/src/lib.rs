//! Learned probabilistic shaping for nonlinear fiber channels.
//!
//! An autoregressive LSTM encoder emits conditional symbol distributions over
//! a square QAM constellation. Sequences are drawn with Gumbel-softmax and a
//! straight-through estimator, scaled to unit average power, pushed through a
//! differentiable first-order perturbation model of a fiber span, and scored
//! by a fixed Gaussian bit-wise demapper. Training minimises the binary cross
//! entropy minus the encoder entropy, i.e. maximises the bit-metric achievable
//! information rate. A frozen encoder is deployed through an exactly
//! invertible arithmetic distribution matcher.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the split-step
//! Fourier reference channel and the command line front end live in the
//! companion `nps` crate.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod autodiff;
pub mod channel;
pub mod constellation;
pub mod demapper;
pub mod encoder;
pub mod error;
pub mod matcher;
pub mod math;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
