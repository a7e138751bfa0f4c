//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use tape::{argmax, BackwardRule, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::matmul_nn;

#[cfg(test)]
mod tests;
