//! Dense tensors, a reverse-mode tape, and a finite-difference oracle.

mod finite_diff;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff_gradient, relative_error, DEFAULT_STEP};
pub use tape::{evaluate, Binary, CustomBackward, ExpertPart, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;

/// Stabiliser inside every square root of a norm.
pub const NORM_EPS: f64 = 1e-12;

/// Stabiliser inside RMS normalisation.
pub const RMS_EPS: f64 = 1e-8;

#[cfg(test)]
mod tests;
