//! Minimal reverse-mode automatic differentiation on shape-tagged f64
//! tensors, sized for the channel-map renderer and its training loop.
//!
//! Complex quantities are modeled as paired real/imaginary tensors
//! ([`CVar`]); [`gradcheck`] provides the finite-difference harness used by
//! the downstream gradient-integrity tests.

mod complex;
mod gradcheck;
mod tape;
mod tensor;

pub use complex::CVar;
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{concat_cols, concat_rows, BackwardError, Tape, Var};
pub use tensor::Tensor;
