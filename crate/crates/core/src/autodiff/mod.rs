//! Dense arrays with define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh each iteration. Every op appends a node holding
//! its output value; [`Tape::backward`] sweeps the nodes once in reverse and
//! returns a [`Gradients`] store keyed by [`Var`]. Shapes are never
//! broadcast: mismatches are configuration errors.

mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use kernels::{bilinear_axis, conv_output_size};
pub use scalar::Real;
pub use tape::{BinaryKind, CustomBackward, Gradients, Tape, Var};
pub use tensor::Tensor;
