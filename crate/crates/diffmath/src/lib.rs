//! Deterministic reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every executed operation in creation order; calling
//! [`Tape::backward`] on a scalar replays the record in reverse and
//! accumulates gradients into leaves created with `requires_grad`.
//! All loops run in a fixed order, so identical inputs give bit-identical
//! values and gradients.

mod error;
pub mod gradcheck;
pub mod remap;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use remap::IndexMap;
pub use tape::{BinaryOp, Conv2dSpec, Operand, PadMode, ReduceOp, Tape, UnaryOp, Var};
pub use tensor::Tensor;
