//! Reverse-mode differentiation over small dense tensors.
//!
//! Everything is `f64`. Tapes are immutable once built; evaluation allocates
//! its own value buffers, so a single tape can be evaluated from several
//! threads at once.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod check;
mod error;
mod kernels;
mod tape;
mod tensor;

pub use check::{finite_difference_check, GradientCheck};
pub use error::{Result, TapeError};
pub use tape::{Bindings, Forward, Op, Tape, Var};
pub use tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    kernels::sigmoid(x)
}
