//! Tape-based reverse-mode automatic differentiation over `f64` tensors.
//!
//! Only the operations the classifier and the dreaming objectives need are
//! provided. Values are recorded on a [`Tape`] as they are computed;
//! [`Tape::backward`] replays the record in reverse and accumulates
//! gradients on every node that requires one.

mod gradcheck;
mod nn;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use nn::{softmax, BatchNormMode, RunningStats, BN_EPS};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
