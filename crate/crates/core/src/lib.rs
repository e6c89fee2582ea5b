//! Activation maximization for univariate time-series classifiers.
//!
//! The crate trains a small 1D convolutional ResNet, generates inputs that
//! drive it toward chosen class activations (plain regularized ascent,
//! target matching with Adam, and the smoothness-regularized descent used by
//! [`dreamer::sequence_dream`]), and scores the generated series against the
//! training distribution with Mahalanobis distances and a PCA projection.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod classifier;
pub mod dataset;
pub mod dreamer;
pub mod error;
pub mod evaluator;
pub mod harness;
pub mod optim;

pub use error::{Error, Result};
