//! Specialized multi-task optimizers, a small differentiable network to train
//! them on, evaluation metrics and an experiment harness.

// `!(x > 0.0)` style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregators;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod problems;
pub mod rotation;
pub mod weighters;

pub use error::{Error, Result};
