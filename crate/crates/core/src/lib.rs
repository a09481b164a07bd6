//! Cyclic fuse-and-refine (CFR) fusion for two-stream visible/thermal
//! detection, with the pieces needed to train and measure it at desk scale:
//! a small autodiff engine, a synthetic multispectral scene generator,
//! detection and consistency metrics, and an experiment harness.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cfr;
pub mod detector;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
