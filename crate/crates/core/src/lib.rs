//! Double-uncertainty weighted Mean Teacher for semi-supervised segmentation.
//!
//! The crate carries its own small tape autodiff, a 2-D U-Net, MC-dropout
//! uncertainty estimation, the losses and training loop, segmentation
//! metrics and a synthetic data generator.

// Negated comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod format;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod segnet;
pub mod tensor;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
