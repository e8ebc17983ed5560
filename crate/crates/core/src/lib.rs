//! Semi-supervised segmentation with adaptive, per-image pseudo-label
//! selection through positive-unlabeled (PU) learning.
//!
//! The pipeline has four stages:
//!
//! 1. supervised pre-training of a segmentation network ([`net`]);
//! 2. confidence-thresholded pseudo-labels on unlabeled images ([`pseudo`]);
//! 3. per-image PU learning on frozen features to add background
//!    pseudo-labels ([`pu`]);
//! 4. re-training on labeled data plus all pseudo-labels ([`retrain`]).
//!
//! [`eval`] scores the result (Dice, or centerline tracing coverage for
//! heatmap targets) and [`pipeline`] wires the stages together with on-disk
//! caching.

pub mod data;
pub mod error;
pub mod eval;
pub mod net;
pub mod pipeline;
pub mod pseudo;
pub mod pu;
pub mod retrain;
pub mod seed;

pub use error::{Error, Result};
