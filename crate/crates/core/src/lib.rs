//! Multimodal contrastive time-series forecasting.
//!
//! Each lookback window is seen twice: as per-variate line-chart images and
//! as sequences of patch tokens. The two views are aligned with a
//! bidirectional InfoNCE objective, the aligned language class token selects
//! variate-level context through cross-attention, and a flatten + linear head
//! produces the forecast.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod lang;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod select;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
