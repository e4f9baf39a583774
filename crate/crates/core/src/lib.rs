//! Pseudolabeling for vision-language embeddings with concept alignment and a
//! confusion-aware calibrated margin.
//!
//! Everything operates on precomputed, unit-norm image and text embeddings:
//!
//! - [`dataset`]: on-disk format and learning-paradigm splits
//! - [`kmeans`], [`linalg`]: deterministic numeric kernels
//! - [`mismatch`]: detection of classes whose text feature misses their images
//! - [`align`]: enhanced descriptions and the initial pseudolabel set
//! - [`margin`]: the calibrated margin and its loss
//! - [`model`], [`train`]: residual adapters and the fine-tuning loop
//! - [`eval`]: accuracy, balance and calibration metrics
//! - [`synth`]: planted-structure datasets for verification

pub mod align;
pub mod config;
pub mod dataset;
mod error;
pub mod eval;
pub mod kmeans;
pub mod linalg;
pub mod margin;
pub mod mismatch;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
