//! WiFi-fingerprint indoor localization with a convolutional auto-encoder
//! feature extractor and a CNN grid-cell classifier.
//!
//! Pipeline: [`datasets`] (CSV ingestion, normalization, radio images) →
//! [`gridding`] (cells and classes) → [`model`] (two-stage training on the
//! [`nn`] engine) → [`quant`] (float16/int8) → [`eval`] (metrics, sweeps,
//! KNN baseline, latency).

pub mod container;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod gridding;
pub mod model;
pub mod nn;
pub mod quant;
pub mod synth;

pub use error::{Error, Result};
