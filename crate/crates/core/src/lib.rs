//! Detection toolkit for artificially overlaid text in images.
//!
//! Four strategies share one evaluation harness:
//!
//! - [`fusion`]: a from-scratch classifier fusing OCR text, token geometry and
//!   image features (two gated recurrent encoders plus a small conv stack).
//! - [`prompting`]: zero-shot and two-stage sequential prompting of a
//!   vision-language model reached through [`vlm`].
//! - [`finetune`]: configuration, instruction manifest and early-stopping
//!   driver for fine-tuning a vision-language model with an external trainer.
//! - [`harness`]: runs any strategy over an evaluation manifest and renders
//!   comparison tables using [`metrics`].
//!
//! [`dataset`] loads annotated manifests and generates a seeded synthetic
//! corpus with ground-truth OCR sidecars.

pub mod dataset;
pub mod finetune;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod prompting;
pub mod vlm;

pub use dataset::{Category, ImageSample, Manifest, Split};
pub use metrics::{BinaryLabel, ConfusionMatrix, MetricReport};
