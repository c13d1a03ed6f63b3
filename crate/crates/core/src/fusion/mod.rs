//! Fused OCR-text / token-geometry / image classifier, trained from scratch.
//!
//! Two gated recurrent encoders fold the character sequence and the
//! per-token positional vectors; a three-layer stride-2 convolution stack
//! encodes the raster. The three feature vectors are concatenated and fed
//! to a single affine unit squashed by the logistic function.

pub mod checkpoint;
mod model;
mod params;
mod raster;
mod tokens;
mod train;

use thiserror::Error;

pub use model::{
    batch_loss, bce, forward, loss_and_grad, loss_and_grad_prepared, predict, FusionInput,
    TrainRecord, PROB_CLAMP,
};
pub use params::{ConvParams, FusionDims, FusionParams, GruParams, Tensor};
pub use raster::Raster;
pub use tokens::{
    encode_positions, reading_order, symbol_index, text_symbols, OcrToken, PositionalFeature,
    POSITION_DIM, VOCAB_SIZE,
};
pub use train::{
    detect_fusion, train, train_with, verdict_from_probability, EpochStats, TrainConfig,
    TrainOutcome, DECISION_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("token {index}: {reason}")]
    InvalidToken { index: usize, reason: String },
    #[error("tensor {tensor} has shape {found:?}, expected {expected:?}")]
    Shape {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training needs at least two records covering both labels")]
    SingleClass,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("image: {0}")]
    Image(String),
    #[error("io: {0}")]
    Io(String),
}

/// Loads a sample's raster and its OCR sidecar (`<image>.tokens`).
pub fn load_sample(
    sample: &crate::dataset::ImageSample,
    dims: &FusionDims,
) -> Result<(Vec<OcrToken>, Raster), FusionError> {
    let (raster, (w, h)) = Raster::load(&sample.image_path, dims.image_side)?;
    let sidecar = crate::dataset::sidecar_path(&sample.image_path);
    let tokens = crate::dataset::read_sidecar(&sidecar)
        .map_err(|e| FusionError::Io(e.to_string()))?
        .iter()
        .map(|t| OcrToken::from_sidecar(t, w, h))
        .collect();
    Ok((tokens, raster))
}

/// Training records for every sample, loaded in parallel, in input order.
pub fn load_records(
    samples: &[crate::dataset::ImageSample],
    dims: &FusionDims,
) -> Result<Vec<TrainRecord>, FusionError> {
    use rayon::prelude::*;
    samples
        .par_iter()
        .map(|s| {
            let (tokens, image) = load_sample(s, dims)?;
            Ok(TrainRecord {
                tokens,
                image,
                label: crate::metrics::category_to_binary(s.category),
            })
        })
        .collect()
}
