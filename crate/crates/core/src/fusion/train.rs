use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{accumulate, predict, FusionInput, TrainRecord};
use super::params::{FusionDims, FusionParams};
use super::raster::Raster;
use super::tokens::OcrToken;
use super::FusionError;
use crate::metrics::BinaryLabel;
use crate::prompting::{OverlayVerdict, StrategyKind};

/// Probabilities at or above this are classified positive.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub dims: FusionDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 0.05,
            seed: 0,
            batch_size: 1,
            dims: FusionDims::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss of each example, measured just before its update.
    pub loss: f64,
    /// Training accuracy of those same pre-update predictions.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: FusionParams,
    pub trace: Vec<EpochStats>,
}

/// Plain SGD with seed-fixed initialization and shuffling. Single-threaded.
pub fn train(records: &[TrainRecord], config: &TrainConfig) -> Result<TrainOutcome, FusionError> {
    train_with(records, config, |_| {})
}

/// [`train`] with a per-epoch callback.
pub fn train_with(
    records: &[TrainRecord],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, FusionError> {
    config.dims.validate()?;
    if config.batch_size == 0 {
        return Err(FusionError::Config("batch_size must be at least 1".into()));
    }
    if !config.learning_rate.is_finite() || config.learning_rate < 0.0 {
        return Err(FusionError::Config("learning_rate must be finite and non-negative".into()));
    }
    let positives = records.iter().filter(|r| r.label.is_positive()).count();
    if records.len() < 2 || positives == 0 || positives == records.len() {
        return Err(FusionError::SingleClass);
    }

    let mut params = FusionParams::init(&config.dims, config.seed);
    let inputs = records
        .iter()
        .map(|r| FusionInput::prepare(&params, &r.tokens, &r.image))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_5F_F1E);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut grad = FusionParams::zeros(&config.dims);
    let mut losses = vec![0.0; records.len()];
    let mut correct = vec![false; records.len()];
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grad.zero_();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let label = records[i].label;
                let (loss, p) = accumulate(&params, &inputs[i], label, scale, &mut grad);
                losses[i] = loss;
                correct[i] = (p >= DECISION_THRESHOLD) == label.is_positive();
            }
            params.add_scaled(&grad, -config.learning_rate);
        }
        let n = records.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: losses.iter().sum::<f64>() / n,
            accuracy: correct.iter().filter(|&&c| c).count() as f64 / n,
        };
        on_epoch(&stats);
        trace.push(stats);
    }
    Ok(TrainOutcome { params, trace })
}

/// Thresholds a probability into a fusion verdict; ties go positive.
pub fn verdict_from_probability(probability: f64) -> OverlayVerdict {
    let positive = probability >= DECISION_THRESHOLD;
    OverlayVerdict {
        label: if positive {
            BinaryLabel::Positive
        } else {
            BinaryLabel::Negative
        },
        confidence: if positive { probability } else { 1.0 - probability },
        overlay_texts: Vec::new(),
        evidence: format!("fusion probability {probability:.6}"),
        strategy: StrategyKind::Fusion,
    }
}

pub fn detect_fusion(
    params: &FusionParams,
    tokens: &[OcrToken],
    image: &Raster,
) -> Result<OverlayVerdict, FusionError> {
    Ok(verdict_from_probability(predict(params, tokens, image)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn threshold_rule() {
        let v = verdict_from_probability(0.91);
        assert_eq!(v.label, BinaryLabel::Positive);
        assert_relative_eq!(v.confidence, 0.91);
        let v = verdict_from_probability(0.5);
        assert_eq!(v.label, BinaryLabel::Positive);
        assert_eq!(v.confidence, 0.5);
        let v = verdict_from_probability(0.12);
        assert_eq!(v.label, BinaryLabel::Negative);
        assert_relative_eq!(v.confidence, 0.88, epsilon = 1e-12);
        assert_eq!(v.strategy, StrategyKind::Fusion);
    }
}
