//! Binary overlay-vs-not metrics.
//!
//! Ground truth comes in three categories; only `overlay` maps to the
//! positive class. Natural scene text is a negative.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Category;

/// Binary decision. `Positive` means an artificial overlay is present.
///
/// Variant order gives `Positive > Negative`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    Negative,
    Positive,
}

impl BinaryLabel {
    pub fn is_positive(self) -> bool {
        self == BinaryLabel::Positive
    }

    pub fn flipped(self) -> Self {
        match self {
            BinaryLabel::Positive => BinaryLabel::Negative,
            BinaryLabel::Negative => BinaryLabel::Positive,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("predictions ({predictions}) and truths ({truths}) differ in length")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("cannot compute metrics over zero samples")]
    Empty,
}

/// The single fixed mapping from annotation category to binary label.
pub fn category_to_binary(category: Category) -> BinaryLabel {
    match category {
        Category::Overlay => BinaryLabel::Positive,
        Category::Natural | Category::None => BinaryLabel::Negative,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, prediction: BinaryLabel, truth: BinaryLabel) {
        match (prediction, truth) {
            (BinaryLabel::Positive, BinaryLabel::Positive) => self.tp += 1,
            (BinaryLabel::Positive, BinaryLabel::Negative) => self.fp += 1,
            (BinaryLabel::Negative, BinaryLabel::Positive) => self.fn_ += 1,
            (BinaryLabel::Negative, BinaryLabel::Negative) => self.tn += 1,
        }
    }
}

/// Counts the four cells over paired predictions and truths.
pub fn confusion(
    predictions: &[BinaryLabel],
    truths: &[BinaryLabel],
) -> Result<ConfusionMatrix, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut matrix = ConfusionMatrix::default();
    for (&p, &t) in predictions.iter().zip(truths) {
        matrix.record(p, t);
    }
    Ok(matrix)
}

/// Precision, recall and accuracy for one confusion matrix.
///
/// `precision` and `recall` are `None` when their denominator is zero; the
/// report renders them as "—".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: f64,
    pub matrix: ConfusionMatrix,
    pub n: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn summarize(matrix: ConfusionMatrix) -> Result<MetricReport, MetricsError> {
    let n = matrix.total();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(MetricReport {
        precision: ratio(matrix.tp, matrix.tp + matrix.fp),
        recall: ratio(matrix.tp, matrix.tp + matrix.fn_),
        accuracy: (matrix.tp + matrix.tn) as f64 / n as f64,
        matrix,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use BinaryLabel::{Negative as N, Positive as P};

    #[test]
    fn category_mapping() {
        assert_eq!(category_to_binary(Category::Overlay), P);
        assert_eq!(category_to_binary(Category::Natural), N);
        assert_eq!(category_to_binary(Category::None), N);
    }

    #[test]
    fn label_order() {
        assert!(P > N);
        let mut v = vec![P, N, P, N];
        v.sort();
        assert_eq!(v, vec![N, N, P, P]);
    }

    #[test]
    fn identity_predictor() {
        let truths = [P, P, P, N, N, N];
        let m = confusion(&truths, &truths).unwrap();
        assert_eq!(m, ConfusionMatrix { tp: 3, fp: 0, fn_: 0, tn: 3 });
        let r = summarize(m).unwrap();
        assert_eq!((r.precision, r.recall, r.accuracy), (Some(1.0), Some(1.0), 1.0));
    }

    #[test]
    fn mixed_predictor() {
        let truths = [P, P, P, N, N, N];
        let preds = [P, P, N, P, N, N];
        let m = confusion(&preds, &truths).unwrap();
        assert_eq!(m, ConfusionMatrix { tp: 2, fp: 1, fn_: 1, tn: 2 });
        let r = summarize(m).unwrap();
        assert_eq!(r.precision, Some(2.0 / 3.0));
        assert_eq!(r.recall, Some(2.0 / 3.0));
        assert_eq!(r.accuracy, 4.0 / 6.0);
        assert_eq!(r.n, 6);
    }

    #[test]
    fn all_negative_predictor() {
        let m = confusion(&[N, N, N, N], &[P, N, P, N]).unwrap();
        assert_eq!(m, ConfusionMatrix { tp: 0, fp: 0, fn_: 2, tn: 2 });
        let r = summarize(m).unwrap();
        assert_eq!(r.precision, None);
        assert_eq!(r.recall, Some(0.0));
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn contract_errors() {
        assert_eq!(
            confusion(&[P], &[P, N]),
            Err(MetricsError::LengthMismatch { predictions: 1, truths: 2 })
        );
        assert_eq!(confusion(&[], &[]), Err(MetricsError::Empty));
        assert_eq!(summarize(ConfusionMatrix::default()), Err(MetricsError::Empty));
    }

    #[test]
    fn matrix_serializes_fn_field() {
        let json = serde_json::to_string(&ConfusionMatrix { tp: 1, fp: 2, fn_: 3, tn: 4 }).unwrap();
        assert_eq!(json, r#"{"tp":1,"fp":2,"fn":3,"tn":4}"#);
    }

    fn label() -> impl Strategy<Value = BinaryLabel> {
        prop_oneof![Just(P), Just(N)]
    }

    proptest! {
        #[test]
        fn permutation_invariant(pairs in prop::collection::vec((label(), label()), 1..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (p, t): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let before = confusion(&p, &t).unwrap();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (p2, t2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
            prop_assert_eq!(before, confusion(&p2, &t2).unwrap());
        }

        #[test]
        fn complement_accuracies_sum_to_one(pairs in prop::collection::vec((label(), label()), 1..40)) {
            let (p, t): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let flipped: Vec<_> = p.iter().map(|l| l.flipped()).collect();
            let a = summarize(confusion(&p, &t).unwrap()).unwrap().accuracy;
            let b = summarize(confusion(&flipped, &t).unwrap()).unwrap().accuracy;
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn defined_values_in_unit_interval(pairs in prop::collection::vec((label(), label()), 1..40)) {
            let (p, t): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let r = summarize(confusion(&p, &t).unwrap()).unwrap();
            for v in [r.precision, r.recall, Some(r.accuracy)].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(r.n, p.len() as u64);
        }
    }
}
