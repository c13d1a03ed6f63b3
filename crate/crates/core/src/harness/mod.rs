//! Runs a detection strategy over an evaluation manifest, scores the
//! predictions and renders comparison tables.

mod report;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{io_err, Category, DatasetError, ImageSample, Manifest, Split};
use crate::fusion::{detect_fusion, load_sample, FusionParams};
use crate::metrics::{category_to_binary, confusion, summarize, BinaryLabel, MetricReport, MetricsError};
use crate::prompting::{
    detect_finetuned_traced, detect_sequential_traced, detect_zero_shot_traced, OverlayVerdict,
    PromptTemplate, StrategyKind, Transcript,
};
use crate::vlm::{ImagePayload, VlmClient};

pub use report::{
    compare, render_report, ComparisonReport, ReportFormat, ReportRow, RunMetadata,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("manifest has no samples to evaluate")]
    EmptyManifest,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("nothing to score: every record is an error and the policy excludes errors")]
    NothingToScore,
    #[error("reports cover different datasets: {0} vs {1}")]
    FingerprintMismatch(String, String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("report file: {0}")]
    Parse(String),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// A strategy together with everything it needs to run.
#[derive(Clone, Copy)]
pub enum Strategy<'a> {
    ZeroShot {
        client: &'a VlmClient,
        template: &'a PromptTemplate,
    },
    Sequential {
        client: &'a VlmClient,
        stage1: &'a PromptTemplate,
        stage2: &'a PromptTemplate,
    },
    Fusion {
        params: &'a FusionParams,
    },
    Finetuned {
        client: &'a VlmClient,
        template: &'a PromptTemplate,
    },
}

impl Strategy<'_> {
    pub fn kind(&self) -> StrategyKind {
        match self {
            Strategy::ZeroShot { .. } => StrategyKind::ZeroShot,
            Strategy::Sequential { .. } => StrategyKind::Sequential,
            Strategy::Fusion { .. } => StrategyKind::Fusion,
            Strategy::Finetuned { .. } => StrategyKind::Finetuned,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorTag {
    /// Short machine tag such as `transport`, `verdict` or `io`.
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub strategy: StrategyKind,
    pub verdict: Option<OverlayVerdict>,
    pub truth_category: Category,
    pub truth_binary: BinaryLabel,
    pub error: Option<ErrorTag>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub parallelism: usize,
    /// Keep a per-image transcript of every model exchange.
    pub trace: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            parallelism: 1,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub records: Vec<PredictionRecord>,
    /// Present when tracing; one per sample, in manifest order.
    pub transcripts: Option<Vec<Transcript>>,
}

fn tag(kind: &str, message: impl ToString) -> ErrorTag {
    ErrorTag {
        kind: kind.to_string(),
        message: message.to_string(),
    }
}

fn detect_one(strategy: &Strategy, sample: &ImageSample, transcript: &mut Transcript) -> Result<OverlayVerdict, ErrorTag> {
    if let Strategy::Fusion { params } = strategy {
        let (tokens, raster) = load_sample(sample, &params.dims).map_err(|e| tag("input", e))?;
        let verdict = detect_fusion(params, &tokens, &raster).map_err(|e| tag("input", e))?;
        transcript.verdict = Some(verdict.clone());
        return Ok(verdict);
    }
    let bytes = fs::read(&sample.image_path)
        .map_err(|e| tag("io", format!("{}: {e}", sample.image_path.display())))?;
    let image = ImagePayload::new(bytes);
    let id = sample.id.as_str();
    let result = match *strategy {
        Strategy::ZeroShot { client, template } => detect_zero_shot_traced(&image, id, client, template, transcript),
        Strategy::Sequential { client, stage1, stage2 } => {
            detect_sequential_traced(&image, id, client, stage1, stage2, transcript).map(|(v, _)| v)
        }
        Strategy::Finetuned { client, template } => detect_finetuned_traced(&image, id, client, template, transcript),
        Strategy::Fusion { .. } => unreachable!(),
    };
    result.map_err(|e| tag(e.kind(), e))
}

/// Runs `strategy` over every sample with up to `parallelism` detections in
/// flight. Records come back in manifest order; per-sample failures become
/// error records.
pub fn evaluate(manifest: &Manifest, strategy: Strategy, options: EvalOptions) -> Result<Evaluation, HarnessError> {
    if manifest.is_empty() {
        return Err(HarnessError::EmptyManifest);
    }
    if options.parallelism == 0 {
        return Err(HarnessError::Contract("parallelism must be at least 1".into()));
    }
    if let Some(s) = manifest.samples().iter().find(|s| s.split != Split::Eval) {
        return Err(HarnessError::Contract(format!(
            "sample {} is in the {} split; evaluation takes eval samples only",
            s.id, s.split
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallelism)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let kind = strategy.kind();
    let outcomes: Vec<(PredictionRecord, Transcript)> = pool.install(|| {
        manifest
            .samples()
            .par_iter()
            .map(|sample| {
                let mut transcript = Transcript::new(&sample.id);
                let result = detect_one(&strategy, sample, &mut transcript);
                if let Err(e) = &result {
                    log::warn!("{}: {} error: {}", sample.id, e.kind, e.message);
                }
                let (verdict, error) = match result {
                    Ok(v) => (Some(v), None),
                    Err(e) => (None, Some(e)),
                };
                let record = PredictionRecord {
                    image_id: sample.id.clone(),
                    strategy: kind,
                    verdict,
                    truth_category: sample.category,
                    truth_binary: category_to_binary(sample.category),
                    error,
                };
                (record, transcript)
            })
            .collect()
    });
    let (records, transcripts): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    Ok(Evaluation {
        records,
        transcripts: options.trace.then_some(transcripts),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorPolicy {
    /// An unanswered image counts as "no overlay detected".
    #[default]
    CountAsNegative,
    Exclude,
}

impl std::str::FromStr for ErrorPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "count_as_negative" => Ok(ErrorPolicy::CountAsNegative),
            "exclude" => Ok(ErrorPolicy::Exclude),
            other => Err(format!("unknown error policy {other:?} (expected count_as_negative or exclude)")),
        }
    }
}

pub fn score(records: &[PredictionRecord], policy: ErrorPolicy) -> Result<MetricReport, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::Contract("no records to score".into()));
    }
    let (predictions, truths): (Vec<BinaryLabel>, Vec<BinaryLabel>) = records
        .iter()
        .filter_map(|r| match (&r.verdict, policy) {
            (Some(v), _) => Some((v.label, r.truth_binary)),
            (None, ErrorPolicy::CountAsNegative) => Some((BinaryLabel::Negative, r.truth_binary)),
            (None, ErrorPolicy::Exclude) => None,
        })
        .unzip();
    if predictions.is_empty() {
        return Err(HarnessError::NothingToScore);
    }
    Ok(summarize(confusion(&predictions, &truths)?)?)
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Content hash of a manifest file.
pub fn fingerprint_file(path: &Path) -> Result<String, HarnessError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), HarnessError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), HarnessError> {
    write_jsonl(path, records)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| HarnessError::Parse(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_transcripts(path: &Path, transcripts: &[Transcript]) -> Result<(), HarnessError> {
    write_jsonl(path, transcripts)
}
