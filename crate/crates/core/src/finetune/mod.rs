//! Fine-tuning artifacts for a vision-language model: the hyperparameter
//! configuration, the instruction-tuning manifest, and an early-stopping
//! driver around an external trainer.
//!
//! Weight updates happen outside this crate. A [`Trainer`] receives the
//! configuration and manifest, reports validation accuracy after each epoch,
//! and returns a checkpoint locator. See `docs/trainer-protocol.md`.

mod trainer;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{io_err, DatasetError, Manifest, Split};
use crate::metrics::{category_to_binary, BinaryLabel};
use crate::prompting::{PromptError, PromptTemplate};

pub use trainer::{
    run_finetune, Control, EpochReport, ProcessTrainer, RunSummary, ScriptedTrainer, Trainer,
    TrainerCompletion, TrainerRequest,
};

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("trainer failed: {0}")]
    Trainer(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("config file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Bf16,
    Fp16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: u32,
    pub per_device_batch: u32,
    pub grad_accumulation: u32,
    pub effective_batch: u32,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub precision: Precision,
    pub vision_tower_frozen: bool,
    pub llm_trainable: bool,
    pub projector_trainable: bool,
    pub crops_per_image: u32,
    pub gradient_checkpointing: bool,
    pub tf32: bool,
    pub flash_attention_v2: bool,
    pub log_every_steps: u32,
}

/// The published recipe for fine-tuning Phi-3.5 Vision on overlay detection.
pub fn paper_default_config() -> FinetuneConfig {
    FinetuneConfig {
        epochs: 2,
        per_device_batch: 1,
        grad_accumulation: 2,
        effective_batch: 2,
        learning_rate: 2e-4,
        schedule: Schedule::Cosine,
        warmup_ratio: 0.03,
        weight_decay: 0.0,
        precision: Precision::Bf16,
        vision_tower_frozen: true,
        llm_trainable: true,
        projector_trainable: true,
        crops_per_image: 16,
        gradient_checkpointing: true,
        tf32: true,
        flash_attention_v2: false,
        log_every_steps: 1,
    }
}

impl FinetuneConfig {
    /// Every broken invariant, in field order. Empty means valid.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let positive = [
            ("epochs", self.epochs),
            ("per_device_batch", self.per_device_batch),
            ("grad_accumulation", self.grad_accumulation),
            ("effective_batch", self.effective_batch),
            ("crops_per_image", self.crops_per_image),
            ("log_every_steps", self.log_every_steps),
        ];
        for (name, value) in positive {
            if value == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        let product = u64::from(self.per_device_batch) * u64::from(self.grad_accumulation);
        if u64::from(self.effective_batch) != product {
            v.push(format!(
                "effective_batch ({}) must equal per_device_batch × grad_accumulation ({product})",
                self.effective_batch
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            v.push(format!("learning_rate ({}) must be finite and positive", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            v.push(format!("warmup_ratio ({}) must lie in [0, 1]", self.warmup_ratio));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            v.push(format!("weight_decay ({}) must be finite and non-negative", self.weight_decay));
        }
        v
    }

    /// Pretty JSON with a trailing newline; identical configs give identical bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, FinetuneError> {
        serde_json::from_str(text).map_err(|e| FinetuneError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, FinetuneError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), FinetuneError> {
        fs::write(path, self.to_json()).map_err(io_err(path))?;
        Ok(())
    }
}

pub fn validate(config: &FinetuneConfig) -> Result<(), Vec<String>> {
    let v = config.validate();
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub image_path: PathBuf,
    pub instruction: String,
    /// "yes" or "no", optionally followed by a rationale.
    pub answer: String,
}

pub fn answer_for(label: BinaryLabel) -> &'static str {
    match label {
        BinaryLabel::Positive => "yes",
        BinaryLabel::Negative => "no",
    }
}

/// One record per sample, in manifest order. Every sample must be in the
/// train split.
pub fn instruction_records(
    manifest: &Manifest,
    template: &PromptTemplate,
) -> Result<Vec<InstructionRecord>, FinetuneError> {
    if let Some(s) = manifest.samples().iter().find(|s| s.split != Split::Train) {
        return Err(FinetuneError::Contract(format!(
            "sample {} is in the {} split; training manifests take train samples only",
            s.id, s.split
        )));
    }
    let instruction = template.render(&Default::default())?;
    Ok(manifest
        .samples()
        .iter()
        .map(|s| InstructionRecord {
            image_path: s.image_path.clone(),
            instruction: instruction.clone(),
            answer: answer_for(category_to_binary(s.category)).to_string(),
        })
        .collect())
}

/// Writes the records of [`instruction_records`] as JSON lines to `out`.
pub fn emit_training_manifest(
    manifest: &Manifest,
    template: &PromptTemplate,
    out: &Path,
) -> Result<Vec<InstructionRecord>, FinetuneError> {
    let records = instruction_records(manifest, template)?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    fs::write(out, text).map_err(io_err(out))?;
    Ok(records)
}

pub const DEFAULT_PATIENCE: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_metric: Option<f64>,
    pub best_epoch: Option<u32>,
    pub patience: u32,
    pub epochs_since_best: u32,
    pub stopped: bool,
    pub last_epoch: Option<u32>,
}

impl EarlyStopState {
    pub fn new(patience: u32) -> Self {
        EarlyStopState {
            best_metric: None,
            best_epoch: None,
            patience,
            epochs_since_best: 0,
            stopped: false,
            last_epoch: None,
        }
    }
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self::new(DEFAULT_PATIENCE)
    }
}

impl fmt::Display for EarlyStopState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.best_epoch, self.best_metric) {
            (Some(e), Some(m)) => write!(
                f,
                "best {m:.4} at epoch {e}, {} epoch(s) since{}",
                self.epochs_since_best,
                if self.stopped { ", stopped" } else { "" }
            ),
            _ => f.write_str("no epochs recorded"),
        }
    }
}

/// Folds one validation result into the state. Only a strict improvement
/// resets the counter; the run stops once the counter exceeds patience.
pub fn early_stop_update(
    state: &EarlyStopState,
    epoch: u32,
    val_accuracy: f64,
) -> Result<EarlyStopState, FinetuneError> {
    if !(0.0..=1.0).contains(&val_accuracy) {
        return Err(FinetuneError::Contract(format!(
            "validation accuracy {val_accuracy} is outside [0, 1]"
        )));
    }
    if let Some(last) = state.last_epoch {
        if epoch <= last {
            return Err(FinetuneError::Contract(format!(
                "epoch {epoch} does not follow epoch {last}"
            )));
        }
    }
    let mut next = state.clone();
    next.last_epoch = Some(epoch);
    if state.best_metric.is_none_or(|best| val_accuracy > best) {
        next.best_metric = Some(val_accuracy);
        next.best_epoch = Some(epoch);
        next.epochs_since_best = 0;
    } else {
        next.epochs_since_best += 1;
        if next.epochs_since_best > next.patience {
            next.stopped = true;
        }
    }
    Ok(next)
}
