//! Prompt-based detection: a single zero-shot question, and a two-stage chain
//! that first extracts objects, texts and text-object relations and then asks
//! for the verdict with that description in the prompt.

mod extraction;
mod template;
mod verdict;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vlm::{ImagePayload, VlmClient, VlmError, VlmRequest};

pub use extraction::{parse_extraction, ExtractionResult, Relation, TextEntity};
pub use template::{defaults, render, PromptTemplate};
pub use verdict::{parse_finetuned_answer, parse_verdict, OverlayVerdict, StrategyKind, VerdictError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("missing binding for required placeholder {placeholder:?}")]
    Render { placeholder: String },
    #[error("template: {0}")]
    Template(String),
    #[error(transparent)]
    Vlm(#[from] VlmError),
    #[error("unparseable verdict: {0}")]
    Verdict(#[from] VerdictError),
}

impl PromptError {
    pub fn kind(&self) -> &'static str {
        match self {
            PromptError::Render { .. } | PromptError::Template(_) => "template",
            PromptError::Vlm(e) => e.kind(),
            PromptError::Verdict(_) => "verdict",
        }
    }
}

/// Templates used by the prompt-based strategies.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub zero_shot: PromptTemplate,
    pub stage1: PromptTemplate,
    pub stage2: PromptTemplate,
    pub finetuned: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            zero_shot: PromptTemplate::new("zero_shot", defaults::ZERO_SHOT),
            stage1: PromptTemplate::new("sequential_stage1", defaults::SEQUENTIAL_STAGE1),
            stage2: PromptTemplate::new("sequential_stage2", defaults::SEQUENTIAL_STAGE2),
            finetuned: PromptTemplate::new("finetuned", defaults::FINETUNED),
        }
    }
}

impl TemplateSet {
    /// Loads each template from `dir` when the file exists, else the default.
    pub fn load(dir: &Path) -> Result<Self, PromptError> {
        if !dir.is_dir() {
            return Err(PromptError::Template(format!("{} is not a directory", dir.display())));
        }
        let pick = |fallback: PromptTemplate| -> Result<PromptTemplate, PromptError> {
            if dir.join(format!("{}.txt", fallback.name)).is_file() {
                PromptTemplate::load(dir, &fallback.name)
            } else {
                Ok(fallback)
            }
        };
        let d = TemplateSet::default();
        Ok(TemplateSet {
            zero_shot: pick(d.zero_shot)?,
            stage1: pick(d.stage1)?,
            stage2: pick(d.stage2)?,
            finetuned: pick(d.finetuned)?,
        })
    }
}

/// One request/response pair in a detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub stage: String,
    pub prompt: String,
    pub response: Option<String>,
    pub error: Option<String>,
}

/// Audit record of every model call made for one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Transcript {
    pub image_id: String,
    pub exchanges: Vec<Exchange>,
    pub extraction: Option<ExtractionResult>,
    pub verdict: Option<OverlayVerdict>,
}

impl Transcript {
    pub fn new(image_id: impl Into<String>) -> Self {
        Transcript {
            image_id: image_id.into(),
            ..Default::default()
        }
    }
}

fn ask(
    client: &VlmClient,
    image: &ImagePayload,
    image_id: &str,
    stage: &str,
    prompt: String,
    transcript: &mut Transcript,
) -> Result<String, PromptError> {
    let request = VlmRequest::new(image_id, image.clone(), prompt.clone())
        .with_request_id(format!("{image_id}/{stage}"));
    let result = client.complete(&request);
    transcript.exchanges.push(Exchange {
        stage: stage.to_string(),
        prompt,
        response: result.as_ref().ok().map(|r| r.text.clone()),
        error: result.as_ref().err().map(|e| e.to_string()),
    });
    Ok(result?.text)
}

fn verdict_from(
    text: &str,
    strategy: StrategyKind,
    parse: fn(&str) -> Result<(crate::metrics::BinaryLabel, Vec<String>), VerdictError>,
    transcript: &mut Transcript,
) -> Result<OverlayVerdict, PromptError> {
    let (label, overlay) = parse(text)?;
    let verdict = OverlayVerdict::from_parsed(label, overlay, text, strategy);
    transcript.verdict = Some(verdict.clone());
    Ok(verdict)
}

/// Zero-shot detection recording into `transcript`.
pub fn detect_zero_shot_traced(
    image: &ImagePayload,
    image_id: &str,
    client: &VlmClient,
    template: &PromptTemplate,
    transcript: &mut Transcript,
) -> Result<OverlayVerdict, PromptError> {
    let prompt = template.render(&BTreeMap::new())?;
    let text = ask(client, image, image_id, "zero_shot", prompt, transcript)?;
    verdict_from(&text, StrategyKind::ZeroShot, parse_verdict, transcript)
}

pub fn detect_zero_shot(
    image: &ImagePayload,
    image_id: &str,
    client: &VlmClient,
    template: &PromptTemplate,
) -> Result<OverlayVerdict, PromptError> {
    detect_zero_shot_traced(image, image_id, client, template, &mut Transcript::new(image_id))
}

/// Asks a fine-tuned checkpoint served behind `client`.
pub fn detect_finetuned_traced(
    image: &ImagePayload,
    image_id: &str,
    client: &VlmClient,
    template: &PromptTemplate,
    transcript: &mut Transcript,
) -> Result<OverlayVerdict, PromptError> {
    let prompt = template.render(&BTreeMap::new())?;
    let text = ask(client, image, image_id, "finetuned", prompt, transcript)?;
    verdict_from(&text, StrategyKind::Finetuned, parse_finetuned_answer, transcript)
}

pub fn extract_scene_traced(
    image: &ImagePayload,
    image_id: &str,
    client: &VlmClient,
    template: &PromptTemplate,
    transcript: &mut Transcript,
) -> Result<ExtractionResult, PromptError> {
    let prompt = template.render(&BTreeMap::new())?;
    let text = ask(client, image, image_id, "stage1", prompt, transcript)?;
    let extraction = parse_extraction(&text, image_id);
    transcript.extraction = Some(extraction.clone());
    Ok(extraction)
}

/// Stage 1 alone. Transport errors propagate; parse trouble only sets
/// `malformed`.
pub fn extract_scene(
    image: &ImagePayload,
    image_id: &str,
    client: &VlmClient,
    template: &PromptTemplate,
) -> Result<ExtractionResult, PromptError> {
    extract_scene_traced(image, image_id, client, template, &mut Transcript::new(image_id))
}

/// Placeholder names the stage-2 template must declare.
pub const STAGE2_PLACEHOLDERS: [&str; 3] = ["objects", "texts", "relations"];

/// Bindings for the stage-2 template; `scene` holds the whole block.
pub fn stage2_bindings(extraction: &ExtractionResult) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("objects".to_string(), extraction.objects_section()),
        ("texts".to_string(), extraction.texts_section()),
        ("relations".to_string(), extraction.relations_section()),
        ("scene".to_string(), extraction.to_block()),
    ])
}

pub fn detect_sequential_traced(
    image: &ImagePayload,
    image_id: &str,
    client: &VlmClient,
    stage1: &PromptTemplate,
    stage2: &PromptTemplate,
    transcript: &mut Transcript,
) -> Result<(OverlayVerdict, ExtractionResult), PromptError> {
    let placeholders = stage2.placeholders();
    if let Some(missing) = STAGE2_PLACEHOLDERS.iter().find(|p| !placeholders.contains(*p)) {
        return Err(PromptError::Template(format!(
            "stage-2 template {:?} lacks placeholder {{{missing}}}",
            stage2.name
        )));
    }
    let extraction = extract_scene_traced(image, image_id, client, stage1, transcript)?;
    let prompt = stage2.render(&stage2_bindings(&extraction))?;
    let text = ask(client, image, image_id, "stage2", prompt, transcript)?;
    let verdict = verdict_from(&text, StrategyKind::Sequential, parse_verdict, transcript)?;
    Ok((verdict, extraction))
}

/// Two-stage chain; both requests carry the same image payload.
pub fn detect_sequential(
    image: &ImagePayload,
    image_id: &str,
    client: &VlmClient,
    stage1: &PromptTemplate,
    stage2: &PromptTemplate,
) -> Result<(OverlayVerdict, ExtractionResult), PromptError> {
    detect_sequential_traced(image, image_id, client, stage1, stage2, &mut Transcript::new(image_id))
}
