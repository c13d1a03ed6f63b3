//! Scripted stand-in for a vision-language endpoint.
//!
//! Script files are JSON:
//!
//! ```json
//! {
//!   "rules": [
//!     {"prompt_contains": "Identify all text", "image_id": "img1", "response": "OBJECTS:\n..."},
//!     {"image_id": "img7", "error": "timeout"},
//!     {"prompt_contains": "overlay", "error": "rate_limit", "times": 1, "then": "ANSWER: no"}
//!   ],
//!   "default": {"response": "ANSWER: no"}
//! }
//! ```
//!
//! The first rule whose matchers all hold wins. `prompt_contains` is a
//! substring test; `image_id` is exact. A rule with neither matches everything.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use super::{AttemptError, Transport, VlmRequest, VlmResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Timeout,
    RateLimit,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptAction {
    Respond(String),
    /// Fail `times` attempts per distinct (image id, prompt), then respond
    /// with `then`. `times = None` fails forever.
    Fail {
        kind: FailureKind,
        times: Option<u32>,
        then: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptRule {
    pub prompt_contains: Option<String>,
    pub image_id: Option<String>,
    pub action: ScriptAction,
}

impl ScriptRule {
    fn matches(&self, prompt: &str, image_id: &str) -> bool {
        self.prompt_contains
            .as_deref()
            .is_none_or(|needle| prompt.contains(needle))
            && self.image_id.as_deref().is_none_or(|id| id == image_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedBehavior {
    pub rules: Vec<ScriptRule>,
    pub default: ScriptAction,
}

impl ScriptedBehavior {
    pub fn always(text: impl Into<String>) -> Self {
        ScriptedBehavior {
            rules: Vec::new(),
            default: ScriptAction::Respond(text.into()),
        }
    }

    pub fn with_rule(
        mut self,
        prompt_contains: Option<&str>,
        image_id: Option<&str>,
        action: ScriptAction,
    ) -> Self {
        self.rules.push(ScriptRule {
            prompt_contains: prompt_contains.map(String::from),
            image_id: image_id.map(String::from),
            action,
        });
        self
    }

    /// The matching rule index (`None` for the default) and its action.
    pub fn resolve(&self, prompt: &str, image_id: &str) -> (Option<usize>, &ScriptAction) {
        self.rules
            .iter()
            .enumerate()
            .find(|(_, r)| r.matches(prompt, image_id))
            .map(|(i, r)| (Some(i), &r.action))
            .unwrap_or((None, &self.default))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScriptError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("script is not valid JSON: {0}")]
    Syntax(String),
    #[error("rule {index}: {message}")]
    Rule { index: usize, message: String },
    #[error("default: {0}")]
    Default(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAction {
    #[serde(default)]
    prompt_contains: Option<String>,
    #[serde(default)]
    image_id: Option<String>,
    #[serde(default)]
    response: Option<String>,
    #[serde(default)]
    error: Option<FailureKind>,
    #[serde(default)]
    times: Option<u32>,
    #[serde(default)]
    then: Option<String>,
}

impl RawAction {
    fn into_action(self) -> Result<ScriptAction, String> {
        match (self.response, self.error) {
            (Some(_), Some(_)) => Err("has both `response` and `error`".into()),
            (None, None) => Err("needs `response` or `error`".into()),
            (Some(text), None) => {
                if self.times.is_some() || self.then.is_some() {
                    Err("`times`/`then` only apply to `error`".into())
                } else {
                    Ok(ScriptAction::Respond(text))
                }
            }
            (None, Some(kind)) => {
                if self.times.is_some() != self.then.is_some() {
                    return Err("`times` and `then` must be given together".into());
                }
                Ok(ScriptAction::Fail {
                    kind,
                    times: self.times,
                    then: self.then,
                })
            }
        }
    }
}

#[derive(Deserialize)]
struct RawScript {
    #[serde(default)]
    rules: Vec<serde_json::Value>,
    default: serde_json::Value,
}

pub fn parse_script(text: &str) -> Result<ScriptedBehavior, ScriptError> {
    let raw: RawScript = serde_json::from_str(text).map_err(|e| ScriptError::Syntax(e.to_string()))?;
    let mut rules = Vec::with_capacity(raw.rules.len());
    for (index, value) in raw.rules.into_iter().enumerate() {
        let rule_err = |message: String| ScriptError::Rule { index, message };
        let action: RawAction = serde_json::from_value(value).map_err(|e| rule_err(e.to_string()))?;
        let prompt_contains = action.prompt_contains.clone();
        let image_id = action.image_id.clone();
        rules.push(ScriptRule {
            prompt_contains,
            image_id,
            action: action.into_action().map_err(rule_err)?,
        });
    }
    let default: RawAction =
        serde_json::from_value(raw.default).map_err(|e| ScriptError::Default(e.to_string()))?;
    if default.prompt_contains.is_some() || default.image_id.is_some() {
        return Err(ScriptError::Default("the default takes no matchers".into()));
    }
    let default = default.into_action().map_err(ScriptError::Default)?;
    Ok(ScriptedBehavior { rules, default })
}

pub fn load_script(path: &Path) -> Result<ScriptedBehavior, ScriptError> {
    let text = fs::read_to_string(path).map_err(|e| ScriptError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_script(&text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedCall {
    pub image_id: String,
    pub prompt: String,
    pub request_id: String,
    pub image: Vec<u8>,
}

#[derive(Default)]
struct MockState {
    calls: Vec<RecordedCall>,
    failures: HashMap<(Option<usize>, String, String), u32>,
}

/// Deterministic, reentrant transport driven by a [`ScriptedBehavior`].
pub struct MockTransport {
    behavior: ScriptedBehavior,
    state: Mutex<MockState>,
}

impl MockTransport {
    pub fn new(behavior: ScriptedBehavior) -> Self {
        MockTransport {
            behavior,
            state: Mutex::new(MockState::default()),
        }
    }

    pub fn behavior(&self) -> &ScriptedBehavior {
        &self.behavior
    }

    pub fn call_count(&self) -> usize {
        self.state.lock().unwrap().calls.len()
    }

    /// Every attempt received, in arrival order.
    pub fn calls(&self) -> Vec<RecordedCall> {
        self.state.lock().unwrap().calls.clone()
    }
}

fn respond(text: &str) -> Result<VlmResponse, AttemptError> {
    Ok(VlmResponse {
        text: text.to_string(),
        latency: Duration::ZERO,
        truncated: false,
    })
}

impl Transport for MockTransport {
    fn send(&self, request: &VlmRequest) -> Result<VlmResponse, AttemptError> {
        let mut state = self.state.lock().unwrap();
        state.calls.push(RecordedCall {
            image_id: request.image_id.clone(),
            prompt: request.prompt.clone(),
            request_id: request.request_id.clone(),
            image: request.image.bytes.to_vec(),
        });
        let (rule, action) = self.behavior.resolve(&request.prompt, &request.image_id);
        match action {
            ScriptAction::Respond(text) => respond(text),
            ScriptAction::Fail { kind, times, then } => {
                let key = (rule, request.image_id.clone(), request.prompt.clone());
                let seen = state.failures.entry(key).or_insert(0);
                if let (Some(limit), Some(text)) = (times, then) {
                    if *seen >= *limit {
                        return respond(text);
                    }
                }
                *seen += 1;
                Err(match kind {
                    FailureKind::Timeout => AttemptError::Timeout("scripted timeout".into()),
                    FailureKind::RateLimit => AttemptError::RateLimited { retry_after: None },
                    FailureKind::Malformed => AttemptError::Protocol {
                        message: "scripted malformed reply".into(),
                        raw: String::from("{\"unexpected\": true}"),
                    },
                })
            }
        }
    }
}
