//! Remote endpoint adapter. Wire format is described in `docs/vlm-wire-protocol.md`.

use std::path::Path;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{AttemptError, RetryPolicy, Transport, VlmError, VlmRequest, VlmResponse};

pub const WIRE_SCHEMA_VERSION: u32 = 1;

/// Endpoint configuration file (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default = "default_path")]
    pub path: String,
    #[serde(default)]
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_max_backoff_ms")]
    pub max_backoff_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_path() -> String {
    "/v1/complete".into()
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_max_backoff_ms() -> u64 {
    8_000
}
fn default_max_in_flight() -> usize {
    4
}

impl EndpointConfig {
    pub fn load(path: &Path) -> Result<Self, VlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VlmError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| VlmError::Config(format!("{}: {e}", path.display())))
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay: Duration::from_millis(self.backoff_ms),
            max_delay: Duration::from_millis(self.max_backoff_ms),
        }
    }

    pub fn url(&self) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), self.path)
    }
}

#[derive(Serialize)]
struct WireImage<'a> {
    format: super::ImageFormat,
    base64: &'a str,
}

#[derive(Serialize)]
struct WireGeneration {
    max_output_tokens: u32,
    temperature: f64,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    schema_version: u32,
    request_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    prompt: &'a str,
    image: WireImage<'a>,
    generation: WireGeneration,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
    #[serde(default)]
    truncated: bool,
}

pub struct HttpTransport {
    config: EndpointConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    /// Reads the token variable now; a missing variable is a configuration error.
    pub fn new(config: EndpointConfig) -> Result<Self, VlmError> {
        let token = match &config.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                VlmError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build();
        Ok(HttpTransport {
            config,
            token,
            agent: ureq::Agent::new_with_config(agent_config),
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }
}

/// Builds the JSON body for one request.
pub(crate) fn wire_body(request: &VlmRequest, model: Option<&str>) -> serde_json::Value {
    let encoded = base64::engine::general_purpose::STANDARD.encode(&request.image.bytes);
    serde_json::to_value(WireRequest {
        schema_version: WIRE_SCHEMA_VERSION,
        request_id: &request.request_id,
        model,
        prompt: &request.prompt,
        image: WireImage {
            format: request.image.format,
            base64: &encoded,
        },
        generation: WireGeneration {
            max_output_tokens: request.max_output_tokens,
            temperature: request.temperature,
        },
    })
    .expect("request serializes")
}

impl Transport for HttpTransport {
    fn send(&self, request: &VlmRequest) -> Result<VlmResponse, AttemptError> {
        let started = Instant::now();
        let body = wire_body(request, self.config.model.as_deref());
        let mut call = self.agent.post(&self.config.url());
        if let Some(token) = &self.token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = match call.send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(t)) => return Err(AttemptError::Timeout(t.to_string())),
            Err(e) => return Err(AttemptError::Connection(e.to_string())),
        };
        let status = response.status().as_u16();
        let retry_after = response
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let raw = match response.body_mut().read_to_string() {
            Ok(s) => s,
            Err(ureq::Error::Timeout(t)) => return Err(AttemptError::Timeout(t.to_string())),
            Err(e) => return Err(AttemptError::Connection(e.to_string())),
        };
        match status {
            200..=299 => {}
            429 => return Err(AttemptError::RateLimited { retry_after }),
            408 | 500..=599 => {
                return Err(AttemptError::Connection(format!("HTTP {status}")));
            }
            _ => {
                return Err(AttemptError::Protocol {
                    message: format!("HTTP {status}"),
                    raw,
                })
            }
        }
        let parsed: WireResponse = serde_json::from_str(&raw).map_err(|e| AttemptError::Protocol {
            message: format!("reply is not a valid response object: {e}"),
            raw: raw.clone(),
        })?;
        Ok(VlmResponse {
            text: parsed.text,
            latency: started.elapsed(),
            truncated: parsed.truncated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlm::ImagePayload;

    #[test]
    fn config_defaults_and_url() {
        let c: EndpointConfig = serde_json::from_str(r#"{"base_url":"http://host:9/"}"#).unwrap();
        assert_eq!(c.url(), "http://host:9/v1/complete");
        assert_eq!(c.max_retries, 3);
        assert!(serde_json::from_str::<EndpointConfig>(r#"{"base_url":"x","extra":1}"#).is_err());
    }

    #[test]
    fn body_carries_base64_image_and_generation() {
        let req = VlmRequest::new("id1", ImagePayload::new(vec![0x89, b'P', b'N', b'G']), "hello");
        let body = wire_body(&req, Some("phi"));
        assert_eq!(body["schema_version"], 1);
        assert_eq!(body["model"], "phi");
        assert_eq!(body["prompt"], "hello");
        assert_eq!(body["image"]["format"], "png");
        assert_eq!(body["image"]["base64"], "iVBORw==");
        assert_eq!(body["generation"]["temperature"], 0.0);
        assert_eq!(body["generation"]["max_output_tokens"], 512);
    }

    #[test]
    fn missing_token_variable_is_config_error() {
        let c = EndpointConfig {
            token_env: Some("OVERLAYDETECT_TEST_TOKEN_THAT_IS_NOT_SET".into()),
            ..serde_json::from_str(r#"{"base_url":"http://localhost:1"}"#).unwrap()
        };
        assert!(matches!(HttpTransport::new(c), Err(VlmError::Config(_))));
    }
}
