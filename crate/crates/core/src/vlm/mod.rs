//! Vision-language model endpoint access.
//!
//! A [`VlmClient`] wraps one [`Transport`] (the scripted [`MockTransport`] or
//! the remote [`HttpTransport`]) and adds precondition checks, bounded
//! exponential-backoff retries and an in-flight cap.

mod http;
mod mock;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{EndpointConfig, HttpTransport, WIRE_SCHEMA_VERSION};
pub use mock::{
    load_script, parse_script, FailureKind, MockTransport, RecordedCall, ScriptAction,
    ScriptError, ScriptRule, ScriptedBehavior,
};

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Png,
    Jpeg,
    Unknown,
}

impl ImageFormat {
    /// Sniffs the magic bytes.
    pub fn detect(bytes: &[u8]) -> Self {
        if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
            ImageFormat::Png
        } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
            ImageFormat::Jpeg
        } else {
            ImageFormat::Unknown
        }
    }
}

/// Encoded image bytes, passed by value across the client boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub bytes: Arc<[u8]>,
    pub format: ImageFormat,
}

impl ImagePayload {
    pub fn new(bytes: impl Into<Arc<[u8]>>) -> Self {
        let bytes = bytes.into();
        let format = ImageFormat::detect(&bytes);
        ImagePayload { bytes, format }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmRequest {
    pub image_id: String,
    pub image: ImagePayload,
    pub prompt: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub request_id: String,
}

impl VlmRequest {
    /// Temperature 0, [`DEFAULT_MAX_OUTPUT_TOKENS`], request id derived from the image id.
    pub fn new(image_id: impl Into<String>, image: ImagePayload, prompt: impl Into<String>) -> Self {
        let image_id = image_id.into();
        VlmRequest {
            request_id: image_id.clone(),
            image_id,
            image,
            prompt: prompt.into(),
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            temperature: 0.0,
        }
    }

    pub fn with_request_id(mut self, id: impl Into<String>) -> Self {
        self.request_id = id.into();
        self
    }

    fn check(&self) -> Result<(), VlmError> {
        if self.prompt.is_empty() {
            return Err(VlmError::InvalidRequest("prompt is empty".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(VlmError::InvalidRequest(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(VlmError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmResponse {
    /// Raw model output, byte for byte.
    pub text: String,
    pub latency: Duration,
    pub truncated: bool,
}

/// Outcome of a single attempt, before retry policy is applied.
#[derive(Debug, Clone, PartialEq)]
pub enum AttemptError {
    Timeout(String),
    Connection(String),
    RateLimited { retry_after: Option<Duration> },
    Protocol { message: String, raw: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("rate limited on all {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("protocol error: {message}")]
    Protocol { message: String, raw: String },
    #[error("configuration: {0}")]
    Config(String),
}

impl VlmError {
    /// Short tag for prediction records.
    pub fn kind(&self) -> &'static str {
        match self {
            VlmError::InvalidRequest(_) => "invalid_request",
            VlmError::Transport { .. } => "transport",
            VlmError::RateLimited { .. } => "rate_limited",
            VlmError::Protocol { .. } => "protocol",
            VlmError::Config(_) => "config",
        }
    }
}

/// One attempt against an endpoint. Implementations must be reentrant.
pub trait Transport: Send + Sync {
    fn send(&self, request: &VlmRequest) -> Result<VlmResponse, AttemptError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 2,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// No sleeping; used with the scripted mock.
    pub fn immediate(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    /// Delay before retry number `retry` (1-based): `base * 2^(retry-1)`, capped.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Thread-safe client; share it behind `&` or `Arc`.
pub struct VlmClient {
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    in_flight: Semaphore,
}

impl VlmClient {
    pub fn new(transport: Arc<dyn Transport>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        VlmClient {
            transport,
            retry,
            in_flight: Semaphore::new(max_in_flight),
        }
    }

    pub fn retry_policy(&self) -> &RetryPolicy {
        &self.retry
    }

    /// Sends `request`, retrying transient failures. At most
    /// `1 + max_retries` attempts are made.
    pub fn complete(&self, request: &VlmRequest) -> Result<VlmResponse, VlmError> {
        request.check()?;
        let attempts = 1 + self.retry.max_retries;
        let mut last_transport = None;
        for attempt in 1..=attempts {
            let outcome = {
                let _permit = self.in_flight.acquire();
                self.transport.send(request)
            };
            let wait = match outcome {
                Ok(response) => return Ok(response),
                Err(AttemptError::Protocol { message, raw }) => {
                    return Err(VlmError::Protocol { message, raw })
                }
                Err(AttemptError::Timeout(m)) | Err(AttemptError::Connection(m)) => {
                    log::debug!("attempt {attempt}/{attempts} for {} failed: {m}", request.request_id);
                    last_transport = Some(m);
                    self.retry.backoff(attempt)
                }
                Err(AttemptError::RateLimited { retry_after }) => {
                    log::debug!("attempt {attempt}/{attempts} for {} rate limited", request.request_id);
                    last_transport = None;
                    self.retry.backoff(attempt).max(retry_after.unwrap_or_default())
                }
            };
            if attempt < attempts && !wait.is_zero() {
                std::thread::sleep(wait);
            }
        }
        Err(match last_transport {
            Some(message) => VlmError::Transport { attempts, message },
            None => VlmError::RateLimited { attempts },
        })
    }
}
