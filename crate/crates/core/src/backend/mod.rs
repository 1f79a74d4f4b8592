//! Completion, scoring and fine-tuning backends.
//!
//! The pipeline only talks to [`ModelBackend`] and [`TrainerBackend`] trait
//! objects. Implementations:
//!
//! - [`MockBackend`] / [`MockTrainer`]: deterministic, scripted; every
//!   end-to-end test runs on these.
//! - [`HttpBackend`] / [`HttpTrainer`]: a minimal JSON request/response
//!   protocol (`/v1/complete`, `/v1/score`, `/v1/finetune`).
//! - [`OpenAiCompatBackend`]: adapter to the widely deployed
//!   `/v1/completions` API shape.
//!
//! [`Registry`] resolves the backend names used in run configs.

mod http;
mod mock;
mod registry;
mod trainer;

pub use http::{HttpBackend, HttpTrainer, HttpTransportConfig, OpenAiCompatBackend, RetryPolicy};
pub use mock::{MockBackend, MockRule, MockSampling, MockScript, MockScoreRule};
pub use registry::{BackendSpec, Registry, TrainerSpec};
pub use trainer::{
    poll, submit_finetune, wait_for_job, Hyperparams, JobStatus, MockTrainer, MockTrainerOutcome,
    SweepDomain, TrainerBackend, TrainerJob,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("server returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
    #[error("mock backend: {0}")]
    Mock(String),
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub num_samples: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    /// Honoured by the mock backend only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            num_samples: 30,
            temperature: 0.8,
            max_tokens: 512,
            stop_sequences: Vec::new(),
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.num_samples == 0 {
            return Err(BackendError::InvalidRequest("num_samples must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringResponse {
    pub token_logprobs: Vec<f64>,
    pub token_count: usize,
}

impl ScoringResponse {
    pub fn new(token_logprobs: Vec<f64>) -> Self {
        let token_count = token_logprobs.len();
        ScoringResponse {
            token_logprobs,
            token_count,
        }
    }

    pub fn total_logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }
}

/// A completion model, optionally able to score text.
pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, BackendError>;

    fn score(&self, _request: &ScoringRequest) -> Result<ScoringResponse, BackendError> {
        Err(BackendError::Unsupported("scoring"))
    }
}

/// Validated completion: exactly `num_samples` results or an error.
pub fn complete(
    backend: &dyn ModelBackend,
    request: &CompletionRequest,
) -> Result<Vec<String>, BackendError> {
    request.validate()?;
    let completions = backend.complete(request)?;
    if completions.len() != request.num_samples as usize {
        return Err(BackendError::Protocol(format!(
            "{} returned {} completions, expected {}",
            backend.name(),
            completions.len(),
            request.num_samples
        )));
    }
    Ok(completions)
}

pub fn score(
    backend: &dyn ModelBackend,
    request: &ScoringRequest,
) -> Result<ScoringResponse, BackendError> {
    if request.text.is_empty() {
        return Err(BackendError::InvalidRequest("text must be non-empty".into()));
    }
    let response = backend.score(request)?;
    if response.token_count == 0 || response.token_count != response.token_logprobs.len() {
        return Err(BackendError::Protocol(format!(
            "token_count {} does not match {} log-probabilities",
            response.token_count,
            response.token_logprobs.len()
        )));
    }
    if response.token_logprobs.iter().any(|lp| !lp.is_finite()) {
        return Err(BackendError::Protocol("non-finite log-probability".into()));
    }
    Ok(response)
}

/// Truncates `text` at the earliest occurrence of any stop sequence.
pub fn apply_stop_sequences<'a>(text: &'a str, stops: &[String]) -> &'a str {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}
