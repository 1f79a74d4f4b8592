//! HTTP transports: the native request/response protocol and an adapter for
//! the common `/v1/completions` API shape.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::trainer::{Hyperparams, TrainerBackend, TrainerJob};
use super::{
    apply_stop_sequences, BackendError, CompletionRequest, ModelBackend, ScoringRequest,
    ScoringResponse,
};
use crate::pipeline::FineTuneExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            initial_backoff_ms: 250,
            max_backoff_ms: 8_000,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = self.multiplier.max(1.0).powi(retry.saturating_sub(1) as i32);
        let ms = (self.initial_backoff_ms as f64 * factor).min(self.max_backoff_ms as f64);
        Duration::from_millis(ms as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpTransportConfig {
    pub base_url: String,
    /// Name of the environment variable holding a bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout_secs() -> f64 {
    120.0
}

fn default_in_flight() -> usize {
    8
}

impl HttpTransportConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpTransportConfig {
            base_url: base_url.into(),
            api_key_env: None,
            timeout_secs: default_timeout_secs(),
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlightGate {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct GatePass<'a>(&'a InFlightGate);

impl InFlightGate {
    fn new(limit: usize) -> Self {
        InFlightGate {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn enter(&self) -> GatePass<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        GatePass(self)
    }
}

impl Drop for GatePass<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug)]
struct Transport {
    client: Client,
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    gate: InFlightGate,
}

enum Attempt<T> {
    Done(T),
    Retry(String),
}

impl Transport {
    fn new(config: &HttpTransportConfig) -> Result<Self, BackendError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let timeout = Duration::try_from_secs_f64(config.timeout_secs)
            .map_err(|e| BackendError::Config(format!("timeout_secs: {e}")))?;
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Transport {
            client,
            base_url: config.base_url.trim_end_matches('/').to_string(),
            api_key,
            retry: config.retry.clone(),
            gate: InFlightGate::new(config.max_in_flight),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url, path)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, BackendError> {
        let url = self.url(path);
        let payload = serde_json::to_string(body)
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        tracing::debug!(
            %url,
            authorization = if self.api_key.is_some() { "Bearer <redacted>" } else { "none" },
            body = %payload,
            "POST"
        );
        self.send(&url, || {
            self.client
                .post(&url)
                .header("content-type", "application/json")
                .body(payload.clone())
        })
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, BackendError> {
        let url = self.url(path);
        tracing::debug!(%url, "GET");
        self.send(&url, || self.client.get(&url))
    }

    fn send<T: DeserializeOwned>(
        &self,
        url: &str,
        build: impl Fn() -> RequestBuilder,
    ) -> Result<T, BackendError> {
        let attempts = self.retry.max_attempts.max(1);
        let mut last_error = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                let delay = self.retry.backoff(attempt - 1);
                tracing::warn!(%url, attempt, ?delay, error = %last_error, "retrying request");
                thread::sleep(delay);
            }
            match self.attempt(build())? {
                Attempt::Done(value) => return Ok(value),
                Attempt::Retry(message) => last_error = message,
            }
        }
        Err(BackendError::Transport {
            attempts,
            message: last_error,
        })
    }

    fn attempt<T: DeserializeOwned>(&self, mut request: RequestBuilder) -> Result<Attempt<T>, BackendError> {
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let _pass = self.gate.enter();
        let response = match request.send() {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        let status = response.status();
        let body = match response.text() {
            Ok(b) => b,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        tracing::debug!(status = status.as_u16(), body = %body, "response");
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Ok(Attempt::Retry(format!("HTTP {}: {}", status.as_u16(), body)));
        }
        if !status.is_success() {
            return Err(BackendError::Http {
                status: status.as_u16(),
                body,
            });
        }
        serde_json::from_str(&body)
            .map(Attempt::Done)
            .map_err(|e| BackendError::Protocol(format!("{e}: {body}")))
    }
}

#[derive(Deserialize)]
struct CompleteResponse {
    completions: Vec<String>,
}

/// Client for the native completion / scoring protocol.
///
/// `POST /v1/complete` takes the [`CompletionRequest`] fields plus `model`
/// and answers `{"completions": [...]}`; `POST /v1/score` takes
/// `{"model", "text"}` and answers a [`ScoringResponse`].
#[derive(Debug)]
pub struct HttpBackend {
    name: String,
    model: Option<String>,
    transport: Transport,
}

impl HttpBackend {
    pub fn new(
        name: impl Into<String>,
        model: Option<String>,
        config: &HttpTransportConfig,
    ) -> Result<Self, BackendError> {
        Ok(HttpBackend {
            name: name.into(),
            model,
            transport: Transport::new(config)?,
        })
    }
}

impl ModelBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        let mut body = serde_json::to_value(request)
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        body["model"] = json!(self.model);
        let resp: CompleteResponse = self.transport.post("/v1/complete", &body)?;
        Ok(resp.completions)
    }

    fn score(&self, request: &ScoringRequest) -> Result<ScoringResponse, BackendError> {
        self.transport
            .post("/v1/score", &json!({ "model": self.model, "text": request.text }))
    }
}

#[derive(Deserialize)]
struct OpenAiChoice {
    #[serde(default)]
    index: u32,
    text: String,
    #[serde(default)]
    logprobs: Option<OpenAiLogprobs>,
}

#[derive(Deserialize)]
struct OpenAiLogprobs {
    token_logprobs: Vec<Option<f64>>,
}

#[derive(Deserialize)]
struct OpenAiResponse {
    choices: Vec<OpenAiChoice>,
}

/// The API accepts at most this many stop sequences; the rest are applied
/// client-side.
const OPENAI_MAX_STOPS: usize = 4;

/// Adapter for `/v1/completions`-style servers.
#[derive(Debug)]
pub struct OpenAiCompatBackend {
    name: String,
    model: String,
    transport: Transport,
}

impl OpenAiCompatBackend {
    pub fn new(
        name: impl Into<String>,
        model: impl Into<String>,
        config: &HttpTransportConfig,
    ) -> Result<Self, BackendError> {
        Ok(OpenAiCompatBackend {
            name: name.into(),
            model: model.into(),
            transport: Transport::new(config)?,
        })
    }
}

impl ModelBackend for OpenAiCompatBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        let mut body = json!({
            "model": self.model,
            "prompt": request.prompt,
            "n": request.num_samples,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if !request.stop_sequences.is_empty() {
            let stops: Vec<&String> = request.stop_sequences.iter().take(OPENAI_MAX_STOPS).collect();
            body["stop"] = json!(stops);
        }
        let resp: OpenAiResponse = self.transport.post("/v1/completions", &body)?;
        let mut choices = resp.choices;
        choices.sort_by_key(|c| c.index);
        Ok(choices
            .iter()
            .map(|c| apply_stop_sequences(&c.text, &request.stop_sequences).to_string())
            .collect())
    }

    fn score(&self, request: &ScoringRequest) -> Result<ScoringResponse, BackendError> {
        let body = json!({
            "model": self.model,
            "prompt": request.text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let resp: OpenAiResponse = self.transport.post("/v1/completions", &body)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("no choices in scoring response".into()))?;
        let logprobs = choice
            .logprobs
            .ok_or_else(|| BackendError::Protocol("scoring response lacks logprobs".into()))?;
        // The first echoed token has no conditional probability.
        Ok(ScoringResponse::new(
            logprobs.token_logprobs.into_iter().flatten().collect(),
        ))
    }
}

/// Fine-tuning service client: `POST /v1/finetune`, `GET /v1/finetune/{id}`.
#[derive(Debug)]
pub struct HttpTrainer {
    name: String,
    transport: Transport,
}

impl HttpTrainer {
    pub fn new(name: impl Into<String>, config: &HttpTransportConfig) -> Result<Self, BackendError> {
        Ok(HttpTrainer {
            name: name.into(),
            transport: Transport::new(config)?,
        })
    }
}

impl TrainerBackend for HttpTrainer {
    fn name(&self) -> &str {
        &self.name
    }

    fn submit(
        &self,
        dataset_ref: &str,
        examples: &[FineTuneExample],
        hyperparams: &Hyperparams,
    ) -> Result<TrainerJob, BackendError> {
        self.transport.post(
            "/v1/finetune",
            &json!({
                "dataset_ref": dataset_ref,
                "examples": examples,
                "hyperparams": hyperparams,
            }),
        )
    }

    fn poll(&self, job: &TrainerJob) -> Result<TrainerJob, BackendError> {
        self.transport.get(&format!("/v1/finetune/{}", job.id))
    }
}
