//! HTTP access to inference servers.
//!
//! Two wire formats are supported: an Ollama-style `/api/generate` endpoint
//! and an OpenAI-style `/v1/chat/completions` endpoint. Prompts are always
//! sent as a single user turn.

mod clock;
pub mod stub;

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use clock::{Clock, FixedClock, Mark, SystemClock};

pub const BACKEND_DEFAULT_TEMPERATURE: f64 = 0.8;
pub const BACKEND_DEFAULT_TOP_K: u32 = 40;
pub const BACKEND_DEFAULT_TOP_P: f64 = 0.9;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid sampling parameter {name} = {value}")]
    InvalidSampling { name: &'static str, value: String },
    #[error("invalid model config `{model}`: {detail}")]
    InvalidConfig { model: String, detail: String },
    #[error("endpoint {url} unreachable: {detail}")]
    Unreachable { url: String, detail: String },
    #[error("model not available: `{tag}` is not served by {url}")]
    ModelNotAvailable { tag: String, url: String },
    #[error("HTTP {status} from {url}")]
    Http { status: u16, url: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected response shape: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamSource {
    ModelCard,
    BackendDefault,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tagged<T> {
    pub value: T,
    pub source: ParamSource,
}

/// Sampling values published on a model card; absent ones fall back to the
/// backend defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplingCard {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: Tagged<f64>,
    pub top_k: Tagged<u32>,
    pub top_p: Tagged<f64>,
}

fn tag<T>(card: Option<T>, default: T) -> Tagged<T> {
    match card {
        Some(value) => Tagged {
            value,
            source: ParamSource::ModelCard,
        },
        None => Tagged {
            value: default,
            source: ParamSource::BackendDefault,
        },
    }
}

pub fn resolve_sampling_params(card: &SamplingCard) -> Result<SamplingParams, GatewayError> {
    if let Some(t) = card.temperature {
        if !(t.is_finite() && t >= 0.0) {
            return Err(GatewayError::InvalidSampling {
                name: "temperature",
                value: t.to_string(),
            });
        }
    }
    if let Some(p) = card.top_p {
        if !(p > 0.0 && p <= 1.0) {
            return Err(GatewayError::InvalidSampling {
                name: "top_p",
                value: p.to_string(),
            });
        }
    }
    if card.top_k == Some(0) {
        return Err(GatewayError::InvalidSampling {
            name: "top_k",
            value: "0".into(),
        });
    }
    Ok(SamplingParams {
        temperature: tag(card.temperature, BACKEND_DEFAULT_TEMPERATURE),
        top_k: tag(card.top_k, BACKEND_DEFAULT_TOP_K),
        top_p: tag(card.top_p, BACKEND_DEFAULT_TOP_P),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Generate,
    Chat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    /// Base URL, e.g. `http://127.0.0.1:11434`.
    pub url: String,
    #[serde(default)]
    pub protocol: Protocol,
}

impl Endpoint {
    fn join(&self, path: &str) -> String {
        format!("{}{path}", self.url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Display name used in tables, e.g. "Qwen 3".
    pub name: String,
    /// The tag the server knows the model by, e.g. `qwen3:32b`.
    pub version_tag: String,
    pub parameter_count: u64,
    /// Quantisation level, e.g. `Q4_K_M`.
    #[serde(default)]
    pub quantisation: String,
    /// Quantisation method or format, e.g. `GGUF k-quant`.
    #[serde(default)]
    pub quantisation_method: String,
    #[serde(default)]
    pub sampling: SamplingCard,
    pub endpoint: Endpoint,
    #[serde(default)]
    pub reasoning_model: bool,
    /// Expected server-side digest; a mismatch is reported as a warning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<SamplingParams, GatewayError> {
        let invalid = |detail: &str| GatewayError::InvalidConfig {
            model: self.name.clone(),
            detail: detail.into(),
        };
        if self.name.trim().is_empty() {
            return Err(invalid("empty name"));
        }
        if self.version_tag.trim().is_empty() {
            return Err(invalid("empty version_tag"));
        }
        if self.parameter_count == 0 {
            return Err(invalid("parameter_count must be positive"));
        }
        if self.endpoint.url.trim().is_empty() {
            return Err(invalid("empty endpoint url"));
        }
        resolve_sampling_params(&self.sampling)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 500,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Sleep before attempt `next` (2-based).
    pub fn backoff(&self, next: u32) -> Duration {
        let factor = 1u64.checked_shl(next.saturating_sub(2)).unwrap_or(u64::MAX);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub fingerprint: String,
    pub raw_output: String,
    /// Sum of the attempt durations, backoff sleeps excluded.
    pub duration_ns: u64,
    pub output_chars: usize,
    pub attempts: u32,
    pub completed_at: String,
}

impl QueryRecord {
    pub fn duration_s(&self) -> f64 {
        self.duration_ns as f64 / 1e9
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub fingerprint: String,
    pub error: String,
    pub attempts: u32,
    pub duration_ns: u64,
    pub completed_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthReport {
    pub model: String,
    pub server_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Request path and JSON body for one prompt.
pub fn request_body(model: &ModelConfig, sampling: &SamplingParams, prompt: &str) -> (&'static str, Value) {
    match model.endpoint.protocol {
        Protocol::Generate => (
            "/api/generate",
            json!({
                "model": model.version_tag,
                "prompt": prompt,
                "options": {
                    "temperature": sampling.temperature.value,
                    "top_k": sampling.top_k.value,
                    "top_p": sampling.top_p.value,
                },
                "stream": false,
            }),
        ),
        Protocol::Chat => (
            "/v1/chat/completions",
            json!({
                "model": model.version_tag,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": sampling.temperature.value,
                "top_p": sampling.top_p.value,
                "top_k": sampling.top_k.value,
                "stream": false,
            }),
        ),
    }
}

/// Pulls the generated text out of a response body. Reasoning returned in a
/// separate field is folded back in as a `<think>` span so output volume
/// counts it.
pub fn response_text(protocol: Protocol, body: &Value) -> Result<String, GatewayError> {
    let with_thinking = |thinking: Option<&str>, text: &str| match thinking {
        Some(t) if !t.is_empty() => format!("<think>{t}</think>{text}"),
        _ => text.to_owned(),
    };
    match protocol {
        Protocol::Generate => {
            let text = body
                .get("response")
                .and_then(Value::as_str)
                .ok_or_else(|| GatewayError::Protocol("missing `response`".into()))?;
            Ok(with_thinking(body.get("thinking").and_then(Value::as_str), text))
        }
        Protocol::Chat => {
            let msg = body
                .pointer("/choices/0/message")
                .ok_or_else(|| GatewayError::Protocol("missing `choices[0].message`".into()))?;
            let text = msg
                .get("content")
                .and_then(Value::as_str)
                .ok_or_else(|| GatewayError::Protocol("missing message content".into()))?;
            let thinking = msg
                .get("reasoning_content")
                .or_else(|| msg.get("reasoning"))
                .and_then(Value::as_str);
            Ok(with_thinking(thinking, text))
        }
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            permits: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore lock");
        while *p == 0 {
            p = self.freed.wait(p).expect("semaphore lock");
        }
        *p -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore lock") += 1;
        self.0.freed.notify_one();
    }
}

/// Shared client. Safe to use from several workers; in-flight requests per
/// endpoint are bounded by `concurrency_per_endpoint`.
pub struct Gateway {
    agent: ureq::Agent,
    clock: Arc<dyn Clock>,
    concurrency_per_endpoint: usize,
    semaphores: Mutex<HashMap<String, Arc<Semaphore>>>,
}

impl Gateway {
    pub fn new(clock: Arc<dyn Clock>, timeout: Duration, concurrency_per_endpoint: usize) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Gateway {
            agent: ureq::Agent::new_with_config(config),
            clock,
            concurrency_per_endpoint: concurrency_per_endpoint.max(1),
            semaphores: Mutex::new(HashMap::new()),
        }
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn semaphore(&self, url: &str) -> Arc<Semaphore> {
        let mut map = self.semaphores.lock().expect("semaphore map lock");
        Arc::clone(
            map.entry(url.to_owned())
                .or_insert_with(|| Arc::new(Semaphore::new(self.concurrency_per_endpoint))),
        )
    }

    fn get_json(&self, url: &str) -> Result<Value, GatewayError> {
        let mut resp = self.agent.get(url).call().map_err(|e| GatewayError::Unreachable {
            url: url.to_owned(),
            detail: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(GatewayError::Http {
                status,
                url: url.to_owned(),
            });
        }
        resp.body_mut()
            .read_json()
            .map_err(|e| GatewayError::Protocol(e.to_string()))
    }

    fn post_once(&self, url: &str, body: &Value, protocol: Protocol) -> Result<String, GatewayError> {
        let mut resp = self
            .agent
            .post(url)
            .send_json(body)
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(GatewayError::Http {
                status,
                url: url.to_owned(),
            });
        }
        let v: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| GatewayError::Protocol(e.to_string()))?;
        response_text(protocol, &v)
    }

    /// Sends one prompt, retrying transport errors and non-success statuses
    /// with exponential backoff.
    pub fn submit_query(
        &self,
        model: &ModelConfig,
        sampling: &SamplingParams,
        prompt: &str,
        fingerprint: &str,
        retry: &RetryPolicy,
    ) -> Result<QueryRecord, QueryFailure> {
        let (path, body) = request_body(model, sampling, prompt);
        let url = model.endpoint.join(path);
        let sem = self.semaphore(&model.endpoint.url);
        let max = retry.max_attempts.max(1);
        let mut spent = Duration::ZERO;
        let mut last_error = String::new();
        for attempt in 1..=max {
            if attempt > 1 {
                self.clock.sleep(retry.backoff(attempt));
            }
            let outcome = {
                let _permit = sem.acquire();
                let mark = self.clock.mark();
                let r = self.post_once(&url, &body, model.endpoint.protocol);
                spent += self.clock.elapsed(mark);
                r
            };
            match outcome {
                Ok(raw_output) => {
                    return Ok(QueryRecord {
                        fingerprint: fingerprint.to_owned(),
                        output_chars: raw_output.chars().count(),
                        raw_output,
                        duration_ns: spent.as_nanos() as u64,
                        attempts: attempt,
                        completed_at: self.clock.now().to_rfc3339(),
                    })
                }
                Err(e) => {
                    tracing::debug!(model = %model.name, attempt, error = %e, "query attempt failed");
                    last_error = e.to_string();
                }
            }
        }
        Err(QueryFailure {
            fingerprint: fingerprint.to_owned(),
            error: last_error,
            attempts: max,
            duration_ns: spent.as_nanos() as u64,
            completed_at: self.clock.now().to_rfc3339(),
        })
    }

    /// Confirms the endpoint serves the configured model.
    pub fn health_check(&self, model: &ModelConfig) -> Result<HealthReport, GatewayError> {
        let mut warnings = Vec::new();
        let (server_version, digest) = match model.endpoint.protocol {
            Protocol::Generate => {
                let tags = self.get_json(&model.endpoint.join("/api/tags"))?;
                let entry = tags
                    .get("models")
                    .and_then(Value::as_array)
                    .into_iter()
                    .flatten()
                    .find(|m| {
                        [m.get("name"), m.get("model")]
                            .iter()
                            .flatten()
                            .any(|v| v.as_str() == Some(model.version_tag.as_str()))
                    })
                    .ok_or_else(|| GatewayError::ModelNotAvailable {
                        tag: model.version_tag.clone(),
                        url: model.endpoint.url.clone(),
                    })?;
                let digest = entry.get("digest").and_then(Value::as_str).map(str::to_owned);
                let version = self
                    .get_json(&model.endpoint.join("/api/version"))
                    .ok()
                    .and_then(|v| v.get("version").and_then(Value::as_str).map(str::to_owned))
                    .unwrap_or_else(|| "unknown".into());
                (format!("ollama {version}"), digest)
            }
            Protocol::Chat => {
                let models = self.get_json(&model.endpoint.join("/v1/models"))?;
                let entry = models
                    .get("data")
                    .and_then(Value::as_array)
                    .into_iter()
                    .flatten()
                    .find(|m| m.get("id").and_then(Value::as_str) == Some(model.version_tag.as_str()))
                    .ok_or_else(|| GatewayError::ModelNotAvailable {
                        tag: model.version_tag.clone(),
                        url: model.endpoint.url.clone(),
                    })?;
                let owner = entry.get("owned_by").and_then(Value::as_str).unwrap_or("unknown");
                (format!("openai-compatible ({owner})"), None)
            }
        };
        if let Some(expected) = &model.digest {
            match &digest {
                Some(actual) if actual.starts_with(expected.as_str()) || expected.starts_with(actual.as_str()) => {}
                Some(actual) => warnings.push(format!(
                    "digest mismatch for `{}`: config expects {expected}, server reports {actual}",
                    model.version_tag
                )),
                None => warnings.push(format!(
                    "server does not report a digest for `{}`; expected {expected}",
                    model.version_tag
                )),
            }
        }
        for w in &warnings {
            tracing::warn!("{w}");
        }
        Ok(HealthReport {
            model: model.name.clone(),
            server_version,
            digest,
            warnings,
        })
    }

    /// Loads the model with an empty prompt so load time is kept out of
    /// per-query timing and energy windows. Returns the load duration.
    pub fn warm_up(&self, model: &ModelConfig, sampling: &SamplingParams) -> Result<Duration, GatewayError> {
        let (path, body) = request_body(model, sampling, "");
        let url = model.endpoint.join(path);
        let sem = self.semaphore(&model.endpoint.url);
        let _permit = sem.acquire();
        let mark = self.clock.mark();
        self.post_once(&url, &body, model.endpoint.protocol)?;
        Ok(self.clock.elapsed(mark))
    }
}
