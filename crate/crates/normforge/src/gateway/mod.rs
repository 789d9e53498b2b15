//! Uniform access to a remote chat-completion endpoint and a remote
//! embeddings endpoint, plus a deterministic scripted backend for offline
//! runs.
//!
//! The [`Gateway`] wraps any [`Backend`] with transient-failure retries
//! (exponential backoff with jitter), a semaphore bounding in-flight
//! requests, and telemetry counters. Retries never duplicate a request that
//! already received a success.

mod http;
mod mock;

pub use http::HttpBackend;
pub use mock::{MockScript, ScriptEntry, ScriptMatcher, ScriptedBackend};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub system_text: Option<String>,
    pub user_text: String,
    pub temperature: f32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_tokens: Option<u32>,
    pub model_id: String,
}

impl ChatRequest {
    pub fn new(user_text: impl Into<String>, temperature: f32, model_id: impl Into<String>) -> Self {
        Self {
            system_text: None,
            user_text: user_text.into(),
            temperature,
            max_tokens: None,
            model_id: model_id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub base_url: String,
    pub api_key_env: String,
    pub chat_model: String,
    pub embed_model: String,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub request_timeout_secs: u64,
    pub parallelism: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".to_string(),
            api_key_env: "NORMFORGE_API_KEY".to_string(),
            chat_model: "gpt-4".to_string(),
            embed_model: "text-embedding-3-small".to_string(),
            max_retries: 5,
            backoff_base_ms: 500,
            request_timeout_secs: 120,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempts: {reason}")]
    Transport { attempts: u32, reason: String },
    #[error("authentication rejected (status {status})")]
    Auth { status: u16 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("prompt not covered by the mock script: {preview:?}")]
    UnscriptedPrompt { preview: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl GatewayError {
    fn is_transient(&self) -> bool {
        matches!(self, GatewayError::Transport { .. })
    }
}

/// A raw chat/embeddings provider. Implementations do one attempt per call;
/// retry policy lives in [`Gateway`].
#[async_trait::async_trait]
pub trait Backend: Send + Sync {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
    async fn embed_batch(&self, model: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError>;
}

/// Counters exposed for tests and run summaries.
#[derive(Debug, Default)]
pub struct GatewayStats {
    pub requests: AtomicU64,
    pub retries: AtomicU64,
    pub failures: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatewayStatsSnapshot {
    pub requests: u64,
    pub retries: u64,
    pub failures: u64,
}

const EMBED_BATCH: usize = 64;

/// Shared entry point for every model call in the pipeline.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    config: BackendConfig,
    semaphore: tokio::sync::Semaphore,
    stats: GatewayStats,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, config: BackendConfig) -> Self {
        let permits = config.parallelism.max(1);
        Self { backend, config, semaphore: tokio::sync::Semaphore::new(permits), stats: GatewayStats::default() }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn stats(&self) -> GatewayStatsSnapshot {
        GatewayStatsSnapshot {
            requests: self.stats.requests.load(Ordering::Relaxed),
            retries: self.stats.retries.load(Ordering::Relaxed),
            failures: self.stats.failures.load(Ordering::Relaxed),
        }
    }

    /// Completes a chat request, retrying transient failures with
    /// exponential backoff and jitter up to `max_retries`.
    pub async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if request.user_text.is_empty() {
            return Err(GatewayError::InvalidRequest("user_text is empty".to_string()));
        }
        let _permit = self.semaphore.acquire().await.expect("semaphore never closed");
        self.stats.requests.fetch_add(1, Ordering::Relaxed);
        let mut attempt = 0u32;
        loop {
            match self.backend.chat(request).await {
                Ok(response) => return Ok(response),
                Err(err) if err.is_transient() && attempt < self.config.max_retries => {
                    attempt += 1;
                    self.stats.retries.fetch_add(1, Ordering::Relaxed);
                    tracing::warn!(attempt, %err, "transient chat failure; backing off");
                    tokio::time::sleep(self.backoff_delay(attempt)).await;
                }
                Err(err) => {
                    self.stats.failures.fetch_add(1, Ordering::Relaxed);
                    return Err(annotate_attempts(err, attempt + 1));
                }
            }
        }
    }

    /// Embeds a batch of texts, order-preserving, splitting large inputs
    /// transparently. All returned vectors must share one dimension.
    pub async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".to_string()));
        }
        if let Some(empty) = texts.iter().position(String::is_empty) {
            return Err(GatewayError::InvalidRequest(format!("text {empty} is empty")));
        }
        let _permit = self.semaphore.acquire().await.expect("semaphore never closed");
        let mut out: Vec<EmbeddingVector> = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(EMBED_BATCH) {
            self.stats.requests.fetch_add(1, Ordering::Relaxed);
            let mut attempt = 0u32;
            let vectors = loop {
                match self.backend.embed_batch(&self.config.embed_model, chunk).await {
                    Ok(vectors) => break vectors,
                    Err(err) if err.is_transient() && attempt < self.config.max_retries => {
                        attempt += 1;
                        self.stats.retries.fetch_add(1, Ordering::Relaxed);
                        tracing::warn!(attempt, %err, "transient embed failure; backing off");
                        tokio::time::sleep(self.backoff_delay(attempt)).await;
                    }
                    Err(err) => {
                        self.stats.failures.fetch_add(1, Ordering::Relaxed);
                        return Err(annotate_attempts(err, attempt + 1));
                    }
                }
            };
            if vectors.len() != chunk.len() {
                return Err(GatewayError::MalformedResponse(format!(
                    "provider returned {} vectors for {} inputs",
                    vectors.len(),
                    chunk.len()
                )));
            }
            out.extend(vectors);
        }
        let dim = out[0].dim();
        for v in &out {
            if v.dim() != dim {
                return Err(GatewayError::DimensionMismatch { expected: dim, got: v.dim() });
            }
            if !v.is_finite() {
                return Err(GatewayError::MalformedResponse("non-finite embedding component".to_string()));
            }
        }
        Ok(out)
    }

    fn backoff_delay(&self, attempt: u32) -> Duration {
        let base = self.config.backoff_base_ms.max(1);
        let exp = base.saturating_mul(1u64 << (attempt - 1).min(16));
        // +/- 20% jitter
        let jitter = rand::thread_rng().gen_range(0.8..=1.2);
        Duration::from_millis((exp as f64 * jitter) as u64)
    }
}

fn annotate_attempts(err: GatewayError, attempts: u32) -> GatewayError {
    match err {
        GatewayError::Transport { reason, .. } => GatewayError::Transport { attempts, reason },
        other => other,
    }
}

/// A completion whose response failed to parse after the retry budget.
#[derive(Debug, Error)]
pub enum CompletionError<E: std::error::Error + 'static> {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("response unparseable after {attempts} attempts: {last}")]
    Unparseable {
        attempts: u32,
        #[source]
        last: E,
    },
}

/// Completes `request` and applies `parse` to the response, re-requesting on
/// parse failure up to `max_parse_retries` extra attempts. Returns the
/// parsed value, the raw response it came from, and the number of retries
/// spent.
pub async fn complete_parsed<T, E>(
    gateway: &Gateway,
    request: &ChatRequest,
    max_parse_retries: u32,
    mut parse: impl FnMut(&str) -> Result<T, E>,
) -> Result<(T, String, u32), CompletionError<E>>
where
    E: std::error::Error + 'static,
{
    let mut retries = 0u32;
    loop {
        let response = gateway.complete(request).await?;
        match parse(&response.text) {
            Ok(value) => return Ok((value, response.text, retries)),
            Err(err) if retries < max_parse_retries => {
                retries += 1;
                tracing::warn!(retries, %err, "unparseable response; re-requesting");
            }
            Err(err) => {
                return Err(CompletionError::Unparseable { attempts: retries + 1, last: err });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Backend that fails transiently a fixed number of times, then succeeds.
    struct FlakyBackend {
        failures_left: Mutex<u32>,
    }

    #[async_trait::async_trait]
    impl Backend for FlakyBackend {
        async fn chat(&self, _request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
            let mut left = self.failures_left.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return Err(GatewayError::Transport { attempts: 1, reason: "429 Too Many Requests".into() });
            }
            Ok(ChatResponse { text: "ok".into(), prompt_tokens: 1, completion_tokens: 1 })
        }

        async fn embed_batch(&self, _m: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
            Ok(texts.iter().map(|_| EmbeddingVector { values: vec![1.0, 0.0] }).collect())
        }
    }

    fn gateway_with(failures: u32, max_retries: u32) -> Gateway {
        let config = BackendConfig { max_retries, backoff_base_ms: 1, ..BackendConfig::default() };
        Gateway::new(Arc::new(FlakyBackend { failures_left: Mutex::new(failures) }), config)
    }

    #[tokio::test(start_paused = true)]
    async fn retries_transient_failures() {
        let gw = gateway_with(2, 5);
        let req = ChatRequest::new("hello", 1.0, "m");
        let response = gw.complete(&req).await.unwrap();
        assert_eq!(response.text, "ok");
        assert_eq!(gw.stats().retries, 2);
        assert_eq!(gw.stats().failures, 0);
    }

    #[tokio::test(start_paused = true)]
    async fn exhausted_retries_fail() {
        let gw = gateway_with(10, 2);
        let req = ChatRequest::new("hello", 1.0, "m");
        let err = gw.complete(&req).await.unwrap_err();
        match err {
            GatewayError::Transport { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("expected Transport, got {other:?}"),
        }
        assert_eq!(gw.stats().retries, 2);
        assert_eq!(gw.stats().failures, 1);
    }

    #[tokio::test]
    async fn empty_prompt_rejected_before_any_call() {
        let gw = gateway_with(0, 0);
        let req = ChatRequest::new("", 1.0, "m");
        assert!(matches!(gw.complete(&req).await, Err(GatewayError::InvalidRequest(_))));
        assert_eq!(gw.stats().requests, 0);
    }

    #[tokio::test]
    async fn embed_shape_and_validation() {
        let gw = gateway_with(0, 0);
        let out = gw.embed(&["a".to_string(), "b".to_string()]).await.unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].dim(), out[1].dim());
        assert!(gw.embed(&[]).await.is_err());
        assert!(gw.embed(&["a".to_string(), String::new()]).await.is_err());
    }
}
