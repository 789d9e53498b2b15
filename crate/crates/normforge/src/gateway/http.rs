//! Live backend speaking the de-facto `/v1/chat/completions` and
//! `/v1/embeddings` wire formats.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendConfig, ChatRequest, ChatResponse, EmbeddingVector, GatewayError};

pub struct HttpBackend {
    client: reqwest::Client,
    base_url: String,
    api_key: String,
}

impl HttpBackend {
    /// Builds a live backend; the API key is read from the environment
    /// variable named in the config.
    pub fn from_config(config: &BackendConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            GatewayError::InvalidRequest(format!("environment variable {} is not set", config.api_key_env))
        })?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| GatewayError::InvalidRequest(format!("http client: {e}")))?;
        Ok(Self { client, base_url: config.base_url.trim_end_matches('/').to_string(), api_key })
    }

    async fn post_json<B: Serialize, R: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<R, GatewayError> {
        let url = format!("{}{path}", self.base_url);
        let response = self
            .client
            .post(&url)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .await
            .map_err(|e| GatewayError::Transport { attempts: 1, reason: e.to_string() })?;
        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(GatewayError::Auth { status: status.as_u16() });
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(GatewayError::Transport {
                attempts: 1,
                reason: format!("status {status}"),
            });
        }
        if !status.is_success() {
            return Err(GatewayError::MalformedResponse(format!("unexpected status {status}")));
        }
        response
            .json::<R>()
            .await
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireChatRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireChatResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: WireUsage,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Serialize)]
struct WireEmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct WireEmbedResponse {
    data: Vec<WireEmbedding>,
}

#[derive(Deserialize)]
struct WireEmbedding {
    index: usize,
    embedding: Vec<f32>,
}

#[async_trait::async_trait]
impl Backend for HttpBackend {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &request.system_text {
            messages.push(WireMessage { role: "system", content: system });
        }
        messages.push(WireMessage { role: "user", content: &request.user_text });
        let body = WireChatRequest {
            model: &request.model_id,
            messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let wire: WireChatResponse = self.post_json("/chat/completions", &body).await?;
        let text = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::MalformedResponse("no choices in response".to_string()))?;
        Ok(ChatResponse {
            text,
            prompt_tokens: wire.usage.prompt_tokens,
            completion_tokens: wire.usage.completion_tokens,
        })
    }

    async fn embed_batch(&self, model: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        let body = WireEmbedRequest { model, input: texts };
        let wire: WireEmbedResponse = self.post_json("/embeddings", &body).await?;
        if wire.data.len() != texts.len() {
            return Err(GatewayError::MalformedResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                wire.data.len()
            )));
        }
        let mut data = wire.data;
        data.sort_by_key(|d| d.index);
        Ok(data.into_iter().map(|d| EmbeddingVector { values: d.embedding }).collect())
    }
}
