use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{
    check_embeddings, validate_messages, Backend, BackendSpec, ChatMessage, GatewayError, GenerationParams,
    RequestContext,
};
use crate::sync::Semaphore;

/// Longest single backoff sleep.
const MAX_BACKOFF_MS: u64 = 30_000;

/// Request counters for an HTTP backend.
#[derive(Debug, Default)]
pub struct HttpStats {
    attempts: AtomicU64,
    requests: AtomicU64,
}

impl HttpStats {
    /// HTTP requests sent, retries included.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }

    /// Logical calls (`generate` or `embed`).
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }
}

/// Client for servers speaking the OpenAI chat-completions and embeddings protocol.
pub struct OpenAiBackend {
    agent: ureq::Agent,
    base_url: String,
    model_name: String,
    embedding_model: String,
    auth_env_var: Option<String>,
    max_retries: u32,
    retry_base_delay: Duration,
    in_flight: Semaphore,
    stats: HttpStats,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f32>,
}

fn is_retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

impl OpenAiBackend {
    pub fn from_spec(spec: &BackendSpec) -> Result<Self, GatewayError> {
        let base_url = spec
            .base_url
            .as_deref()
            .ok_or_else(|| GatewayError::InvalidConfig("openai_compatible backend requires base_url".into()))?
            .trim_end_matches('/')
            .to_string();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(spec.timeout_seconds)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            base_url,
            model_name: spec.model_name.clone(),
            embedding_model: spec.embedding_model.clone().unwrap_or_else(|| spec.model_name.clone()),
            auth_env_var: spec.auth_env_var.clone(),
            max_retries: spec.max_retries,
            retry_base_delay: Duration::from_millis(spec.retry_base_delay_ms),
            in_flight: Semaphore::new(spec.max_in_flight),
            stats: HttpStats::default(),
        })
    }

    pub fn stats(&self) -> &HttpStats {
        &self.stats
    }

    fn api_key(&self) -> Result<Option<String>, GatewayError> {
        match &self.auth_env_var {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(key) if !key.is_empty() => Ok(Some(key)),
                _ => Err(GatewayError::AuthMissing(var.clone())),
            },
        }
    }

    fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64 << retry.min(16);
        let ms = (self.retry_base_delay.as_millis() as u64).saturating_mul(factor);
        Duration::from_millis(ms.min(MAX_BACKOFF_MS))
    }

    /// POSTs `body` to `{base_url}/{endpoint}`, retrying 429 and 5xx responses
    /// up to `max_retries` times. Returns the response body.
    fn post(&self, endpoint: &str, body: &serde_json::Value) -> Result<String, GatewayError> {
        let key = self.api_key()?;
        let url = format!("{}/{}", self.base_url, endpoint);
        let _permit = self.in_flight.acquire();
        self.stats.requests.fetch_add(1, Ordering::SeqCst);
        let mut retry = 0;
        loop {
            self.stats.attempts.fetch_add(1, Ordering::SeqCst);
            let mut request = self.agent.post(&url).header("Content-Type", "application/json");
            if let Some(key) = &key {
                request = request.header("Authorization", format!("Bearer {key}"));
            }
            let mut response = request
                .send_json(body)
                .map_err(|e| GatewayError::Transport(e.to_string()))?;
            let status = response.status().as_u16();
            let text = response
                .body_mut()
                .read_to_string()
                .map_err(|e| GatewayError::Transport(e.to_string()))?;
            if (200..300).contains(&status) {
                return Ok(text);
            }
            if !is_retryable(status) || retry >= self.max_retries {
                return Err(GatewayError::HttpError { status, body: text });
            }
            let delay = self.backoff(retry);
            log::warn!("{url} returned {status}; retrying in {delay:?}");
            thread::sleep(delay);
            retry += 1;
        }
    }
}

impl Backend for OpenAiBackend {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn embedding_model_name(&self) -> &str {
        &self.embedding_model
    }

    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
        _ctx: &RequestContext,
    ) -> Result<String, GatewayError> {
        validate_messages(messages)?;
        let mut body = json!({
            "model": self.model_name,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(stop) = &params.stop_sequences {
            body["stop"] = json!(stop);
        }
        let text = self.post("chat/completions", &body)?;
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::BadResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content.unwrap_or_default())
            .ok_or_else(|| GatewayError::BadResponse("no choices".into()))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyBatch);
        }
        let body = json!({ "model": self.embedding_model, "input": texts });
        let text = self.post("embeddings", &body)?;
        let mut parsed: EmbeddingResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::BadResponse(e.to_string()))?;
        if parsed.data.iter().all(|d| d.index.is_some()) {
            parsed.data.sort_by_key(|d| d.index);
        }
        let vectors: Vec<Vec<f32>> = parsed.data.into_iter().map(|d| d.embedding).collect();
        check_embeddings(texts.len(), &vectors)?;
        Ok(vectors)
    }
}
