//! Generation and embedding backends.
//!
//! Two backends implement [`Backend`]: an OpenAI-compatible HTTP client and a
//! scripted table used for tests and offline runs. [`ResponseCache`] sits in
//! front of either one.

mod cache;
mod http;
mod scripted;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{cache_key, cached_embed, cached_generate, CacheEntry, ResponseCache};
pub use http::{HttpStats, OpenAiBackend};
pub use scripted::{hash_embedding, ScriptTable, ScriptedBackend};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("environment variable {0} holding the API key is not set")]
    AuthMissing(String),
    #[error("HTTP {status}: {body}")]
    HttpError { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected response body: {0}")]
    BadResponse(String),
    #[error("no scripted response for request {0}")]
    ScriptMiss(String),
    #[error("scripted failure for {0}")]
    ScriptedFailure(String),
    #[error("embedding batch is empty")]
    EmptyBatch,
    #[error("embeddings have inconsistent dimensions")]
    DimensionInconsistent,
    #[error("cache file is corrupt at line {0}")]
    CacheCorrupt(usize),
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
    #[error("user message content must not be empty")]
    EmptyUserMessage,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

pub(crate) fn validate_messages(messages: &[ChatMessage]) -> Result<(), GatewayError> {
    if messages.iter().any(|m| m.role == Role::User && m.content.is_empty()) {
        return Err(GatewayError::EmptyUserMessage);
    }
    Ok(())
}

/// Decoding parameters. Defaults are greedy decoding with up to 2048 new tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop_sequences: Option<Vec<String>>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 2048,
            stop_sequences: None,
        }
    }
}

/// Extra information about a request, used by scripted backends to pick a response.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RequestContext {
    pub query_id: Option<String>,
    pub step: Option<u8>,
}

impl RequestContext {
    pub fn for_query(query_id: impl Into<String>) -> Self {
        Self {
            query_id: Some(query_id.into()),
            step: None,
        }
    }

    pub fn with_step(mut self, step: u8) -> Self {
        self.step = Some(step);
        self
    }
}

pub trait Backend: Send + Sync {
    fn model_name(&self) -> &str;

    /// Model used for embeddings; defaults to the generation model.
    fn embedding_model_name(&self) -> &str {
        self.model_name()
    }

    /// Returns the content of the first choice.
    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
        ctx: &RequestContext,
    ) -> Result<String, GatewayError>;

    /// One vector per input text, all of the same length.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError>;
}

pub(crate) fn check_embeddings(n_inputs: usize, vectors: &[Vec<f32>]) -> Result<(), GatewayError> {
    if vectors.len() != n_inputs {
        return Err(GatewayError::BadResponse(format!(
            "{} embeddings for {} inputs",
            vectors.len(),
            n_inputs
        )));
    }
    if let Some(first) = vectors.first() {
        if vectors.iter().any(|v| v.len() != first.len()) {
            return Err(GatewayError::DimensionInconsistent);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    OpenaiCompatible,
    Scripted,
}

/// Backend configuration, usually read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub kind: BackendKind,
    #[serde(alias = "model")]
    pub model_name: String,
    #[serde(default)]
    pub embedding_model: Option<String>,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_retry_delay")]
    pub retry_base_delay_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub script: Option<ScriptTable>,
    /// JSON file holding a script table, relative to the config file.
    #[serde(default)]
    pub script_file: Option<PathBuf>,
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    5
}

fn default_retry_delay() -> u64 {
    500
}

fn default_in_flight() -> usize {
    4
}

impl BackendSpec {
    pub fn scripted(model_name: impl Into<String>, script: ScriptTable) -> Self {
        Self {
            kind: BackendKind::Scripted,
            model_name: model_name.into(),
            embedding_model: None,
            base_url: None,
            auth_env_var: None,
            timeout_seconds: default_timeout(),
            max_retries: default_retries(),
            retry_base_delay_ms: default_retry_delay(),
            max_in_flight: default_in_flight(),
            script: Some(script),
            script_file: None,
        }
    }

    pub fn openai_compatible(base_url: impl Into<String>, model_name: impl Into<String>, auth_env_var: Option<String>) -> Self {
        Self {
            kind: BackendKind::OpenaiCompatible,
            model_name: model_name.into(),
            embedding_model: None,
            base_url: Some(base_url.into()),
            auth_env_var,
            timeout_seconds: default_timeout(),
            max_retries: default_retries(),
            retry_base_delay_ms: default_retry_delay(),
            max_in_flight: default_in_flight(),
            script: None,
            script_file: None,
        }
    }

    /// Reads a TOML backend description; `script_file` is resolved against the
    /// directory of `path`.
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut spec: BackendSpec =
            toml::from_str(&text).map_err(|e| GatewayError::InvalidConfig(format!("{}: {e}", path.display())))?;
        if let Some(file) = spec.script_file.take() {
            let resolved = match path.parent() {
                Some(dir) if file.is_relative() => dir.join(file),
                _ => file,
            };
            let table: ScriptTable = serde_json::from_str(&fs::read_to_string(&resolved)?)
                .map_err(|e| GatewayError::InvalidConfig(format!("{}: {e}", resolved.display())))?;
            spec.script = Some(match spec.script.take() {
                Some(inline) => inline.merged_with(table),
                None => table,
            });
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.kind {
            BackendKind::Scripted if self.script.is_none() => {
                Err(GatewayError::InvalidConfig("scripted backend requires a script table".into()))
            }
            BackendKind::OpenaiCompatible if self.base_url.is_none() => {
                Err(GatewayError::InvalidConfig("openai_compatible backend requires base_url".into()))
            }
            _ if self.model_name.is_empty() => Err(GatewayError::InvalidConfig("model_name is empty".into())),
            _ => Ok(()),
        }
    }

    /// Builds the backend described by this spec.
    pub fn connect(&self) -> Result<Box<dyn Backend>, GatewayError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Scripted => Box::new(ScriptedBackend::from_spec(self)?),
            BackendKind::OpenaiCompatible => Box::new(OpenAiBackend::from_spec(self)?),
        })
    }
}
