use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{
    cache_key, check_embeddings, validate_messages, Backend, BackendSpec, ChatMessage, GatewayError,
    GenerationParams, RequestContext,
};
use crate::perturb::{fnv1a64, Prng};

/// Canned responses for a scripted backend.
///
/// A generation request is answered from `responses`, trying in turn the
/// request fingerprint (the cache key), `"<query_id>#step<k>"`, `"<query_id>"`,
/// then `default_response`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptTable {
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
    #[serde(default)]
    pub default_response: Option<String>,
    #[serde(default)]
    pub embeddings: BTreeMap<String, Vec<f32>>,
    /// When set, texts without an explicit embedding get a seeded pseudo-random vector of this length.
    #[serde(default)]
    pub hash_embedding_dim: Option<usize>,
    /// Query ids whose requests fail.
    #[serde(default)]
    pub fail_queries: BTreeSet<String>,
}

impl ScriptTable {
    pub fn with_default(response: impl Into<String>) -> Self {
        Self {
            default_response: Some(response.into()),
            ..Self::default()
        }
    }

    pub fn respond(mut self, key: impl Into<String>, response: impl Into<String>) -> Self {
        self.responses.insert(key.into(), response.into());
        self
    }

    /// Entries from `self` win over `other`.
    pub fn merged_with(self, other: ScriptTable) -> ScriptTable {
        let mut merged = other;
        merged.responses.extend(self.responses);
        merged.embeddings.extend(self.embeddings);
        merged.fail_queries.extend(self.fail_queries);
        if self.default_response.is_some() {
            merged.default_response = self.default_response;
        }
        if self.hash_embedding_dim.is_some() {
            merged.hash_embedding_dim = self.hash_embedding_dim;
        }
        merged
    }

    fn lookup(&self, fingerprint: &str, ctx: &RequestContext) -> Option<&String> {
        if let Some(hit) = self.responses.get(fingerprint) {
            return Some(hit);
        }
        if let Some(qid) = &ctx.query_id {
            if let Some(step) = ctx.step {
                if let Some(hit) = self.responses.get(&format!("{qid}#step{step}")) {
                    return Some(hit);
                }
            }
            if let Some(hit) = self.responses.get(qid) {
                return Some(hit);
            }
        }
        self.default_response.as_ref()
    }
}

/// Unit-length pseudo-random vector seeded by the text.
pub fn hash_embedding(text: &str, dim: usize) -> Vec<f32> {
    let mut rng = Prng::new(fnv1a64(text.as_bytes()));
    let raw: Vec<f64> = (0..dim)
        .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0)
        .collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    raw.iter().map(|x| (x / norm) as f32).collect()
}

/// Deterministic backend answering from a [`ScriptTable`].
#[derive(Debug)]
pub struct ScriptedBackend {
    model_name: String,
    table: ScriptTable,
    call_counter: AtomicU64,
    embed_counter: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(model_name: impl Into<String>, table: ScriptTable) -> Self {
        Self {
            model_name: model_name.into(),
            table,
            call_counter: AtomicU64::new(0),
            embed_counter: AtomicU64::new(0),
        }
    }

    pub fn from_spec(spec: &BackendSpec) -> Result<Self, GatewayError> {
        let table = spec
            .script
            .clone()
            .ok_or_else(|| GatewayError::InvalidConfig("scripted backend requires a script table".into()))?;
        Ok(Self::new(spec.model_name.clone(), table))
    }

    /// Number of `generate` calls so far, including failed ones.
    pub fn call_counter(&self) -> u64 {
        self.call_counter.load(Ordering::SeqCst)
    }

    /// Number of `embed` calls so far.
    pub fn embed_counter(&self) -> u64 {
        self.embed_counter.load(Ordering::SeqCst)
    }

    pub fn table(&self) -> &ScriptTable {
        &self.table
    }
}

impl Backend for ScriptedBackend {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
        ctx: &RequestContext,
    ) -> Result<String, GatewayError> {
        self.call_counter.fetch_add(1, Ordering::SeqCst);
        validate_messages(messages)?;
        if let Some(qid) = &ctx.query_id {
            if self.table.fail_queries.contains(qid) {
                return Err(GatewayError::ScriptedFailure(qid.clone()));
            }
        }
        let fingerprint = cache_key(&self.model_name, messages, params);
        self.table
            .lookup(&fingerprint, ctx)
            .cloned()
            .ok_or(GatewayError::ScriptMiss(fingerprint))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        self.embed_counter.fetch_add(1, Ordering::SeqCst);
        if texts.is_empty() {
            return Err(GatewayError::EmptyBatch);
        }
        let vectors = texts
            .iter()
            .map(|t| match (self.table.embeddings.get(t), self.table.hash_embedding_dim) {
                (Some(v), _) => Ok(v.clone()),
                (None, Some(dim)) => Ok(hash_embedding(t, dim)),
                (None, None) => Err(GatewayError::ScriptMiss(format!("embedding for {t:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        check_embeddings(texts.len(), &vectors)?;
        Ok(vectors)
    }
}
