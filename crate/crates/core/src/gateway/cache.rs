use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, ChatMessage, GatewayError, GenerationParams, RequestContext};

#[derive(Serialize)]
struct GenerateKey<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    params: &'a GenerationParams,
}

#[derive(Serialize)]
struct EmbedKey<'a> {
    model: &'a str,
    embed: &'a str,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Lowercase hex SHA-256 of the compact JSON rendering of `(model, messages, params)`.
/// Field order is fixed by the struct definitions, so keys are stable across runs.
pub fn cache_key(model: &str, messages: &[ChatMessage], params: &GenerationParams) -> String {
    let canonical = serde_json::to_string(&GenerateKey { model, messages, params })
        .expect("cache key serialization is infallible");
    sha256_hex(canonical.as_bytes())
}

pub(crate) fn embed_key(model: &str, text: &str) -> String {
    let canonical = serde_json::to_string(&EmbedKey { model, embed: text })
        .expect("cache key serialization is infallible");
    sha256_hex(canonical.as_bytes())
}

/// One line of the cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model: String,
    pub response: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Append-only JSONL response cache.
///
/// Reads go through a shared map; appends are serialized through one writer.
#[derive(Debug)]
pub struct ResponseCache {
    entries: RwLock<HashMap<String, String>>,
    writer: Mutex<Option<File>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    /// Cache that lives only for the process.
    pub fn in_memory() -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
            path: None,
        }
    }

    /// Loads `path` if it exists, then opens it for appending.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry =
                    serde_json::from_str(&line).map_err(|_| GatewayError::CacheCorrupt(i + 1))?;
                entries.insert(entry.key, entry.response);
            }
        } else if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.read().expect("cache lock poisoned").get(key).cloned()
    }

    /// Records an entry; the file receives one complete line per call.
    pub fn insert(&self, key: &str, model: &str, response: &str) -> Result<(), GatewayError> {
        let mut writer = self.writer.lock().expect("cache lock poisoned");
        if let Some(file) = writer.as_mut() {
            let entry = CacheEntry {
                key: key.to_string(),
                model: model.to_string(),
                response: response.to_string(),
                timestamp: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            };
            let mut line = serde_json::to_string(&entry).expect("cache entry serialization is infallible");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.entries
            .write()
            .expect("cache lock poisoned")
            .insert(key.to_string(), response.to_string());
        Ok(())
    }
}

/// Returns the response and whether it came from the cache.
pub fn cached_generate(
    cache: &ResponseCache,
    backend: &dyn Backend,
    messages: &[ChatMessage],
    params: &GenerationParams,
    ctx: &RequestContext,
) -> Result<(String, bool), GatewayError> {
    let key = cache_key(backend.model_name(), messages, params);
    if let Some(hit) = cache.get(&key) {
        return Ok((hit, true));
    }
    let response = backend.generate(messages, params, ctx)?;
    cache.insert(&key, backend.model_name(), &response)?;
    Ok((response, false))
}

/// Embeds `texts`, sending only uncached ones to the backend in a single batch.
/// Returns the vectors and the number of texts that missed the cache.
pub fn cached_embed(
    cache: &ResponseCache,
    backend: &dyn Backend,
    texts: &[String],
) -> Result<(Vec<Vec<f32>>, usize), GatewayError> {
    if texts.is_empty() {
        return Err(GatewayError::EmptyBatch);
    }
    let model = backend.embedding_model_name();
    let keys: Vec<String> = texts.iter().map(|t| embed_key(model, t)).collect();
    let mut out: Vec<Option<Vec<f32>>> = Vec::with_capacity(texts.len());
    let mut missing: Vec<usize> = Vec::new();
    for (i, key) in keys.iter().enumerate() {
        match cache.get(key) {
            Some(raw) => {
                let vector: Vec<f32> = serde_json::from_str(&raw)
                    .map_err(|e| GatewayError::BadResponse(format!("cached embedding: {e}")))?;
                out.push(Some(vector));
            }
            None => {
                out.push(None);
                missing.push(i);
            }
        }
    }
    if !missing.is_empty() {
        let mut seen = HashSet::new();
        let unique: Vec<String> = missing
            .iter()
            .map(|&i| texts[i].clone())
            .filter(|t| seen.insert(t.clone()))
            .collect();
        let vectors = backend.embed(&unique)?;
        let by_text: HashMap<&str, &Vec<f32>> =
            unique.iter().map(String::as_str).zip(vectors.iter()).collect();
        for (text, vector) in unique.iter().zip(vectors.iter()) {
            let raw = serde_json::to_string(vector).expect("vector serialization is infallible");
            cache.insert(&embed_key(model, text), model, &raw)?;
        }
        for &i in &missing {
            out[i] = Some(by_text[texts[i].as_str()].clone());
        }
    }
    let vectors: Vec<Vec<f32>> = out.into_iter().map(|v| v.expect("filled above")).collect();
    super::check_embeddings(texts.len(), &vectors)?;
    Ok((vectors, missing.len()))
}
