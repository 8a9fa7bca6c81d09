//! Concrete chat and embedding providers: the HTTP client and the offline
//! doubles used for fixtures and tests.

use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Duration;

use parking_lot::Mutex;
use rustc_hash::FxHasher;
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{
    check_embed_input, check_embed_output, default_timeout, ChatProvider, ChatReply, ChatRequest, Embedder,
    GatewayError,
};
use crate::num::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after that.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 2,
            base_delay: Duration::from_secs(2),
        }
    }
}

/// Blocking client for an OpenAI-compatible endpoint (`{base}/chat/completions`,
/// `{base}/embeddings`). Must not be created or dropped inside an async context.
pub struct OpenAiCompatClient {
    http: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    embedding_model: String,
    retry: RetryPolicy,
}

impl fmt::Debug for OpenAiCompatClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpenAiCompatClient")
            .field("base_url", &self.base_url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("embedding_model", &self.embedding_model)
            .field("retry", &self.retry)
            .finish()
    }
}

enum Attempt {
    Done(Value),
    Retry(GatewayError),
    Fail(GatewayError),
}

impl OpenAiCompatClient {
    pub fn new(base_url: &str, api_key: Option<String>) -> Result<Self, GatewayError> {
        Self::with_timeout(base_url, api_key, default_timeout())
    }

    pub fn with_timeout(base_url: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, GatewayError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(OpenAiCompatClient {
            http,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            embedding_model: "text-embedding-ada-002".to_string(),
            retry: RetryPolicy::default(),
        })
    }

    pub fn retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn embedding_model(mut self, model: impl Into<String>) -> Self {
        self.embedding_model = model.into();
        self
    }

    fn attempt(&self, url: &str, body: &Value) -> Attempt {
        let mut req = self.http.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(GatewayError::Transport(e.to_string())),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(GatewayError::Transport(e.to_string())),
        };
        if !status.is_success() {
            let err = GatewayError::Status {
                status: status.as_u16(),
                body: text,
            };
            return if status.as_u16() == 429 || status.is_server_error() {
                Attempt::Retry(err)
            } else {
                Attempt::Fail(err)
            };
        }
        match serde_json::from_str(&text) {
            Ok(v) => Attempt::Done(v),
            Err(e) => Attempt::Fail(GatewayError::Malformed(e.to_string())),
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = format!("{}/{path}", self.base_url);
        let mut delay = self.retry.base_delay;
        let mut attempt = 1;
        loop {
            match self.attempt(&url, body) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if attempt >= self.retry.max_attempts.max(1) => return Err(e),
                Attempt::Retry(e) => {
                    tracing::warn!("{url} attempt {attempt} failed, retrying in {delay:?}: {e}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }
}

impl ChatProvider for OpenAiCompatClient {
    fn chat(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        let body = serde_json::to_value(request).map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
        ChatReply::from_wire(&self.post("chat/completions", &body)?)
    }
}

impl<T: Scalar> Embedder<T> for OpenAiCompatClient {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<T>>, GatewayError> {
        check_embed_input(texts)?;
        let body = serde_json::json!({"model": self.embedding_model, "input": texts});
        let resp = self.post("embeddings", &body)?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Malformed("missing data array".into()))?;
        let mut indexed: Vec<(usize, Vec<T>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
            let values = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| GatewayError::Malformed(format!("data[{pos}] has no embedding")))?
                .iter()
                .map(|x| {
                    x.as_f64()
                        .map(T::from_f64_lossy)
                        .ok_or_else(|| GatewayError::Malformed(format!("data[{pos}] has a non-numeric component")))
                })
                .collect::<Result<Vec<T>, _>>()?;
            indexed.push((index, values));
        }
        indexed.sort_by_key(|(i, _)| *i);
        if indexed.len() != texts.len() {
            return Err(GatewayError::CountMismatch {
                expected: texts.len(),
                got: indexed.len(),
            });
        }
        if indexed.iter().enumerate().any(|(pos, (i, _))| pos != *i) {
            return Err(GatewayError::Malformed("embedding indexes are not 0..n".into()));
        }
        let vectors: Vec<Vec<T>> = indexed.into_iter().map(|(_, v)| v).collect();
        check_embed_output(texts.len(), &vectors)?;
        Ok(vectors)
    }
}

/// SHA-256 hex digest of the compact JSON form of a request.
pub fn request_key(request: &ChatRequest) -> String {
    let bytes = serde_json::to_vec(request).expect("request serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Offline provider answering from `<dir>/<request_key>.json`, falling back
/// to `<dir>/default.json`.
///
/// A fixture file holds a wire response object, a bare string (the reply
/// content), or an array of either; arrays are served in rotation.
#[derive(Debug)]
pub struct FixtureProvider {
    dir: PathBuf,
    served: Mutex<HashMap<PathBuf, usize>>,
}

impl FixtureProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureProvider {
            dir: dir.into(),
            served: Mutex::new(HashMap::new()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_to_reply(entry: &Value) -> Result<ChatReply, GatewayError> {
        match entry {
            Value::String(s) => Ok(ChatReply {
                content: s.clone(),
                usage: None,
            }),
            other => ChatReply::from_wire(other),
        }
    }
}

impl ChatProvider for FixtureProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        let key = request_key(request);
        let keyed = self.dir.join(format!("{key}.json"));
        let path = if keyed.is_file() {
            keyed
        } else {
            let fallback = self.dir.join("default.json");
            if !fallback.is_file() {
                return Err(GatewayError::FixtureMissing {
                    key,
                    dir: self.dir.display().to_string(),
                });
            }
            fallback
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| GatewayError::Transport(format!("{}: {e}", path.display())))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| GatewayError::Malformed(format!("{}: {e}", path.display())))?;
        match &value {
            Value::Array(entries) if entries.is_empty() => {
                Err(GatewayError::Malformed(format!("{} is an empty array", path.display())))
            }
            Value::Array(entries) => {
                let mut served = self.served.lock();
                let n = served.entry(path.clone()).or_insert(0);
                let entry = &entries[*n % entries.len()];
                *n += 1;
                Self::entry_to_reply(entry)
            }
            single => Self::entry_to_reply(single),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ScriptedReply {
    Reply(ChatReply),
    Fail(String),
}

impl ScriptedReply {
    pub fn text(content: impl Into<String>) -> Self {
        ScriptedReply::Reply(ChatReply {
            content: content.into(),
            usage: None,
        })
    }
}

type Responder = Box<dyn Fn(usize, &ChatRequest) -> ScriptedReply + Send + Sync>;

/// In-memory provider that records every request it receives.
pub struct ScriptedProvider {
    responder: Responder,
    requests: Mutex<Vec<ChatRequest>>,
}

impl fmt::Debug for ScriptedProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedProvider")
            .field("requests", &self.requests.lock().len())
            .finish()
    }
}

impl ScriptedProvider {
    /// Serve `replies` in rotation.
    pub fn new(replies: Vec<ScriptedReply>) -> Self {
        assert!(!replies.is_empty(), "at least one scripted reply");
        Self::from_fn(move |n, _| replies[n % replies.len()].clone())
    }

    /// Answer with `f(call_index, request)`.
    pub fn from_fn(f: impl Fn(usize, &ChatRequest) -> ScriptedReply + Send + Sync + 'static) -> Self {
        ScriptedProvider {
            responder: Box::new(f),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().clone()
    }
}

impl ChatProvider for ScriptedProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        let n = {
            let mut log = self.requests.lock();
            log.push(request.clone());
            log.len() - 1
        };
        match (self.responder)(n, request) {
            ScriptedReply::Reply(r) => Ok(r),
            ScriptedReply::Fail(msg) => Err(GatewayError::Transport(msg)),
        }
    }
}

/// Deterministic bag-of-words embedder: each lower-cased alphanumeric word
/// adds a signed unit to one of `dim` hashed buckets; the result is
/// L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashingEmbedder { dim }
    }

    pub fn embed_one<T: Scalar>(&self, text: &str) -> Vec<T> {
        let mut v = vec![T::zero(); self.dim];
        for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let mut h = FxHasher::default();
            word.to_lowercase().hash(&mut h);
            let h = h.finish();
            let slot = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 1 { -T::one() } else { T::one() };
            v[slot] = v[slot] + sign;
        }
        let norm = v.iter().map(|x| *x * *x).sum::<T>().sqrt();
        if norm > T::zero() {
            for x in &mut v {
                *x = *x / norm;
            }
        }
        v
    }
}

impl<T: Scalar> Embedder<T> for HashingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<T>>, GatewayError> {
        check_embed_input(texts)?;
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Embedder backed by a fixed text → vector table. Texts not in the table
/// fail the whole call.
#[derive(Debug, Clone, Default)]
pub struct ScriptedEmbedder<T> {
    table: HashMap<String, Vec<T>>,
    calls: std::sync::Arc<Mutex<usize>>,
}

impl<T: Scalar> ScriptedEmbedder<T> {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<T>)>) -> Self {
        ScriptedEmbedder {
            table: entries.into_iter().collect(),
            calls: Default::default(),
        }
    }

    pub fn insert(&mut self, text: impl Into<String>, v: Vec<T>) {
        self.table.insert(text.into(), v);
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock()
    }
}

impl<T: Scalar> Embedder<T> for ScriptedEmbedder<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<T>>, GatewayError> {
        *self.calls.lock() += 1;
        check_embed_input(texts)?;
        let vectors = texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .ok_or_else(|| GatewayError::Transport(format!("no scripted embedding for {t:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        check_embed_output(texts.len(), &vectors)?;
        Ok(vectors)
    }
}
