//! OpenAI-compatible chat-completions and embeddings clients, model
//! profiles, usage and cost accounting, and offline providers.

mod money;
mod providers;

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::num::Scalar;
use crate::prompt_forge::{ChatHistory, ChatTurn};
use crate::spec_ingest::{TokenizerHandle, TokenizerKind};

pub use money::{Money, MoneyParseError};
pub use providers::{
    request_key, FixtureProvider, HashingEmbedder, OpenAiCompatClient, RetryPolicy, ScriptedEmbedder,
    ScriptedProvider, ScriptedReply,
};

/// Per-message framing overhead used in the pre-flight estimate.
const TOKENS_PER_MESSAGE: usize = 3;
const REPLY_PRIMING_TOKENS: usize = 3;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("prompt needs {required} tokens ({mode} count), {} over the {window}-token context window", required - window)]
    ContextOverflow {
        required: usize,
        window: usize,
        mode: TokenizerKind,
    },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("provider answered HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("expected {expected} embeddings, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding dimension {got} differs from {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no fixture for request {key} in {dir}")]
    FixtureMissing { key: String, dir: String },
    #[error("invalid model profile: {0}")]
    InvalidProfile(String),
}

/// An LLM as seen by the rest of the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub context_window: usize,
    /// Price per 1000 input tokens.
    pub input_price: Money,
    /// Price per 1000 output tokens.
    pub output_price: Money,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default = "one")]
    pub top_p: f64,
}

fn one() -> f64 {
    1.0
}

impl ModelProfile {
    pub fn new(name: &str, context_window: usize, input_price: &str, output_price: &str) -> Self {
        ModelProfile {
            name: name.to_string(),
            context_window,
            input_price: input_price.parse().expect("valid literal price"),
            output_price: output_price.parse().expect("valid literal price"),
            temperature: 1.0,
            top_p: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::InvalidProfile(format!("{}: {m}", self.name)));
        if self.name.trim().is_empty() {
            return Err(GatewayError::InvalidProfile("empty name".into()));
        }
        if self.context_window == 0 {
            return bad("context window must be positive".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.top_p) {
            return bad(format!("top_p {} outside [0, 1]", self.top_p));
        }
        Ok(())
    }
}

/// GPT-3.5-Turbo, GPT-4 and GPT-4-Turbo with euro prices per 1000 tokens.
pub fn builtin_profiles() -> Vec<ModelProfile> {
    vec![
        ModelProfile::new("gpt-3.5-turbo", 16_385, "0.0010", "0.0019"),
        ModelProfile::new("gpt-4", 32_768, "0.056", "0.111"),
        ModelProfile::new("gpt-4-turbo", 128_000, "0.010", "0.028"),
    ]
}

pub fn find_profile<'a>(profiles: &'a [ModelProfile], name: &str) -> Option<&'a ModelProfile> {
    profiles.iter().find(|p| p.name == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub elapsed_seconds: f64,
}

impl Usage {
    pub fn tokens(input_tokens: u64, output_tokens: u64) -> Self {
        Usage {
            input_tokens,
            output_tokens,
            elapsed_seconds: 0.0,
        }
    }
}

/// `input/1000 * input_price + output/1000 * output_price`, exactly.
pub fn estimate_cost(u: &Usage, profile: &ModelProfile) -> Money {
    (profile.input_price * u.input_tokens + profile.output_price * u.output_tokens) / 1000
}

/// Wire form of a chat-completions request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatTurn>,
    pub temperature: f64,
    pub top_p: f64,
}

impl ChatRequest {
    pub fn new(history: &ChatHistory, profile: &ModelProfile) -> Self {
        ChatRequest {
            model: profile.name.clone(),
            messages: history.turns().to_vec(),
            temperature: profile.temperature,
            top_p: profile.top_p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatReply {
    pub content: String,
    pub usage: Option<WireUsage>,
}

impl ChatReply {
    /// Read `choices[0].message.content` and the optional `usage` object.
    pub fn from_wire(body: &Value) -> Result<Self, GatewayError> {
        let content = body
            .get("choices")
            .and_then(|c| c.get(0))
            .and_then(|c| c.get("message"))
            .and_then(|m| m.get("content"))
            .and_then(Value::as_str)
            .ok_or_else(|| GatewayError::Malformed("missing choices[0].message.content".into()))?;
        let usage = match body.get("usage") {
            None | Some(Value::Null) => None,
            Some(u) => Some(
                serde_json::from_value::<WireUsage>(u.clone())
                    .map_err(|e| GatewayError::Malformed(format!("usage: {e}")))?,
            ),
        };
        Ok(ChatReply {
            content: content.to_string(),
            usage,
        })
    }

    pub fn to_wire(&self) -> Value {
        let mut v = serde_json::json!({
            "choices": [{"index": 0, "message": {"role": "assistant", "content": self.content}}],
        });
        if let Some(u) = self.usage {
            v["usage"] = serde_json::to_value(u).expect("plain struct");
        }
        v
    }
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError>;
}

impl<P: ChatProvider + ?Sized> ChatProvider for Arc<P> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        (**self).chat(request)
    }
}

pub trait Embedder<T: Scalar>: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<T>>, GatewayError>;
}

impl<T: Scalar, E: Embedder<T> + ?Sized> Embedder<T> for Arc<E> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<T>>, GatewayError> {
        (**self).embed(texts)
    }
}

/// Shared input checks for embedding calls.
pub fn check_embed_input(texts: &[String]) -> Result<(), GatewayError> {
    if texts.is_empty() {
        return Err(GatewayError::InvalidRequest("no texts to embed".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(GatewayError::InvalidRequest(format!("text {i} is empty")));
    }
    Ok(())
}

/// Shared output checks for embedding calls: arity, uniform dim, finite.
pub fn check_embed_output<T: Scalar>(expected: usize, vectors: &[Vec<T>]) -> Result<(), GatewayError> {
    if vectors.len() != expected {
        return Err(GatewayError::CountMismatch {
            expected,
            got: vectors.len(),
        });
    }
    let dim = vectors.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(GatewayError::Malformed("empty embedding".into()));
    }
    for v in vectors {
        if v.len() != dim {
            return Err(GatewayError::DimensionMismatch { expected: dim, got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(GatewayError::Malformed("non-finite embedding component".into()));
        }
    }
    Ok(())
}

/// Chat completion with pre-flight context checking and usage accounting.
#[derive(Clone)]
pub struct LlmGateway {
    provider: Arc<dyn ChatProvider>,
    tokenizer: TokenizerHandle,
}

impl fmt::Debug for LlmGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmGateway").field("tokenizer", &self.tokenizer).finish()
    }
}

impl LlmGateway {
    pub fn new(provider: Arc<dyn ChatProvider>, tokenizer: TokenizerHandle) -> Self {
        LlmGateway { provider, tokenizer }
    }

    pub fn tokenizer(&self) -> &TokenizerHandle {
        &self.tokenizer
    }

    /// Local estimate of the prompt size of `history`.
    pub fn prompt_tokens(&self, history: &ChatHistory) -> usize {
        history
            .turns()
            .iter()
            .map(|t| self.tokenizer.count(&t.content) + TOKENS_PER_MESSAGE)
            .sum::<usize>()
            + REPLY_PRIMING_TOKENS
    }

    /// Fails when the history does not fit the profile's context window.
    /// Approximate counts carry a 5% safety margin.
    pub fn check_context(&self, history: &ChatHistory, profile: &ModelProfile) -> Result<usize, GatewayError> {
        let local = self.prompt_tokens(history);
        let required = match self.tokenizer.kind() {
            TokenizerKind::ExactBpe => local,
            TokenizerKind::Approximate => (local * 105).div_ceil(100),
        };
        if required > profile.context_window {
            return Err(GatewayError::ContextOverflow {
                required,
                window: profile.context_window,
                mode: self.tokenizer.kind(),
            });
        }
        Ok(local)
    }

    pub fn chat_complete(&self, history: &ChatHistory, profile: &ModelProfile) -> Result<(String, Usage), GatewayError> {
        profile.validate()?;
        let local_prompt = self.check_context(history, profile)?;
        let request = ChatRequest::new(history, profile);
        let started = Instant::now();
        let reply = self.provider.chat(&request)?;
        let elapsed = started.elapsed().as_secs_f64();
        let usage = match reply.usage {
            Some(u) => Usage {
                input_tokens: u.prompt_tokens,
                output_tokens: u.completion_tokens,
                elapsed_seconds: elapsed,
            },
            None => Usage {
                input_tokens: local_prompt as u64,
                output_tokens: self.tokenizer.count(&reply.content) as u64,
                elapsed_seconds: elapsed,
            },
        };
        Ok((reply.content, usage))
    }
}

pub(crate) fn default_timeout() -> Duration {
    Duration::from_secs(300)
}
