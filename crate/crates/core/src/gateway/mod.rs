//! Chat-completion and embedding service contracts.
//!
//! Both traits are `Send + Sync`; every pipeline stage takes them by
//! reference so the remote HTTP clients and the in-process mocks are
//! interchangeable.

mod http;
mod mock;
pub mod scripted;

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{HttpChat, HttpEmbedder, ENV_API_KEY, ENV_CHAT_URL, ENV_EMBED_URL};
pub use mock::{Fallback, HashEmbedder, MockChat, MockRule, MockTable};
pub use scripted::ScriptedResponder;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Template id that produced this request; local metadata, never sent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self { messages, temperature: 0.0, max_output_tokens: 1024, tag: None }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let first = self.messages.first().ok_or_else(|| GatewayError::InvalidRequest("no messages".into()))?;
        if first.role == Role::Assistant {
            return Err(GatewayError::InvalidRequest("first message must be system or user".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) || self.temperature.is_nan() {
            return Err(GatewayError::InvalidRequest(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Text of the last user message, if any.
    pub fn last_user(&self) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str())
    }

    /// SHA-256 over (role, content) pairs; stable across platforms.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.messages {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            h.update(role.as_bytes());
            h.update([0u8]);
            h.update(m.content.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// A chat-completion service.
pub trait ChatGateway: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError>;
}

/// A unit-norm float vector of fixed dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A text-embedding service.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError>;
}

pub(crate) fn check_embed_input(texts: &[String]) -> Result<(), GatewayError> {
    if texts.is_empty() {
        return Err(GatewayError::InvalidRequest("no texts to embed".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(GatewayError::InvalidRequest(format!("text {i} is empty")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_backoff_ms: 200 }
    }
}

impl RetryPolicy {
    /// Run `op`, retrying transport failures with exponential backoff.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        let attempts = self.attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            match op() {
                Err(GatewayError::Transport(msg)) => {
                    log::warn!("transport failure (attempt {}/{}): {msg}", attempt + 1, attempts);
                    last = Some(GatewayError::Transport(msg));
                    if attempt + 1 < attempts && self.base_backoff_ms > 0 {
                        thread::sleep(Duration::from_millis(self.base_backoff_ms << attempt));
                    }
                }
                other => return other,
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Wraps any gateway with a [`RetryPolicy`].
pub struct Retrying<G> {
    pub inner: G,
    pub policy: RetryPolicy,
}

impl<G: ChatGateway> ChatGateway for Retrying<G> {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        request.validate()?;
        self.policy.run(|| self.inner.complete(request))
    }
}

impl<G: Embedder> Embedder for Retrying<G> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        self.policy.run(|| self.inner.embed(texts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
    }

    impl ChatGateway for Flaky {
        fn complete(&self, _: &ChatRequest) -> Result<String, GatewayError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(GatewayError::Transport("connection refused".into()))
            } else {
                Ok("ok".into())
            }
        }
    }

    fn req() -> ChatRequest {
        ChatRequest::new(vec![ChatMessage::system("echo"), ChatMessage::user("hi")])
    }

    #[test]
    fn request_validation() {
        assert!(req().validate().is_ok());
        assert!(ChatRequest::new(vec![]).validate().is_err());
        assert!(ChatRequest::new(vec![ChatMessage::assistant("x")]).validate().is_err());
        let mut r = req();
        r.temperature = 2.5;
        assert!(r.validate().is_err());
    }

    #[test]
    fn retries_then_succeeds() {
        let g = Retrying { inner: Flaky { failures: 2, calls: AtomicU32::new(0) }, policy: RetryPolicy { attempts: 3, base_backoff_ms: 0 } };
        assert_eq!(g.complete(&req()).unwrap(), "ok");
        assert_eq!(g.inner.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_exhausted_is_transport_error() {
        let g = Retrying { inner: Flaky { failures: 10, calls: AtomicU32::new(0) }, policy: RetryPolicy { attempts: 3, base_backoff_ms: 0 } };
        assert!(matches!(g.complete(&req()), Err(GatewayError::Transport(_))));
        assert_eq!(g.inner.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn fingerprint_is_stable() {
        assert_eq!(req().fingerprint(), req().fingerprint());
        let mut other = req();
        other.messages[1].content.push('!');
        assert_ne!(req().fingerprint(), other.fingerprint());
    }
}
