//! Chat-completion and embedding providers.
//!
//! Live clients speak the OpenAI-compatible HTTP protocol ([`http`]); every
//! live client has a deterministic twin in [`mock`] so the whole pipeline can
//! run without network access. [`Retrying`] and [`Limited`] wrap any provider.

pub mod http;
pub mod mock;

use std::fmt;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::{self, Scalar};

pub use http::{HttpChat, HttpEmbedder, ProviderConfig};
pub use mock::{FnChat, HashEmbedder, ScriptEntry, ScriptedChat};

pub const DEFAULT_GENERATION_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error (status {status:?}): {body}")]
    Protocol { status: Option<u16>, body: String },
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl ProviderError {
    /// Transport failures, 429 and 5xx responses are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport(_) | ProviderError::RateLimited { .. } => true,
            ProviderError::Protocol { status: Some(s), .. } => *s >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
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
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    /// Single user-turn request at the default generation temperature.
    pub fn user(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        ChatRequest {
            model: model.into(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: DEFAULT_GENERATION_TEMPERATURE,
            max_tokens: None,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |m: &str| Err(ProviderError::InvalidInput(m.to_string()));
        if self.messages.is_empty() {
            return bad("request has no messages");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must lie in [0, 2]");
        }
        if self.max_tokens == Some(0) {
            return bad("max_tokens must be positive");
        }
        if self
            .messages
            .iter()
            .skip(1)
            .any(|m| m.role == Role::System)
        {
            return bad("a system message may only appear first");
        }
        if self
            .messages
            .iter()
            .any(|m| m.role != Role::Assistant && m.content.is_empty())
        {
            return bad("only assistant messages may be empty");
        }
        Ok(())
    }

    /// All message contents joined by newlines; what mock scripts match on.
    pub fn joined_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// A dense embedding. Values are finite and the vector is never empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ProviderError> {
        if values.is_empty() {
            return Err(ProviderError::InvalidInput("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ProviderError::InvalidInput("non-finite embedding value".into()));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Cosine similarity over raw slices.
pub fn cosine_slices<T: Scalar>(a: &[T], b: &[T]) -> Result<T, ProviderError> {
    if a.len() != b.len() {
        return Err(ProviderError::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (num::l2_norm(a), num::l2_norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(ProviderError::ZeroVector);
    }
    let c = num::dot(a, b) / (na * nb);
    // Rounding can push |c| a hair past 1.
    Ok(c.max(-T::one()).min(T::one()))
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, ProviderError> {
    cosine_slices(a.values(), b.values())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

pub trait ChatProvider: Send + Sync {
    /// Returns the first choice's assistant content.
    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError>;

    /// Token usage accumulated so far, when the backend reports it.
    fn usage(&self) -> TokenUsage {
        TokenUsage::default()
    }
}

pub trait EmbedProvider: Send + Sync {
    /// One vector per input, same order, uniform dimension.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError>;

    fn model_name(&self) -> &str;
}

impl<P: ChatProvider + ?Sized> ChatProvider for &P {
    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        (**self).chat(req)
    }

    fn usage(&self) -> TokenUsage {
        (**self).usage()
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for Box<P> {
    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        (**self).chat(req)
    }

    fn usage(&self) -> TokenUsage {
        (**self).usage()
    }
}

impl<P: EmbedProvider + ?Sized> EmbedProvider for &P {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        (**self).embed(texts)
    }

    fn model_name(&self) -> &str {
        (**self).model_name()
    }
}

impl<P: EmbedProvider + ?Sized> EmbedProvider for Box<P> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        (**self).embed(texts)
    }

    fn model_name(&self) -> &str {
        (**self).model_name()
    }
}

/// Precondition shared by every embedder.
pub(crate) fn check_embed_input(texts: &[String]) -> Result<(), ProviderError> {
    if texts.is_empty() {
        return Err(ProviderError::InvalidInput("no texts to embed".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(ProviderError::InvalidInput(format!("text {i} is empty")));
    }
    Ok(())
}

/// Postcondition shared by every embedder.
pub(crate) fn check_embed_output(
    inputs: usize,
    vectors: &[EmbeddingVector],
) -> Result<(), ProviderError> {
    if vectors.len() != inputs {
        return Err(ProviderError::Protocol {
            status: None,
            body: format!("expected {inputs} embeddings, got {}", vectors.len()),
        });
    }
    if let Some(first) = vectors.first() {
        if let Some(v) = vectors.iter().find(|v| v.dim() != first.dim()) {
            return Err(ProviderError::DimMismatch {
                expected: first.dim(),
                got: v.dim(),
            });
        }
    }
    Ok(())
}

/// Exponential backoff: attempt `i` (0-based) waits `base * 2^i` before the
/// next try. Retry-after hints from the server take precedence when longer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// `retries` extra attempts after the first, with no sleeping.
    pub fn immediate(retries: u32) -> Self {
        RetryPolicy {
            max_attempts: retries + 1,
            base_delay: Duration::ZERO,
        }
    }

    pub fn run<T>(
        &self,
        mut attempt: impl FnMut() -> Result<T, ProviderError>,
    ) -> Result<T, ProviderError> {
        let mut i = 0;
        loop {
            match attempt() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && i + 1 < self.max_attempts.max(1) => {
                    let backoff = self.base_delay.saturating_mul(1 << i.min(16));
                    let wait = match &e {
                        ProviderError::RateLimited {
                            retry_after: Some(hint),
                        } => backoff.max(*hint),
                        _ => backoff,
                    };
                    log::warn!("attempt {} failed ({e}); retrying in {wait:?}", i + 1);
                    if !wait.is_zero() {
                        thread::sleep(wait);
                    }
                    i += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Retries the wrapped provider according to a [`RetryPolicy`].
pub struct Retrying<P> {
    pub inner: P,
    pub policy: RetryPolicy,
}

impl<P> Retrying<P> {
    pub fn new(inner: P, policy: RetryPolicy) -> Self {
        Retrying { inner, policy }
    }
}

impl<P: ChatProvider> ChatProvider for Retrying<P> {
    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        self.policy.run(|| self.inner.chat(req))
    }

    fn usage(&self) -> TokenUsage {
        self.inner.usage()
    }
}

impl<P: EmbedProvider> EmbedProvider for Retrying<P> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        self.policy.run(|| self.inner.embed(texts))
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }
}

/// Counting semaphore bounding simultaneous in-flight calls.
pub struct ConcurrencyLimit {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl fmt::Debug for ConcurrencyLimit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConcurrencyLimit").field("max", &self.max).finish()
    }
}

impl ConcurrencyLimit {
    pub fn new(max: usize) -> Self {
        ConcurrencyLimit {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn max(&self) -> usize {
        self.max
    }

    pub fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut active = self.active.lock().expect("limit lock");
            while *active >= self.max {
                active = self.freed.wait(active).expect("limit lock");
            }
            *active += 1;
        }
        struct Release<'a>(&'a ConcurrencyLimit);
        impl Drop for Release<'_> {
            fn drop(&mut self) {
                *self.0.active.lock().expect("limit lock") -= 1;
                self.0.freed.notify_one();
            }
        }
        let _release = Release(self);
        f()
    }
}

/// Bounds simultaneous calls into the wrapped provider.
pub struct Limited<P> {
    pub inner: P,
    limit: ConcurrencyLimit,
}

impl<P> Limited<P> {
    pub fn new(inner: P, max_in_flight: usize) -> Self {
        Limited {
            inner,
            limit: ConcurrencyLimit::new(max_in_flight),
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.limit.max()
    }
}

impl<P: ChatProvider> ChatProvider for Limited<P> {
    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        self.limit.run(|| self.inner.chat(req))
    }

    fn usage(&self) -> TokenUsage {
        self.inner.usage()
    }
}

impl<P: EmbedProvider> EmbedProvider for Limited<P> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        self.limit.run(|| self.inner.embed(texts))
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }
}
