//! Chat backends with a reasoning toggle, trace-override injection and a
//! search-enabled verification call.
//!
//! [`ChatBackend`] is the transport: one request in, one response out, no
//! caching or retries. [`LlmClient`] layers the content-addressed cache, the
//! per-profile in-flight bound and the retry policy on top.

mod client;
pub mod http;
pub mod mock;
mod profile;

use serde::{Deserialize, Serialize};

use crate::types::ReasoningMode;

pub use client::{parse_verdict, GenerationResult, LlmClient, VerifyOutcome};
pub use profile::{
    BackendProfile, Endpoint, HttpEndpoint, ReasoningControl, RetryPolicy, SamplingParams,
    DEFAULT_OVERRIDE_TEMPLATE, OVERRIDE_CONTINUATION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallKind {
    /// Answer generation for an experiment variant.
    Generate,
    /// Autorater grading.
    Grade,
    /// Fact extraction, filtering and parsing.
    Pipeline,
    /// Search-backed fact verification.
    Verify,
}

/// Everything that determines a backend response. The serialized form is
/// what the cache key hashes, so field order here is part of the cache format.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub profile_id: String,
    pub model: String,
    pub kind: CallKind,
    pub mode: ReasoningMode,
    pub prompt: String,
    pub trace_override: Option<String>,
    /// `None` means the backend injects the override natively; otherwise the
    /// override is rendered into this template as a prior assistant turn.
    pub override_template: Option<String>,
    pub params: SamplingParams,
    pub max_output_tokens: u32,
    pub search: bool,
    pub sample_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_tokens: Option<u32>,
}

impl ChatResponse {
    pub fn text(answer: impl Into<String>) -> Self {
        Self {
            trace: None,
            answer: answer.into(),
            trace_tokens: None,
            answer_tokens: None,
        }
    }

    pub fn with_trace(trace: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            trace: Some(trace.into()),
            ..Self::text(answer)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct TransportError {
    pub retryable: bool,
    pub status: Option<u16>,
    pub message: String,
}

impl TransportError {
    pub fn transient(message: impl Into<String>) -> Self {
        Self {
            retryable: true,
            status: None,
            message: message.into(),
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            retryable: false,
            status: None,
            message: message.into(),
        }
    }

    /// 429 and 5xx are retried; other statuses are not.
    pub fn from_status(status: u16, body: &str) -> Self {
        let mut snippet: String = body.chars().take(300).collect();
        if snippet.len() < body.len() {
            snippet.push('…');
        }
        Self {
            retryable: status == 429 || status >= 500,
            status: Some(status),
            message: format!("HTTP {status}: {snippet}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("profile {profile}: gave up after {} attempts: {}", attempts.len(), attempts.join("; "))]
    RetriesExhausted {
        profile: String,
        attempts: Vec<String>,
    },
    #[error("profile {profile}: {message}")]
    Fatal { profile: String, message: String },
    #[error("profile {profile} lacks a capability: {message}")]
    Capability { profile: String, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        (**self).complete(request)
    }
}

/// Backend that refuses every call. Used by `replay` and dry runs so that a
/// cache miss surfaces as an error instead of network traffic.
pub struct OfflineBackend;

impl ChatBackend for OfflineBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        Err(TransportError::fatal(format!(
            "offline: no cached response for {:?} call on profile {}",
            request.kind, request.profile_id
        )))
    }
}
