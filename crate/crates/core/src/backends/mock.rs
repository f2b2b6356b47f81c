//! Deterministic offline backend.
//!
//! A script is a JSON file of rules tried in order; the first rule whose
//! matchers all accept the request answers it with
//! `replies[sample_index % replies.len()]`:
//!
//! ```json
//! {
//!   "rules": [
//!     { "kind": "generate", "mode": "on", "contains": ["capital of Iceland"],
//!       "replies": [ { "trace": "Reykjavik is...", "answer": "Reykjavik" } ] },
//!     { "prompt_sha256": "9f86d0…", "replies": [ { "answer": "NONE" } ] }
//!   ],
//!   "default": [ { "answer": "I don't know" } ]
//! }
//! ```
//!
//! Matchers: `kind`, `mode`, `prompt_sha256` (hex SHA-256 of the prompt),
//! `contains` (all substrings present in the prompt), `excludes` (none
//! present), `trace_contains` (all present in the trace override) and
//! `has_override`.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CallKind, ChatBackend, ChatRequest, ChatResponse, TransportError};
use crate::types::ReasoningMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    pub answer: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<CallKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ReasoningMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excludes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace_contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub has_override: Option<bool>,
    pub replies: Vec<MockReply>,
}

impl MockRule {
    fn matches(&self, req: &ChatRequest) -> bool {
        self.kind.is_none_or(|k| k == req.kind)
            && self.mode.is_none_or(|m| m == req.mode)
            && self
                .prompt_sha256
                .as_ref()
                .is_none_or(|h| h.eq_ignore_ascii_case(&prompt_sha256(&req.prompt)))
            && self.contains.iter().all(|s| req.prompt.contains(s.as_str()))
            && !self.excludes.iter().any(|s| req.prompt.contains(s.as_str()))
            && self.has_override.is_none_or(|h| h == req.trace_override.is_some())
            && self.trace_contains.iter().all(|s| {
                req.trace_override
                    .as_deref()
                    .is_some_and(|t| t.contains(s.as_str()))
            })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default: Vec<MockReply>,
}

impl MockScript {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn respond(&self, req: &ChatRequest) -> Option<ChatResponse> {
        let replies = self
            .rules
            .iter()
            .find(|r| r.matches(req))
            .map(|r| &r.replies)
            .unwrap_or(&self.default);
        if replies.is_empty() {
            return None;
        }
        let reply = &replies[req.sample_index as usize % replies.len()];
        Some(ChatResponse {
            trace: reply.trace.clone(),
            answer: reply.answer.clone(),
            trace_tokens: None,
            answer_tokens: None,
        })
    }
}

pub fn prompt_sha256(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

type Responder = Box<dyn Fn(&ChatRequest) -> Result<ChatResponse, TransportError> + Send + Sync>;
type Latency = Box<dyn Fn(&ChatRequest) -> u64 + Send + Sync>;

pub struct MockBackend {
    responder: Responder,
    latency: Option<Latency>,
    abort_after: Option<u64>,
    calls: AtomicU64,
    in_flight: AtomicU64,
    high_water: AtomicU64,
}

impl MockBackend {
    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<ChatResponse, TransportError> + Send + Sync + 'static,
    {
        Self {
            responder: Box::new(f),
            latency: None,
            abort_after: None,
            calls: AtomicU64::new(0),
            in_flight: AtomicU64::new(0),
            high_water: AtomicU64::new(0),
        }
    }

    pub fn from_script(script: MockScript) -> Self {
        Self::from_fn(move |req| {
            script.respond(req).ok_or_else(|| {
                TransportError::fatal(format!(
                    "mock: no rule matches {:?} prompt starting {:?}",
                    req.kind,
                    req.prompt.chars().take(80).collect::<String>()
                ))
            })
        })
    }

    /// Adds per-request latency in milliseconds.
    pub fn with_latency<F>(mut self, f: F) -> Self
    where
        F: Fn(&ChatRequest) -> u64 + Send + Sync + 'static,
    {
        self.latency = Some(Box::new(f));
        self
    }

    /// Fails every call after the first `n` with a non-retryable error,
    /// simulating a process that dies mid-run.
    pub fn abort_after(mut self, n: u64) -> Self {
        self.abort_after = Some(n);
        self
    }

    /// Calls received, including failed ones.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Largest number of calls observed in flight at once.
    pub fn max_in_flight(&self) -> u64 {
        self.high_water.load(Ordering::SeqCst)
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.abort_after.is_some_and(|limit| n >= limit) {
            return Err(TransportError::fatal("mock: injected abort"));
        }
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.high_water.fetch_max(now, Ordering::SeqCst);
        if let Some(latency) = &self.latency {
            let ms = latency(request);
            if ms > 0 {
                std::thread::sleep(std::time::Duration::from_millis(ms));
            }
        }
        let out = (self.responder)(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}
