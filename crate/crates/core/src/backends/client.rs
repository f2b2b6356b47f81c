use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    BackendError, BackendProfile, CallKind, ChatBackend, ChatRequest, ChatResponse, TransportError,
};
use crate::cache::{cache_key, ResponseCache};
use crate::prompts::{PromptSet, TemplateId};
use crate::tokens::estimate_tokens;
use crate::types::{ReasoningMode, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub trace_text: Option<String>,
    pub answer_text: String,
    pub trace_token_count: Option<u32>,
    pub answer_token_count: u32,
    /// Counts were estimated as ceil(bytes / 4) rather than reported.
    pub token_counts_estimated: bool,
    /// The backend returned an empty answer.
    pub empty_output: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub verdict: Verdict,
    /// Neither the first response nor the reprompt ended in a verdict word.
    pub parse_failed: bool,
}

struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Cached, bounded, retrying access to one backend profile. Shareable across
/// threads.
pub struct LlmClient {
    profile: BackendProfile,
    backend: Arc<dyn ChatBackend>,
    cache: Arc<ResponseCache>,
    prompts: Arc<PromptSet>,
    gate: Gate,
    backend_calls: AtomicU64,
}

impl LlmClient {
    pub fn new(profile: BackendProfile, backend: Arc<dyn ChatBackend>, cache: Arc<ResponseCache>) -> Self {
        Self::with_prompts(profile, backend, cache, Arc::new(PromptSet::builtin()))
    }

    pub fn with_prompts(
        profile: BackendProfile,
        backend: Arc<dyn ChatBackend>,
        cache: Arc<ResponseCache>,
        prompts: Arc<PromptSet>,
    ) -> Self {
        let gate = Gate::new(profile.max_concurrent_requests);
        Self {
            profile,
            backend,
            cache,
            prompts,
            gate,
            backend_calls: AtomicU64::new(0),
        }
    }

    pub fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Backend invocations made by this client, retries included.
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }

    pub fn request(
        &self,
        kind: CallKind,
        mode: ReasoningMode,
        prompt: &str,
        trace_override: Option<&str>,
        sample_index: u32,
    ) -> ChatRequest {
        ChatRequest {
            profile_id: self.profile.profile_id.clone(),
            model: self.profile.model.clone(),
            kind,
            mode,
            prompt: prompt.to_string(),
            trace_override: trace_override.map(str::to_string),
            override_template: match trace_override {
                Some(_) if !self.profile.supports_native_trace_override => {
                    self.profile.override_template.clone()
                }
                _ => None,
            },
            params: self.profile.params(mode).clone(),
            max_output_tokens: self.profile.max_output_tokens(mode),
            search: kind == CallKind::Verify,
            sample_index,
        }
    }

    /// Serves from cache or calls the backend under the in-flight bound with
    /// the profile's retry policy.
    pub fn call(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let key = cache_key(request);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let response = self.call_uncached(request)?;
        Ok(self.cache.insert(&key, response)?)
    }

    fn call_uncached(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let policy = &self.profile.retry;
        let mut attempts = Vec::new();
        for attempt in 1..=policy.max_attempts.max(1) {
            let result = {
                let _permit = self.gate.acquire();
                self.backend_calls.fetch_add(1, Ordering::Relaxed);
                self.backend.complete(request)
            };
            match result {
                Ok(r) => return Ok(r),
                Err(TransportError {
                    retryable: false,
                    message,
                    ..
                }) => {
                    return Err(BackendError::Fatal {
                        profile: self.profile.profile_id.clone(),
                        message,
                    })
                }
                Err(e) => {
                    tracing::warn!(
                        profile = %self.profile.profile_id,
                        attempt,
                        "transient backend error: {e}"
                    );
                    attempts.push(format!("attempt {attempt}: {e}"));
                    if attempt < policy.max_attempts {
                        std::thread::sleep(backoff(policy.base_backoff_ms, attempt));
                    }
                }
            }
        }
        Err(BackendError::RetriesExhausted {
            profile: self.profile.profile_id.clone(),
            attempts,
        })
    }

    /// Generates one (trace, answer) pair. With `trace_override`, the returned
    /// trace is the override verbatim and the answer is conditioned on it.
    pub fn generate(
        &self,
        mode: ReasoningMode,
        prompt: &str,
        trace_override: Option<&str>,
        sample_index: u32,
    ) -> Result<GenerationResult, BackendError> {
        if trace_override.is_some() {
            if mode == ReasoningMode::Off {
                return Err(BackendError::InvalidRequest(
                    "trace_override requires reasoning mode ON".into(),
                ));
            }
            if !self.profile.supports_native_trace_override && self.profile.override_template.is_none() {
                return Err(BackendError::Capability {
                    profile: self.profile.profile_id.clone(),
                    message: "trace override needs native support or an override_template".into(),
                });
            }
        }
        let request = self.request(CallKind::Generate, mode, prompt, trace_override, sample_index);
        let response = self.call(&request)?;

        let trace_text = match (mode, trace_override) {
            (ReasoningMode::Off, _) => None,
            (ReasoningMode::On, Some(o)) => Some(o.to_string()),
            (ReasoningMode::On, None) => response.trace.clone(),
        };
        let reported = trace_override.is_none()
            && response.answer_tokens.is_some()
            && (trace_text.is_none() || response.trace_tokens.is_some());
        let (trace_token_count, answer_token_count) = if reported {
            (
                trace_text.as_ref().and(response.trace_tokens),
                response.answer_tokens.unwrap_or_default(),
            )
        } else {
            (
                trace_text.as_deref().map(estimate_tokens),
                estimate_tokens(&response.answer),
            )
        };
        Ok(GenerationResult {
            empty_output: response.answer.trim().is_empty(),
            trace_text,
            answer_text: response.answer,
            trace_token_count,
            answer_token_count,
            token_counts_estimated: !reported,
        })
    }

    /// Runs a text prompt with reasoning enabled and returns the final output.
    /// `attempt` distinguishes reprompts so they are not served the cached
    /// response they are retrying.
    pub fn complete_text(&self, kind: CallKind, prompt: &str, attempt: u32) -> Result<String, BackendError> {
        let request = self.request(kind, ReasoningMode::On, prompt, None, attempt);
        Ok(self.call(&request)?.answer)
    }

    /// Checks one fact with the search-enabled verification prompt. An
    /// unparseable final line is reprompted once; a second failure yields
    /// `Unknown` with `parse_failed` set.
    pub fn verify_with_search(&self, fact: &str) -> Result<VerifyOutcome, BackendError> {
        if !self.profile.supports_search_tool && !self.profile.is_mock() {
            return Err(BackendError::Capability {
                profile: self.profile.profile_id.clone(),
                message: "verification requires supports_search_tool".into(),
            });
        }
        let prompt = self.prompts.render(TemplateId::VerifyFact, &[("fact", fact)]);
        for attempt in 0..2 {
            let reply = self.complete_text(CallKind::Verify, &prompt, attempt)?;
            if let Some(verdict) = parse_verdict(&reply) {
                return Ok(VerifyOutcome {
                    verdict,
                    parse_failed: false,
                });
            }
            tracing::warn!(fact, attempt, "unparseable verification verdict");
        }
        Ok(VerifyOutcome {
            verdict: Verdict::Unknown,
            parse_failed: true,
        })
    }
}

fn backoff(base_ms: u64, attempt: u32) -> Duration {
    if base_ms == 0 {
        return Duration::ZERO;
    }
    let exp = base_ms.saturating_mul(1u64 << (attempt - 1).min(16));
    let jitter = rand::rng().random_range(0..base_ms);
    Duration::from_millis(exp + jitter)
}

/// Reads the verdict from the last non-empty line, ignoring case, quotes,
/// markdown emphasis and trailing punctuation.
pub fn parse_verdict(reply: &str) -> Option<Verdict> {
    let line = reply.lines().rev().find(|l| !l.trim().is_empty())?;
    let word = line
        .trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_ascii_lowercase();
    match word.as_str() {
        "correct" => Some(Verdict::Correct),
        "incorrect" => Some(Verdict::Incorrect),
        "illegal" => Some(Verdict::Illegal),
        "unknown" => Some(Verdict::Unknown),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::MockBackend;

    fn client(backend: MockBackend) -> (LlmClient, Arc<MockBackend>) {
        let backend = Arc::new(backend);
        let c = LlmClient::new(
            BackendProfile::mock("mock"),
            backend.clone(),
            Arc::new(ResponseCache::in_memory()),
        );
        (c, backend)
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("reasoning...\ncorrect"), Some(Verdict::Correct));
        assert_eq!(parse_verdict("reasoning...\nCorrect.\n\n"), Some(Verdict::Correct));
        assert_eq!(parse_verdict("**Incorrect**"), Some(Verdict::Incorrect));
        assert_eq!(parse_verdict("\"illegal\""), Some(Verdict::Illegal));
        assert_eq!(parse_verdict("UNKNOWN"), Some(Verdict::Unknown));
        assert_eq!(parse_verdict("the fact is correct"), None);
        assert_eq!(parse_verdict("maybe"), None);
        assert_eq!(parse_verdict(""), None);
    }

    #[test]
    fn scripted_answer() {
        let (c, _) = client(MockBackend::from_fn(|req| {
            assert_eq!(req.prompt, "P");
            Ok(ChatResponse::with_trace("hmm", "X"))
        }));
        let r = c.generate(ReasoningMode::On, "P", None, 0).unwrap();
        assert_eq!(r.answer_text, "X");
        assert_eq!(r.trace_text.as_deref(), Some("hmm"));
        assert!(r.token_counts_estimated);
        assert_eq!(r.answer_token_count, 1);
    }

    #[test]
    fn override_is_returned_verbatim() {
        let (c, _) = client(MockBackend::from_fn(|req| {
            assert_eq!(req.trace_override.as_deref(), Some("Let me think."));
            assert!(req.override_template.is_some());
            Ok(ChatResponse::with_trace("backend's own trace", "A"))
        }));
        let r = c.generate(ReasoningMode::On, "P", Some("Let me think."), 0).unwrap();
        assert_eq!(r.trace_text.as_deref(), Some("Let me think."));
        assert_eq!(r.trace_token_count, Some(4));
    }

    #[test]
    fn off_mode_drops_trace_and_rejects_override() {
        let (c, _) = client(MockBackend::from_fn(|_| Ok(ChatResponse::with_trace("t", "a"))));
        assert_eq!(c.generate(ReasoningMode::Off, "P", None, 0).unwrap().trace_text, None);
        assert!(matches!(
            c.generate(ReasoningMode::Off, "P", Some("x"), 0),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn override_without_route_is_a_capability_error() {
        let mut profile = BackendProfile::mock("m");
        profile.override_template = None;
        let c = LlmClient::new(
            profile,
            Arc::new(MockBackend::from_fn(|_| Ok(ChatResponse::text("a")))),
            Arc::new(ResponseCache::in_memory()),
        );
        assert!(matches!(
            c.generate(ReasoningMode::On, "P", Some("x"), 0),
            Err(BackendError::Capability { .. })
        ));
    }

    #[test]
    fn second_identical_call_is_cached() {
        let (c, mock) = client(MockBackend::from_fn(|_| Ok(ChatResponse::text("a"))));
        c.generate(ReasoningMode::On, "P", None, 3).unwrap();
        c.generate(ReasoningMode::On, "P", None, 3).unwrap();
        assert_eq!(mock.calls(), 1);
        c.generate(ReasoningMode::On, "P", None, 4).unwrap();
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn reported_counts_are_used() {
        let (c, _) = client(MockBackend::from_fn(|_| {
            Ok(ChatResponse {
                trace: Some("t".into()),
                answer: "a".into(),
                trace_tokens: Some(120),
                answer_tokens: Some(7),
            })
        }));
        let r = c.generate(ReasoningMode::On, "P", None, 0).unwrap();
        assert_eq!((r.trace_token_count, r.answer_token_count), (Some(120), 7));
        assert!(!r.token_counts_estimated);
    }

    #[test]
    fn transient_errors_are_retried_then_exhausted() {
        let (c, mock) = client(MockBackend::from_fn(|_| Err(TransportError::from_status(503, "busy"))));
        match c.generate(ReasoningMode::On, "P", None, 0) {
            Err(BackendError::RetriesExhausted { attempts, .. }) => assert_eq!(attempts.len(), 5),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(mock.calls(), 5);

        let (c, mock) = client(MockBackend::from_fn(|_| Err(TransportError::from_status(400, "bad"))));
        assert!(matches!(
            c.generate(ReasoningMode::On, "P", None, 0),
            Err(BackendError::Fatal { .. })
        ));
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn recovers_after_transient_failures() {
        let failures = std::sync::atomic::AtomicU32::new(0);
        let (c, mock) = client(MockBackend::from_fn(move |_| {
            if failures.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(TransportError::from_status(429, "slow down"))
            } else {
                Ok(ChatResponse::text("ok"))
            }
        }));
        assert_eq!(c.generate(ReasoningMode::On, "P", None, 0).unwrap().answer_text, "ok");
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn verify_parses_and_reprompts() {
        let (c, _) = client(MockBackend::from_fn(|_| Ok(ChatResponse::text("evidence...\ncorrect"))));
        assert_eq!(
            c.verify_with_search("F").unwrap(),
            VerifyOutcome { verdict: Verdict::Correct, parse_failed: false }
        );

        let (c, _) = client(MockBackend::from_fn(|_| Ok(ChatResponse::text("Correct."))));
        assert_eq!(c.verify_with_search("F").unwrap().verdict, Verdict::Correct);

        let (c, mock) = client(MockBackend::from_fn(|_| Ok(ChatResponse::text("maybe"))));
        assert_eq!(
            c.verify_with_search("F").unwrap(),
            VerifyOutcome { verdict: Verdict::Unknown, parse_failed: true }
        );
        assert_eq!(mock.calls(), 2);

        let (c, mock) = client(MockBackend::from_fn(|req| {
            Ok(ChatResponse::text(if req.sample_index == 0 { "maybe" } else { "incorrect" }))
        }));
        assert_eq!(c.verify_with_search("F").unwrap().verdict, Verdict::Incorrect);
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn verify_requires_search_on_live_profiles() {
        let mut profile = BackendProfile::gemini_style(
            "g",
            "gemini",
            crate::backends::Endpoint::Http(crate::backends::HttpEndpoint {
                base_url: "http://127.0.0.1:9".into(),
                api_key_env: None,
                reasoning: crate::backends::ReasoningControl::None,
                search_tool: None,
                timeout_secs: 1,
            }),
        );
        profile.supports_search_tool = false;
        let c = LlmClient::new(
            profile,
            Arc::new(MockBackend::from_fn(|_| Ok(ChatResponse::text("correct")))),
            Arc::new(ResponseCache::in_memory()),
        );
        assert!(matches!(c.verify_with_search("F"), Err(BackendError::Capability { .. })));
    }

    #[test]
    fn in_flight_bound_is_respected() {
        let mut profile = BackendProfile::mock("m");
        profile.max_concurrent_requests = 3;
        let mock = Arc::new(MockBackend::from_fn(|_| {
            std::thread::sleep(Duration::from_millis(5));
            Ok(ChatResponse::text("a"))
        }));
        let c = LlmClient::new(profile, mock.clone(), Arc::new(ResponseCache::in_memory()));
        std::thread::scope(|s| {
            for t in 0..12 {
                let c = &c;
                s.spawn(move || {
                    for i in 0..4 {
                        c.generate(ReasoningMode::On, "P", None, t * 10 + i).unwrap();
                    }
                });
            }
        });
        assert_eq!(mock.calls(), 48);
        assert!(mock.max_in_flight() <= 3, "{}", mock.max_in_flight());
        assert!(mock.max_in_flight() >= 2);
    }
}
