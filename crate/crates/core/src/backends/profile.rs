use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::types::ReasoningMode;

/// Assistant turn used to inject a trace override on backends without native
/// support: the rendered text is sent as a prior assistant message, followed
/// by [`OVERRIDE_CONTINUATION`] as a user turn.
pub const DEFAULT_OVERRIDE_TEMPLATE: &str = "<thought>\n{trace}\n</thought>";
pub const OVERRIDE_CONTINUATION: &str =
    "Based on the thought above, give your final answer to the question.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default)]
    pub top_k: Option<u32>,
    #[serde(default)]
    pub min_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_backoff_ms: 500,
        }
    }
}

/// How the reasoning toggle is expressed on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReasoningControl {
    /// `chat_template_kwargs.enable_thinking` (vLLM / SGLang serving Qwen3).
    ChatTemplateKwargs,
    /// `reasoning_effort` with one value per mode (OpenAI-compatible APIs).
    ReasoningEffort { on: String, off: String },
    /// The model exposes no toggle; both modes send the same request.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpEndpoint {
    /// Base URL of an OpenAI-compatible API; `/chat/completions` is appended.
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub reasoning: ReasoningControl,
    /// Tool object appended to `tools` on verification calls.
    #[serde(default)]
    pub search_tool: Option<serde_json::Value>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Endpoint {
    /// Scripted offline backend; `script` is a JSON fixture file.
    Mock {
        #[serde(default)]
        script: Option<PathBuf>,
    },
    Http(HttpEndpoint),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendProfile {
    pub profile_id: String,
    pub endpoint: Endpoint,
    pub model: String,
    pub on: SamplingParams,
    pub off: SamplingParams,
    #[serde(default = "default_max_on")]
    pub max_output_tokens_on: u32,
    #[serde(default = "default_max_off")]
    pub max_output_tokens_off: u32,
    #[serde(default)]
    pub supports_native_trace_override: bool,
    #[serde(default = "default_template")]
    pub override_template: Option<String>,
    #[serde(default)]
    pub supports_search_tool: bool,
    #[serde(default = "default_concurrency")]
    pub max_concurrent_requests: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_max_on() -> u32 {
    32_768
}

fn default_max_off() -> u32 {
    8_192
}

fn default_template() -> Option<String> {
    Some(DEFAULT_OVERRIDE_TEMPLATE.to_string())
}

fn default_concurrency() -> usize {
    8
}

impl BackendProfile {
    /// Gemini-style defaults: T=1.0, top_p=0.95 in both modes.
    pub fn gemini_style(profile_id: impl Into<String>, model: impl Into<String>, endpoint: Endpoint) -> Self {
        let params = SamplingParams {
            temperature: 1.0,
            top_p: 0.95,
            top_k: None,
            min_p: None,
        };
        Self {
            profile_id: profile_id.into(),
            endpoint,
            model: model.into(),
            on: params.clone(),
            off: params,
            max_output_tokens_on: default_max_on(),
            max_output_tokens_off: default_max_off(),
            supports_native_trace_override: false,
            override_template: default_template(),
            supports_search_tool: false,
            max_concurrent_requests: default_concurrency(),
            retry: RetryPolicy::default(),
        }
    }

    /// Qwen3-style defaults: ON {T=0.6, top_p=0.95, top_k=20, min_p=0},
    /// OFF {T=0.7, top_p=0.8, top_k=20, min_p=0}.
    pub fn qwen3_style(profile_id: impl Into<String>, model: impl Into<String>, endpoint: Endpoint) -> Self {
        Self {
            on: SamplingParams {
                temperature: 0.6,
                top_p: 0.95,
                top_k: Some(20),
                min_p: Some(0.0),
            },
            off: SamplingParams {
                temperature: 0.7,
                top_p: 0.8,
                top_k: Some(20),
                min_p: Some(0.0),
            },
            ..Self::gemini_style(profile_id, model, endpoint)
        }
    }

    pub fn mock(profile_id: impl Into<String>) -> Self {
        let mut p = Self::gemini_style(profile_id, "mock", Endpoint::Mock { script: None });
        p.supports_search_tool = true;
        p.retry.base_backoff_ms = 0;
        p
    }

    pub fn params(&self, mode: ReasoningMode) -> &SamplingParams {
        match mode {
            ReasoningMode::On => &self.on,
            ReasoningMode::Off => &self.off,
        }
    }

    pub fn max_output_tokens(&self, mode: ReasoningMode) -> u32 {
        match mode {
            ReasoningMode::On => self.max_output_tokens_on,
            ReasoningMode::Off => self.max_output_tokens_off,
        }
    }

    pub fn is_mock(&self) -> bool {
        matches!(self.endpoint, Endpoint::Mock { .. })
    }

    /// Collects every problem instead of stopping at the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let id = &self.profile_id;
        if id.trim().is_empty() {
            errs.push("profile_id must be non-empty".to_string());
        }
        if self.max_concurrent_requests == 0 {
            errs.push(format!("profile {id}: max_concurrent_requests must be ≥ 1"));
        }
        if self.retry.max_attempts == 0 {
            errs.push(format!("profile {id}: retry.max_attempts must be ≥ 1"));
        }
        for (mode, p) in [("on", &self.on), ("off", &self.off)] {
            if p.temperature.is_nan() || p.temperature < 0.0 {
                errs.push(format!("profile {id}: {mode}.temperature must be ≥ 0"));
            }
            if !(0.0..=1.0).contains(&p.top_p) || p.top_p == 0.0 {
                errs.push(format!("profile {id}: {mode}.top_p must be in (0, 1]"));
            }
            if let Some(min_p) = p.min_p {
                if !(0.0..=1.0).contains(&min_p) {
                    errs.push(format!("profile {id}: {mode}.min_p must be in [0, 1]"));
                }
            }
        }
        if self.max_output_tokens_on == 0 || self.max_output_tokens_off == 0 {
            errs.push(format!("profile {id}: max_output_tokens must be ≥ 1"));
        }
        if let Some(t) = &self.override_template {
            if !t.contains("{trace}") {
                errs.push(format!("profile {id}: override_template must contain {{trace}}"));
            }
        }
        if let Endpoint::Http(h) = &self.endpoint {
            if !(h.base_url.starts_with("http://") || h.base_url.starts_with("https://")) {
                errs.push(format!("profile {id}: endpoint.base_url must be an http(s) URL"));
            }
        }
        errs
    }
}
