//! OpenAI-compatible `/chat/completions` transport.
//!
//! Trace overrides are sent in one of two shapes:
//!
//! * native (`override_template` is `None`): the override is pre-filled as
//!   the start of the assistant turn inside `<think>` tags and the server is
//!   asked to continue it (`continue_final_message`, as supported by vLLM);
//! * template: the override is rendered into the profile's template as a
//!   prior assistant turn, followed by a user turn asking for the answer.

use std::time::Duration;

use serde_json::{json, Value};

use super::{
    ChatBackend, ChatRequest, ChatResponse, HttpEndpoint, ReasoningControl, TransportError,
    OVERRIDE_CONTINUATION,
};
use crate::prompts::render;
use crate::types::ReasoningMode;

pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: HttpEndpoint,
    api_key: Option<String>,
}

impl HttpBackend {
    /// Reads the bearer token from the environment variable named by the
    /// endpoint, if any.
    pub fn new(endpoint: HttpEndpoint) -> Result<Self, String> {
        let api_key = match &endpoint.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| format!("environment variable {var} is not set"))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(endpoint.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint,
            api_key,
        })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.endpoint.base_url.trim_end_matches('/'))
    }
}

pub fn request_body(endpoint: &HttpEndpoint, req: &ChatRequest) -> Value {
    let mut messages = vec![json!({"role": "user", "content": req.prompt})];
    let mut body = json!({
        "model": req.model,
        "temperature": req.params.temperature,
        "top_p": req.params.top_p,
        "max_tokens": req.max_output_tokens,
        "n": 1,
    });
    if let Some(k) = req.params.top_k {
        body["top_k"] = json!(k);
    }
    if let Some(p) = req.params.min_p {
        body["min_p"] = json!(p);
    }
    if let Some(trace) = &req.trace_override {
        match &req.override_template {
            Some(template) => {
                messages.push(json!({
                    "role": "assistant",
                    "content": render(template, &[("trace", trace)]),
                }));
                messages.push(json!({"role": "user", "content": OVERRIDE_CONTINUATION}));
            }
            None => {
                messages.push(json!({
                    "role": "assistant",
                    "content": format!("<think>\n{trace}\n</think>\n\n"),
                }));
                body["continue_final_message"] = json!(true);
                body["add_generation_prompt"] = json!(false);
            }
        }
    }
    let on = req.mode == ReasoningMode::On;
    match &endpoint.reasoning {
        ReasoningControl::ChatTemplateKwargs => {
            body["chat_template_kwargs"] = json!({"enable_thinking": on});
        }
        ReasoningControl::ReasoningEffort { on: e_on, off: e_off } => {
            body["reasoning_effort"] = json!(if on { e_on } else { e_off });
        }
        ReasoningControl::None => {}
    }
    if req.search {
        if let Some(tool) = &endpoint.search_tool {
            body["tools"] = json!([tool]);
        }
    }
    body["messages"] = Value::Array(messages);
    body
}

/// Extracts trace, answer and token usage from a completion response.
pub fn parse_response(v: &Value) -> Result<ChatResponse, TransportError> {
    let message = v
        .pointer("/choices/0/message")
        .ok_or_else(|| TransportError::fatal("response has no choices[0].message"))?;
    let mut answer = message
        .get("content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let mut trace = ["reasoning_content", "reasoning"]
        .iter()
        .find_map(|k| message.get(*k).and_then(Value::as_str))
        .map(str::to_string);
    if trace.is_none() {
        if let Some(end) = answer.find("</think>") {
            let head = answer[..end].trim_start();
            let head = head.strip_prefix("<think>").unwrap_or(head);
            trace = Some(head.trim().to_string());
            answer = answer[end + "</think>".len()..].to_string();
        }
    }
    let completion = v.pointer("/usage/completion_tokens").and_then(Value::as_u64);
    let reasoning = v
        .pointer("/usage/completion_tokens_details/reasoning_tokens")
        .and_then(Value::as_u64);
    let (trace_tokens, answer_tokens) = match (completion, reasoning) {
        (Some(c), Some(r)) => (Some(r as u32), Some(c.saturating_sub(r) as u32)),
        (Some(c), None) if trace.is_none() => (None, Some(c as u32)),
        _ => (None, None),
    };
    Ok(ChatResponse {
        trace,
        answer: answer.trim().to_string(),
        trace_tokens,
        answer_tokens,
    })
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let body = request_body(&self.endpoint, request);
        let mut call = self.agent.post(&self.url()).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(&body)
            .map_err(|e| TransportError::transient(format!("transport: {e}")))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::transient(format!("reading body: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(TransportError::from_status(status, &text));
        }
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| TransportError::fatal(format!("response is not JSON: {e}")))?;
        parse_response(&v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendProfile, CallKind, Endpoint, LlmClient, SamplingParams};
    use crate::cache::ResponseCache;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    fn endpoint(base_url: String, reasoning: ReasoningControl) -> HttpEndpoint {
        HttpEndpoint {
            base_url,
            api_key_env: None,
            reasoning,
            search_tool: Some(json!({"google_search": {}})),
            timeout_secs: 5,
        }
    }

    fn request(mode: ReasoningMode, trace_override: Option<&str>, template: Option<&str>) -> ChatRequest {
        ChatRequest {
            profile_id: "q".into(),
            model: "Qwen/Qwen3-32B".into(),
            kind: CallKind::Generate,
            mode,
            prompt: "Who is X married to?".into(),
            trace_override: trace_override.map(str::to_string),
            override_template: template.map(str::to_string),
            params: SamplingParams {
                temperature: 0.6,
                top_p: 0.95,
                top_k: Some(20),
                min_p: Some(0.0),
            },
            max_output_tokens: 32_768,
            search: false,
            sample_index: 0,
        }
    }

    #[test]
    fn body_shapes() {
        let ep = endpoint("http://x".into(), ReasoningControl::ChatTemplateKwargs);
        let b = request_body(&ep, &request(ReasoningMode::Off, None, None));
        assert_eq!(b["chat_template_kwargs"]["enable_thinking"], json!(false));
        assert_eq!(b["top_k"], json!(20));
        assert_eq!(b["messages"].as_array().unwrap().len(), 1);
        assert!(b.get("tools").is_none());

        let b = request_body(&ep, &request(ReasoningMode::On, Some("Let me think."), None));
        assert_eq!(b["continue_final_message"], json!(true));
        assert_eq!(b["messages"][1]["content"], json!("<think>\nLet me think.\n</think>\n\n"));

        let ep = endpoint(
            "http://x".into(),
            ReasoningControl::ReasoningEffort { on: "high".into(), off: "none".into() },
        );
        let b = request_body(&ep, &request(ReasoningMode::On, Some("T"), Some("<thought>\n{trace}\n</thought>")));
        assert_eq!(b["reasoning_effort"], json!("high"));
        let msgs = b["messages"].as_array().unwrap();
        assert_eq!(msgs.len(), 3);
        assert_eq!(msgs[1]["role"], json!("assistant"));
        assert_eq!(msgs[1]["content"], json!("<thought>\nT\n</thought>"));
        assert_eq!(msgs[2]["content"], json!(OVERRIDE_CONTINUATION));

        let mut r = request(ReasoningMode::On, None, None);
        r.search = true;
        assert_eq!(request_body(&ep, &r)["tools"], json!([{"google_search": {}}]));
    }

    #[test]
    fn response_parsing() {
        let r = parse_response(&json!({
            "choices": [{"message": {"content": "Paris", "reasoning_content": "France's capital..."}}],
            "usage": {"completion_tokens": 50, "completion_tokens_details": {"reasoning_tokens": 48}}
        }))
        .unwrap();
        assert_eq!(r.trace.as_deref(), Some("France's capital..."));
        assert_eq!((r.trace_tokens, r.answer_tokens), (Some(48), Some(2)));

        let r = parse_response(&json!({
            "choices": [{"message": {"content": "<think>\nhmm\n</think>\n\nParis"}}]
        }))
        .unwrap();
        assert_eq!(r.trace.as_deref(), Some("hmm"));
        assert_eq!(r.answer, "Paris");

        assert!(parse_response(&json!({"choices": []})).is_err());
    }

    /// Serves the given (status, body) pairs in order, one per connection.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Value>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                seen2.lock().unwrap().push(serde_json::from_slice(&buf).unwrap());
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1"), seen)
    }

    #[test]
    fn retries_a_503_over_the_wire() {
        let ok = json!({"choices": [{"message": {"content": "Oslo"}}]}).to_string();
        let (url, seen) = serve(vec![(503, "overloaded".into()), (200, ok)]);
        let ep = endpoint(url, ReasoningControl::ChatTemplateKwargs);
        let mut profile = BackendProfile::qwen3_style("q", "Qwen/Qwen3-32B", Endpoint::Http(ep.clone()));
        profile.retry.base_backoff_ms = 1;
        let client = LlmClient::new(
            profile,
            Arc::new(HttpBackend::new(ep).unwrap()),
            Arc::new(ResponseCache::in_memory()),
        );
        let r = client.generate(ReasoningMode::Off, "Capital of Norway?", None, 0).unwrap();
        assert_eq!(r.answer_text, "Oslo");
        assert_eq!(client.backend_calls(), 2);
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(seen[1]["temperature"], json!(0.7));
    }

    #[test]
    fn missing_key_env_is_reported() {
        let mut ep = endpoint("http://x".into(), ReasoningControl::None);
        ep.api_key_env = Some("RECALL_PROBE_SURELY_UNSET_KEY".into());
        assert!(HttpBackend::new(ep).err().unwrap().contains("RECALL_PROBE_SURELY_UNSET_KEY"));
    }
}
