//! Provider-agnostic chat-model access for model-backed roles.
//!
//! One wire shape: a JSON chat-completion request (messages in, first choice
//! text out), with transports behind a trait so the hermetic test suite never
//! opens a network connection. Credentials are resolved from an environment
//! variable at call time and never serialized anywhere.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key, if any. The key
    /// material itself is never stored.
    #[serde(default)]
    pub credential_env: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_temperature() -> f64 {
    0.7
}
fn default_max_retries() -> u32 {
    3
}
fn default_timeout_secs() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub text: String,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            text: text.into(),
        }
    }
    pub fn user(text: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("provider error (status {status}): {message}")]
    Remote { status: u16, message: String },
    #[error("retries exhausted after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
}

#[derive(Debug, Clone)]
pub struct TransportResponse {
    pub status: u16,
    pub body: Value,
}

pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<TransportResponse, String>;
}

/// Real HTTPS transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        HttpTransport {
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<TransportResponse, String> {
        let mut req = self.client.post(url).json(body).timeout(timeout);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body: Value = resp.json().unwrap_or(Value::Null);
        Ok(TransportResponse { status, body })
    }
}

/// Scripted transport for tests: pops one canned result per call.
pub struct MockTransport {
    script: Mutex<VecDeque<Result<TransportResponse, String>>>,
    pub calls: AtomicU32,
}

impl MockTransport {
    pub fn new(script: Vec<Result<TransportResponse, String>>) -> Self {
        MockTransport {
            script: Mutex::new(script.into()),
            calls: AtomicU32::new(0),
        }
    }

    /// Transport that answers every call with the same completion text.
    pub fn echoing(text: &str) -> Self {
        let resp = completion_response(text);
        MockTransport {
            script: Mutex::new(VecDeque::from(vec![Ok(resp)])),
            calls: AtomicU32::new(0),
        }
    }

    pub fn call_count(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Build the provider-shaped body for a canned completion.
pub fn completion_response(text: &str) -> TransportResponse {
    TransportResponse {
        status: 200,
        body: json!({
            "choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"total_tokens": 0}
        }),
    }
}

impl Transport for MockTransport {
    fn post_json(
        &self,
        _url: &str,
        _bearer: Option<&str>,
        _body: &Value,
        _timeout: Duration,
    ) -> Result<TransportResponse, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut script = self.script.lock().expect("mock script lock");
        match script.len() {
            0 => Err("mock transport script exhausted".into()),
            1 => script.front().cloned().expect("non-empty"),
            _ => script.pop_front().expect("non-empty"),
        }
    }
}

#[derive(Clone)]
pub struct ModelClient {
    pub endpoint: ModelEndpoint,
    transport: Arc<dyn Transport>,
    /// Base backoff delay; doubles per retry. Zero disables sleeping (tests).
    backoff_base_ms: u64,
}

impl ModelClient {
    pub fn new(endpoint: ModelEndpoint, transport: Arc<dyn Transport>) -> Self {
        ModelClient {
            endpoint,
            transport,
            backoff_base_ms: 200,
        }
    }

    pub fn with_backoff_base_ms(mut self, ms: u64) -> Self {
        self.backoff_base_ms = ms;
        self
    }

    /// One chat completion. Transient failures (transport errors, 429, 5xx)
    /// are retried with exponential backoff up to `max_retries` extra
    /// attempts; a spent budget surfaces as `Exhausted`. Every call is logged
    /// redacted with latency and token counts when the provider reports them.
    pub fn complete(
        &self,
        messages: &[ChatMessage],
        temperature_override: Option<f64>,
    ) -> Result<String, ModelError> {
        assert!(!messages.is_empty(), "complete requires at least one message");
        let url = format!(
            "{}/chat/completions",
            self.endpoint.base_url.trim_end_matches('/')
        );
        let body = json!({
            "model": self.endpoint.model_name,
            "temperature": temperature_override.unwrap_or(self.endpoint.temperature),
            "messages": messages
                .iter()
                .map(|m| json!({"role": m.role, "content": m.text}))
                .collect::<Vec<_>>(),
        });
        let bearer = self
            .endpoint
            .credential_env
            .as_ref()
            .and_then(|var| std::env::var(var).ok());

        let attempts = self.endpoint.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 && self.backoff_base_ms > 0 {
                let delay = self.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(8));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let started = Instant::now();
            let result = self.transport.post_json(
                &url,
                bearer.as_deref(),
                &body,
                Duration::from_secs(self.endpoint.timeout_secs),
            );
            let latency_ms = started.elapsed().as_millis();
            match result {
                Err(e) => {
                    log::warn!(
                        "model call model={} attempt={} transport error ({latency_ms}ms): {e}",
                        self.endpoint.model_name,
                        attempt + 1
                    );
                    last = e;
                }
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    log::warn!(
                        "model call model={} attempt={} status={} ({latency_ms}ms)",
                        self.endpoint.model_name,
                        attempt + 1,
                        resp.status
                    );
                    last = format!("status {}", resp.status);
                }
                Ok(resp) if (200..300).contains(&resp.status) => {
                    let tokens = resp.body["usage"]["total_tokens"].as_u64();
                    match extract_completion_text(&resp.body) {
                        Some(text) => {
                            log::debug!(
                                "model call model={} status={} latency_ms={latency_ms} tokens={tokens:?}",
                                self.endpoint.model_name,
                                resp.status
                            );
                            return Ok(text);
                        }
                        None => {
                            return Err(ModelError::Remote {
                                status: resp.status,
                                message: "completion payload missing choice text".into(),
                            })
                        }
                    }
                }
                Ok(resp) => {
                    let message = resp.body["error"]["message"]
                        .as_str()
                        .unwrap_or("provider rejected the request")
                        .to_string();
                    return Err(ModelError::Remote {
                        status: resp.status,
                        message,
                    });
                }
            }
        }
        Err(ModelError::Exhausted { attempts, last })
    }
}

fn extract_completion_text(body: &Value) -> Option<String> {
    body["choices"][0]["message"]["content"]
        .as_str()
        .map(|s| s.to_string())
}

/// Replace `{{key}}` slots in a prompt template.
pub fn apply_template(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in slots {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    out
}

/// Extract the contents of the first fenced code block tagged `tag`.
pub fn extract_fenced_block(text: &str, tag: &str) -> Option<String> {
    let open = format!("```{tag}");
    let start = text.find(&open)? + open.len();
    let rest = &text[start..];
    let rest = rest.strip_prefix('\r').unwrap_or(rest);
    let rest = rest.strip_prefix('\n')?;
    let end = rest.find("```")?;
    Some(rest[..end].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn endpoint(max_retries: u32) -> ModelEndpoint {
        ModelEndpoint {
            base_url: "http://localhost:0".into(),
            model_name: "test-model".into(),
            credential_env: None,
            temperature: 0.0,
            max_retries,
            timeout_secs: 5,
        }
    }

    #[test]
    fn mock_echo_returns_fixture_text() {
        let transport = Arc::new(MockTransport::echoing("hello"));
        let client = ModelClient::new(endpoint(0), transport).with_backoff_base_ms(0);
        let text = client.complete(&[ChatMessage::user("hi")], None).unwrap();
        assert_eq!(text, "hello");
    }

    #[test]
    fn two_transient_failures_then_success() {
        let transport = Arc::new(MockTransport::new(vec![
            Err("connection reset".into()),
            Ok(TransportResponse {
                status: 503,
                body: Value::Null,
            }),
            Ok(completion_response("third time lucky")),
        ]));
        let client = ModelClient::new(endpoint(3), transport.clone()).with_backoff_base_ms(0);
        let text = client.complete(&[ChatMessage::user("hi")], None).unwrap();
        assert_eq!(text, "third time lucky");
        assert_eq!(transport.call_count(), 3);
    }

    #[test]
    fn zero_retries_and_failure_is_exhausted() {
        let transport = Arc::new(MockTransport::new(vec![Err("down".into())]));
        let client = ModelClient::new(endpoint(0), transport).with_backoff_base_ms(0);
        let err = client.complete(&[ChatMessage::user("hi")], None).unwrap_err();
        match err {
            ModelError::Exhausted { attempts, .. } => assert_eq!(attempts, 1),
            other => panic!("expected Exhausted, got {other:?}"),
        }
    }

    #[test]
    fn non_transient_provider_error_is_not_retried() {
        let transport = Arc::new(MockTransport::new(vec![Ok(TransportResponse {
            status: 401,
            body: serde_json::json!({"error": {"message": "bad key"}}),
        })]));
        let client = ModelClient::new(endpoint(5), transport.clone()).with_backoff_base_ms(0);
        let err = client.complete(&[ChatMessage::user("hi")], None).unwrap_err();
        assert!(matches!(err, ModelError::Remote { status: 401, .. }));
        assert_eq!(transport.call_count(), 1);
    }

    #[test]
    fn fenced_block_extraction() {
        let text = "prefix\n```edits\nline one\nline two\n```\nsuffix";
        assert_eq!(
            extract_fenced_block(text, "edits").unwrap(),
            "line one\nline two\n"
        );
        assert!(extract_fenced_block(text, "diagnostic").is_none());
        assert!(extract_fenced_block("```edits no newline```", "edits").is_none());
    }

    #[test]
    fn template_slots_replaced() {
        let out = apply_template("a {{x}} b {{y}}", &[("x", "1"), ("y", "2")]);
        assert_eq!(out, "a 1 b 2");
    }
}
