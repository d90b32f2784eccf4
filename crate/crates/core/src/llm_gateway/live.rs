//! HTTP chat backend.
//!
//! Wire format: `POST {base_url}/chat` with body
//! `{"model", "messages": [{"role", "content"}], "temperature", "max_tokens"?}`.
//! The completion is read from a dotted field path in the response body
//! (default `choices.0.message.content`). The API key is read from an
//! environment variable at call time and sent as a bearer token.

use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;
use tracing::{debug, warn};

use super::{ChatBackend, ChatMessage, ChatParams, GatewayError};

pub const DEFAULT_RESPONSE_PATH: &str = "choices.0.message.content";

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): base * 2^(retry-1), capped.
    pub fn delay_for(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub response_path: String,
    pub request_timeout: Duration,
    pub retry: RetryPolicy,
}

impl LiveConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key_env: None,
            response_path: DEFAULT_RESPONSE_PATH.to_string(),
            request_timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    agent: ureq::Agent,
    retries: AtomicU64,
}

#[derive(Serialize)]
struct RequestBody<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

enum Attempt {
    Done(String),
    Retryable(String),
    Fatal(GatewayError),
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.request_timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            agent,
            retries: AtomicU64::new(0),
        }
    }

    /// Retries performed over the backend's lifetime.
    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    fn endpoint(&self) -> String {
        format!("{}/chat", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &str) -> Attempt {
        let mut request = self
            .agent
            .post(&self.endpoint())
            .header("Content-Type", "application/json");
        if let Some(var) = &self.config.api_key_env {
            match std::env::var(var) {
                Ok(key) => request = request.header("Authorization", &format!("Bearer {key}")),
                Err(_) => warn!("api key variable {var} is not set; sending request without credentials"),
            }
        }
        let mut response = match request.send(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retryable(format!("transport error: {e}")),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retryable(format!("reading response body: {e}")),
        };
        if status >= 500 {
            return Attempt::Retryable(format!("server error {status}"));
        }
        if status >= 400 {
            return Attempt::Fatal(GatewayError::Rejected { status, body: text });
        }
        match serde_json::from_str::<Value>(&text)
            .ok()
            .and_then(|v| extract_path(&v, &self.config.response_path).map(str::to_owned))
        {
            Some(content) => Attempt::Done(content),
            None => Attempt::Fatal(GatewayError::MalformedResponse(self.config.response_path.clone())),
        }
    }
}

impl ChatBackend for LiveBackend {
    fn complete(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<String, GatewayError> {
        let body = serde_json::to_string(&RequestBody {
            model: &params.model_id,
            messages,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
        })
        .expect("request body serializes");

        let mut retry = 0;
        loop {
            match self.attempt(&body) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retryable(reason) => {
                    if retry == self.config.retry.max_retries {
                        return Err(GatewayError::BackendUnavailable {
                            attempts: retry + 1,
                            last_error: reason,
                        });
                    }
                    retry += 1;
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    let delay = self.config.retry.delay_for(retry);
                    warn!(retry, ?delay, %reason, "chat request failed; retrying");
                    thread::sleep(delay);
                }
            }
        }
    }
}

/// Walks a dotted path such as `choices.0.message.content`.
pub(crate) fn extract_path<'v>(value: &'v Value, path: &str) -> Option<&'v str> {
    let mut current = value;
    for segment in path.split('.').filter(|s| !s.is_empty()) {
        current = match current {
            Value::Array(items) => items.get(segment.parse::<usize>().ok()?)?,
            Value::Object(map) => map.get(segment)?,
            _ => return None,
        };
    }
    debug!(path, "extracted completion");
    current.as_str()
}
