//! Chat-completion access.
//!
//! Every model interaction in the engine goes through [`ChatBackend`]. Two
//! implementations ship: [`LiveBackend`] talks to an HTTP endpoint and
//! [`ScriptedBackend`] answers from an ordered rule list so sessions can be
//! replayed offline.

mod live;
mod scripted;

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use live::{LiveBackend, LiveConfig, RetryPolicy};
pub use scripted::{Matcher, ScriptMode, ScriptedBackend, ScriptedRule};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

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
pub struct ChatParams {
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    pub model_id: String,
}

impl Default for ChatParams {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: None,
            model_id: "default".to_string(),
        }
    }
}

impl ChatParams {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidParams(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("conversation has no messages")]
    EmptyConversation,
    #[error("{0:?} message has empty content")]
    EmptyContent(Role),
    #[error("invalid chat parameters: {0}")]
    InvalidParams(String),
    #[error("backend unavailable after {attempts} attempt(s): {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("backend rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("response did not contain a completion at `{0}`")]
    MalformedResponse(String),
    #[error("no scripted rule matched: {0}")]
    NoRuleMatched(String),
}

pub trait ChatBackend: Send + Sync {
    /// One completion for `messages`. Callers go through [`chat`], which
    /// validates the request first.
    fn complete(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<String, GatewayError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<String, GatewayError> {
        (**self).complete(messages, params)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<String, GatewayError> {
        (**self).complete(messages, params)
    }
}

pub fn chat(backend: &dyn ChatBackend, messages: &[ChatMessage], params: &ChatParams) -> Result<String, GatewayError> {
    if messages.is_empty() {
        return Err(GatewayError::EmptyConversation);
    }
    if let Some(m) = messages
        .iter()
        .find(|m| m.role != Role::Assistant && m.content.trim().is_empty())
    {
        return Err(GatewayError::EmptyContent(m.role));
    }
    params.validate()?;
    backend.complete(messages, params)
}

/// Total characters across message contents.
pub fn count_chars(messages: &[ChatMessage]) -> usize {
    messages.iter().map(|m| m.content.chars().count()).sum()
}

/// Wraps a backend and records the last user message of every call.
pub struct InstrumentedBackend {
    inner: Arc<dyn ChatBackend>,
    prompts: Mutex<Vec<String>>,
}

impl InstrumentedBackend {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Self {
        Self { inner, prompts: Mutex::new(Vec::new()) }
    }

    pub fn calls(&self) -> usize {
        self.prompts.lock().expect("prompt log poisoned").len()
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt log poisoned").clone()
    }
}

impl ChatBackend for InstrumentedBackend {
    fn complete(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<String, GatewayError> {
        let last = last_user_message(messages).unwrap_or_default().to_string();
        self.prompts.lock().expect("prompt log poisoned").push(last);
        self.inner.complete(messages, params)
    }
}

pub(crate) fn last_user_message(messages: &[ChatMessage]) -> Option<&str> {
    messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
}
