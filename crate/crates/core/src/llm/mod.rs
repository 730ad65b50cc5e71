//! Chat-completion backends.
//!
//! [`LlmBackend`] is the only seam between the agent and a language model.
//! [`http::HttpBackend`] talks to an OpenAI-compatible server;
//! [`scripted::ScriptedBackend`] replays a transcript for offline runs.

pub mod http;
pub mod scripted;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpBackendConfig};
pub use scripted::{ScriptedBackend, Transcript, TranscriptEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
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
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Sampling parameters shared by every request of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub model_id: String,
    pub temperature: f32,
    pub max_answer_tokens: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            model_id: "gpt-3.5-turbo".to_string(),
            temperature: 0.0,
            max_answer_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub model_id: String,
    pub temperature: f32,
    pub max_answer_tokens: usize,
}

impl CompletionRequest {
    pub fn new(messages: Vec<ChatMessage>, params: &ModelParams) -> Self {
        Self {
            messages,
            model_id: params.model_id.clone(),
            temperature: params.temperature,
            max_answer_tokens: params.max_answer_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        let Some(first) = self.messages.first() else {
            return Err(LlmError::InvalidRequest("messages must not be empty".into()));
        };
        if first.role != Role::System {
            return Err(LlmError::InvalidRequest("first message must have role system".into()));
        }
        if let Some(empty) = self
            .messages
            .iter()
            .position(|m| m.role != Role::Assistant && m.content.is_empty())
        {
            return Err(LlmError::InvalidRequest(format!("message {empty} has empty content")));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest("temperature must be within [0, 2]".into()));
        }
        Ok(())
    }

    /// All message contents joined by newlines; what transcript patterns match against.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmAnswer {
    pub text: String,
    pub prompt_tokens: usize,
    pub answer_tokens: usize,
    pub backend_id: String,
    /// Transport retries spent on this answer.
    #[serde(default)]
    pub retries: u32,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable after {attempts} attempt(s): {reason}")]
    BackendUnavailable { attempts: u32, reason: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("context budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("transcript exhausted after {0} entries")]
    TranscriptExhausted(usize),
    #[error("transcript entry {index} expects the prompt to contain {pattern:?}")]
    Mismatch { index: usize, pattern: String },
    #[error("transcript line {line}: {message}")]
    TranscriptInvalid { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait LlmBackend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<LlmAnswer, LlmError>;
}

impl<T: LlmBackend + ?Sized> LlmBackend for Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<LlmAnswer, LlmError> {
        (**self).complete(request)
    }
}

impl<T: LlmBackend + ?Sized> LlmBackend for std::sync::Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<LlmAnswer, LlmError> {
        (**self).complete(request)
    }
}
