//! OpenAI-compatible `/v1/chat/completions` client with retry.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{ChatMessage, CompletionRequest, LlmAnswer, LlmBackend, LlmError};

pub const API_KEY_ENV: &str = "SPARRING_LLM_API_KEY";
pub const BASE_URL_ENV: &str = "SPARRING_LLM_BASE_URL";
pub const MAX_RETRIES: u32 = 3;

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub request_timeout: Duration,
}

impl HttpBackendConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            max_retries: MAX_RETRIES,
            backoff_base: Duration::from_millis(500),
            request_timeout: Duration::from_secs(120),
        }
    }

    /// Base URL from `SPARRING_LLM_BASE_URL`, key from `SPARRING_LLM_API_KEY`.
    pub fn from_env() -> Option<Self> {
        let base_url = std::env::var(BASE_URL_ENV).ok()?;
        let mut config = Self::new(base_url);
        config.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Some(config)
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f32,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: usize,
    #[serde(default)]
    completion_tokens: usize,
}

enum Attempt {
    Done(LlmAnswer),
    Retry(String),
    Fatal(LlmError),
}

pub struct HttpBackend {
    id: String,
    config: HttpBackendConfig,
    client: Client,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, LlmError> {
        let client = Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|err| LlmError::BackendUnavailable {
                attempts: 0,
                reason: err.to_string(),
            })?;
        Ok(Self {
            id: format!("http:{}", config.base_url),
            config,
            client,
        })
    }

    fn attempt(&self, request: &CompletionRequest) -> Attempt {
        let body = WireRequest {
            model: &request.model_id,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_answer_tokens,
        };
        let mut builder = self.client.post(self.config.endpoint()).json(&body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = match builder.send() {
            Ok(response) => response,
            Err(err) => return Attempt::Retry(err.to_string()),
        };
        let status = response.status();
        let text = match response.text() {
            Ok(text) => text,
            Err(err) => return Attempt::Retry(err.to_string()),
        };
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        if !status.is_success() {
            if is_context_overflow(&text) {
                return Attempt::Fatal(LlmError::BudgetExceeded(text));
            }
            return Attempt::Fatal(LlmError::BackendUnavailable {
                attempts: 1,
                reason: format!("HTTP {status}: {text}"),
            });
        }
        let parsed: WireResponse = match serde_json::from_str(&text) {
            Ok(parsed) => parsed,
            Err(err) => return Attempt::Fatal(LlmError::MalformedResponse(err.to_string())),
        };
        let Some(content) = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|choice| choice.message.content)
        else {
            return Attempt::Fatal(LlmError::MalformedResponse("choices[0].message.content missing".into()));
        };
        let usage = parsed.usage.unwrap_or(WireUsage {
            prompt_tokens: 0,
            completion_tokens: 0,
        });
        Attempt::Done(LlmAnswer {
            text: content,
            prompt_tokens: usage.prompt_tokens,
            answer_tokens: usage.completion_tokens,
            backend_id: self.id.clone(),
            retries: 0,
        })
    }
}

fn is_context_overflow(body: &str) -> bool {
    let lower = body.to_ascii_lowercase();
    lower.contains("context_length_exceeded") || lower.contains("maximum context length")
}

impl LlmBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<LlmAnswer, LlmError> {
        request.validate()?;
        let mut retries = 0;
        loop {
            match self.attempt(request) {
                Attempt::Done(mut answer) => {
                    answer.retries = retries;
                    return Ok(answer);
                }
                Attempt::Fatal(LlmError::BackendUnavailable { reason, .. }) => {
                    return Err(LlmError::BackendUnavailable {
                        attempts: retries + 1,
                        reason,
                    })
                }
                Attempt::Fatal(err) => return Err(err),
                Attempt::Retry(reason) => {
                    if retries >= self.config.max_retries {
                        return Err(LlmError::BackendUnavailable {
                            attempts: retries + 1,
                            reason,
                        });
                    }
                    let delay = self.config.backoff_base * 2u32.pow(retries);
                    retries += 1;
                    tracing::warn!(retry = retries, ?delay, %reason, "transient LLM failure, retrying");
                    std::thread::sleep(delay);
                }
            }
        }
    }
}
