//! Token-budgeted memory over executed commands.
//!
//! The model only ever sees the newest commands that fit into the budget,
//! optionally preceded by a reflection summary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::ExecutedCommand;
use crate::llm::{ChatMessage, CompletionRequest, LlmBackend, LlmError, ModelParams};
use crate::prompt::RefusalLexicon;

pub const TRUNCATION_MARKER: &str = "[...truncated]";
pub const SUMMARY_TOKEN_LIMIT: usize = 200;

const REFLECTION_SYSTEM: &str = "You condense shell session logs. From the commands and \
outputs below, list the facts useful for privilege escalation on this system. Be terse \
and stay under 200 tokens.";

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("reflection needs at least one executed command")]
    EmptyHistory,
    #[error("reflection was refused by the model")]
    Refused,
    #[error(transparent)]
    Backend(#[from] LlmError),
}

/// Byte-length heuristic: one token per four bytes, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// Keep the last `cap` bytes of `output`, snapped forward to a char boundary.
pub fn truncate_output(output: &str, cap: usize) -> (String, bool) {
    assert!(cap > 0, "output cap must be positive");
    if output.len() <= cap {
        return (output.to_string(), false);
    }
    let mut start = output.len() - cap;
    while !output.is_char_boundary(start) {
        start += 1;
    }
    // Dropping exactly the marker's width would leave the length unchanged.
    if start == TRUNCATION_MARKER.len() {
        start += 1;
        while !output.is_char_boundary(start) {
            start += 1;
        }
    }
    (format!("{TRUNCATION_MARKER}{}", &output[start..]), true)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub cmd: String,
    pub output_excerpt: String,
}

impl ContextEntry {
    fn tokens(&self) -> usize {
        estimate_tokens(&self.cmd) + estimate_tokens(&self.output_excerpt)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub entries: Vec<ContextEntry>,
    pub summary: Option<String>,
    pub estimated_tokens: usize,
}

impl ContextWindow {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.summary.is_none()
    }

    pub fn with_summary(mut self, summary: Option<String>) -> Self {
        if let Some(old) = self.summary.take() {
            self.estimated_tokens -= estimate_tokens(&old);
        }
        if let Some(text) = &summary {
            self.estimated_tokens += estimate_tokens(text);
        }
        self.summary = summary;
        self
    }

    /// Drop the oldest entry, keeping the token estimate consistent.
    pub fn drop_oldest(&mut self) -> bool {
        if self.entries.is_empty() {
            return false;
        }
        let removed = self.entries.remove(0);
        self.estimated_tokens -= removed.tokens();
        true
    }

    pub fn recount(&self) -> usize {
        self.entries.iter().map(ContextEntry::tokens).sum::<usize>()
            + self.summary.as_deref().map_or(0, estimate_tokens)
    }
}

/// Newest-first fill of the window; never splits a command from its output.
pub fn fit_history(history: &[ExecutedCommand], budget: usize, reserved: usize) -> ContextWindow {
    assert!(reserved < budget, "reserved tokens must be below the budget");
    let available = budget - reserved;
    let mut used = 0;
    let mut kept = Vec::new();
    for executed in history.iter().rev() {
        let entry = ContextEntry {
            cmd: executed.cmd.clone(),
            output_excerpt: executed.combined_output(),
        };
        let cost = entry.tokens();
        if used + cost > available {
            break;
        }
        used += cost;
        kept.push(entry);
    }
    kept.reverse();
    ContextWindow {
        entries: kept,
        summary: None,
        estimated_tokens: used,
    }
}

/// The completion request used for reflection.
pub fn reflection_request(
    history: &[ExecutedCommand],
    params: &ModelParams,
    budget: usize,
) -> Result<CompletionRequest, MemoryError> {
    if history.is_empty() {
        return Err(MemoryError::EmptyHistory);
    }
    let system = ChatMessage::system(REFLECTION_SYSTEM);
    let reserved = (estimate_tokens(REFLECTION_SYSTEM) + SUMMARY_TOKEN_LIMIT + 64).min(budget - 1);
    let window = fit_history(history, budget, reserved);
    let mut log = String::new();
    for entry in &window.entries {
        log.push_str("$ ");
        log.push_str(&entry.cmd);
        log.push('\n');
        log.push_str(&entry.output_excerpt);
        if !log.ends_with('\n') {
            log.push('\n');
        }
    }
    if log.is_empty() {
        // Newest output alone is larger than the budget; fall back to the command list.
        for executed in history {
            log.push_str("$ ");
            log.push_str(&executed.cmd);
            log.push('\n');
        }
    }
    Ok(CompletionRequest {
        messages: vec![system, ChatMessage::user(log)],
        model_id: params.model_id.clone(),
        temperature: params.temperature,
        max_answer_tokens: SUMMARY_TOKEN_LIMIT,
    })
}

/// Turn a reflection answer into the stored summary.
pub fn reflection_summary(answer: &str, lexicon: &RefusalLexicon) -> Result<String, MemoryError> {
    if lexicon.is_refusal(answer) {
        return Err(MemoryError::Refused);
    }
    Ok(clip_head(answer.trim(), SUMMARY_TOKEN_LIMIT * 4))
}

/// Ask the backend for a short summary of the session so far.
pub fn reflect(
    history: &[ExecutedCommand],
    backend: &dyn LlmBackend,
    params: &ModelParams,
    budget: usize,
    lexicon: &RefusalLexicon,
) -> Result<String, MemoryError> {
    let request = reflection_request(history, params, budget)?;
    let answer = backend.complete(&request)?;
    reflection_summary(&answer.text, lexicon)
}

fn clip_head(text: &str, max_bytes: usize) -> String {
    if text.len() <= max_bytes {
        return text.to_string();
    }
    let mut end = max_bytes;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    text[..end].to_string()
}
