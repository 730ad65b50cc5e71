//! Prompt construction, answer parsing, refusal detection and softening.

mod parse;
mod template;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{parse_command, parse_findings};
pub use template::{PromptTemplate, RenderedTemplate, DEFAULT_TEMPLATE_ID};

use crate::domain::{ExecutedCommand, RunState, RunStatus};
use crate::llm::{ChatMessage, Role};
use crate::memory::{estimate_tokens, truncate_output, ContextWindow};

const DEFAULT_SOFTEN_MAP: &str = include_str!("../../data/soften.jsonl");
const DEFAULT_LEXICON: &str = include_str!("../../data/refusal-lexicon.txt");

pub const NUDGE_HINT: &str = "Reply with exactly one command.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no command found in the answer")]
    NoCommandFound,
    #[error("system prompt needs {needed} tokens but the budget is {budget}")]
    BudgetImpossible { needed: usize, budget: usize },
    #[error("exec prompts need a running state, got {0}")]
    NotRunning(RunStatus),
    #[error("unresolved placeholder {{{0}}}")]
    UnresolvedPlaceholder(String),
    #[error("invalid template: {0}")]
    TemplateInvalid(String),
    #[error("soften map line {line}: {message}")]
    SoftenMapInvalid { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Case-insensitive substrings that identify an ethics refusal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefusalLexicon {
    phrases: Vec<String>,
}

impl Default for RefusalLexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_LEXICON)
    }
}

impl RefusalLexicon {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            phrases: phrases
                .into_iter()
                .map(|p| normalize(p.as_ref()))
                .filter(|p| !p.is_empty())
                .collect(),
        }
    }

    /// One phrase per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|line| !line.is_empty() && !line.starts_with('#')),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn is_refusal(&self, answer: &str) -> bool {
        let answer = normalize(answer);
        self.phrases.iter().any(|p| answer.contains(p.as_str()))
    }
}

fn normalize(text: &str) -> String {
    text.replace(['\u{2019}', '\u{2018}'], "'").to_lowercase()
}

pub fn classify_refusal(answer: &str) -> bool {
    RefusalLexicon::default().is_refusal(answer)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftenPair {
    pub from: String,
    pub to: String,
}

/// Ordered phrase rewrites that make prompts less likely to be refused.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SoftenMap {
    replacements: Vec<SoftenPair>,
}

impl SoftenMap {
    /// No to-phrase may contain a from-phrase, so applying the map twice is a no-op.
    pub fn new(replacements: Vec<SoftenPair>) -> Result<Self, PromptError> {
        for (idx, pair) in replacements.iter().enumerate() {
            let line = idx + 1;
            if pair.from.is_empty() {
                return Err(PromptError::SoftenMapInvalid {
                    line,
                    message: "empty from-phrase".into(),
                });
            }
            if replacements[..idx].iter().any(|p| p.from == pair.from) {
                return Err(PromptError::SoftenMapInvalid {
                    line,
                    message: format!("duplicate from-phrase {:?}", pair.from),
                });
            }
        }
        for (idx, pair) in replacements.iter().enumerate() {
            if let Some(other) = replacements.iter().find(|p| pair.to.contains(p.from.as_str())) {
                return Err(PromptError::SoftenMapInvalid {
                    line: idx + 1,
                    message: format!("to-phrase {:?} contains from-phrase {:?}", pair.to, other.from),
                });
            }
        }
        Ok(Self { replacements })
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut pairs = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let pair: SoftenPair = serde_json::from_str(line).map_err(|err| PromptError::SoftenMapInvalid {
                line: idx + 1,
                message: err.to_string(),
            })?;
            pairs.push(pair);
        }
        Self::new(pairs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_SOFTEN_MAP).expect("bundled soften map parses")
    }

    pub fn replacements(&self) -> &[SoftenPair] {
        &self.replacements
    }

    fn apply(&self, text: &str) -> String {
        self.replacements
            .iter()
            .fold(text.to_string(), |acc, pair| acc.replace(&pair.from, &pair.to))
    }
}

fn tokens_of(messages: &[ChatMessage]) -> usize {
    messages.iter().map(|m| estimate_tokens(&m.content)).sum()
}

pub fn history_message(preamble: &str, cmd: &str, output: &str) -> String {
    let mut text = format!("{preamble}\n$ {cmd}\n");
    if output.is_empty() {
        text.push_str("(no output)");
    } else {
        text.push_str(output);
    }
    text
}

pub fn summary_message(summary: &str) -> String {
    format!("Summary of what you learned so far:\n{summary}")
}

pub fn hint_message(hint: &str) -> String {
    format!("Operator hint: {hint}")
}

/// Build the command-request prompt for the next round.
///
/// Layout: system prompt, optional summary, one user message per context
/// entry, then one user message per hint. Oldest context entries are dropped
/// until the estimate fits `budget`.
pub fn build_exec_prompt(
    state: &RunState,
    template: &RenderedTemplate,
    context: &ContextWindow,
    budget: usize,
) -> Result<Vec<ChatMessage>, PromptError> {
    if state.status != RunStatus::Running {
        return Err(PromptError::NotRunning(state.status));
    }
    let system = ChatMessage::system(template.system_text.clone());
    let system_tokens = estimate_tokens(&system.content);
    if system_tokens > budget {
        return Err(PromptError::BudgetImpossible {
            needed: system_tokens,
            budget,
        });
    }
    let head: Vec<ChatMessage> = std::iter::once(system)
        .chain(
            context
                .summary
                .as_deref()
                .map(|s| ChatMessage::user(summary_message(s))),
        )
        .collect();
    let mut hints: Vec<ChatMessage> = state.hints.iter().map(|h| ChatMessage::user(hint_message(h))).collect();
    let mut history: Vec<ChatMessage> = context
        .entries
        .iter()
        .map(|e| ChatMessage::user(history_message(&template.user_preamble, &e.cmd, &e.output_excerpt)))
        .collect();

    let total = |head: &[ChatMessage], history: &[ChatMessage], hints: &[ChatMessage]| {
        tokens_of(head) + tokens_of(history) + tokens_of(hints)
    };
    while total(&head, &history, &hints) > budget && !history.is_empty() {
        history.remove(0);
    }
    while total(&head, &history, &hints) > budget && !hints.is_empty() {
        hints.remove(0);
    }
    let needed = total(&head, &history, &hints);
    if needed > budget {
        return Err(PromptError::BudgetImpossible { needed, budget });
    }
    let mut messages = head;
    messages.append(&mut history);
    messages.append(&mut hints);
    Ok(messages)
}

/// Ask for vulnerabilities in one executed command, each with a verification command.
pub fn build_analysis_prompt(
    cmd: &ExecutedCommand,
    template: &RenderedTemplate,
    output_cap: usize,
) -> Vec<ChatMessage> {
    let combined = cmd.combined_output();
    let (output, _) = truncate_output(&combined, output_cap.max(1));
    let output = if output.is_empty() {
        "(no output)".to_string()
    } else {
        output
    };
    let request = template::fill(
        &template.analysis_request,
        &[("cmd", cmd.cmd.as_str()), ("output", output.as_str())],
    )
    .expect("analysis placeholders were checked at render time");
    vec![
        ChatMessage::system(template.analysis_system.clone()),
        ChatMessage::user(format!("{request}\n{}", template.dejudgment_suffix)),
    ]
}

/// Rewrite phrases that tend to trigger refusals and append the de-judgment suffix.
pub fn soften(messages: &[ChatMessage], map: &SoftenMap, suffix: &str) -> Vec<ChatMessage> {
    let mut out: Vec<ChatMessage> = messages
        .iter()
        .map(|m| match m.role {
            Role::System | Role::User => ChatMessage {
                role: m.role,
                content: map.apply(&m.content),
            },
            Role::Assistant => m.clone(),
        })
        .collect();
    if suffix.is_empty() {
        return out;
    }
    match out.iter_mut().rev().find(|m| m.role == Role::User) {
        Some(last) if last.content.contains(suffix) => {}
        Some(last) => {
            last.content.push('\n');
            last.content.push_str(suffix);
        }
        None => out.push(ChatMessage::user(suffix)),
    }
    out
}
