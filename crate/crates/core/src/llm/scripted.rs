//! Deterministic transcript backend.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{CompletionRequest, LlmAnswer, LlmBackend, LlmError};
use crate::memory::estimate_tokens;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    /// Plain substring the prompt must contain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r#match: Option<String>,
    pub answer: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
    pub cursor: usize,
}

impl Transcript {
    pub fn new(entries: Vec<TranscriptEntry>) -> Self {
        Self { entries, cursor: 0 }
    }

    /// Parse JSONL, one `{match?, answer}` object per non-blank line.
    pub fn parse(text: &str) -> Result<Self, LlmError> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry = serde_json::from_str(line).map_err(|err| LlmError::TranscriptInvalid {
                line: idx + 1,
                message: err.to_string(),
            })?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).expect("transcript entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - self.cursor
    }

    /// Return the next answer, checking its pattern against `prompt_text`.
    ///
    /// The cursor only advances on success, so a mismatch can be inspected.
    pub fn scripted_next(&mut self, prompt_text: &str) -> Result<String, LlmError> {
        let entry = self
            .entries
            .get(self.cursor)
            .ok_or(LlmError::TranscriptExhausted(self.entries.len()))?;
        if let Some(pattern) = &entry.r#match {
            if !prompt_text.contains(pattern.as_str()) {
                return Err(LlmError::Mismatch {
                    index: self.cursor,
                    pattern: pattern.clone(),
                });
            }
        }
        let answer = entry.answer.clone();
        self.cursor += 1;
        Ok(answer)
    }
}

pub struct ScriptedBackend {
    id: String,
    transcript: Mutex<Transcript>,
}

impl ScriptedBackend {
    pub fn new(transcript: Transcript) -> Self {
        Self::with_id("scripted", transcript)
    }

    pub fn with_id(id: impl Into<String>, transcript: Transcript) -> Self {
        Self {
            id: id.into(),
            transcript: Mutex::new(transcript),
        }
    }

    pub fn cursor(&self) -> usize {
        self.transcript.lock().expect("transcript lock").cursor
    }
}

impl LlmBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<LlmAnswer, LlmError> {
        request.validate()?;
        let prompt_text = request.prompt_text();
        let text = self
            .transcript
            .lock()
            .expect("transcript lock")
            .scripted_next(&prompt_text)?;
        Ok(LlmAnswer {
            prompt_tokens: request.messages.iter().map(|m| estimate_tokens(&m.content)).sum(),
            answer_tokens: estimate_tokens(&text),
            text,
            backend_id: self.id.clone(),
            retries: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatMessage, ModelParams};

    fn one(pattern: Option<&str>, answer: &str) -> Transcript {
        Transcript::new(vec![TranscriptEntry {
            r#match: pattern.map(str::to_string),
            answer: answer.into(),
        }])
    }

    #[test]
    fn matching_entry_advances() {
        let mut t = one(Some("become the root user"), "id");
        let answer = t.scripted_next("you want to become the root user now").unwrap();
        assert_eq!(answer, "id");
        assert_eq!(t.cursor, 1);
    }

    #[test]
    fn mismatch_keeps_cursor() {
        let mut t = one(Some("become the root user"), "id");
        let err = t.scripted_next("something else").unwrap_err();
        assert!(matches!(err, LlmError::Mismatch { index: 0, .. }));
        assert_eq!(t.cursor, 0);
    }

    #[test]
    fn exhausted_at_end() {
        let mut t = one(None, "id");
        t.scripted_next("x").unwrap();
        assert!(matches!(t.scripted_next("x"), Err(LlmError::TranscriptExhausted(1))));
    }

    #[test]
    fn backend_echoes_with_token_estimates() {
        let backend = ScriptedBackend::new(one(None, "sudo -l"));
        let request = CompletionRequest::new(vec![ChatMessage::system("abcdefgh")], &ModelParams::default());
        let answer = backend.complete(&request).unwrap();
        assert_eq!(answer.text, "sudo -l");
        assert_eq!(answer.prompt_tokens, 2);
        assert_eq!(answer.answer_tokens, 2);
    }

    #[test]
    fn backend_rejects_empty_request() {
        let backend = ScriptedBackend::new(one(None, "sudo -l"));
        let request = CompletionRequest::new(vec![], &ModelParams::default());
        assert!(matches!(backend.complete(&request), Err(LlmError::InvalidRequest(_))));
        assert_eq!(backend.cursor(), 0);
    }

    #[test]
    fn jsonl_parse_and_line_numbers() {
        let t = Transcript::parse("{\"match\":\"a\",\"answer\":\"b\"}\n\n{\"answer\":\"c\"}\n").unwrap();
        assert_eq!(t.entries.len(), 2);
        assert_eq!(t.entries[1].r#match, None);
        let reparsed = Transcript::parse(&t.to_jsonl()).unwrap();
        assert_eq!(reparsed, t);
        let err = Transcript::parse("{\"answer\":\"ok\"}\n{\"match\":\"x\"}\n").unwrap_err();
        assert!(matches!(err, LlmError::TranscriptInvalid { line: 2, .. }));
    }
}
