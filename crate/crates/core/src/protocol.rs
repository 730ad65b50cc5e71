//! Append-only run protocol, replay extraction and multi-run statistics.
//!
//! Every line of a protocol file is one [`ProtocolEvent`] as JSON. Sequence
//! numbers start at 1 and grow by one per event of a run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{ExecutedCommand, Finding, RunConfig, RunStatus, StopReason};
use crate::llm::{ChatMessage, LlmAnswer, Role, Transcript, TranscriptEntry};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MATCH_PREFIX_CHARS: usize = 40;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("sequence gap: expected seq {expected}, got {got}")]
    SeqGap { expected: u64, got: u64 },
    #[error("corrupt protocol at line {line}: {message}")]
    CorruptProtocol { line: usize, message: String },
    #[error("completion #{0} has no preceding prompt")]
    OrphanCompletion(usize),
    #[error("events belong to more than one run: {0} and {1}")]
    MixedRuns(String, String),
    #[error("protocol sink failed: {0}")]
    Io(#[from] std::io::Error),
}

/// What an LLM exchange was for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Exec,
    Analysis,
    Reflection,
    Plan,
    CreateTasks,
    Prioritize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintSource {
    Operator,
    Denial,
    Nudge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPayload {
    pub purpose: Purpose,
    pub round: u32,
    pub attempt: u32,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionPayload {
    pub purpose: Purpose,
    pub round: u32,
    pub attempt: u32,
    pub text: String,
    pub prompt_tokens: usize,
    pub answer_tokens: usize,
    pub backend_id: String,
    pub retries: u32,
}

impl CompletionPayload {
    pub fn new(purpose: Purpose, round: u32, attempt: u32, answer: &LlmAnswer) -> Self {
        Self {
            purpose,
            round,
            attempt,
            text: answer.text.clone(),
            prompt_tokens: answer.prompt_tokens,
            answer_tokens: answer.answer_tokens,
            backend_id: answer.backend_id.clone(),
            retries: answer.retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandProposedPayload {
    pub round: u32,
    pub command: String,
    pub raw_answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApprovalPayload {
    pub round: u32,
    /// approve, deny, edit or abort.
    pub decision: String,
    pub original: String,
    pub command: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandExecutedPayload {
    pub round: u32,
    pub command: ExecutedCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FindingPayload {
    pub round: u32,
    pub finding: Finding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HintPayload {
    pub round: u32,
    pub text: String,
    pub source: HintSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusChangePayload {
    pub from: Option<RunStatus>,
    pub to: RunStatus,
    pub round: u32,
    pub reason: String,
    pub terminal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarningPayload {
    pub round: u32,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    Prompt(PromptPayload),
    Completion(CompletionPayload),
    CommandProposed(CommandProposedPayload),
    ApprovalDecision(ApprovalPayload),
    CommandExecuted(CommandExecutedPayload),
    Finding(FindingPayload),
    Hint(HintPayload),
    StatusChange(StatusChangePayload),
    Warning(WarningPayload),
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Prompt(_) => "prompt",
            EventBody::Completion(_) => "completion",
            EventBody::CommandProposed(_) => "command_proposed",
            EventBody::ApprovalDecision(_) => "approval_decision",
            EventBody::CommandExecuted(_) => "command_executed",
            EventBody::Finding(_) => "finding",
            EventBody::Hint(_) => "hint",
            EventBody::StatusChange(_) => "status_change",
            EventBody::Warning(_) => "warning",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, EventBody::StatusChange(change) if change.terminal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolEvent {
    pub v: u32,
    pub seq: u64,
    /// UTC milliseconds.
    pub timestamp: i64,
    pub run_id: String,
    #[serde(flatten)]
    pub body: EventBody,
}

impl ProtocolEvent {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("protocol events serialize")
    }

    pub fn is_terminal(&self) -> bool {
        self.body.is_terminal()
    }
}

pub fn now_millis() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

/// Destination for protocol events.
pub trait EventSink: Send {
    /// Durably append `event`; `event.seq` must be one past the last appended.
    fn append(&mut self, event: &ProtocolEvent) -> Result<(), ProtocolError>;
}

fn check_seq(last: u64, event: &ProtocolEvent) -> Result<(), ProtocolError> {
    if event.seq != last + 1 {
        return Err(ProtocolError::SeqGap {
            expected: last + 1,
            got: event.seq,
        });
    }
    Ok(())
}

/// Protocol file writer. Each line is flushed; the terminal event is synced to disk.
pub struct JsonlSink {
    path: PathBuf,
    writer: BufWriter<File>,
    last_seq: u64,
}

impl JsonlSink {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, ProtocolError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create_new(true).write(true).open(&path)?;
        Ok(Self {
            path,
            writer: BufWriter::new(file),
            last_seq: 0,
        })
    }

    /// `<dir>/<run_id>.jsonl`
    pub fn for_run(dir: impl AsRef<Path>, run_id: &str) -> Result<Self, ProtocolError> {
        Self::create(dir.as_ref().join(format!("{run_id}.jsonl")))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl EventSink for JsonlSink {
    fn append(&mut self, event: &ProtocolEvent) -> Result<(), ProtocolError> {
        check_seq(self.last_seq, event)?;
        self.writer.write_all(event.to_line().as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        if event.is_terminal() {
            self.writer.get_ref().sync_all()?;
        }
        self.last_seq = event.seq;
        Ok(())
    }
}

/// In-memory sink sharing its buffer with any number of readers.
#[derive(Clone, Default)]
pub struct MemorySink {
    events: Arc<Mutex<Vec<ProtocolEvent>>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<ProtocolEvent> {
        self.events.lock().expect("sink lock").clone()
    }
}

impl EventSink for MemorySink {
    fn append(&mut self, event: &ProtocolEvent) -> Result<(), ProtocolError> {
        let mut events = self.events.lock().expect("sink lock");
        check_seq(events.last().map_or(0, |e| e.seq), event)?;
        events.push(event.clone());
        Ok(())
    }
}

pub type Clock = Box<dyn FnMut() -> i64 + Send>;

/// Stamps events with run id, sequence number and time, then fans them out to sinks.
pub struct Recorder {
    run_id: String,
    seq: u64,
    clock: Clock,
    sinks: Vec<Box<dyn EventSink>>,
}

impl Recorder {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            seq: 0,
            clock: Box::new(now_millis),
            sinks: Vec::new(),
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_sink(mut self, sink: impl EventSink + 'static) -> Self {
        self.sinks.push(Box::new(sink));
        self
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn last_seq(&self) -> u64 {
        self.seq
    }

    pub fn emit(&mut self, body: EventBody) -> Result<ProtocolEvent, ProtocolError> {
        let event = ProtocolEvent {
            v: PROTOCOL_VERSION,
            seq: self.seq + 1,
            timestamp: (self.clock)(),
            run_id: self.run_id.clone(),
            body,
        };
        for sink in &mut self.sinks {
            sink.append(&event)?;
        }
        self.seq = event.seq;
        Ok(event)
    }
}

fn corrupt(line: usize, message: impl Into<String>) -> ProtocolError {
    ProtocolError::CorruptProtocol {
        line,
        message: message.into(),
    }
}

/// Parse protocol text, validating versions, payload shapes and sequence numbers.
pub fn parse(text: &str) -> Result<Vec<ProtocolEvent>, ProtocolError> {
    let mut events = Vec::new();
    let mut last_seq: BTreeMap<String, u64> = BTreeMap::new();
    let lines: Vec<&str> = text.split('\n').collect();
    for (idx, line) in lines.iter().enumerate() {
        let number = idx + 1;
        if line.is_empty() && idx == lines.len() - 1 {
            break;
        }
        let event: ProtocolEvent = serde_json::from_str(line).map_err(|err| corrupt(number, err.to_string()))?;
        if event.v != PROTOCOL_VERSION {
            return Err(corrupt(number, format!("unsupported version {}", event.v)));
        }
        let last = last_seq.entry(event.run_id.clone()).or_insert(0);
        if event.seq != *last + 1 {
            return Err(corrupt(number, format!("seq {} does not follow {}", event.seq, last)));
        }
        *last = event.seq;
        events.push(event);
    }
    Ok(events)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<ProtocolEvent>, ProtocolError> {
    let text = std::fs::read_to_string(path)?;
    parse(&text)
}

/// Read complete lines of a protocol that may still be written; a partial final line is skipped.
pub fn tail(path: impl AsRef<Path>) -> Result<Vec<ProtocolEvent>, ProtocolError> {
    let reader = BufReader::new(File::open(path)?);
    let mut text = String::new();
    for line in reader.split(b'\n') {
        let line = line?;
        if let Ok(s) = std::str::from_utf8(&line) {
            if serde_json::from_str::<Value>(s).is_ok() {
                text.push_str(s);
                text.push('\n');
            }
        }
    }
    parse(&text)
}

fn single_run(events: &[ProtocolEvent]) -> Result<(), ProtocolError> {
    if let Some(first) = events.first() {
        if let Some(other) = events.iter().find(|e| e.run_id != first.run_id) {
            return Err(ProtocolError::MixedRuns(first.run_id.clone(), other.run_id.clone()));
        }
    }
    Ok(())
}

/// The text a transcript entry keys on: the final user message, else the final message.
fn match_source(messages: &[ChatMessage]) -> &str {
    messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .or_else(|| messages.last())
        .map_or("", |m| m.content.as_str())
}

/// Turn a recorded run into a transcript for the scripted backend.
pub fn extract_transcript(events: &[ProtocolEvent]) -> Result<Transcript, ProtocolError> {
    single_run(events)?;
    let mut entries = Vec::new();
    let mut open_prompt: Option<&PromptPayload> = None;
    for event in events {
        match &event.body {
            EventBody::Prompt(prompt) => open_prompt = Some(prompt),
            EventBody::Completion(completion) => {
                let prompt = open_prompt
                    .take()
                    .ok_or(ProtocolError::OrphanCompletion(entries.len() + 1))?;
                let key: String = match_source(&prompt.messages)
                    .chars()
                    .take(MATCH_PREFIX_CHARS)
                    .collect();
                entries.push(TranscriptEntry {
                    r#match: (!key.is_empty()).then_some(key),
                    answer: completion.text.clone(),
                });
            }
            _ => {}
        }
    }
    Ok(Transcript::new(entries))
}

const VOLATILE_KEYS: [&str; 3] = ["timestamp", "proposed_at", "run_id"];

fn strip_volatile(value: &mut Value) {
    match value {
        Value::Object(map) => {
            for key in VOLATILE_KEYS {
                map.remove(key);
            }
            map.values_mut().for_each(strip_volatile);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_volatile),
        _ => {}
    }
}

/// The event as JSON with wall-clock and identity fields removed.
pub fn canonicalize(event: &ProtocolEvent) -> Value {
    let mut value = serde_json::to_value(event).expect("protocol events serialize");
    strip_volatile(&mut value);
    value
}

/// Canonical payload bytes of every event whose kind is in `kinds`.
pub fn canonical_payloads(events: &[ProtocolEvent], kinds: &[&str]) -> Vec<String> {
    events
        .iter()
        .filter(|e| kinds.contains(&e.body.kind()))
        .map(|e| {
            let mut value = canonicalize(e);
            let payload = value.get_mut("payload").map(Value::take).unwrap_or(Value::Null);
            format!("{}:{}", e.body.kind(), payload)
        })
        .collect()
}

/// Per-run summary of what was executed and found.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub commands: BTreeMap<String, u32>,
    pub findings: BTreeMap<String, u32>,
    pub rounds_to_root: Option<u32>,
    pub stop_reason: Option<StopReason>,
}

impl RunReport {
    pub fn from_events(events: &[ProtocolEvent]) -> Result<Self, ProtocolError> {
        single_run(events)?;
        let mut report = RunReport {
            run_id: events.first().map(|e| e.run_id.clone()).unwrap_or_default(),
            ..Default::default()
        };
        for event in events {
            match &event.body {
                EventBody::CommandExecuted(executed) => {
                    *report.commands.entry(executed.command.cmd.clone()).or_insert(0) += 1;
                }
                EventBody::Finding(found) => {
                    *report.findings.entry(found.finding.description.clone()).or_insert(0) += 1;
                }
                EventBody::StatusChange(change) if change.terminal => {
                    report.stop_reason = StopReason::from_status(change.to);
                    if change.to == RunStatus::RootAchieved {
                        report.rounds_to_root = Some(change.round);
                    }
                }
                _ => {}
            }
        }
        Ok(report)
    }

    /// Commands ranked by frequency, ties broken lexicographically, cut to `k`.
    pub fn top_commands(&self, k: usize) -> Vec<&str> {
        let mut ranked: Vec<(&str, u32)> = self.commands.iter().map(|(c, n)| (c.as_str(), *n)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.into_iter().take(k).map(|(c, _)| c).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub min: u32,
    pub median: f64,
    pub max: u32,
}

impl Distribution {
    pub fn of(values: &[u32]) -> Option<Self> {
        let mut sorted = values.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        if n == 0 {
            return None;
        }
        let median = if n % 2 == 1 {
            f64::from(sorted[n / 2])
        } else {
            (f64::from(sorted[n / 2 - 1]) + f64::from(sorted[n / 2])) / 2.0
        };
        Some(Self {
            min: sorted[0],
            median,
            max: sorted[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub commands: BTreeMap<String, u32>,
    pub findings: BTreeMap<String, u32>,
    pub rounds_to_root: Option<Distribution>,
    pub success_rate: f64,
    pub stop_reasons: BTreeMap<StopReason, u32>,
}

fn merge(into: &mut BTreeMap<String, u32>, from: &BTreeMap<String, u32>) {
    for (key, count) in from {
        *into.entry(key.clone()).or_insert(0) += count;
    }
}

pub fn aggregate(reports: &[RunReport]) -> AggregateReport {
    assert!(!reports.is_empty(), "aggregate needs at least one report");
    let mut commands = BTreeMap::new();
    let mut findings = BTreeMap::new();
    let mut stop_reasons = BTreeMap::new();
    let mut rounds = Vec::new();
    for report in reports {
        merge(&mut commands, &report.commands);
        merge(&mut findings, &report.findings);
        if let Some(reason) = report.stop_reason {
            *stop_reasons.entry(reason).or_insert(0) += 1;
        }
        if let Some(r) = report.rounds_to_root {
            rounds.push(r);
        }
    }
    AggregateReport {
        runs: reports.len(),
        commands,
        findings,
        success_rate: rounds.len() as f64 / reports.len() as f64,
        rounds_to_root: Distribution::of(&rounds),
        stop_reasons,
    }
}

fn jaccard(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Mean pairwise Jaccard similarity of the runs' top-`k` command sets.
pub fn convergence(runs: &[RunReport], k: usize) -> f64 {
    assert!(runs.len() >= 2, "convergence needs at least two runs");
    assert!(k >= 1, "k must be at least 1");
    let sets: Vec<BTreeSet<&str>> = runs.iter().map(|r| r.top_commands(k).into_iter().collect()).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            total += jaccard(&sets[i], &sets[j]);
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Plain-text table for the CLI.
pub fn render_table(report: &AggregateReport, convergence: Option<(usize, f64)>) -> String {
    let mut out = format!("runs: {}\nsuccess rate: {:.2}\n", report.runs, report.success_rate);
    if let Some(d) = &report.rounds_to_root {
        out.push_str(&format!(
            "rounds to root: min {} / median {} / max {}\n",
            d.min, d.median, d.max
        ));
    }
    if let Some((k, score)) = convergence {
        out.push_str(&format!("convergence (top-{k}): {score:.4}\n"));
    }
    for (reason, n) in &report.stop_reasons {
        out.push_str(&format!("stop {reason}: {n}\n"));
    }
    let width = report
        .commands
        .keys()
        .map(|c| c.chars().count())
        .max()
        .unwrap_or(7)
        .max(7);
    out.push_str(&format!("\n{:<width$}  count\n", "command"));
    let mut ranked: Vec<_> = report.commands.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    for (cmd, n) in ranked {
        out.push_str(&format!("{cmd:<width$}  {n}\n"));
    }
    out
}
