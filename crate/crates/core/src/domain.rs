//! Shared domain types and the run status state machine.
//!
//! Nothing in here performs I/O. The agent loop is the only writer of
//! [`RunState`]; everything else receives snapshots.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::ModelParams;

pub const DEFAULT_TOKEN_BUDGET: usize = 4096;
pub const DEFAULT_RESERVED_TOKENS: usize = 1024;
pub const DEFAULT_OUTPUT_CAP: usize = 8192;
pub const DEFAULT_COMMAND_TIMEOUT_MS: u64 = 30_000;
pub const MIN_TOKEN_BUDGET: usize = 512;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("illegal transition: {event} while {status}")]
    IllegalTransition { status: RunStatus, event: EventKind },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
}

/// How to authenticate against an SSH target.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Credential {
    Password(String),
    KeyFile(PathBuf),
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Credential::Password(_) => f.write_str("Password(<redacted>)"),
            Credential::KeyFile(path) => f.debug_tuple("KeyFile").field(path).finish(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub host: String,
    #[serde(default = "default_ssh_port")]
    pub port: u16,
    pub username: String,
    pub credential: Credential,
    #[serde(default = "default_connect_timeout")]
    pub connect_timeout_ms: u64,
    #[serde(default = "default_command_timeout")]
    pub command_timeout_ms: u64,
}

fn default_ssh_port() -> u16 {
    22
}

fn default_connect_timeout() -> u64 {
    10_000
}

fn default_command_timeout() -> u64 {
    DEFAULT_COMMAND_TIMEOUT_MS
}

impl TargetSpec {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.port == 0 {
            return Err(DomainError::InvalidConfig("port must be in 1..65535".into()));
        }
        if self.connect_timeout_ms == 0 || self.command_timeout_ms == 0 {
            return Err(DomainError::InvalidConfig("timeouts must be positive".into()));
        }
        if self.username.trim().is_empty() {
            return Err(DomainError::InvalidConfig("username must not be empty".into()));
        }
        if self.host.trim().is_empty() {
            return Err(DomainError::InvalidConfig("host must not be empty".into()));
        }
        Ok(())
    }
}

/// One command executed on the target together with everything it produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutedCommand {
    pub cmd: String,
    pub stdout: String,
    pub stderr: String,
    pub exit_code: i32,
    pub duration_ms: u64,
    /// Output exceeded the configured cap and only its tail was kept.
    pub truncated: bool,
}

impl ExecutedCommand {
    /// Text carried back to the model: stdout followed by stderr when present.
    pub fn combined_output(&self) -> String {
        match (self.stdout.is_empty(), self.stderr.is_empty()) {
            (_, true) => self.stdout.clone(),
            (true, false) => self.stderr.clone(),
            (false, false) => {
                let mut out = self.stdout.clone();
                if !out.ends_with('\n') {
                    out.push('\n');
                }
                out.push_str(&self.stderr);
                out
            }
        }
    }
}

/// A vulnerability reported by the analysis step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub description: String,
    pub verification_command: Option<String>,
    pub source_round: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub goal_template_id: String,
    pub max_rounds: u32,
    pub token_budget: usize,
    pub reserved_tokens: usize,
    pub output_cap: usize,
    pub command_timeout_ms: u64,
    pub interactive: bool,
    pub analysis_enabled: bool,
    pub reflection_enabled: bool,
    /// Queue verification commands from findings as the next commands to run.
    /// Only honoured against simulated targets.
    pub auto_verify: bool,
    pub soften_retries: u32,
    pub llm_backend_ref: String,
    pub target_ref: String,
    pub model: ModelParams,
    /// Planner outline appended to the system prompt. Off when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack_plan: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            goal_template_id: crate::prompt::DEFAULT_TEMPLATE_ID.to_string(),
            max_rounds: 20,
            token_budget: DEFAULT_TOKEN_BUDGET,
            reserved_tokens: DEFAULT_RESERVED_TOKENS,
            output_cap: DEFAULT_OUTPUT_CAP,
            command_timeout_ms: DEFAULT_COMMAND_TIMEOUT_MS,
            interactive: false,
            analysis_enabled: true,
            reflection_enabled: false,
            auto_verify: false,
            soften_retries: 1,
            llm_backend_ref: "default".to_string(),
            target_ref: "lin-security".to_string(),
            model: ModelParams::default(),
            attack_plan: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        let fail = |msg: &str| Err(DomainError::InvalidConfig(msg.to_string()));
        if self.max_rounds < 1 {
            return fail("max_rounds must be at least 1");
        }
        if self.token_budget < MIN_TOKEN_BUDGET {
            return fail("token_budget must be at least 512");
        }
        if self.reserved_tokens >= self.token_budget {
            return fail("reserved_tokens must be below token_budget");
        }
        if self.output_cap == 0 {
            return fail("output_cap must be positive");
        }
        if self.command_timeout_ms == 0 {
            return fail("command_timeout_ms must be positive");
        }
        if !(0.0..=2.0).contains(&self.model.temperature) {
            return fail("temperature must be within [0, 2]");
        }
        if self.goal_template_id.trim().is_empty() {
            return fail("goal_template_id must not be empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    AwaitingApproval,
    RootAchieved,
    Exhausted,
    Aborted,
    Error,
}

impl RunStatus {
    pub const ALL: [RunStatus; 6] = [
        RunStatus::Running,
        RunStatus::AwaitingApproval,
        RunStatus::RootAchieved,
        RunStatus::Exhausted,
        RunStatus::Aborted,
        RunStatus::Error,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            RunStatus::RootAchieved | RunStatus::Exhausted | RunStatus::Aborted | RunStatus::Error
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Running => "running",
            RunStatus::AwaitingApproval => "awaiting_approval",
            RunStatus::RootAchieved => "root_achieved",
            RunStatus::Exhausted => "exhausted",
            RunStatus::Aborted => "aborted",
            RunStatus::Error => "error",
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Why a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    RootAchieved,
    Exhausted,
    Aborted,
    Error,
}

impl StopReason {
    pub fn from_status(status: RunStatus) -> Option<Self> {
        match status {
            RunStatus::RootAchieved => Some(StopReason::RootAchieved),
            RunStatus::Exhausted => Some(StopReason::Exhausted),
            RunStatus::Aborted => Some(StopReason::Aborted),
            RunStatus::Error => Some(StopReason::Error),
            RunStatus::Running | RunStatus::AwaitingApproval => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::RootAchieved => "root_achieved",
            StopReason::Exhausted => "exhausted",
            StopReason::Aborted => "aborted",
            StopReason::Error => "error",
        }
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingCommand {
    pub proposed: String,
    pub raw_answer: String,
    /// UTC milliseconds.
    pub proposed_at: i64,
}

/// Inputs to [`transition`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StatusEvent {
    Propose(PendingCommand),
    Approve,
    Deny,
    RootDetected,
    RoundsExhausted,
    Abort,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Propose,
    Approve,
    Deny,
    RootDetected,
    RoundsExhausted,
    Abort,
    Fail,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::Propose,
        EventKind::Approve,
        EventKind::Deny,
        EventKind::RootDetected,
        EventKind::RoundsExhausted,
        EventKind::Abort,
        EventKind::Fail,
    ];
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventKind::Propose => "propose",
            EventKind::Approve => "approve",
            EventKind::Deny => "deny",
            EventKind::RootDetected => "root_detected",
            EventKind::RoundsExhausted => "rounds_exhausted",
            EventKind::Abort => "abort",
            EventKind::Fail => "fail",
        };
        f.write_str(s)
    }
}

impl StatusEvent {
    pub fn kind(&self) -> EventKind {
        match self {
            StatusEvent::Propose(_) => EventKind::Propose,
            StatusEvent::Approve => EventKind::Approve,
            StatusEvent::Deny => EventKind::Deny,
            StatusEvent::RootDetected => EventKind::RootDetected,
            StatusEvent::RoundsExhausted => EventKind::RoundsExhausted,
            StatusEvent::Abort => EventKind::Abort,
            StatusEvent::Fail => EventKind::Fail,
        }
    }
}

/// The transition table. `None` marks an illegal pair.
pub fn next_status(status: RunStatus, event: EventKind) -> Option<RunStatus> {
    use EventKind as E;
    use RunStatus as S;
    match (status, event) {
        (S::Running, E::Propose) => Some(S::AwaitingApproval),
        (S::Running, E::RootDetected) => Some(S::RootAchieved),
        (S::Running, E::RoundsExhausted) => Some(S::Exhausted),
        (S::Running, E::Abort) => Some(S::Aborted),
        (S::Running, E::Fail) => Some(S::Error),
        (S::AwaitingApproval, E::Approve) => Some(S::Running),
        (S::AwaitingApproval, E::Deny) => Some(S::Running),
        (S::AwaitingApproval, E::Abort) => Some(S::Aborted),
        (S::AwaitingApproval, E::Fail) => Some(S::Error),
        _ => None,
    }
}

/// Mutable state of one engagement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    /// Rounds consumed so far.
    pub round: u32,
    pub history: Vec<ExecutedCommand>,
    pub findings: Vec<Finding>,
    pub pending: Option<PendingCommand>,
    pub status: RunStatus,
    pub hints: Vec<String>,
    #[serde(default)]
    pub summary: Option<String>,
    /// Verification commands waiting to be executed (auto-verify only).
    #[serde(default)]
    pub verify_queue: Vec<String>,
}

impl RunState {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            round: 0,
            history: Vec::new(),
            findings: Vec::new(),
            pending: None,
            status: RunStatus::Running,
            hints: Vec::new(),
            summary: None,
            verify_queue: Vec::new(),
        }
    }

    pub fn with_fresh_id() -> Self {
        Self::new(new_run_id())
    }
}

pub fn new_run_id() -> String {
    uuid::Uuid::new_v4().to_string()
}

/// Apply `event` to `state`, returning the successor state.
pub fn transition(state: &RunState, event: StatusEvent) -> Result<RunState, DomainError> {
    let kind = event.kind();
    let status = next_status(state.status, kind).ok_or(DomainError::IllegalTransition {
        status: state.status,
        event: kind,
    })?;
    let mut next = state.clone();
    next.status = status;
    next.pending = match event {
        StatusEvent::Propose(pending) => Some(pending),
        _ => None,
    };
    Ok(next)
}
