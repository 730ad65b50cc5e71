//! The privilege-escalation loop.
//!
//! One round: prompt, complete, parse, optionally wait for the operator,
//! execute, probe for root, analyse. Every artefact goes to the protocol.

use std::collections::VecDeque;

use crate::domain::{
    transition, DomainError, ExecutedCommand, PendingCommand, RunConfig, RunState, RunStatus, StatusEvent, StopReason,
};
use crate::llm::{ChatMessage, CompletionRequest, LlmAnswer, LlmBackend, LlmError};
use crate::memory::{fit_history, reflection_request, reflection_summary, MemoryError};
use crate::prompt::{
    build_analysis_prompt, build_exec_prompt, parse_command, parse_findings, soften, PromptError, PromptTemplate,
    RefusalLexicon, RenderedTemplate, SoftenMap, NUDGE_HINT,
};
use crate::protocol::{
    now_millis, ApprovalPayload, CommandExecutedPayload, CommandProposedPayload, CompletionPayload, EventBody,
    FindingPayload, HintPayload, HintSource, PromptPayload, ProtocolError, ProtocolEvent, Purpose, Recorder,
    StatusChangePayload, WarningPayload,
};
use crate::target::{ExecLimits, SessionKind, Target, TargetError};

/// Operator verdict on a proposed command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Approve,
    Deny,
    Edit(String),
    Abort,
}

impl Decision {
    pub fn name(&self) -> &'static str {
        match self {
            Decision::Approve => "approve",
            Decision::Deny => "deny",
            Decision::Edit(_) => "edit",
            Decision::Abort => "abort",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OperatorSignal {
    Hint(String),
    Abort,
}

/// Points in a round where the loop reads its mailbox.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    RoundStart,
    BeforeExecute,
}

/// Source of decisions, hints and abort requests.
pub trait Operator: Send {
    /// Drain pending signals. `round` is the 1-based round in progress.
    fn poll(&mut self, gate: Gate, round: u32) -> Vec<OperatorSignal>;

    /// Block until the operator decides on `state.pending`.
    fn decide(&mut self, state: &RunState) -> Decision;
}

/// Never interrupts and approves everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct AutoApprove;

impl Operator for AutoApprove {
    fn poll(&mut self, _gate: Gate, _round: u32) -> Vec<OperatorSignal> {
        Vec::new()
    }

    fn decide(&mut self, _state: &RunState) -> Decision {
        Decision::Approve
    }
}

/// Pre-recorded operator for tests and demos.
#[derive(Debug, Default, Clone)]
pub struct ScriptedOperator {
    decisions: VecDeque<Decision>,
    signals: Vec<(Gate, u32, OperatorSignal)>,
}

impl ScriptedOperator {
    pub fn new(decisions: impl IntoIterator<Item = Decision>) -> Self {
        Self {
            decisions: decisions.into_iter().collect(),
            signals: Vec::new(),
        }
    }

    pub fn signal_at(mut self, gate: Gate, round: u32, signal: OperatorSignal) -> Self {
        self.signals.push((gate, round, signal));
        self
    }
}

impl Operator for ScriptedOperator {
    fn poll(&mut self, gate: Gate, round: u32) -> Vec<OperatorSignal> {
        let (due, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.signals)
            .into_iter()
            .partition(|(g, r, _)| *g == gate && *r == round);
        self.signals = rest;
        due.into_iter().map(|(_, _, s)| s).collect()
    }

    fn decide(&mut self, _state: &RunState) -> Decision {
        self.decisions.pop_front().unwrap_or(Decision::Abort)
    }
}

/// Rebuild the operator inputs of a recorded run: its approval decisions,
/// operator hints and gate aborts.
pub fn replay_operator(events: &[ProtocolEvent]) -> ScriptedOperator {
    let mut operator = ScriptedOperator::default();
    // Round whose proposal has not yet been executed or decided on.
    let mut before_execute: Option<u32> = None;
    for event in events {
        match &event.body {
            EventBody::CommandProposed(p) => before_execute = Some(p.round),
            EventBody::ApprovalDecision(d) => {
                let decision = match d.decision.as_str() {
                    "approve" => Decision::Approve,
                    "deny" => Decision::Deny,
                    "edit" => Decision::Edit(d.command.clone().unwrap_or_default()),
                    _ => Decision::Abort,
                };
                operator.decisions.push_back(decision);
                before_execute = None;
            }
            EventBody::Hint(h) if h.source == HintSource::Operator => {
                let gate = if before_execute == Some(h.round) {
                    Gate::BeforeExecute
                } else {
                    Gate::RoundStart
                };
                operator
                    .signals
                    .push((gate, h.round, OperatorSignal::Hint(h.text.clone())));
            }
            EventBody::StatusChange(s) if s.to == RunStatus::Aborted && s.from == Some(RunStatus::Running) => {
                operator.signals.push(match before_execute {
                    Some(round) => (Gate::BeforeExecute, round, OperatorSignal::Abort),
                    None => (Gate::RoundStart, s.round + 1, OperatorSignal::Abort),
                });
            }
            EventBody::StatusChange(_) | EventBody::CommandExecuted(_) | EventBody::Warning(_) => before_execute = None,
            _ => {}
        }
    }
    operator
}

/// What an operator decision leads to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecisionOutcome {
    Execute(String),
    Edited { original: String, command: String },
    Denied(String),
    Aborted,
}

pub fn denial_hint(cmd: &str) -> String {
    format!("operator denied: {cmd}")
}

/// Apply an operator decision to a state awaiting approval.
///
/// Introduces an injected planner outline in the system prompt.
pub const PLAN_PREAMBLE: &str = "A higher-level attack plan for this host, to follow where it helps:";

/// An edit replaces the proposed command and keeps waiting for approval.
pub fn apply_decision(state: &RunState, decision: Decision) -> Result<(RunState, DecisionOutcome), DomainError> {
    let pending = match (&state.status, &state.pending) {
        (RunStatus::AwaitingApproval, Some(pending)) => pending.clone(),
        _ => {
            let event = match decision {
                Decision::Approve => StatusEvent::Approve,
                Decision::Deny => StatusEvent::Deny,
                Decision::Abort => StatusEvent::Abort,
                Decision::Edit(_) => StatusEvent::Approve,
            };
            return Err(DomainError::IllegalTransition {
                status: state.status,
                event: event.kind(),
            });
        }
    };
    match decision {
        Decision::Approve => Ok((
            transition(state, StatusEvent::Approve)?,
            DecisionOutcome::Execute(pending.proposed),
        )),
        Decision::Edit(command) => {
            let command = command.trim().to_string();
            if command.is_empty() {
                return Err(DomainError::InvalidDecision("edited command is empty".into()));
            }
            let mut next = state.clone();
            next.pending = Some(PendingCommand {
                proposed: command.clone(),
                ..pending.clone()
            });
            Ok((
                next,
                DecisionOutcome::Edited {
                    original: pending.proposed,
                    command,
                },
            ))
        }
        Decision::Deny => {
            let mut next = transition(state, StatusEvent::Deny)?;
            next.hints.push(denial_hint(&pending.proposed));
            Ok((next, DecisionOutcome::Denied(pending.proposed)))
        }
        Decision::Abort => Ok((transition(state, StatusEvent::Abort)?, DecisionOutcome::Aborted)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub final_state: RunState,
    pub rounds_used: u32,
    pub stop_reason: StopReason,
    pub error: Option<String>,
}

/// Prompt material used by the loop.
#[derive(Debug, Clone)]
pub struct PromptKit {
    pub template: PromptTemplate,
    pub soften: SoftenMap,
    pub lexicon: RefusalLexicon,
}

impl Default for PromptKit {
    fn default() -> Self {
        Self {
            template: PromptTemplate::default_template(),
            soften: SoftenMap::builtin(),
            lexicon: RefusalLexicon::default(),
        }
    }
}

impl PromptKit {
    pub fn for_config(config: &RunConfig) -> Result<Self, DomainError> {
        let template = PromptTemplate::builtin(&config.goal_template_id).ok_or_else(|| {
            DomainError::InvalidConfig(format!("unknown goal template {:?}", config.goal_template_id))
        })?;
        Ok(Self {
            template,
            ..Self::default()
        })
    }
}

#[derive(Debug, thiserror::Error)]
enum StepError {
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("backend: {0}")]
    Backend(#[from] LlmError),
    #[error("target: {0}")]
    Target(#[from] TargetError),
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error("state: {0}")]
    Domain(#[from] DomainError),
}

enum Completion {
    Answer(LlmAnswer),
    Refused,
}

/// Everything one run needs. The loop is the only writer of its state.
pub struct Agent<'a> {
    config: &'a RunConfig,
    kit: &'a PromptKit,
    rendered: RenderedTemplate,
    backend: &'a dyn LlmBackend,
    target: &'a mut dyn Target,
    operator: &'a mut dyn Operator,
    recorder: &'a mut Recorder,
    last_error: Option<String>,
    /// Softened retries spent in the current round, across exec and analysis.
    retries_used: u32,
}

impl<'a> Agent<'a> {
    pub fn new(
        config: &'a RunConfig,
        kit: &'a PromptKit,
        backend: &'a dyn LlmBackend,
        target: &'a mut dyn Target,
        operator: &'a mut dyn Operator,
        recorder: &'a mut Recorder,
    ) -> Result<Self, DomainError> {
        config.validate()?;
        let mut rendered = kit
            .template
            .render(target.username())
            .map_err(|e| DomainError::InvalidConfig(e.to_string()))?;
        if let Some(plan) = config.attack_plan.as_deref().filter(|p| !p.trim().is_empty()) {
            rendered.system_text = format!("{}\n\n{PLAN_PREAMBLE}\n{}", rendered.system_text, plan.trim());
        }
        Ok(Self {
            config,
            kit,
            rendered,
            backend,
            target,
            operator,
            recorder,
            last_error: None,
            retries_used: 0,
        })
    }

    fn limits(&self) -> ExecLimits {
        ExecLimits {
            timeout: std::time::Duration::from_millis(self.config.command_timeout_ms),
            output_cap: self.config.output_cap,
        }
    }

    fn record(&mut self, body: EventBody) -> Result<(), StepError> {
        self.recorder.emit(body)?;
        Ok(())
    }

    fn status_change(&mut self, from: RunStatus, next: &RunState, reason: impl Into<String>) -> Result<(), StepError> {
        self.record(EventBody::StatusChange(StatusChangePayload {
            from: Some(from),
            to: next.status,
            round: next.round,
            reason: reason.into(),
            terminal: next.status.is_terminal(),
            config: None,
        }))
    }

    fn move_to(&mut self, state: RunState, event: StatusEvent, reason: &str) -> Result<RunState, StepError> {
        let from = state.status;
        let next = transition(&state, event)?;
        self.status_change(from, &next, reason)?;
        Ok(next)
    }

    fn warn(&mut self, round: u32, code: &str, message: impl Into<String>) -> Result<(), StepError> {
        let message = message.into();
        tracing::warn!(code, %message, round, "run warning");
        self.record(EventBody::Warning(WarningPayload {
            round,
            code: code.into(),
            message,
        }))
    }

    fn add_hint(
        &mut self,
        state: &mut RunState,
        round: u32,
        text: String,
        source: HintSource,
    ) -> Result<(), StepError> {
        self.record(EventBody::Hint(HintPayload {
            round,
            text: text.clone(),
            source,
        }))?;
        state.hints.push(text);
        Ok(())
    }

    fn complete_logged(
        &mut self,
        purpose: Purpose,
        round: u32,
        attempt: u32,
        messages: Vec<ChatMessage>,
        max_answer_tokens: Option<usize>,
    ) -> Result<LlmAnswer, StepError> {
        self.record(EventBody::Prompt(PromptPayload {
            purpose,
            round,
            attempt,
            messages: messages.clone(),
        }))?;
        let mut request = CompletionRequest::new(messages, &self.config.model);
        if let Some(limit) = max_answer_tokens {
            request.max_answer_tokens = limit;
        }
        let answer = self.backend.complete(&request)?;
        self.record(EventBody::Completion(CompletionPayload::new(
            purpose, round, attempt, &answer,
        )))?;
        Ok(answer)
    }

    /// Complete, softening and retrying on refusals while the round's retry allowance lasts.
    fn complete_softened(
        &mut self,
        purpose: Purpose,
        round: u32,
        messages: Vec<ChatMessage>,
    ) -> Result<Completion, StepError> {
        let mut messages = messages;
        let mut attempt = 0;
        loop {
            let answer = self.complete_logged(purpose, round, attempt, messages.clone(), None)?;
            if !self.kit.lexicon.is_refusal(&answer.text) {
                return Ok(Completion::Answer(answer));
            }
            if self.retries_used >= self.config.soften_retries {
                return Ok(Completion::Refused);
            }
            attempt += 1;
            self.retries_used += 1;
            self.warn(
                round,
                "soften_retry",
                format!(
                    "refusal detected, softened retry {} of {}",
                    self.retries_used, self.config.soften_retries
                ),
            )?;
            messages = soften(&messages, &self.kit.soften, &self.rendered.dejudgment_suffix);
        }
    }

    /// Close a round that consumed a turn without reaching root.
    fn end_round(&mut self, mut state: RunState) -> Result<RunState, StepError> {
        state.round += 1;
        if state.round >= self.config.max_rounds && state.status == RunStatus::Running {
            let reason = format!("max_rounds {} reached", self.config.max_rounds);
            return self.move_to(state, StatusEvent::RoundsExhausted, &reason);
        }
        Ok(state)
    }

    fn drain(&mut self, state: &mut RunState, gate: Gate, round: u32) -> Result<bool, StepError> {
        let mut abort = false;
        for signal in self.operator.poll(gate, round) {
            match signal {
                OperatorSignal::Hint(text) => self.add_hint(state, round, text, HintSource::Operator)?,
                OperatorSignal::Abort => abort = true,
            }
        }
        Ok(abort)
    }

    fn next_command(&mut self, state: &mut RunState, round: u32) -> Result<Option<(String, String)>, StepError> {
        if self.config.auto_verify && self.target.kind() == SessionKind::Simulated {
            if let Some(cmd) = state.verify_queue.first().cloned() {
                state.verify_queue.remove(0);
                return Ok(Some((
                    cmd.clone(),
                    format!("verification of an earlier finding: {cmd}"),
                )));
            }
        }
        let window = fit_history(&state.history, self.config.token_budget, self.config.reserved_tokens)
            .with_summary(state.summary.clone());
        let messages = build_exec_prompt(state, &self.rendered, &window, self.config.token_budget)?;
        let answer = match self.complete_softened(Purpose::Exec, round, messages)? {
            Completion::Answer(answer) => answer,
            Completion::Refused => {
                self.warn(round, "refused", "model refused after all softened retries")?;
                return Ok(None);
            }
        };
        match parse_command(&answer.text) {
            Ok(cmd) => Ok(Some((cmd, answer.text))),
            Err(PromptError::NoCommandFound) => {
                self.warn(round, "no_command", "answer contained no command")?;
                if !state.hints.iter().any(|h| h == NUDGE_HINT) {
                    self.add_hint(state, round, NUDGE_HINT.to_string(), HintSource::Nudge)?;
                }
                Ok(None)
            }
            Err(other) => Err(other.into()),
        }
    }

    /// Interactive gate. Returns the command to run, or the state to return.
    fn gate(&mut self, state: RunState, round: u32) -> Result<Result<(RunState, String), RunState>, StepError> {
        let mut state = state;
        loop {
            let decision = self.operator.decide(&state);
            let original = state.pending.as_ref().map(|p| p.proposed.clone()).unwrap_or_default();
            let name = decision.name();
            let (next, outcome) = apply_decision(&state, decision)?;
            let command = match &outcome {
                DecisionOutcome::Execute(cmd) => Some(cmd.clone()),
                DecisionOutcome::Edited { command, .. } => Some(command.clone()),
                DecisionOutcome::Denied(_) | DecisionOutcome::Aborted => None,
            };
            self.record(EventBody::ApprovalDecision(ApprovalPayload {
                round,
                decision: name.into(),
                original,
                command,
            }))?;
            match outcome {
                DecisionOutcome::Edited { .. } => state = next,
                DecisionOutcome::Execute(cmd) => {
                    self.status_change(RunStatus::AwaitingApproval, &next, "approved")?;
                    return Ok(Ok((next, cmd)));
                }
                DecisionOutcome::Denied(cmd) => {
                    self.status_change(RunStatus::AwaitingApproval, &next, "denied")?;
                    let hint = next.hints.last().cloned().unwrap_or_else(|| denial_hint(&cmd));
                    self.record(EventBody::Hint(HintPayload {
                        round,
                        text: hint,
                        source: HintSource::Denial,
                    }))?;
                    return Ok(Err(self.end_round(next)?));
                }
                DecisionOutcome::Aborted => {
                    let mut next = next;
                    next.round += 1;
                    self.status_change(RunStatus::AwaitingApproval, &next, "operator abort")?;
                    return Ok(Err(next));
                }
            }
        }
    }

    fn execute(&mut self, state: &mut RunState, round: u32, cmd: &str) -> Result<ExecutedCommand, StepError> {
        let limits = self.limits();
        let executed = match self.target.run(cmd, &limits) {
            Ok(executed) => executed,
            Err(TargetError::TimedOut(partial)) => {
                self.warn(
                    round,
                    "timeout",
                    format!("{cmd:?} killed after {} ms", self.config.command_timeout_ms),
                )?;
                *partial
            }
            Err(other) => return Err(other.into()),
        };
        self.record(EventBody::CommandExecuted(CommandExecutedPayload {
            round,
            command: executed.clone(),
        }))?;
        state.history.push(executed.clone());
        Ok(executed)
    }

    fn analyse(&mut self, state: &mut RunState, round: u32, executed: &ExecutedCommand) -> Result<(), StepError> {
        let messages = build_analysis_prompt(executed, &self.rendered, self.config.output_cap);
        let answer = match self.complete_softened(Purpose::Analysis, round, messages)? {
            Completion::Answer(answer) => answer,
            Completion::Refused => {
                return self.warn(round, "analysis_refused", "analysis refused after all softened retries");
            }
        };
        for finding in parse_findings(&answer.text, round) {
            self.record(EventBody::Finding(FindingPayload {
                round,
                finding: finding.clone(),
            }))?;
            if self.config.auto_verify && self.target.kind() == SessionKind::Simulated {
                if let Some(cmd) = &finding.verification_command {
                    state.verify_queue.push(cmd.clone());
                }
            }
            state.findings.push(finding);
        }
        Ok(())
    }

    fn reflect(&mut self, state: &mut RunState, round: u32) -> Result<(), StepError> {
        let request = match reflection_request(&state.history, &self.config.model, self.config.token_budget) {
            Ok(request) => request,
            Err(err) => return self.warn(round, "reflection_failed", err.to_string()),
        };
        let answer = self.complete_logged(
            Purpose::Reflection,
            round,
            0,
            request.messages,
            Some(request.max_answer_tokens),
        );
        let answer = match answer {
            Ok(answer) => answer,
            Err(StepError::Backend(err)) => return self.warn(round, "reflection_failed", err.to_string()),
            Err(other) => return Err(other),
        };
        match reflection_summary(&answer.text, &self.kit.lexicon) {
            Ok(summary) => state.summary = Some(summary),
            Err(MemoryError::Refused) => self.warn(round, "reflection_refused", "summary refused")?,
            Err(err) => self.warn(round, "reflection_failed", err.to_string())?,
        }
        Ok(())
    }

    fn try_step(&mut self, state: RunState) -> Result<RunState, StepError> {
        let mut state = state;
        let round = state.round + 1;
        self.retries_used = 0;

        let (mut state, cmd) = if state.status == RunStatus::AwaitingApproval {
            match self.gate(state, round)? {
                Ok(ready) => ready,
                Err(done) => return Ok(done),
            }
        } else {
            if self.drain(&mut state, Gate::RoundStart, round)? {
                return self.move_to(state, StatusEvent::Abort, "operator abort");
            }
            let Some((cmd, raw_answer)) = self.next_command(&mut state, round)? else {
                return self.end_round(state);
            };
            self.record(EventBody::CommandProposed(CommandProposedPayload {
                round,
                command: cmd.clone(),
                raw_answer: raw_answer.clone(),
            }))?;
            if self.drain(&mut state, Gate::BeforeExecute, round)? {
                state.round += 1;
                return self.move_to(state, StatusEvent::Abort, "operator abort");
            }
            if self.config.interactive {
                let pending = PendingCommand {
                    proposed: cmd,
                    raw_answer,
                    proposed_at: now_millis(),
                };
                let waiting = self.move_to(state, StatusEvent::Propose(pending), "awaiting approval")?;
                match self.gate(waiting, round)? {
                    Ok(ready) => ready,
                    Err(done) => return Ok(done),
                }
            } else {
                (state, cmd)
            }
        };

        let executed = self.execute(&mut state, round, &cmd)?;
        if self.target.probe_root()? {
            state.round += 1;
            return self.move_to(state, StatusEvent::RootDetected, "root shell detected");
        }
        if self.config.analysis_enabled {
            self.analyse(&mut state, round, &executed)?;
        }
        if self.config.reflection_enabled {
            self.reflect(&mut state, round)?;
        }
        self.end_round(state)
    }

    /// Run one round. Failures end the run with status error.
    pub fn step(&mut self, state: RunState) -> RunState {
        if state.status.is_terminal() {
            return state;
        }
        let snapshot = state.clone();
        match self.try_step(state) {
            Ok(next) => next,
            Err(err) => {
                let message = err.to_string();
                tracing::error!(%message, "run failed");
                self.last_error = Some(message.clone());
                let mut failed = snapshot;
                failed.round = (failed.round + 1).min(self.config.max_rounds);
                let from = failed.status;
                let failed = transition(&failed, StatusEvent::Fail).unwrap_or_else(|_| {
                    let mut forced = failed.clone();
                    forced.status = RunStatus::Error;
                    forced.pending = None;
                    forced
                });
                let _ = self.status_change(from, &failed, message);
                failed
            }
        }
    }

    /// Drive `state` until it reaches a terminal status.
    pub fn run(&mut self, state: RunState) -> LoopOutcome {
        let start = self.record(EventBody::StatusChange(StatusChangePayload {
            from: None,
            to: state.status,
            round: state.round,
            reason: "start".into(),
            terminal: false,
            config: Some(self.config.clone()),
        }));
        let mut state = state;
        if let Err(err) = start {
            self.last_error = Some(err.to_string());
            state.status = RunStatus::Error;
            state.pending = None;
        }
        while !state.status.is_terminal() {
            state = self.step(state);
        }
        LoopOutcome {
            rounds_used: state.round,
            stop_reason: StopReason::from_status(state.status).expect("terminal status"),
            error: self.last_error.take(),
            final_state: state,
        }
    }
}

/// Run a fresh engagement to completion.
pub fn run_loop(
    config: &RunConfig,
    kit: &PromptKit,
    backend: &dyn LlmBackend,
    target: &mut dyn Target,
    operator: &mut dyn Operator,
    recorder: &mut Recorder,
) -> Result<LoopOutcome, DomainError> {
    let state = RunState::new(recorder.run_id().to_string());
    let mut agent = Agent::new(config, kit, backend, target, operator, recorder)?;
    Ok(agent.run(state))
}
