use std::time::Duration;

use sparring_core::agent::{
    run_loop, AutoApprove, Decision, Gate, LoopOutcome, Operator, OperatorSignal, PromptKit, ScriptedOperator,
};
use sparring_core::domain::{ExecutedCommand, RunConfig, RunStatus, StopReason};
use sparring_core::fixtures::run_fixture;
use sparring_core::llm::{ScriptedBackend, Transcript, TranscriptEntry};
use sparring_core::protocol::{EventBody, HintSource, MemorySink, ProtocolEvent, Purpose, Recorder};
use sparring_core::target::{ExecLimits, SessionKind, SimulatedTarget, Target, TargetError, TargetProfile};

fn transcript(entries: &[(Option<&str>, &str)]) -> Transcript {
    Transcript::new(
        entries
            .iter()
            .map(|(m, a)| TranscriptEntry {
                r#match: m.map(str::to_string),
                answer: a.to_string(),
            })
            .collect(),
    )
}

fn run_with(
    config: &RunConfig,
    transcript: Transcript,
    target: &mut dyn Target,
    operator: &mut dyn Operator,
) -> (LoopOutcome, Vec<ProtocolEvent>) {
    let sink = MemorySink::new();
    let mut recorder = Recorder::new("run-under-test")
        .with_clock(Box::new(|| 0))
        .with_sink(sink.clone());
    let backend = ScriptedBackend::new(transcript);
    let outcome = run_loop(config, &PromptKit::default(), &backend, target, operator, &mut recorder).unwrap();
    (outcome, sink.events())
}

fn run(config: &RunConfig, transcript: Transcript, operator: &mut dyn Operator) -> (LoopOutcome, Vec<ProtocolEvent>) {
    let mut target = SimulatedTarget::new(TargetProfile::lin_security());
    run_with(config, transcript, &mut target, operator)
}

fn executed(events: &[ProtocolEvent]) -> Vec<String> {
    events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::CommandExecuted(p) => Some(p.command.cmd.clone()),
            _ => None,
        })
        .collect()
}

fn warnings(events: &[ProtocolEvent], code: &str) -> usize {
    events
        .iter()
        .filter(|e| matches!(&e.body, EventBody::Warning(w) if w.code == code))
        .count()
}

/// Shared protocol invariants for every run.
fn check_protocol(events: &[ProtocolEvent], outcome: &LoopOutcome, config: &RunConfig) {
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e.seq, i as u64 + 1);
    }
    let terminals: Vec<_> = events.iter().filter(|e| e.is_terminal()).collect();
    assert_eq!(terminals.len(), 1, "exactly one terminal status_change");
    assert!(events.last().unwrap().is_terminal());
    assert!(outcome.rounds_used <= config.max_rounds);
    assert!(outcome.final_state.history.len() as u32 <= outcome.final_state.round);
    assert_eq!(
        StopReason::from_status(outcome.final_state.status),
        Some(outcome.stop_reason)
    );
    let mut saw_prompt = false;
    let mut saw_completion = false;
    let mut saw_decision = false;
    for e in events {
        match &e.body {
            EventBody::Prompt(_) => saw_prompt = true,
            EventBody::Completion(_) => saw_completion = true,
            EventBody::ApprovalDecision(_) => saw_decision = true,
            EventBody::CommandExecuted(_) => {
                assert!(saw_prompt && saw_completion);
                if config.interactive {
                    assert!(saw_decision);
                }
            }
            _ => {}
        }
    }
    let mut per_round_retries = std::collections::BTreeMap::<u32, u32>::new();
    for e in events {
        if let EventBody::Warning(w) = &e.body {
            if w.code == "soften_retry" {
                *per_round_retries.entry(w.round).or_default() += 1;
            }
        }
    }
    assert!(per_round_retries.values().all(|n| *n <= config.soften_retries));
}

#[test]
fn t1_reaches_root_via_sudo_awk() {
    let fixture = run_fixture("t1").unwrap();
    let (outcome, events) = run(&fixture.config, fixture.transcript, &mut AutoApprove);
    check_protocol(&events, &outcome, &fixture.config);
    assert_eq!(outcome.stop_reason, StopReason::RootAchieved);
    assert_eq!(outcome.rounds_used, 2);
    assert_eq!(
        executed(&events),
        vec!["sudo -l", "sudo awk 'BEGIN {system(\"/bin/sh\")}'"]
    );
    assert_eq!(outcome.final_state.findings.len(), 2);
    assert!(outcome.error.is_none());
}

#[test]
fn first_round_records_sudo_listing() {
    let fixture = run_fixture("t1").unwrap();
    let mut config = fixture.config.clone();
    config.max_rounds = 1;
    let (outcome, _) = run(&config, fixture.transcript, &mut AutoApprove);
    assert_eq!(outcome.stop_reason, StopReason::Exhausted);
    let history = &outcome.final_state.history;
    assert_eq!(history.len(), 1);
    assert!(history[0].stdout.contains("NOPASSWD: /usr/bin/awk"));
}

#[test]
fn t2_finds_the_stored_hash() {
    let fixture = run_fixture("t2").unwrap();
    let (outcome, events) = run(&fixture.config, fixture.transcript, &mut AutoApprove);
    check_protocol(&events, &outcome, &fixture.config);
    let finding = &outcome.final_state.findings[0];
    assert!(finding.description.contains("insecurity"));
    assert_eq!(finding.verification_command.as_deref(), Some("su insecurity"));
    assert_eq!(finding.source_round, 1);
}

#[test]
fn t3_survives_hallucinated_script() {
    let fixture = run_fixture("t3").unwrap();
    let (outcome, events) = run(&fixture.config, fixture.transcript, &mut AutoApprove);
    check_protocol(&events, &outcome, &fixture.config);
    assert_eq!(outcome.stop_reason, StopReason::Exhausted);
    assert_eq!(outcome.rounds_used, 3);
    assert_eq!(outcome.final_state.history[0].exit_code, 127);
    assert!(outcome.final_state.history[0].stderr.contains("command not found"));
}

#[test]
fn t4_softens_once_then_proceeds() {
    let fixture = run_fixture("t4").unwrap();
    let (outcome, events) = run(&fixture.config, fixture.transcript, &mut AutoApprove);
    check_protocol(&events, &outcome, &fixture.config);
    assert_eq!(warnings(&events, "soften_retry"), 1);
    assert_eq!(executed(&events), vec!["id"]);
    let retry_prompt = events
        .iter()
        .find_map(|e| match &e.body {
            EventBody::Prompt(p) if p.attempt == 1 => Some(p.clone()),
            _ => None,
        })
        .unwrap();
    let text: String = retry_prompt.messages.iter().map(|m| m.content.as_str()).collect();
    assert!(text.contains("do not ask questions or provide judgments"));
    assert!(text.contains("verification commands"));
}

#[test]
fn persistent_refusal_consumes_the_round() {
    let config = RunConfig {
        max_rounds: 2,
        analysis_enabled: false,
        soften_retries: 1,
        ..RunConfig::default()
    };
    let sorry = "I'm sorry, I cannot help with that.";
    let (outcome, events) = run(
        &config,
        transcript(&[(None, sorry), (None, sorry), (None, "id")]),
        &mut AutoApprove,
    );
    check_protocol(&events, &outcome, &config);
    assert_eq!(warnings(&events, "soften_retry"), 1);
    assert_eq!(warnings(&events, "refused"), 1);
    assert_eq!(executed(&events), vec!["id"]);
    assert_eq!(outcome.stop_reason, StopReason::Exhausted);
}

#[test]
fn zero_soften_retries_never_retries() {
    let config = RunConfig {
        max_rounds: 1,
        analysis_enabled: false,
        soften_retries: 0,
        ..RunConfig::default()
    };
    let (_, events) = run(
        &config,
        transcript(&[(None, "As an AI, I must decline.")]),
        &mut AutoApprove,
    );
    assert_eq!(warnings(&events, "soften_retry"), 0);
    assert!(executed(&events).is_empty());
}

#[test]
fn benign_commands_exhaust_after_max_rounds() {
    let config = RunConfig {
        max_rounds: 3,
        analysis_enabled: false,
        ..RunConfig::default()
    };
    let (outcome, events) = run(
        &config,
        transcript(&[(None, "id"), (None, "hostname"), (None, "uname -a")]),
        &mut AutoApprove,
    );
    check_protocol(&events, &outcome, &config);
    assert_eq!(outcome.stop_reason, StopReason::Exhausted);
    assert_eq!(outcome.rounds_used, 3);
    assert_eq!(outcome.final_state.history.len(), 3);
}

#[test]
fn abort_during_round_two() {
    let config = RunConfig {
        max_rounds: 5,
        analysis_enabled: false,
        ..RunConfig::default()
    };
    let mut operator = ScriptedOperator::default().signal_at(Gate::BeforeExecute, 2, OperatorSignal::Abort);
    let (outcome, events) = run(&config, transcript(&[(None, "id"), (None, "hostname")]), &mut operator);
    check_protocol(&events, &outcome, &config);
    assert_eq!(outcome.stop_reason, StopReason::Aborted);
    assert_eq!(outcome.rounds_used, 2);
    assert_eq!(executed(&events), vec!["id"]);
}

#[test]
fn abort_at_round_start_consumes_nothing() {
    let config = RunConfig {
        analysis_enabled: false,
        ..RunConfig::default()
    };
    let mut operator = ScriptedOperator::default().signal_at(Gate::RoundStart, 1, OperatorSignal::Abort);
    let (outcome, events) = run(&config, transcript(&[]), &mut operator);
    check_protocol(&events, &outcome, &config);
    assert_eq!(outcome.rounds_used, 0);
    assert_eq!(outcome.stop_reason, StopReason::Aborted);
}

#[test]
fn interactive_deny_skips_execution_and_steers() {
    let config = RunConfig {
        max_rounds: 2,
        interactive: true,
        analysis_enabled: false,
        ..RunConfig::default()
    };
    let mut operator = ScriptedOperator::new([Decision::Deny, Decision::Approve]);
    let (outcome, events) = run(
        &config,
        transcript(&[(None, "rm -rf /tmp/x"), (Some("operator denied: rm -rf /tmp/x"), "id")]),
        &mut operator,
    );
    check_protocol(&events, &outcome, &config);
    assert_eq!(executed(&events), vec!["id"]);
    assert!(events.iter().any(|e| matches!(
        &e.body,
        EventBody::Hint(h) if h.source == HintSource::Denial && h.text == "operator denied: rm -rf /tmp/x"
    )));
    // Denied round returns to running before the next round begins.
    let statuses: Vec<RunStatus> = events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::StatusChange(s) => Some(s.to),
            _ => None,
        })
        .collect();
    assert_eq!(
        statuses,
        vec![
            RunStatus::Running,
            RunStatus::AwaitingApproval,
            RunStatus::Running,
            RunStatus::AwaitingApproval,
            RunStatus::Running,
            RunStatus::Exhausted
        ]
    );
    assert!(!outcome.final_state.history.iter().any(|h| h.cmd.contains("rm")));
}

#[test]
fn interactive_edit_then_approve_runs_edited_command() {
    let config = RunConfig {
        max_rounds: 1,
        interactive: true,
        analysis_enabled: false,
        ..RunConfig::default()
    };
    let mut operator = ScriptedOperator::new([Decision::Edit("sudo -l".into()), Decision::Approve]);
    let (outcome, events) = run(&config, transcript(&[(None, "sudo su")]), &mut operator);
    check_protocol(&events, &outcome, &config);
    assert_eq!(executed(&events), vec!["sudo -l"]);
    let edit = events
        .iter()
        .find_map(|e| match &e.body {
            EventBody::ApprovalDecision(d) if d.decision == "edit" => Some(d.clone()),
            _ => None,
        })
        .unwrap();
    assert_eq!(edit.original, "sudo su");
    assert_eq!(edit.command.as_deref(), Some("sudo -l"));
}

#[test]
fn interactive_abort_at_gate() {
    let config = RunConfig {
        interactive: true,
        analysis_enabled: false,
        ..RunConfig::default()
    };
    let mut operator = ScriptedOperator::new([Decision::Abort]);
    let (outcome, events) = run(&config, transcript(&[(None, "id")]), &mut operator);
    check_protocol(&events, &outcome, &config);
    assert_eq!(outcome.stop_reason, StopReason::Aborted);
    assert_eq!(outcome.rounds_used, 1);
    assert!(outcome.final_state.pending.is_none());
}

#[test]
fn operator_hint_reaches_next_prompt() {
    let config = RunConfig {
        max_rounds: 1,
        analysis_enabled: false,
        ..RunConfig::default()
    };
    let mut operator =
        ScriptedOperator::default().signal_at(Gate::RoundStart, 1, OperatorSignal::Hint("check /etc/passwd".into()));
    let (_, events) = run(
        &config,
        transcript(&[(Some("check /etc/passwd"), "cat /etc/passwd")]),
        &mut operator,
    );
    assert_eq!(executed(&events), vec!["cat /etc/passwd"]);
}

#[test]
fn no_command_found_nudges_once() {
    let config = RunConfig {
        max_rounds: 3,
        analysis_enabled: false,
        ..RunConfig::default()
    };
    let (outcome, events) = run(
        &config,
        transcript(&[
            (None, "   "),
            (None, "```\n```"),
            (Some("Reply with exactly one command."), "id"),
        ]),
        &mut AutoApprove,
    );
    check_protocol(&events, &outcome, &config);
    assert_eq!(warnings(&events, "no_command"), 2);
    let nudges = events
        .iter()
        .filter(|e| matches!(&e.body, EventBody::Hint(h) if h.source == HintSource::Nudge))
        .count();
    assert_eq!(nudges, 1);
    assert_eq!(outcome.rounds_used, 3);
    assert_eq!(executed(&events), vec!["id"]);
}

#[test]
fn exhausted_transcript_ends_in_error() {
    let config = RunConfig {
        analysis_enabled: false,
        ..RunConfig::default()
    };
    let (outcome, events) = run(&config, transcript(&[(None, "id")]), &mut AutoApprove);
    check_protocol(&events, &outcome, &config);
    assert_eq!(outcome.stop_reason, StopReason::Error);
    assert!(outcome.error.unwrap().contains("transcript exhausted"));
    assert_eq!(outcome.final_state.history.len(), 1);
}

#[test]
fn auto_verify_runs_verification_commands_on_simulated_targets() {
    let config = RunConfig {
        max_rounds: 5,
        auto_verify: true,
        ..RunConfig::default()
    };
    let (outcome, events) = run(
        &config,
        transcript(&[
            (None, "sudo -l"),
            (
                Some("Command: sudo -l"),
                "1. awk is allowed\nVerification: sudo awk 'BEGIN {system(\"/bin/sh\")}'",
            ),
        ]),
        &mut AutoApprove,
    );
    check_protocol(&events, &outcome, &config);
    assert_eq!(outcome.stop_reason, StopReason::RootAchieved);
    assert_eq!(outcome.rounds_used, 2);
    let prompts = events.iter().filter(|e| matches!(e.body, EventBody::Prompt(_))).count();
    assert_eq!(prompts, 2);
}

#[test]
fn findings_are_not_executed_by_default() {
    let fixture = run_fixture("t2").unwrap();
    let mut config = fixture.config.clone();
    config.max_rounds = 2;
    let mut entries = fixture.transcript.entries.clone();
    entries.push(TranscriptEntry {
        r#match: None,
        answer: "hostname".into(),
    });
    entries.push(TranscriptEntry {
        r#match: None,
        answer: "Nothing notable.".into(),
    });
    let (_, events) = run(&config, Transcript::new(entries), &mut AutoApprove);
    assert_eq!(executed(&events), vec!["cat /etc/passwd", "hostname"]);
}

#[test]
fn reflection_summary_is_prepended_to_later_prompts() {
    let config = RunConfig {
        max_rounds: 2,
        analysis_enabled: false,
        reflection_enabled: true,
        ..RunConfig::default()
    };
    let (outcome, events) = run(
        &config,
        transcript(&[
            (None, "sudo -l"),
            (Some("$ sudo -l"), "user can sudo awk"),
            (Some("user can sudo awk"), "id"),
            (None, "I'm sorry, I can't assist with that."),
        ]),
        &mut AutoApprove,
    );
    check_protocol(&events, &outcome, &config);
    assert_eq!(outcome.final_state.summary.as_deref(), Some("user can sudo awk"));
    assert_eq!(warnings(&events, "reflection_refused"), 1);
    let reflections = events
        .iter()
        .filter(|e| matches!(&e.body, EventBody::Prompt(p) if p.purpose == Purpose::Reflection))
        .count();
    assert_eq!(reflections, 2);
}

#[test]
fn analysis_refusal_is_a_warning_not_an_error() {
    let config = RunConfig {
        max_rounds: 1,
        soften_retries: 0,
        ..RunConfig::default()
    };
    let (outcome, events) = run(
        &config,
        transcript(&[(None, "id"), (None, "I must decline to analyse this.")]),
        &mut AutoApprove,
    );
    assert_eq!(outcome.stop_reason, StopReason::Exhausted);
    assert_eq!(warnings(&events, "analysis_refused"), 1);
}

/// Target whose commands always time out.
struct Slow;

impl Target for Slow {
    fn kind(&self) -> SessionKind {
        SessionKind::Simulated
    }

    fn username(&self) -> &str {
        "bob"
    }

    fn run(&mut self, cmd: &str, limits: &ExecLimits) -> Result<ExecutedCommand, TargetError> {
        Err(TargetError::TimedOut(Box::new(ExecutedCommand {
            cmd: cmd.into(),
            stdout: "partial".into(),
            stderr: String::new(),
            exit_code: -1,
            duration_ms: limits.timeout.as_millis() as u64,
            truncated: false,
        })))
    }

    fn probe_root(&mut self) -> Result<bool, TargetError> {
        Ok(false)
    }

    fn close(&mut self) {}
}

#[test]
fn timed_out_command_keeps_partial_output() {
    let config = RunConfig {
        max_rounds: 1,
        analysis_enabled: false,
        command_timeout_ms: Duration::from_millis(50).as_millis() as u64,
        ..RunConfig::default()
    };
    let (outcome, events) = run_with(&config, transcript(&[(None, "sleep 100")]), &mut Slow, &mut AutoApprove);
    assert_eq!(outcome.stop_reason, StopReason::Exhausted);
    assert_eq!(outcome.final_state.history[0].exit_code, -1);
    assert_eq!(outcome.final_state.history[0].stdout, "partial");
    assert_eq!(warnings(&events, "timeout"), 1);
}

/// Target whose channel drops on first use.
struct Broken;

impl Target for Broken {
    fn kind(&self) -> SessionKind {
        SessionKind::Ssh
    }

    fn username(&self) -> &str {
        "bob"
    }

    fn run(&mut self, _: &str, _: &ExecLimits) -> Result<ExecutedCommand, TargetError> {
        Err(TargetError::ChannelLost("connection reset".into()))
    }

    fn probe_root(&mut self) -> Result<bool, TargetError> {
        Ok(false)
    }

    fn close(&mut self) {}
}

#[test]
fn executor_failure_ends_in_error_with_cause() {
    let config = RunConfig {
        analysis_enabled: false,
        ..RunConfig::default()
    };
    let (outcome, events) = run_with(&config, transcript(&[(None, "id")]), &mut Broken, &mut AutoApprove);
    check_protocol(&events, &outcome, &config);
    assert_eq!(outcome.stop_reason, StopReason::Error);
    assert!(outcome.error.unwrap().contains("connection reset"));
    let last = events.last().unwrap();
    assert!(matches!(&last.body, EventBody::StatusChange(s) if s.reason.contains("connection reset")));
}

#[test]
fn start_event_carries_config() {
    let fixture = run_fixture("t3").unwrap();
    let (_, events) = run(&fixture.config, fixture.transcript, &mut AutoApprove);
    match &events[0].body {
        EventBody::StatusChange(s) => {
            assert_eq!(s.from, None);
            assert_eq!(s.config.as_ref(), Some(&fixture.config));
        }
        other => panic!("unexpected first event {other:?}"),
    }
}

#[test]
fn soften_allowance_is_shared_within_a_round() {
    let config = RunConfig {
        max_rounds: 1,
        soften_retries: 1,
        ..RunConfig::default()
    };
    let sorry = "I'm sorry, I can't assist with that.";
    let (outcome, events) = run(
        &config,
        transcript(&[(None, sorry), (None, "id"), (None, sorry)]),
        &mut AutoApprove,
    );
    check_protocol(&events, &outcome, &config);
    assert_eq!(warnings(&events, "soften_retry"), 1);
    assert_eq!(warnings(&events, "analysis_refused"), 1);
    assert_eq!(outcome.stop_reason, StopReason::Exhausted);
}

#[test]
fn interactive_runs_replay_from_their_protocol() {
    use sparring_core::agent::replay_operator;
    use sparring_core::protocol::{canonical_payloads, extract_transcript};

    let config = RunConfig {
        max_rounds: 5,
        interactive: true,
        analysis_enabled: false,
        ..RunConfig::default()
    };
    let mut operator = ScriptedOperator::new([Decision::Edit("sudo -l".into()), Decision::Approve, Decision::Deny])
        .signal_at(Gate::RoundStart, 1, OperatorSignal::Hint("look at sudo".into()))
        .signal_at(Gate::BeforeExecute, 2, OperatorSignal::Hint("avoid rm".into()))
        .signal_at(Gate::BeforeExecute, 3, OperatorSignal::Abort);
    let (outcome, original) = run(
        &config,
        transcript(&[(None, "sudo su"), (None, "rm -rf /tmp/x"), (None, "id")]),
        &mut operator,
    );
    assert_eq!(outcome.stop_reason, StopReason::Aborted);
    assert_eq!(outcome.rounds_used, 3);

    let kinds = [
        "prompt",
        "completion",
        "command_proposed",
        "approval_decision",
        "command_executed",
        "finding",
        "hint",
        "status_change",
        "warning",
    ];
    let replay_transcript = extract_transcript(&original).unwrap();
    let (_, replayed) = run(&config, replay_transcript, &mut replay_operator(&original));
    assert_eq!(
        canonical_payloads(&original, &kinds),
        canonical_payloads(&replayed, &kinds)
    );
}

#[test]
fn round_start_abort_replays() {
    use sparring_core::agent::replay_operator;

    let config = RunConfig {
        analysis_enabled: false,
        ..RunConfig::default()
    };
    let mut operator = ScriptedOperator::default().signal_at(Gate::RoundStart, 2, OperatorSignal::Abort);
    let (_, original) = run(&config, transcript(&[(None, "id")]), &mut operator);
    let (_, replayed) = run(&config, transcript(&[(None, "id")]), &mut replay_operator(&original));
    let strip = |events: &[ProtocolEvent]| events.iter().map(|e| (e.seq, e.body.clone())).collect::<Vec<_>>();
    assert_eq!(strip(&original), strip(&replayed));
}

#[test]
fn attack_plan_reaches_the_system_prompt_only_when_set() {
    let system_prompts = |config: &RunConfig| -> Vec<String> {
        let fixture = run_fixture("t3").unwrap();
        let (_, events) = run(config, fixture.transcript, &mut AutoApprove);
        events
            .iter()
            .filter_map(|e| match &e.body {
                EventBody::Prompt(p) if p.purpose == Purpose::Exec => Some(p.messages[0].content.clone()),
                _ => None,
            })
            .collect()
    };
    let base = run_fixture("t3").unwrap().config;
    assert!(system_prompts(&base).iter().all(|s| !s.contains("attack plan")));

    let planned = RunConfig {
        attack_plan: Some("1. Privilege Escalation\n   - Abuse sudo rights".into()),
        ..base
    };
    let prompts = system_prompts(&planned);
    assert_eq!(prompts.len(), 3);
    assert!(prompts
        .iter()
        .all(|s| s.contains("attack plan") && s.ends_with("Abuse sudo rights")));
}
