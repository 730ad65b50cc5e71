//! Run lifecycle: one loop thread per run, an event log per run, and a mailbox
//! for operator decisions and hints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use sparring_core::agent::{run_loop, Decision, Gate, Operator, OperatorSignal, PromptKit};
use sparring_core::domain::{new_run_id, RunConfig, RunState, RunStatus};
use sparring_core::protocol::{EventBody, EventSink, JsonlSink, ProtocolError, ProtocolEvent, Recorder};
use tokio::sync::watch;

use crate::registry::{ConnectError, Registry};
use crate::snapshot::RunSnapshot;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("validation failed: {0}")]
    ValidationFailed(String),
    #[error("target unavailable: {0}")]
    TargetUnavailable(String),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run is {0}, not awaiting approval")]
    ConflictingState(RunStatus),
    #[error("run already finished with status {0}")]
    RunFinished(RunStatus),
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
}

/// Messages from the operator to a running loop.
#[derive(Debug)]
pub enum Mail {
    Hint(String),
    Decision(Decision),
}

/// Operator fed by the control plane. Hints that arrive while a decision is
/// pending are held until the next gate.
pub struct ChannelOperator {
    inbox: mpsc::Receiver<Mail>,
    held: Vec<OperatorSignal>,
}

impl ChannelOperator {
    pub fn new(inbox: mpsc::Receiver<Mail>) -> Self {
        Self {
            inbox,
            held: Vec::new(),
        }
    }
}

impl Operator for ChannelOperator {
    fn poll(&mut self, _gate: Gate, _round: u32) -> Vec<OperatorSignal> {
        let mut signals = std::mem::take(&mut self.held);
        while let Ok(mail) = self.inbox.try_recv() {
            match mail {
                Mail::Hint(text) => signals.push(OperatorSignal::Hint(text)),
                Mail::Decision(Decision::Abort) => signals.push(OperatorSignal::Abort),
                Mail::Decision(other) => {
                    tracing::warn!(decision = other.name(), "decision outside approval gate dropped")
                }
            }
        }
        signals
    }

    fn decide(&mut self, _state: &RunState) -> Decision {
        loop {
            match self.inbox.recv() {
                Ok(Mail::Decision(decision)) => return decision,
                Ok(Mail::Hint(text)) => self.held.push(OperatorSignal::Hint(text)),
                // Control plane went away.
                Err(_) => return Decision::Abort,
            }
        }
    }
}

/// Shared, append-only view of one run.
pub struct RunHandle {
    pub run_id: String,
    pub config: RunConfig,
    pub protocol_path: PathBuf,
    events: RwLock<Vec<ProtocolEvent>>,
    snapshot: RwLock<RunSnapshot>,
    last_seq: watch::Sender<u64>,
    mailbox: Mutex<mpsc::Sender<Mail>>,
    /// Serializes approval submissions so each decision is applied at most once.
    pub decision_lock: tokio::sync::Mutex<()>,
}

impl RunHandle {
    pub fn snapshot(&self) -> RunSnapshot {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Events with seq greater than `after`.
    pub fn events_after(&self, after: u64) -> Vec<ProtocolEvent> {
        let events = self.events.read().expect("events lock");
        let start = (after as usize).min(events.len());
        events[start..].to_vec()
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.last_seq.subscribe()
    }

    pub fn send(&self, mail: Mail) -> bool {
        self.mailbox.lock().expect("mailbox lock").send(mail).is_ok()
    }

    fn publish(&self, event: &ProtocolEvent) {
        self.events.write().expect("events lock").push(event.clone());
        self.snapshot.write().expect("snapshot lock").apply(event);
        self.last_seq.send_replace(event.seq);
    }
}

/// Writes to the protocol file first, then publishes to subscribers.
struct PublishingSink {
    file: JsonlSink,
    handle: Arc<RunHandle>,
}

impl EventSink for PublishingSink {
    fn append(&mut self, event: &ProtocolEvent) -> Result<(), ProtocolError> {
        self.file.append(event)?;
        self.handle.publish(event);
        Ok(())
    }
}

pub struct RunManager {
    registry: Arc<Registry>,
    runs_dir: PathBuf,
    runs: RwLock<BTreeMap<String, Arc<RunHandle>>>,
}

impl RunManager {
    pub fn new(registry: Arc<Registry>, runs_dir: impl Into<PathBuf>) -> Self {
        Self {
            registry,
            runs_dir: runs_dir.into(),
            runs: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn runs_dir(&self) -> &Path {
        &self.runs_dir
    }

    /// Validate, connect and spawn the loop. Blocks while the target connects.
    pub fn start(&self, config: RunConfig) -> Result<Arc<RunHandle>, RunError> {
        config
            .validate()
            .map_err(|e| RunError::ValidationFailed(e.to_string()))?;
        let kit = PromptKit::for_config(&config).map_err(|e| RunError::ValidationFailed(e.to_string()))?;
        let backend = self
            .registry
            .backend(&config.llm_backend_ref)
            .map_err(|e| RunError::ValidationFailed(e.to_string()))?;
        let mut target = self.registry.connect(&config.target_ref).map_err(|e| match e {
            ConnectError::Registry(e) => RunError::ValidationFailed(e.to_string()),
            ConnectError::Target(e) => RunError::TargetUnavailable(e.to_string()),
        })?;

        let run_id = new_run_id();
        std::fs::create_dir_all(&self.runs_dir).map_err(ProtocolError::from)?;
        let file = JsonlSink::for_run(&self.runs_dir, &run_id)?;
        let (tx, rx) = mpsc::channel();
        let (last_seq, _) = watch::channel(0);
        let handle = Arc::new(RunHandle {
            run_id: run_id.clone(),
            config: config.clone(),
            protocol_path: file.path().to_path_buf(),
            events: RwLock::new(Vec::new()),
            snapshot: RwLock::new(RunSnapshot::new(&run_id)),
            last_seq,
            mailbox: Mutex::new(tx),
            decision_lock: tokio::sync::Mutex::new(()),
        });
        let sink = PublishingSink {
            file,
            handle: handle.clone(),
        };
        self.runs
            .write()
            .expect("runs lock")
            .insert(run_id.clone(), handle.clone());

        thread::Builder::new()
            .name(format!("run-{}", &run_id[..8]))
            .spawn(move || {
                let mut operator = ChannelOperator::new(rx);
                let mut recorder = Recorder::new(run_id.clone()).with_sink(sink);
                match run_loop(&config, &kit, backend.as_ref(), &mut target, &mut operator, &mut recorder) {
                    Ok(outcome) => tracing::info!(run_id, stop_reason = %outcome.stop_reason, rounds = outcome.rounds_used, "run finished"),
                    Err(err) => tracing::error!(run_id, %err, "run could not start"),
                }
                target.close();
            })
            .map_err(ProtocolError::from)?;
        Ok(handle)
    }

    pub fn get(&self, run_id: &str) -> Result<Arc<RunHandle>, RunError> {
        self.runs
            .read()
            .expect("runs lock")
            .get(run_id)
            .cloned()
            .ok_or_else(|| RunError::UnknownRun(run_id.to_string()))
    }

    pub fn list(&self) -> Vec<RunSnapshot> {
        let mut all: Vec<RunSnapshot> = self
            .runs
            .read()
            .expect("runs lock")
            .values()
            .map(|h| h.snapshot())
            .collect();
        all.sort_by(|a, b| a.started_at.cmp(&b.started_at).then_with(|| a.run_id.cmp(&b.run_id)));
        all
    }

    /// Route a decision to a run waiting for approval and return the snapshot
    /// once the loop has applied it.
    pub async fn submit_approval(&self, run_id: &str, decision: Decision) -> Result<RunSnapshot, RunError> {
        if let Decision::Edit(cmd) = &decision {
            if cmd.trim().is_empty() {
                return Err(RunError::ValidationFailed("edited command must not be empty".into()));
            }
        }
        let handle = self.get(run_id)?;
        let _guard = handle.decision_lock.lock().await;
        let before = handle.snapshot();
        if before.status != RunStatus::AwaitingApproval {
            return Err(RunError::ConflictingState(before.status));
        }
        let is_edit = matches!(decision, Decision::Edit(_));
        let mut seen = handle.subscribe();
        if !handle.send(Mail::Decision(decision)) {
            return Err(RunError::RunFinished(before.status));
        }
        // Index of the event that acknowledges the decision.
        let ack = |events: &[ProtocolEvent]| {
            let decided = events
                .iter()
                .position(|e| matches!(e.body, EventBody::ApprovalDecision(_)))?;
            if is_edit {
                return Some(decided);
            }
            events[decided..]
                .iter()
                .position(|e| matches!(e.body, EventBody::StatusChange(_)))
                .map(|i| decided + i)
        };
        let wait = async {
            loop {
                let events = handle.events_after(before.seq);
                if let Some(i) = ack(&events) {
                    let mut snapshot = before.clone();
                    events[..=i].iter().for_each(|e| snapshot.apply(e));
                    return Some(snapshot);
                }
                if handle.snapshot().status.is_terminal() || seen.changed().await.is_err() {
                    return None;
                }
            }
        };
        match tokio::time::timeout(Duration::from_secs(30), wait).await {
            Ok(Some(snapshot)) => Ok(snapshot),
            Ok(None) => Ok(handle.snapshot()),
            Err(_) => {
                tracing::warn!(run_id, "decision not acknowledged within 30 s");
                Ok(handle.snapshot())
            }
        }
    }

    pub fn submit_hint(&self, run_id: &str, text: &str) -> Result<(), RunError> {
        if text.trim().is_empty() {
            return Err(RunError::ValidationFailed("hint must not be empty".into()));
        }
        let handle = self.get(run_id)?;
        let status = handle.snapshot().status;
        if status.is_terminal() || !handle.send(Mail::Hint(text.to_string())) {
            return Err(RunError::RunFinished(status));
        }
        Ok(())
    }
}
