//! Read-only run view folded from protocol events.

use serde::{Deserialize, Serialize};
use sparring_core::domain::{ExecutedCommand, PendingCommand, RunStatus};
use sparring_core::protocol::{EventBody, ProtocolEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub run_id: String,
    pub status: RunStatus,
    pub round: u32,
    pub last_command: Option<ExecutedCommand>,
    pub pending: Option<PendingCommand>,
    pub findings: usize,
    /// UTC milliseconds of the first event.
    pub started_at: i64,
    /// Sequence number of the last folded event.
    pub seq: u64,
    /// Proposal waiting for the status change that parks the run.
    #[serde(skip)]
    proposed: Option<PendingCommand>,
}

impl RunSnapshot {
    pub fn new(run_id: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            status: RunStatus::Running,
            round: 0,
            last_command: None,
            pending: None,
            findings: 0,
            started_at: 0,
            seq: 0,
            proposed: None,
        }
    }

    pub fn apply(&mut self, event: &ProtocolEvent) {
        if self.seq == 0 {
            self.started_at = event.timestamp;
        }
        self.seq = event.seq;
        match &event.body {
            EventBody::CommandProposed(p) => {
                self.proposed = Some(PendingCommand {
                    proposed: p.command.clone(),
                    raw_answer: p.raw_answer.clone(),
                    proposed_at: event.timestamp,
                });
            }
            EventBody::ApprovalDecision(d) if d.decision == "edit" => {
                if let (Some(pending), Some(cmd)) = (self.pending.as_mut(), &d.command) {
                    pending.proposed = cmd.clone();
                }
            }
            EventBody::CommandExecuted(e) => self.last_command = Some(e.command.clone()),
            EventBody::Finding(_) => self.findings += 1,
            EventBody::StatusChange(s) => {
                self.status = s.to;
                self.round = s.round;
                if s.to == RunStatus::AwaitingApproval {
                    self.pending = self.proposed.take();
                }
            }
            _ => {}
        }
        if self.status != RunStatus::AwaitingApproval {
            self.pending = None;
        }
    }

    pub fn from_events(run_id: &str, events: &[ProtocolEvent]) -> Self {
        let mut snapshot = Self::new(run_id);
        for event in events {
            snapshot.apply(event);
        }
        snapshot
    }
}
