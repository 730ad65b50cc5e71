//! Core of an LLM-driven privilege-escalation sparring partner.
//!
//! A language model proposes shell commands for a low-privilege user, the
//! commands run on a target (SSH or a simulated host), the output is fed
//! back, and the loop stops once `id` reports root. Runs are recorded as an
//! append-only JSONL protocol that can be replayed offline.

pub mod agent;
pub mod domain;
pub mod fixtures;
pub mod llm;
pub mod memory;
pub mod planner;
pub mod prompt;
pub mod protocol;
pub mod target;

pub use agent::{apply_decision, run_loop, Agent, AutoApprove, Decision, LoopOutcome, Operator, PromptKit};
pub use domain::{
    transition, ExecutedCommand, Finding, RunConfig, RunState, RunStatus, StatusEvent, StopReason, TargetSpec,
};
pub use llm::{LlmBackend, ScriptedBackend, Transcript};
pub use protocol::{ProtocolEvent, Recorder};
pub use target::{SimulatedTarget, Target, TargetProfile};
