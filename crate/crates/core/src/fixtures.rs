//! Bundled scripted transcripts and the configurations they were traced for.

use crate::domain::RunConfig;
use crate::llm::Transcript;

const T1: &str = include_str!("../data/transcripts/t1-sudo-gtfobin.jsonl");
const T2: &str = include_str!("../data/transcripts/t2-passwd-hash.jsonl");
const T3: &str = include_str!("../data/transcripts/t3-hallucinated-script.jsonl");
const T4: &str = include_str!("../data/transcripts/t4-refusal.jsonl");
const PLAN: &str = include_str!("../data/transcripts/plan-domain-admin.jsonl");

pub const PLAN_GOAL: &str = "Become domain admin in an Active Directory";

/// A transcript plus the run settings it expects.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: &'static str,
    pub about: &'static str,
    pub transcript: Transcript,
    pub config: RunConfig,
}

pub const RUN_FIXTURES: [&str; 4] = ["t1", "t2", "t3", "t4"];

fn config(max_rounds: u32, analysis: bool, backend: &str) -> RunConfig {
    RunConfig {
        max_rounds,
        analysis_enabled: analysis,
        llm_backend_ref: backend.to_string(),
        ..RunConfig::default()
    }
}

pub fn run_fixture(name: &str) -> Option<Fixture> {
    let (about, text, config) = match name {
        "t1" => ("sudoers listing, then an awk GTFOBin", T1, config(5, true, "t1")),
        "t2" => ("passwd file with a stored hash", T2, config(1, true, "t2")),
        "t3" => ("hallucinated ./exploit.sh", T3, config(3, false, "t3")),
        "t4" => ("refusal, then a command after softening", T4, config(1, false, "t4")),
        _ => return None,
    };
    let name = RUN_FIXTURES.iter().find(|n| **n == name)?;
    Some(Fixture {
        name,
        about,
        transcript: Transcript::parse(text).expect("bundled transcript parses"),
        config,
    })
}

pub fn plan_transcript() -> Transcript {
    Transcript::parse(PLAN).expect("bundled plan transcript parses")
}
