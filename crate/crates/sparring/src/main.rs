use std::io::{BufRead, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sparring::registry::{ssh_source, SshOptions};
use sparring::{check_bind, AppState, Registry, RunManager};
use sparring_core::agent::{
    replay_operator, run_loop, AutoApprove, Decision, Gate, Operator, OperatorSignal, PromptKit,
};
use sparring_core::domain::{new_run_id, RunConfig, RunState, StopReason};
use sparring_core::fixtures::run_fixture;
use sparring_core::llm::{LlmBackend, ModelParams, ScriptedBackend};
use sparring_core::planner::plan;
use sparring_core::protocol::{
    aggregate, canonical_payloads, convergence, extract_transcript, load, render_table, EventBody, EventSink,
    JsonlSink, MemorySink, ProtocolError, ProtocolEvent, Recorder, RunReport,
};
use sparring_core::target::{self, HostKeyPolicy, Target, TargetSource};

#[derive(Parser)]
#[command(
    name = "sparring",
    version,
    about = "LLM-driven privilege-escalation sparring partner"
)]
struct Cli {
    #[command(flatten)]
    registry: RegistryArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RegistryArgs {
    /// Register a scripted backend from a JSONL transcript (NAME=PATH).
    #[arg(long = "register-backend", global = true, value_name = "NAME=PATH")]
    backends: Vec<String>,
    /// Register a target: a profile file (NAME=PATH) or NAME=ssh://user@host[:port].
    #[arg(long = "register-target", global = true, value_name = "NAME=PATH|URL")]
    targets: Vec<String>,
    /// Private key for ssh:// targets.
    #[arg(long, global = true)]
    ssh_key: Option<PathBuf>,
    /// Environment variable holding the password for ssh:// targets.
    #[arg(long, global = true, value_name = "VAR")]
    ssh_password_env: Option<String>,
    #[arg(long, global = true, value_enum, default_value_t = HostKeys::AcceptNew)]
    host_keys: HostKeys,
    /// known_hosts file (defaults to ~/.ssh/known_hosts).
    #[arg(long, global = true)]
    known_hosts: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HostKeys {
    AcceptNew,
    Strict,
    AcceptAny,
}

#[derive(Subcommand)]
enum Command {
    /// Run the privilege-escalation loop against a target.
    Run(RunArgs),
    /// Re-run a recorded protocol and check it reproduces.
    Replay {
        #[arg(long)]
        protocol: PathBuf,
        /// Override the recorded target.
        #[arg(long)]
        target: Option<String>,
    },
    /// Aggregate statistics over a directory of protocols.
    Stats {
        #[arg(long, default_value = "runs")]
        dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long)]
        json: bool,
    },
    /// Produce a high-level attack plan for a goal.
    Plan {
        goal: String,
        #[arg(long, default_value = sparring::registry::PLAN_DEMO)]
        backend: String,
        #[arg(long)]
        json: bool,
    },
    /// Serve the HTTP/SSE control plane.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        /// Required when binding beyond loopback; clients send it as X-Sparring-Secret.
        #[arg(long)]
        shared_secret: Option<String>,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Backend name: t1..t4, a registered transcript, or live/default.
    #[arg(long)]
    backend: Option<String>,
    /// Target name or ssh://user@host[:port].
    #[arg(long)]
    target: Option<String>,
    /// RunConfig JSON file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_rounds: Option<u32>,
    /// Ask before every command.
    #[arg(long)]
    interactive: bool,
    #[arg(long)]
    no_analysis: bool,
    #[arg(long)]
    reflection: bool,
    #[arg(long)]
    auto_verify: bool,
    #[arg(long)]
    soften_retries: Option<u32>,
    /// Text file with a planner outline to include in the system prompt.
    #[arg(long, value_name = "FILE")]
    attack_plan: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = build_registry(&cli.registry).and_then(|(registry, ssh)| match cli.command {
        Command::Run(args) => cmd_run(&registry, &ssh, args),
        Command::Replay { protocol, target } => cmd_replay(&registry, &protocol, target.as_deref()),
        Command::Stats { dir, top_k, json } => cmd_stats(&dir, top_k, json),
        Command::Plan { goal, backend, json } => cmd_plan(&registry, &goal, &backend, json),
        Command::Serve {
            port,
            bind,
            shared_secret,
            runs_dir,
        } => cmd_serve(registry, SocketAddr::new(bind, port), shared_secret, runs_dir),
    });
    match result {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

type CliResult = Result<ExitCode, String>;

fn build_registry(args: &RegistryArgs) -> Result<(Registry, SshOptions), String> {
    let password = match &args.ssh_password_env {
        Some(var) => Some(std::env::var(var).map_err(|_| format!("environment variable {var} is not set"))?),
        None => None,
    };
    let known_hosts = args.known_hosts.clone();
    let host_keys = match args.host_keys {
        HostKeys::AcceptAny => HostKeyPolicy::AcceptAny,
        HostKeys::AcceptNew => known_hosts.map(HostKeyPolicy::AcceptNew).unwrap_or_default(),
        HostKeys::Strict => match known_hosts {
            Some(path) => HostKeyPolicy::Strict(path),
            None => match HostKeyPolicy::default() {
                HostKeyPolicy::AcceptNew(path) => HostKeyPolicy::Strict(path),
                other => other,
            },
        },
    };
    let ssh = SshOptions {
        key_file: args.ssh_key.clone(),
        password,
        host_keys: Some(host_keys),
    };
    let mut registry = Registry::builtin();
    for spec in &args.backends {
        registry.register_backend(spec).map_err(|e| e.to_string())?;
    }
    for spec in &args.targets {
        registry.register_target(spec, &ssh).map_err(|e| e.to_string())?;
    }
    Ok((registry, ssh))
}

fn run_config(registry: &Registry, args: &RunArgs) -> Result<RunConfig, String> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => {
            let backend = args.backend.as_deref().unwrap_or("default");
            run_fixture(backend).map(|f| f.config).unwrap_or_default()
        }
    };
    if let Some(backend) = &args.backend {
        config.llm_backend_ref = backend.clone();
    }
    if let Some(target) = &args.target {
        config.target_ref = target.clone();
    }
    if let Some(n) = args.max_rounds {
        config.max_rounds = n;
    }
    if let Some(n) = args.soften_retries {
        config.soften_retries = n;
    }
    config.interactive |= args.interactive;
    config.analysis_enabled &= !args.no_analysis;
    config.reflection_enabled |= args.reflection;
    config.auto_verify |= args.auto_verify;
    if let Some(path) = &args.attack_plan {
        config.attack_plan = Some(std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?);
    }
    if !registry.has_backend(&config.llm_backend_ref) {
        return Err(format!(
            "unknown backend {:?}; available: {}",
            config.llm_backend_ref,
            registry.backend_names().join(", ")
        ));
    }
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn open_target(registry: &Registry, ssh: &SshOptions, name: &str) -> Result<Box<dyn Target>, String> {
    let source = if name.starts_with("ssh://") {
        ssh_source(name, ssh).map_err(|e| e.to_string())?
    } else {
        registry
            .target_source(name)
            .map_err(|e| format!("{e}; available: {}", registry.target_names().join(", ")))?
    };
    if matches!(source, TargetSource::Ssh(..)) {
        eprintln!("connecting to {name}; commands proposed by the model will run on that host");
    }
    target::connect(source).map_err(|e| e.to_string())
}

/// Writes the protocol file and echoes a readable line per event.
struct ConsoleSink {
    file: JsonlSink,
}

impl EventSink for ConsoleSink {
    fn append(&mut self, event: &ProtocolEvent) -> Result<(), ProtocolError> {
        self.file.append(event)?;
        match &event.body {
            EventBody::CommandExecuted(p) => {
                println!(
                    "[round {}] $ {}  (exit {})",
                    p.round, p.command.cmd, p.command.exit_code
                );
                for line in p.command.combined_output().lines().take(20) {
                    println!("    {line}");
                }
            }
            EventBody::Finding(p) => {
                println!("[round {}] finding: {}", p.round, p.finding.description);
                if let Some(cmd) = &p.finding.verification_command {
                    println!("    verify with: {cmd}");
                }
            }
            EventBody::Warning(p) => println!("[round {}] warning {}: {}", p.round, p.code, p.message),
            EventBody::Hint(p) => println!("[round {}] hint: {}", p.round, p.text),
            EventBody::StatusChange(p) if p.terminal => println!("run ended: {} ({})", p.to, p.reason),
            _ => {}
        }
        Ok(())
    }
}

/// Interactive operator on stdin.
struct StdinOperator {
    held: Vec<OperatorSignal>,
}

impl Operator for StdinOperator {
    fn poll(&mut self, _gate: Gate, _round: u32) -> Vec<OperatorSignal> {
        std::mem::take(&mut self.held)
    }

    fn decide(&mut self, state: &RunState) -> Decision {
        let proposed = state.pending.as_ref().map(|p| p.proposed.as_str()).unwrap_or("");
        let stdin = std::io::stdin();
        loop {
            print!("proposed: {proposed}\n[a]pprove, [d]eny, [e]dit <cmd>, [h]int <text>, [q]uit > ");
            let _ = std::io::stdout().flush();
            let mut line = String::new();
            if stdin.lock().read_line(&mut line).unwrap_or(0) == 0 {
                return Decision::Abort;
            }
            let line = line.trim();
            let (verb, rest) = line.split_once(' ').map_or((line, ""), |(v, r)| (v, r.trim()));
            match verb {
                "" | "a" | "approve" => return Decision::Approve,
                "d" | "deny" => return Decision::Deny,
                "q" | "quit" | "abort" => return Decision::Abort,
                "e" | "edit" if !rest.is_empty() => return Decision::Edit(rest.to_string()),
                "h" | "hint" if !rest.is_empty() => self.held.push(OperatorSignal::Hint(rest.to_string())),
                _ => println!("unrecognised input"),
            }
        }
    }
}

fn exit_for(reason: StopReason) -> ExitCode {
    match reason {
        StopReason::Error => ExitCode::FAILURE,
        _ => ExitCode::SUCCESS,
    }
}

fn cmd_run(registry: &Registry, ssh: &SshOptions, args: RunArgs) -> CliResult {
    let config = run_config(registry, &args)?;
    let kit = PromptKit::for_config(&config).map_err(|e| e.to_string())?;
    let backend = registry.backend(&config.llm_backend_ref).map_err(|e| e.to_string())?;
    let mut target = open_target(registry, ssh, &config.target_ref)?;
    std::fs::create_dir_all(&args.runs_dir).map_err(|e| e.to_string())?;
    let run_id = new_run_id();
    let file = JsonlSink::for_run(&args.runs_dir, &run_id).map_err(|e| e.to_string())?;
    let path = file.path().to_path_buf();
    let mut recorder = Recorder::new(run_id).with_sink(ConsoleSink { file });
    let mut stdin_operator = StdinOperator { held: Vec::new() };
    let mut auto = AutoApprove;
    let operator: &mut dyn Operator = if config.interactive {
        &mut stdin_operator
    } else {
        &mut auto
    };
    let outcome =
        run_loop(&config, &kit, backend.as_ref(), &mut target, operator, &mut recorder).map_err(|e| e.to_string())?;
    target.close();
    println!(
        "stop_reason: {}\nrounds_used: {}\nfindings: {}\nprotocol: {}",
        outcome.stop_reason,
        outcome.rounds_used,
        outcome.final_state.findings.len(),
        path.display()
    );
    if let Some(err) = &outcome.error {
        eprintln!("error: {err}");
    }
    Ok(exit_for(outcome.stop_reason))
}

const REPLAY_KINDS: [&str; 3] = ["command_executed", "finding", "status_change"];

fn cmd_replay(registry: &Registry, protocol: &Path, target_override: Option<&str>) -> CliResult {
    let original = load(protocol).map_err(|e| format!("{}: {e}", protocol.display()))?;
    let config = original
        .iter()
        .find_map(|e| match &e.body {
            EventBody::StatusChange(s) => s.config.clone(),
            _ => None,
        })
        .ok_or("protocol has no start event carrying the run config")?;
    let transcript = extract_transcript(&original).map_err(|e| e.to_string())?;
    let target_name = target_override.unwrap_or(&config.target_ref);
    let mut target = registry
        .connect(target_name)
        .map_err(|e| format!("{e}; available: {}", registry.target_names().join(", ")))?;
    let kit = PromptKit::for_config(&config).map_err(|e| e.to_string())?;
    let backend = ScriptedBackend::with_id(config.llm_backend_ref.clone(), transcript);
    let sink = MemorySink::new();
    let mut recorder = Recorder::new(new_run_id()).with_sink(sink.clone());
    let mut operator = replay_operator(&original);
    let outcome = run_loop(
        &config,
        &kit,
        &backend as &dyn LlmBackend,
        &mut target,
        &mut operator,
        &mut recorder,
    )
    .map_err(|e| e.to_string())?;
    target.close();
    let expected = canonical_payloads(&original, &REPLAY_KINDS);
    let got = canonical_payloads(&sink.events(), &REPLAY_KINDS);
    if expected == got {
        println!(
            "replay identical: {} payloads, stop_reason {}",
            got.len(),
            outcome.stop_reason
        );
        return Ok(ExitCode::SUCCESS);
    }
    let at = expected
        .iter()
        .zip(&got)
        .position(|(a, b)| a != b)
        .unwrap_or(expected.len().min(got.len()));
    println!("replay diverged at payload {at}");
    println!("  recorded: {}", expected.get(at).map_or("<none>", String::as_str));
    println!("  replayed: {}", got.get(at).map_or("<none>", String::as_str));
    Ok(ExitCode::FAILURE)
}

fn cmd_stats(dir: &Path, top_k: usize, json: bool) -> CliResult {
    if top_k == 0 {
        return Err("--top-k must be at least 1".into());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    for path in &paths {
        let events = load(path).map_err(|e| format!("{}: {e}", path.display()))?;
        reports.push(RunReport::from_events(&events).map_err(|e| format!("{}: {e}", path.display()))?);
    }
    if reports.is_empty() {
        return Err(format!("no protocols in {}", dir.display()));
    }
    let report = aggregate(&reports);
    let score = (reports.len() >= 2).then(|| convergence(&reports, top_k));
    if json {
        let value = serde_json::json!({ "aggregate": report, "top_k": top_k, "convergence": score });
        println!("{}", serde_json::to_string_pretty(&value).map_err(|e| e.to_string())?);
    } else {
        print!("{}", render_table(&report, score.map(|s| (top_k, s))));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_plan(registry: &Registry, goal: &str, backend: &str, json: bool) -> CliResult {
    let backend = registry
        .backend(backend)
        .map_err(|e| format!("{e}; available: {}", registry.backend_names().join(", ")))?;
    let tree = plan(goal, backend.as_ref(), &ModelParams::default()).map_err(|e| e.to_string())?;
    if json {
        println!("{}", serde_json::to_string_pretty(&tree).map_err(|e| e.to_string())?);
    } else {
        print!("{}", tree.render_outline());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(registry: Registry, addr: SocketAddr, secret: Option<String>, runs_dir: PathBuf) -> CliResult {
    check_bind(&addr, secret.as_deref())?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| format!("{addr}: {e}"))?;
        println!(
            "listening on http://{}",
            listener.local_addr().map_err(|e| e.to_string())?
        );
        let state = AppState::new(RunManager::new(Arc::new(registry), runs_dir), secret);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        sparring::serve(listener, state, shutdown)
            .await
            .map_err(|e| e.to_string())
    })?;
    Ok(ExitCode::SUCCESS)
}
