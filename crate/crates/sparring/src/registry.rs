//! Named LLM backends and targets that runs and plans can refer to.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sparring_core::domain::{Credential, TargetSpec};
use sparring_core::fixtures::{plan_transcript, run_fixture, RUN_FIXTURES};
use sparring_core::llm::{HttpBackend, HttpBackendConfig, LlmBackend, ScriptedBackend, Transcript};
use sparring_core::target::{self, HostKeyPolicy, Target, TargetError, TargetProfile, TargetSource};

pub const PLAN_DEMO: &str = "plan-demo";

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("unknown backend {0:?}")]
    UnknownBackend(String),
    #[error("unknown target {0:?}")]
    UnknownTarget(String),
    #[error("expected NAME=VALUE, got {0:?}")]
    BadSpec(String),
    #[error("{0}")]
    Load(String),
}

#[derive(Debug, Clone)]
pub enum BackendEntry {
    Scripted(Transcript),
    Http(HttpBackendConfig),
}

/// SSH credentials applied to every `ssh://` target.
#[derive(Debug, Clone, Default)]
pub struct SshOptions {
    pub key_file: Option<PathBuf>,
    pub password: Option<String>,
    pub host_keys: Option<HostKeyPolicy>,
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    backends: BTreeMap<String, BackendEntry>,
    targets: BTreeMap<String, TargetSource>,
}

impl Registry {
    /// Bundled transcripts and the lin-security profile, plus `live` and
    /// `default` when an OpenAI-compatible endpoint is configured in the environment.
    pub fn builtin() -> Self {
        let mut registry = Self::default();
        for name in RUN_FIXTURES {
            let fixture = run_fixture(name).expect("bundled fixture");
            registry.add_backend(name, BackendEntry::Scripted(fixture.transcript));
        }
        registry.add_backend(PLAN_DEMO, BackendEntry::Scripted(plan_transcript()));
        if let Some(config) = HttpBackendConfig::from_env() {
            registry.add_backend("live", BackendEntry::Http(config.clone()));
            registry.add_backend("default", BackendEntry::Http(config));
        }
        registry.add_target("lin-security", TargetSource::Profile(TargetProfile::lin_security()));
        registry
    }

    pub fn add_backend(&mut self, name: &str, entry: BackendEntry) {
        self.backends.insert(name.to_string(), entry);
    }

    pub fn add_target(&mut self, name: &str, source: TargetSource) {
        self.targets.insert(name.to_string(), source);
    }

    /// Register `NAME=PATH` where PATH is a JSONL transcript.
    pub fn register_backend(&mut self, spec: &str) -> Result<(), RegistryError> {
        let (name, path) = split_spec(spec)?;
        let transcript = Transcript::load(path).map_err(|e| RegistryError::Load(format!("{path}: {e}")))?;
        self.add_backend(name, BackendEntry::Scripted(transcript));
        Ok(())
    }

    /// Register `NAME=PATH` (a profile file) or `NAME=ssh://user@host[:port]`.
    pub fn register_target(&mut self, spec: &str, ssh: &SshOptions) -> Result<(), RegistryError> {
        let (name, value) = split_spec(spec)?;
        let source = if value.starts_with("ssh://") {
            ssh_source(value, ssh)?
        } else {
            let profile =
                TargetProfile::load(Path::new(value)).map_err(|e| RegistryError::Load(format!("{value}: {e}")))?;
            TargetSource::Profile(profile)
        };
        self.add_target(name, source);
        Ok(())
    }

    pub fn has_backend(&self, name: &str) -> bool {
        self.backends.contains_key(name)
    }

    pub fn has_target(&self, name: &str) -> bool {
        self.targets.contains_key(name)
    }

    pub fn backend_names(&self) -> Vec<&str> {
        self.backends.keys().map(String::as_str).collect()
    }

    pub fn target_names(&self) -> Vec<&str> {
        self.targets.keys().map(String::as_str).collect()
    }

    /// A fresh backend instance. Scripted backends start at the top of their transcript.
    pub fn backend(&self, name: &str) -> Result<Box<dyn LlmBackend>, RegistryError> {
        match self.backends.get(name) {
            Some(BackendEntry::Scripted(transcript)) => {
                Ok(Box::new(ScriptedBackend::with_id(name, transcript.clone())))
            }
            Some(BackendEntry::Http(config)) => HttpBackend::new(config.clone())
                .map(|b| Box::new(b) as Box<dyn LlmBackend>)
                .map_err(|e| RegistryError::Load(e.to_string())),
            None => Err(RegistryError::UnknownBackend(name.to_string())),
        }
    }

    pub fn target_source(&self, name: &str) -> Result<TargetSource, RegistryError> {
        self.targets
            .get(name)
            .cloned()
            .ok_or_else(|| RegistryError::UnknownTarget(name.to_string()))
    }

    pub fn connect(&self, name: &str) -> Result<Box<dyn Target>, ConnectError> {
        let source = self.target_source(name)?;
        Ok(target::connect(source)?)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConnectError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Target(#[from] TargetError),
}

fn split_spec(spec: &str) -> Result<(&str, &str), RegistryError> {
    match spec.split_once('=') {
        Some((name, value)) if !name.trim().is_empty() && !value.trim().is_empty() => Ok((name.trim(), value.trim())),
        _ => Err(RegistryError::BadSpec(spec.to_string())),
    }
}

/// Parse `ssh://user@host[:port]` into a target source.
pub fn ssh_source(url: &str, ssh: &SshOptions) -> Result<TargetSource, RegistryError> {
    let rest = url
        .strip_prefix("ssh://")
        .ok_or_else(|| RegistryError::Load(format!("not an ssh url: {url}")))?;
    let (username, host_port) = rest
        .split_once('@')
        .ok_or_else(|| RegistryError::Load(format!("missing user in {url}")))?;
    let (host, port) = match host_port.rsplit_once(':') {
        Some((host, port)) => (
            host,
            port.parse::<u16>()
                .map_err(|_| RegistryError::Load(format!("bad port in {url}")))?,
        ),
        None => (host_port, 22),
    };
    let credential = match (&ssh.key_file, &ssh.password) {
        (Some(key), _) => Credential::KeyFile(key.clone()),
        (None, Some(password)) => Credential::Password(password.clone()),
        (None, None) => {
            return Err(RegistryError::Load(format!(
                "no credential for {url}: pass a key file or a password"
            )))
        }
    };
    let spec = TargetSpec {
        host: host.to_string(),
        port,
        username: username.to_string(),
        credential,
        connect_timeout_ms: 10_000,
        command_timeout_ms: sparring_core::domain::DEFAULT_COMMAND_TIMEOUT_MS,
    };
    spec.validate().map_err(|e| RegistryError::Load(e.to_string()))?;
    Ok(TargetSource::Ssh(spec, ssh.host_keys.clone().unwrap_or_default()))
}
