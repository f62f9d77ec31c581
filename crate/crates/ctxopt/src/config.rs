//! Run configuration: a flat key = value text file with a documented schema.
//!
//! Everything that shapes a run lives in the file; environment variables are
//! consulted only for credentials (via `model.<role>.credential_env`), never
//! for hyperparameters, so a run is auditable from its config alone. The
//! resolved config (defaults filled, forcing rules applied) is written next
//! to the run artifacts and parses back identically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::ModelEndpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Scripted,
    Model,
}

impl BackendKind {
    fn as_str(&self) -> &'static str {
        match self {
            BackendKind::Scripted => "scripted",
            BackendKind::Model => "model",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReflectionAggregation {
    /// Reflect on each selected group independently; the mutator reconciles.
    PerTrace,
    /// One reflection call sees every failed trace in the batch.
    Batched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Primitives {
    pub batching: bool,
    pub grouped_rollouts: bool,
    pub credit_assignment: bool,
    pub auxiliary_losses: bool,
    pub failure_replay: bool,
    pub optimizer_state: bool,
}

impl Primitives {
    pub fn all_on() -> Self {
        Primitives {
            batching: true,
            grouped_rollouts: true,
            credit_assignment: true,
            auxiliary_losses: true,
            failure_replay: true,
            optimizer_state: true,
        }
    }

    pub fn all_off() -> Self {
        Primitives {
            batching: false,
            grouped_rollouts: false,
            credit_assignment: false,
            auxiliary_losses: false,
            failure_replay: false,
            optimizer_state: false,
        }
    }
}

pub const ROLES: [&str; 4] = ["agent", "reflector", "mutator", "state"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub iterations: u64,
    pub seed: u64,
    pub batch_size: usize,
    pub group_size: usize,
    pub replay_ratio: f64,
    pub n_grad: u32,
    pub n_evict: u32,
    /// Tasks sampled (and executed) per iteration; defaults to `batch_size`.
    /// Reflection still selects at most `batch_size` groups.
    pub rollout_budget: Option<usize>,
    pub reflection_mode: ReflectionAggregation,
    pub edit_cap: usize,
    pub primitives: Primitives,
    pub agent_backend: BackendKind,
    pub reflector_backend: BackendKind,
    pub mutator_backend: BackendKind,
    pub state_backend: BackendKind,
    pub pool: Option<PathBuf>,
    pub eval_set: Option<PathBuf>,
    pub seed_playbook: Option<PathBuf>,
    /// Optional per-rollout temperature schedule for model agents, cycled by
    /// rollout index.
    pub agent_temperatures: Option<Vec<f64>>,
    pub prompt_dir: Option<PathBuf>,
    /// Model endpoints by role name, required for any role set to `model`.
    pub endpoints: BTreeMap<String, ModelEndpoint>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            iterations: 30,
            seed: 0,
            batch_size: 3,
            group_size: 3,
            replay_ratio: 0.5,
            n_grad: 2,
            n_evict: 3,
            rollout_budget: None,
            reflection_mode: ReflectionAggregation::PerTrace,
            edit_cap: 8,
            primitives: Primitives::all_on(),
            agent_backend: BackendKind::Scripted,
            reflector_backend: BackendKind::Scripted,
            mutator_backend: BackendKind::Scripted,
            state_backend: BackendKind::Scripted,
            pool: None,
            eval_set: None,
            seed_playbook: None,
            agent_temperatures: None,
            prompt_dir: None,
            endpoints: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config line {line_no} is not 'key = value': '{line}'")]
    Syntax { line_no: usize, line: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value for '{key}': '{value}' ({expected})")]
    BadValue {
        key: String,
        value: String,
        expected: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base)
    }

    /// Parse flat `key = value` text. Relative paths resolve against
    /// `base_dir`. Unknown keys are errors.
    pub fn parse(text: &str, base_dir: &Path) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line_no: idx + 1,
                line: line.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value, base_dir)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, base_dir: &Path) -> Result<(), ConfigError> {
        let bad = |expected: &str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected: expected.to_string(),
        };
        match key {
            "iterations" => self.iterations = value.parse().map_err(|_| bad("non-negative integer"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("non-negative integer"))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("positive integer"))?,
            "group_size" => self.group_size = value.parse().map_err(|_| bad("positive integer"))?,
            "replay_ratio" => {
                self.replay_ratio = value.parse().map_err(|_| bad("real in [0,1]"))?
            }
            "n_grad" => self.n_grad = value.parse().map_err(|_| bad("positive integer"))?,
            "n_evict" => self.n_evict = value.parse().map_err(|_| bad("positive integer"))?,
            "rollout_budget" => {
                self.rollout_budget = Some(value.parse().map_err(|_| bad("positive integer"))?)
            }
            "edit_cap" => self.edit_cap = value.parse().map_err(|_| bad("positive integer"))?,
            "reflection_mode" => {
                self.reflection_mode = match value {
                    "per_trace" => ReflectionAggregation::PerTrace,
                    "batched" => ReflectionAggregation::Batched,
                    _ => return Err(bad("per_trace | batched")),
                }
            }
            "batching" => self.primitives.batching = parse_bool(value).ok_or_else(|| bad("true | false"))?,
            "grouped_rollouts" => {
                self.primitives.grouped_rollouts =
                    parse_bool(value).ok_or_else(|| bad("true | false"))?
            }
            "credit_assignment" => {
                self.primitives.credit_assignment =
                    parse_bool(value).ok_or_else(|| bad("true | false"))?
            }
            "auxiliary_losses" => {
                self.primitives.auxiliary_losses =
                    parse_bool(value).ok_or_else(|| bad("true | false"))?
            }
            "failure_replay" => {
                self.primitives.failure_replay =
                    parse_bool(value).ok_or_else(|| bad("true | false"))?
            }
            "optimizer_state" => {
                self.primitives.optimizer_state =
                    parse_bool(value).ok_or_else(|| bad("true | false"))?
            }
            "agent_backend" => self.agent_backend = parse_backend(value).ok_or_else(|| bad("scripted | model"))?,
            "reflector_backend" => {
                self.reflector_backend = parse_backend(value).ok_or_else(|| bad("scripted | model"))?
            }
            "mutator_backend" => {
                self.mutator_backend = parse_backend(value).ok_or_else(|| bad("scripted | model"))?
            }
            "state_backend" => {
                self.state_backend = parse_backend(value).ok_or_else(|| bad("scripted | model"))?
            }
            "pool" => self.pool = Some(resolve_path(base_dir, value)),
            "eval_set" => self.eval_set = Some(resolve_path(base_dir, value)),
            "seed_playbook" => self.seed_playbook = Some(resolve_path(base_dir, value)),
            "prompt_dir" => self.prompt_dir = Some(resolve_path(base_dir, value)),
            "agent_temperatures" => {
                let temps: Result<Vec<f64>, _> =
                    value.split(',').map(|v| v.trim().parse::<f64>()).collect();
                self.agent_temperatures = Some(temps.map_err(|_| bad("comma-separated reals"))?);
            }
            _ if key.starts_with("model.") => {
                let mut parts = key.splitn(3, '.');
                parts.next();
                let role = parts.next().unwrap_or("");
                let field = parts.next().unwrap_or("");
                if !ROLES.contains(&role) {
                    return Err(ConfigError::UnknownKey(key.to_string()));
                }
                let endpoint = self
                    .endpoints
                    .entry(role.to_string())
                    .or_insert_with(|| ModelEndpoint {
                        base_url: String::new(),
                        model_name: String::new(),
                        credential_env: None,
                        temperature: 0.7,
                        max_retries: 3,
                        timeout_secs: 60,
                    });
                match field {
                    "base_url" => endpoint.base_url = value.to_string(),
                    "model" => endpoint.model_name = value.to_string(),
                    "credential_env" => endpoint.credential_env = Some(value.to_string()),
                    "temperature" => {
                        endpoint.temperature = value.parse().map_err(|_| bad("real"))?
                    }
                    "max_retries" => {
                        endpoint.max_retries =
                            value.parse().map_err(|_| bad("non-negative integer"))?
                    }
                    "timeout_secs" => {
                        endpoint.timeout_secs =
                            value.parse().map_err(|_| bad("positive integer"))?
                    }
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 || self.group_size == 0 {
            return Err(ConfigError::Invalid(
                "batch_size and group_size must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.replay_ratio) {
            return Err(ConfigError::Invalid("replay_ratio must be in [0,1]".into()));
        }
        if self.n_grad == 0 || self.n_evict == 0 {
            return Err(ConfigError::Invalid("n_grad and n_evict must be >= 1".into()));
        }
        if self.rollout_budget == Some(0) || self.edit_cap == 0 {
            return Err(ConfigError::Invalid(
                "rollout_budget and edit_cap must be >= 1".into(),
            ));
        }
        for (role, kind) in [
            ("agent", self.agent_backend),
            ("reflector", self.reflector_backend),
            ("mutator", self.mutator_backend),
            ("state", self.state_backend),
        ] {
            if kind == BackendKind::Model {
                let endpoint = self.endpoints.get(role).ok_or_else(|| {
                    ConfigError::Invalid(format!(
                        "{role}_backend = model requires model.{role}.base_url and model.{role}.model"
                    ))
                })?;
                if endpoint.base_url.is_empty() || endpoint.model_name.is_empty() {
                    return Err(ConfigError::Invalid(format!(
                        "model.{role} endpoint needs base_url and model"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Apply the primitive forcing rules: disabling batching forces
    /// batch_size 1, disabling grouped rollouts forces group_size 1,
    /// disabling failure replay forces replay_ratio 0.
    pub fn resolve(mut self) -> RunConfig {
        if !self.primitives.batching {
            self.batch_size = 1;
        }
        if !self.primitives.grouped_rollouts {
            self.group_size = 1;
        }
        if !self.primitives.failure_replay {
            self.replay_ratio = 0.0;
        }
        self
    }

    /// Tasks sampled per iteration.
    pub fn budget(&self) -> usize {
        self.rollout_budget.unwrap_or(self.batch_size)
    }

    /// Canonical `key = value` text; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut lines: Vec<String> = vec![
            format!("iterations = {}", self.iterations),
            format!("seed = {}", self.seed),
            format!("batch_size = {}", self.batch_size),
            format!("group_size = {}", self.group_size),
            format!("replay_ratio = {}", self.replay_ratio),
            format!("n_grad = {}", self.n_grad),
            format!("n_evict = {}", self.n_evict),
            format!("edit_cap = {}", self.edit_cap),
            format!(
                "reflection_mode = {}",
                match self.reflection_mode {
                    ReflectionAggregation::PerTrace => "per_trace",
                    ReflectionAggregation::Batched => "batched",
                }
            ),
            format!("batching = {}", self.primitives.batching),
            format!("grouped_rollouts = {}", self.primitives.grouped_rollouts),
            format!("credit_assignment = {}", self.primitives.credit_assignment),
            format!("auxiliary_losses = {}", self.primitives.auxiliary_losses),
            format!("failure_replay = {}", self.primitives.failure_replay),
            format!("optimizer_state = {}", self.primitives.optimizer_state),
            format!("agent_backend = {}", self.agent_backend.as_str()),
            format!("reflector_backend = {}", self.reflector_backend.as_str()),
            format!("mutator_backend = {}", self.mutator_backend.as_str()),
            format!("state_backend = {}", self.state_backend.as_str()),
        ];
        if let Some(b) = self.rollout_budget {
            lines.push(format!("rollout_budget = {b}"));
        }
        if let Some(p) = &self.pool {
            lines.push(format!("pool = {}", p.display()));
        }
        if let Some(p) = &self.eval_set {
            lines.push(format!("eval_set = {}", p.display()));
        }
        if let Some(p) = &self.seed_playbook {
            lines.push(format!("seed_playbook = {}", p.display()));
        }
        if let Some(p) = &self.prompt_dir {
            lines.push(format!("prompt_dir = {}", p.display()));
        }
        if let Some(temps) = &self.agent_temperatures {
            let joined = temps
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(",");
            lines.push(format!("agent_temperatures = {joined}"));
        }
        for (role, ep) in &self.endpoints {
            lines.push(format!("model.{role}.base_url = {}", ep.base_url));
            lines.push(format!("model.{role}.model = {}", ep.model_name));
            if let Some(env) = &ep.credential_env {
                lines.push(format!("model.{role}.credential_env = {env}"));
            }
            lines.push(format!("model.{role}.temperature = {}", ep.temperature));
            lines.push(format!("model.{role}.max_retries = {}", ep.max_retries));
            lines.push(format!("model.{role}.timeout_secs = {}", ep.timeout_secs));
        }
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "true" | "on" | "yes" => Some(true),
        "false" | "off" | "no" => Some(false),
        _ => None,
    }
}

fn parse_backend(value: &str) -> Option<BackendKind> {
    match value {
        "scripted" => Some(BackendKind::Scripted),
        "model" => Some(BackendKind::Model),
        _ => None,
    }
}

fn resolve_path(base: &Path, value: &str) -> PathBuf {
    let p = PathBuf::from(value);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_minimal_config_with_defaults() {
        let cfg = RunConfig::parse("iterations = 5\nseed = 7\n", Path::new("/tmp")).unwrap();
        assert_eq!(cfg.iterations, 5);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.batch_size, 3);
        assert_eq!(cfg.reflection_mode, ReflectionAggregation::PerTrace);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("learning_rate = 0.1\n", Path::new("/tmp")).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(_)));
    }

    #[test]
    fn forcing_rules_apply_on_resolve() {
        let cfg = RunConfig::parse(
            "batching = false\ngrouped_rollouts = false\nfailure_replay = false\nbatch_size = 3\ngroup_size = 3\nreplay_ratio = 0.5\n",
            Path::new("/tmp"),
        )
        .unwrap()
        .resolve();
        assert_eq!(cfg.batch_size, 1);
        assert_eq!(cfg.group_size, 1);
        assert_eq!(cfg.replay_ratio, 0.0);
    }

    #[test]
    fn model_backend_requires_endpoint() {
        let err = RunConfig::parse("reflector_backend = model\n", Path::new("/tmp")).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
        let cfg = RunConfig::parse(
            "reflector_backend = model\nmodel.reflector.base_url = https://api.example.com/v1\nmodel.reflector.model = m1\n",
            Path::new("/tmp"),
        )
        .unwrap();
        assert_eq!(cfg.endpoints["reflector"].model_name, "m1");
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let cfg = RunConfig::parse("pool = pools/train.json\n", Path::new("/data/run")).unwrap();
        assert_eq!(cfg.pool.unwrap(), PathBuf::from("/data/run/pools/train.json"));
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = RunConfig {
            iterations: 12,
            seed: 9,
            pool: Some(PathBuf::from("/a/pool.json")),
            eval_set: Some(PathBuf::from("/a/eval.json")),
            agent_temperatures: Some(vec![0.5, 1.0]),
            rollout_budget: Some(4),
            ..RunConfig::default()
        };
        let text = cfg.to_text();
        let parsed = RunConfig::parse(&text, Path::new("/")).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = RunConfig::parse("# a comment\n\niterations = 2\n", Path::new("/")).unwrap();
        assert_eq!(cfg.iterations, 2);
    }
}
