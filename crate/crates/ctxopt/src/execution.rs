//! The forward pass: run an agent on tasks under a playbook.
//!
//! Covers single executions, grouped rollouts, dual (standard + annotated)
//! execution, and the selection of groups worth reflecting on. Outcomes from
//! annotated traces are marked `excluded_from_eval` and must never enter
//! pass/fail accounting anywhere downstream.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::playbook::{EntryId, Playbook};
use crate::ruleworld;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    #[serde(default)]
    pub input: String,
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub required_tokens: Vec<String>,
    #[serde(default)]
    pub forbidden_tokens: Vec<String>,
    #[serde(default)]
    pub flip_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub thought: String,
    pub action: String,
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub steps: Vec<Step>,
    pub final_answer: String,
    pub annotated: bool,
    /// Only populated on annotated traces.
    #[serde(default)]
    pub cited_entry_ids: Vec<EntryId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub reward: f64,
    pub passed: bool,
    /// True for annotated traces: instrumentation alters behavior, so their
    /// outcome is not a reliable measure of playbook quality.
    pub excluded_from_eval: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task_id: String,
    /// Standard trajectories, in rollout order.
    pub trajectories: Vec<(Trajectory, Outcome)>,
    /// The instrumented companion run, excluded from contrastive pairing.
    pub annotated_trace: Option<(Trajectory, Outcome)>,
}

impl RolloutGroup {
    pub fn is_mixed(&self) -> bool {
        let any_pass = self.trajectories.iter().any(|(_, o)| o.passed);
        let any_fail = self.trajectories.iter().any(|(_, o)| !o.passed);
        any_pass && any_fail
    }

    pub fn all_passed(&self) -> bool {
        !self.trajectories.is_empty() && self.trajectories.iter().all(|(_, o)| o.passed)
    }

    pub fn all_failed(&self) -> bool {
        !self.trajectories.is_empty() && self.trajectories.iter().all(|(_, o)| !o.passed)
    }

    /// Population variance of standard rewards.
    pub fn reward_variance(&self) -> f64 {
        let n = self.trajectories.len();
        if n == 0 {
            return 0.0;
        }
        let mean = self.trajectories.iter().map(|(_, o)| o.reward).sum::<f64>() / n as f64;
        self.trajectories
            .iter()
            .map(|(_, o)| (o.reward - mean).powi(2))
            .sum::<f64>()
            / n as f64
    }

    pub fn first_passing(&self) -> Option<&(Trajectory, Outcome)> {
        self.trajectories.iter().find(|(_, o)| o.passed)
    }

    pub fn first_failing(&self) -> Option<&(Trajectory, Outcome)> {
        self.trajectories.iter().find(|(_, o)| !o.passed)
    }
}

/// Per-execution context threaded from the trainer: a derived seed (scripted
/// backends are deterministic functions of it) and an optional sampling
/// temperature for model backends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecContext {
    pub seed: u64,
    pub temperature: Option<f64>,
}

impl ExecContext {
    pub fn from_seed(seed: u64) -> Self {
        ExecContext {
            seed,
            temperature: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("agent backend failure: {0}")]
pub struct AgentFailure(pub String);

/// An agent that can execute a task given its input text and the rendered
/// context. Scripted backends must be deterministic in `exec.seed`.
pub trait AgentBackend: Send + Sync {
    fn run(
        &self,
        input: &str,
        context: &str,
        annotated: bool,
        exec: ExecContext,
    ) -> Result<Trajectory, AgentFailure>;
}

/// Execute one task once. Backend failures are not propagated: the trajectory
/// is recorded as failed with the error in its final step so long runs survive
/// flaky backends.
pub fn run_task(
    agent: &dyn AgentBackend,
    task: &TaskSpec,
    playbook: &Playbook,
    annotated: bool,
    exec: ExecContext,
) -> (Trajectory, Outcome) {
    let context = if annotated {
        playbook.render_annotated()
    } else {
        playbook.render()
    };
    match agent.run(&task.input, &context, annotated, exec) {
        Ok(mut traj) => {
            traj.task_id = task.task_id.clone();
            traj.annotated = annotated;
            if !annotated {
                traj.cited_entry_ids.clear();
            }
            let (reward, passed) = ruleworld::grade(task, &context, &traj.final_answer);
            (
                traj,
                Outcome {
                    reward,
                    passed,
                    excluded_from_eval: annotated,
                },
            )
        }
        Err(err) => {
            let traj = Trajectory {
                task_id: task.task_id.clone(),
                steps: vec![Step {
                    thought: "agent backend failed".into(),
                    action: "abort".into(),
                    observation: err.to_string(),
                }],
                final_answer: String::new(),
                annotated,
                cited_entry_ids: Vec::new(),
            };
            (
                traj,
                Outcome {
                    reward: 0.0,
                    passed: false,
                    excluded_from_eval: annotated,
                },
            )
        }
    }
}

/// Execute one task `execs.len()` times under the identical playbook. The
/// group size G is the length of the execution plan.
pub fn run_group(
    agent: &dyn AgentBackend,
    task: &TaskSpec,
    playbook: &Playbook,
    execs: &[ExecContext],
) -> RolloutGroup {
    assert!(!execs.is_empty(), "group size must be >= 1");
    let trajectories = execs
        .iter()
        .map(|exec| run_task(agent, task, playbook, false, *exec))
        .collect();
    RolloutGroup {
        task_id: task.task_id.clone(),
        trajectories,
        annotated_trace: None,
    }
}

/// Execute one task twice: once with the plain rendering (the outcome that
/// counts) and once with the instrumented rendering (observability only).
#[allow(clippy::type_complexity)]
pub fn run_dual(
    agent: &dyn AgentBackend,
    task: &TaskSpec,
    playbook: &Playbook,
    std_exec: ExecContext,
    ann_exec: ExecContext,
) -> ((Trajectory, Outcome), (Trajectory, Outcome)) {
    let standard = run_task(agent, task, playbook, false, std_exec);
    let annotated = run_task(agent, task, playbook, true, ann_exec);
    (standard, annotated)
}

/// Pick up to `b` groups worth reflecting on. Mixed groups carry the sharpest
/// signal and rank first; uniformly failing groups follow, largest reward
/// variance first; uniformly passing groups are never selected. Ties break by
/// ascending task id. Pure function of its inputs.
pub fn select_for_reflection(groups: &[RolloutGroup], b: usize) -> Vec<RolloutGroup> {
    let mut candidates: Vec<&RolloutGroup> = groups
        .iter()
        .filter(|g| !g.trajectories.is_empty() && !g.all_passed())
        .collect();
    candidates.sort_by(|x, y| {
        let class = |g: &RolloutGroup| if g.is_mixed() { 0u8 } else { 1u8 };
        class(x)
            .cmp(&class(y))
            .then(
                y.reward_variance()
                    .partial_cmp(&x.reward_variance())
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
            .then_with(|| x.task_id.cmp(&y.task_id))
    });
    candidates.into_iter().take(b).cloned().collect()
}

/// Agent backed by a single chat completion: the rendered context goes into
/// the system prompt, the task input is the user turn, and the completion is
/// the final answer. Annotated runs parse a `Consulted: [ids]` line.
pub struct ModelChatAgent {
    pub client: crate::model::ModelClient,
    pub system_template: String,
}

impl AgentBackend for ModelChatAgent {
    fn run(
        &self,
        input: &str,
        context: &str,
        annotated: bool,
        exec: ExecContext,
    ) -> Result<Trajectory, AgentFailure> {
        let system =
            crate::model::apply_template(&self.system_template, &[("context", context)]);
        let messages = [
            crate::model::ChatMessage::system(system),
            crate::model::ChatMessage::user(input),
        ];
        let text = self
            .client
            .complete(&messages, exec.temperature)
            .map_err(|e| AgentFailure(e.to_string()))?;
        let cited = if annotated {
            parse_consulted_ids(&text)
        } else {
            Vec::new()
        };
        Ok(Trajectory {
            task_id: String::new(),
            steps: vec![Step {
                thought: "delegated to chat model".into(),
                action: "complete".into(),
                observation: format!("{} chars returned", text.len()),
            }],
            final_answer: text,
            annotated,
            cited_entry_ids: cited,
        })
    }
}

fn parse_consulted_ids(text: &str) -> Vec<EntryId> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("Consulted:") {
            for part in rest
                .trim()
                .trim_start_matches('[')
                .trim_end_matches(']')
                .split(',')
            {
                if let Ok(id) = part.trim().parse::<u64>() {
                    out.push(EntryId(id));
                }
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("cannot read task pool at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed task pool at {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid task pool: {0}")]
    Invalid(String),
}

/// Load a task pool from a JSON list. Inputs are synthesized from the token
/// fields when absent, and checked for coherence when present, so the task
/// text always states what the environment will grade.
pub fn load_pool(path: &std::path::Path) -> Result<Vec<TaskSpec>, PoolError> {
    let text = std::fs::read_to_string(path).map_err(|e| PoolError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut tasks: Vec<TaskSpec> = serde_json::from_str(&text).map_err(|e| PoolError::Parse {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut seen = std::collections::BTreeSet::new();
    for task in tasks.iter_mut() {
        if task.task_id.trim().is_empty() {
            return Err(PoolError::Invalid("task with empty task_id".into()));
        }
        if !seen.insert(task.task_id.clone()) {
            return Err(PoolError::Invalid(format!(
                "duplicate task_id '{}'",
                task.task_id
            )));
        }
        if !(0.0..=1.0).contains(&task.flip_prob) {
            return Err(PoolError::Invalid(format!(
                "task '{}': flip_prob must be in [0,1]",
                task.task_id
            )));
        }
        if task.input.is_empty() {
            task.input = ruleworld::synthesize_input(task);
        } else {
            ruleworld::check_input_coherence(task)
                .map_err(|msg| PoolError::Invalid(format!("task '{}': {msg}", task.task_id)))?;
        }
    }
    Ok(tasks)
}
