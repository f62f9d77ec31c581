//! The outer loop: sample, execute, select, reflect, mutate, apply, record,
//! update state, checkpoint.
//!
//! Every random decision is derived from (run seed, iteration, task, rollout),
//! never from a shared stream, so runs are bit-identical under a fixed seed
//! and resuming from a checkpoint reproduces the remaining iterations
//! exactly. Iterations are strictly sequential; execution fan-out inside an
//! iteration is collected in deterministic (task, rollout) order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::config::RunConfig;
use crate::config::{BackendKind, ReflectionAggregation};
use crate::execution::{
    self, AgentBackend, ExecContext, ModelChatAgent, Outcome, PoolError, RolloutGroup, TaskSpec,
    Trajectory,
};
use crate::metrics::{metrics_record, SolveMatrix};
use crate::model::{HttpTransport, ModelClient};
use crate::mutation::{
    self, ModelMutator, MutationResult, MutatorBackend, ScriptedMutator,
};
use crate::playbook::{EntryId, Playbook, PlaybookIoError};
use crate::reflection::{
    reflect, Diagnostic, ModelReflector, ReflectionRequest, ReflectorBackend, ReflectorTemplates,
    ScriptedReflector,
};
use crate::replay::{sample_batch, BufferEvent, ReplayBuffer};
use crate::rng::{derive_seed, rng_from};
use crate::ruleworld::ScriptedAgent;
use crate::state::{
    update_state, ModelStateUpdater, ScriptedStateUpdater, StateDoc, StateUpdaterBackend,
};

pub struct Backends {
    pub agent: Box<dyn AgentBackend>,
    pub reflector: Box<dyn ReflectorBackend>,
    pub mutator: Box<dyn MutatorBackend>,
    pub state_updater: Box<dyn StateUpdaterBackend>,
}

impl Backends {
    /// Fully scripted stack for hermetic runs. The auxiliary-losses toggle
    /// governs whether the reflector applies its attribution discipline.
    pub fn scripted(structured_reflection: bool) -> Backends {
        Backends {
            agent: Box::new(ScriptedAgent),
            reflector: Box::new(ScriptedReflector {
                structured: structured_reflection,
            }),
            mutator: Box::new(ScriptedMutator::default()),
            state_updater: Box::new(ScriptedStateUpdater),
        }
    }

    /// Build the per-role backends named by the config. Model roles share an
    /// HTTPS transport (constructed only if some role needs it); prompt
    /// templates come from `prompt_dir` when set.
    pub fn from_config(config: &RunConfig) -> Result<Backends, TrainError> {
        let structured = config.primitives.auxiliary_losses;
        let needs_http = [
            config.agent_backend,
            config.reflector_backend,
            config.mutator_backend,
            config.state_backend,
        ]
        .contains(&BackendKind::Model);
        let transport: Option<Arc<HttpTransport>> =
            needs_http.then(|| Arc::new(HttpTransport::new()));
        let client_for = |role: &str| -> ModelClient {
            let endpoint = config.endpoints[role].clone();
            ModelClient::new(endpoint, transport.clone().expect("transport built"))
        };
        let template = |name: &str, fallback: &str| -> Result<String, TrainError> {
            match &config.prompt_dir {
                Some(dir) => {
                    let path = dir.join(name);
                    if path.exists() {
                        std::fs::read_to_string(&path).map_err(|e| TrainError::Io {
                            path: path.display().to_string(),
                            source: e,
                        })
                    } else {
                        Ok(fallback.to_string())
                    }
                }
                None => Ok(fallback.to_string()),
            }
        };

        let agent: Box<dyn AgentBackend> = match config.agent_backend {
            BackendKind::Scripted => Box::new(ScriptedAgent),
            BackendKind::Model => Box::new(ModelChatAgent {
                client: client_for("agent"),
                system_template: template(
                    "agent_system.txt",
                    include_str!("../prompts/agent_system.txt"),
                )?,
            }),
        };
        let reflector: Box<dyn ReflectorBackend> = match config.reflector_backend {
            BackendKind::Scripted => Box::new(ScriptedReflector {
                structured,
            }),
            BackendKind::Model => {
                let defaults = ReflectorTemplates::default();
                Box::new(ModelReflector {
                    client: client_for("reflector"),
                    templates: ReflectorTemplates {
                        single: template("reflector_single.txt", &defaults.single)?,
                        contrastive: template("reflector_contrastive.txt", &defaults.contrastive)?,
                        dual: template("reflector_dual.txt", &defaults.dual)?,
                        batched: template("reflector_batched.txt", &defaults.batched)?,
                    },
                    structured,
                    retry_budget: 2,
                })
            }
        };
        let mutator: Box<dyn MutatorBackend> = match config.mutator_backend {
            BackendKind::Scripted => Box::new(ScriptedMutator::default()),
            BackendKind::Model => {
                let mut m = ModelMutator::new(client_for("mutator"));
                m.template = template("mutator.txt", &m.template)?;
                Box::new(m)
            }
        };
        let state_updater: Box<dyn StateUpdaterBackend> = match config.state_backend {
            BackendKind::Scripted => Box::new(ScriptedStateUpdater),
            BackendKind::Model => {
                let mut s = ModelStateUpdater::new(client_for("state"));
                s.template = template("state_updater.txt", &s.template)?;
                Box::new(s)
            }
        };
        Ok(Backends {
            agent,
            reflector,
            mutator,
            state_updater,
        })
    }
}

/// Mutable state carried across iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// Completed iteration count; the next `step` runs iteration + 1.
    pub iteration: u64,
    pub playbook: Playbook,
    pub buffer: ReplayBuffer,
    pub state_doc: StateDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcomes {
    pub standard: Vec<Outcome>,
    #[serde(default)]
    pub annotated: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferEventRecord {
    pub task_id: String,
    pub event: BufferEvent,
}

/// Everything needed to audit one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub sampled_task_ids: Vec<String>,
    pub outcomes: BTreeMap<String, TaskOutcomes>,
    pub selected_task_ids: Vec<String>,
    pub diagnostics: Vec<Diagnostic>,
    pub mutation: MutationResult,
    pub playbook_version_after: u64,
    pub state_injected: bool,
    pub buffer_events: Vec<BufferEventRecord>,
    pub buffer_after: ReplayBuffer,
    pub state_after: StateDoc,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub checkpoint: u64,
    /// Mean of pass indicators over the evaluation set, standard traces only.
    pub score: f64,
    pub mean_reward: f64,
    pub solved: BTreeMap<String, bool>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Playbook(#[from] PlaybookIoError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("training pool and eval set overlap on task ids: {0}")]
    Overlap(String),
    #[error("invalid run setup: {0}")]
    Invalid(String),
    #[error("cannot resume from {path}: {detail}")]
    Resume { path: String, detail: String },
    #[error("checkpoint serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
}

pub struct TrainOutput {
    pub run_dir: PathBuf,
    pub final_playbook: Playbook,
    pub eval_scores: Vec<(u64, f64)>,
    pub solve_matrix: SolveMatrix,
}

pub struct Trainer {
    pub config: RunConfig,
    pub pool: Vec<TaskSpec>,
    pub eval_set: Vec<TaskSpec>,
    pub backends: Backends,
}

impl Trainer {
    /// Build a trainer over an already-resolved config. The pool and eval set
    /// must be non-empty and disjoint (held-out evaluation).
    pub fn new(
        config: RunConfig,
        pool: Vec<TaskSpec>,
        eval_set: Vec<TaskSpec>,
        backends: Backends,
    ) -> Result<Trainer, TrainError> {
        if pool.is_empty() {
            return Err(TrainError::Invalid("training pool is empty".into()));
        }
        if eval_set.is_empty() {
            return Err(TrainError::Invalid("eval set is empty".into()));
        }
        let pool_ids: std::collections::BTreeSet<&str> =
            pool.iter().map(|t| t.task_id.as_str()).collect();
        let overlap: Vec<&str> = eval_set
            .iter()
            .map(|t| t.task_id.as_str())
            .filter(|id| pool_ids.contains(id))
            .collect();
        if !overlap.is_empty() {
            return Err(TrainError::Overlap(overlap.join(", ")));
        }
        Ok(Trainer {
            config,
            pool,
            eval_set,
            backends,
        })
    }

    pub fn initial_state(&self, seed_playbook: Playbook) -> RunState {
        RunState {
            iteration: 0,
            playbook: seed_playbook,
            buffer: ReplayBuffer::new(self.config.n_grad, self.config.n_evict),
            state_doc: StateDoc::initial(),
        }
    }

    /// Run one iteration. Backend errors are recorded and the loop moves on;
    /// only setup problems abort a run.
    pub fn step(&self, rs: &mut RunState) -> IterationRecord {
        let cfg = &self.config;
        let iter = rs.iteration + 1;
        let iter_label = iter.to_string();
        let mut errors: Vec<String> = Vec::new();

        // sampling: replay draws first, then fresh draws from one derived
        // stream per iteration
        let mut sample_rng = rng_from(cfg.seed, &["sample", &iter_label]);
        let batch = sample_batch(
            &self.pool,
            &rs.buffer,
            cfg.budget(),
            cfg.replay_ratio,
            &mut sample_rng,
        );
        let sampled_task_ids: Vec<String> = batch.iter().map(|t| t.task_id.clone()).collect();

        // forward passes: G standard rollouts per task, plus one annotated
        // companion when credit assignment is on
        let mut groups: Vec<RolloutGroup> = Vec::with_capacity(batch.len());
        for task in &batch {
            let execs: Vec<ExecContext> = (0..cfg.group_size)
                .map(|r| ExecContext {
                    seed: derive_seed(
                        cfg.seed,
                        &["exec", &iter_label, &task.task_id, &r.to_string()],
                    ),
                    temperature: cfg
                        .agent_temperatures
                        .as_ref()
                        .map(|temps| temps[r % temps.len()]),
                })
                .collect();
            let mut group =
                execution::run_group(self.backends.agent.as_ref(), task, &rs.playbook, &execs);
            if cfg.primitives.credit_assignment {
                let ann_exec = ExecContext {
                    seed: derive_seed(cfg.seed, &["exec", &iter_label, &task.task_id, "ann"]),
                    temperature: None,
                };
                let pair = execution::run_task(
                    self.backends.agent.as_ref(),
                    task,
                    &rs.playbook,
                    true,
                    ann_exec,
                );
                group.annotated_trace = Some(pair);
            }
            groups.push(group);
        }

        let outcomes: BTreeMap<String, TaskOutcomes> = groups
            .iter()
            .map(|g| {
                (
                    g.task_id.clone(),
                    TaskOutcomes {
                        standard: g.trajectories.iter().map(|(_, o)| *o).collect(),
                        annotated: g.annotated_trace.as_ref().map(|(_, o)| *o),
                    },
                )
            })
            .collect();

        // entries cited by a passing annotated trace earn a helpful mark
        let helpful: Vec<EntryId> = groups
            .iter()
            .filter_map(|g| g.annotated_trace.as_ref())
            .filter(|(_, o)| o.passed)
            .flat_map(|(t, _)| t.cited_entry_ids.iter().copied())
            .collect();

        let selected = execution::select_for_reflection(&groups, cfg.batch_size);
        let selected_task_ids: Vec<String> = selected.iter().map(|g| g.task_id.clone()).collect();

        let mut diagnostics: Vec<Diagnostic> = Vec::new();
        match cfg.reflection_mode {
            ReflectionAggregation::PerTrace => {
                for group in &selected {
                    match self.reflect_group(group, &rs.playbook) {
                        Ok(diag) => diagnostics.push(diag),
                        Err(e) => errors.push(format!("reflection on {}: {e}", group.task_id)),
                    }
                }
            }
            ReflectionAggregation::Batched => {
                let traces: Vec<(Trajectory, Outcome)> = selected
                    .iter()
                    .flat_map(|g| {
                        g.trajectories
                            .iter()
                            .filter(|(_, o)| !o.passed)
                            .cloned()
                    })
                    .collect();
                if !traces.is_empty() {
                    match crate::reflection::reflect_batched(
                        self.backends.reflector.as_ref(),
                        &traces,
                        &rs.playbook,
                    ) {
                        Ok(diag) => diagnostics.push(diag),
                        Err(e) => errors.push(format!("batched reflection: {e}")),
                    }
                }
            }
        }

        // entries named by failure diagnostics earn a harmful mark
        let harmful: Vec<EntryId> = diagnostics
            .iter()
            .flat_map(|d| d.cited_entry_ids.iter().copied())
            .collect();
        let playbook = rs.playbook.bump_counters(&helpful, &harmful);

        let state_injected = cfg.primitives.optimizer_state;
        let state_opt = state_injected.then_some(&rs.state_doc);
        let mut mutation = match mutation::mutate(
            self.backends.mutator.as_ref(),
            &playbook,
            &diagnostics,
            state_opt,
            cfg.edit_cap,
        ) {
            Ok(result) => result,
            Err(e) => {
                errors.push(format!("mutation: {e}"));
                MutationResult::noop(format!("mutator unavailable: {e}"))
            }
        };
        let new_playbook = match mutation::apply_mutation(&playbook, &mutation) {
            Ok(p) => p,
            Err(e) => {
                errors.push(format!("apply mutation: {e}"));
                mutation = MutationResult::noop(format!("apply failed: {e}"));
                playbook.clone()
            }
        };

        // task-level replay bookkeeping: a task counts as passed this
        // iteration only when every standard rollout passed; annotated
        // outcomes never enter
        let mut buffer_events = Vec::new();
        if cfg.primitives.failure_replay {
            for group in &groups {
                if let Some(event) =
                    rs.buffer
                        .record_outcome(&group.task_id, group.all_passed(), iter)
                {
                    buffer_events.push(BufferEventRecord {
                        task_id: group.task_id.clone(),
                        event,
                    });
                }
            }
        }

        if cfg.primitives.optimizer_state {
            match update_state(
                self.backends.state_updater.as_ref(),
                &rs.state_doc,
                &diagnostics,
                &playbook,
                &new_playbook,
            ) {
                Ok(next) => rs.state_doc = next,
                Err(e) => errors.push(format!("state update: {e}")),
            }
        }

        rs.playbook = new_playbook;
        rs.iteration = iter;

        IterationRecord {
            iteration: iter,
            sampled_task_ids,
            outcomes,
            selected_task_ids,
            diagnostics,
            mutation,
            playbook_version_after: rs.playbook.version,
            state_injected,
            buffer_events,
            buffer_after: rs.buffer.clone(),
            state_after: rs.state_doc.clone(),
            errors,
        }
    }

    /// Reflection routing for one selected group: contrastive when mixed,
    /// dual when an annotated companion exists, single otherwise. Annotated
    /// companions ride along on contrastive requests for citation extraction.
    fn reflect_group(
        &self,
        group: &RolloutGroup,
        playbook: &Playbook,
    ) -> Result<Diagnostic, crate::reflection::ReflectError> {
        let backend = self.backends.reflector.as_ref();
        if group.is_mixed() {
            let (pos, pos_out) = group.first_passing().expect("mixed group has a pass");
            let (neg, neg_out) = group.first_failing().expect("mixed group has a fail");
            let request = ReflectionRequest::Contrastive {
                pos,
                neg,
                pos_out,
                neg_out,
                annotated: group.annotated_trace.as_ref().map(|(t, _)| t),
            };
            return reflect(backend, &request, playbook);
        }
        let (neg, neg_out) = group
            .first_failing()
            .expect("selected group has a failing trace");
        if let Some((ann, _)) = &group.annotated_trace {
            let request = ReflectionRequest::Dual {
                std_trace: neg,
                annotated: ann,
                std_out: neg_out,
            };
            reflect(backend, &request, playbook)
        } else {
            let request = ReflectionRequest::Single {
                trace: neg,
                outcome: neg_out,
            };
            reflect(backend, &request, playbook)
        }
    }

    /// Score a playbook on the eval set: standard traces only, mean of pass
    /// indicators. Per-task results feed the solve matrix.
    pub fn evaluate(&self, playbook: &Playbook, checkpoint: u64) -> EvalRecord {
        evaluate_playbook(
            self.backends.agent.as_ref(),
            playbook,
            &self.eval_set,
            self.config.seed,
            checkpoint,
        )
    }

    /// Run (or resume) a full training loop, writing one checkpoint directory
    /// per iteration plus metrics and mutation-log streams.
    pub fn train(
        &self,
        out_dir: &Path,
        resume: Option<&Path>,
        mut progress: Option<&mut dyn Write>,
    ) -> Result<TrainOutput, TrainError> {
        let checkpoints_dir = out_dir.join("checkpoints");
        std::fs::create_dir_all(&checkpoints_dir).map_err(|e| TrainError::Io {
            path: checkpoints_dir.display().to_string(),
            source: e,
        })?;
        write_text(&out_dir.join("config.resolved.txt"), &self.config.to_text())?;

        let mut task_ids: Vec<String> =
            self.eval_set.iter().map(|t| t.task_id.clone()).collect();
        task_ids.sort();
        let mut matrix = SolveMatrix::new(task_ids);
        let mut eval_scores: Vec<(u64, f64)> = Vec::new();

        let mut rs = match resume {
            None => {
                let playbook = match &self.config.seed_playbook {
                    Some(path) => Playbook::load(path)?,
                    None => Playbook::empty(),
                };
                let rs = self.initial_state(playbook);
                let eval = self.evaluate(&rs.playbook, 0);
                matrix.push_checkpoint(&eval.solved);
                eval_scores.push((0, eval.score));
                let dir = checkpoints_dir.join(checkpoint_dir_name(0));
                write_checkpoint(&dir, &rs, None, None, &eval)?;
                append_jsonl(
                    &out_dir.join("metrics.jsonl"),
                    &metrics_record(&matrix, 0),
                )?;
                rs
            }
            Some(resume_path) => {
                let (rs, history) = load_resume_point(resume_path)?;
                for eval in &history {
                    matrix.push_checkpoint(&eval.solved);
                    eval_scores.push((eval.checkpoint, eval.score));
                }
                rs
            }
        };

        let start = rs.iteration;
        for t in (start + 1)..=self.config.iterations {
            let record = self.step(&mut rs);
            let eval = self.evaluate(&rs.playbook, t);
            matrix.push_checkpoint(&eval.solved);
            eval_scores.push((t, eval.score));

            let dir = checkpoints_dir.join(checkpoint_dir_name(t));
            write_checkpoint(&dir, &rs, Some(&record.diagnostics), Some(&record), &eval)?;
            append_jsonl(
                &out_dir.join("metrics.jsonl"),
                &metrics_record(&matrix, t as usize),
            )?;
            append_jsonl(
                &out_dir.join("mutations.jsonl"),
                &serde_json::json!({
                    "iteration": t,
                    "edits": record.mutation.edits,
                    "rationale": record.mutation.rationale,
                    "no_op": record.mutation.no_op,
                    "dropped": record.mutation.dropped,
                }),
            )?;
            if let Some(w) = progress.as_deref_mut() {
                let _ = writeln!(
                    w,
                    "iteration {t}: eval {:.3}, edits {}, playbook v{}",
                    eval.score,
                    record.mutation.edits.len(),
                    rs.playbook.version
                );
            }
        }

        Ok(TrainOutput {
            run_dir: out_dir.to_path_buf(),
            final_playbook: rs.playbook,
            eval_scores,
            solve_matrix: matrix,
        })
    }
}

/// Free-standing evaluation used by the trainer and the CLI `eval` command.
pub fn evaluate_playbook(
    agent: &dyn AgentBackend,
    playbook: &Playbook,
    eval_set: &[TaskSpec],
    seed: u64,
    checkpoint: u64,
) -> EvalRecord {
    let ckpt_label = checkpoint.to_string();
    let mut solved = BTreeMap::new();
    let mut passes = 0usize;
    let mut reward_sum = 0.0;
    for task in eval_set {
        let exec = ExecContext {
            seed: derive_seed(seed, &["eval", &ckpt_label, &task.task_id]),
            temperature: None,
        };
        let (_, outcome) = execution::run_task(agent, task, playbook, false, exec);
        debug_assert!(!outcome.excluded_from_eval);
        solved.insert(task.task_id.clone(), outcome.passed);
        if outcome.passed {
            passes += 1;
        }
        reward_sum += outcome.reward;
    }
    let n = eval_set.len().max(1);
    EvalRecord {
        checkpoint,
        score: passes as f64 / n as f64,
        mean_reward: reward_sum / n as f64,
        solved,
    }
}

pub fn checkpoint_dir_name(t: u64) -> String {
    format!("iter_{t:04}")
}

fn write_text(path: &Path, text: &str) -> Result<(), TrainError> {
    std::fs::write(path, text).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value)?;
    write_text(path, &text)
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    file.write_all(line.as_bytes()).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_checkpoint(
    dir: &Path,
    rs: &RunState,
    diagnostics: Option<&[Diagnostic]>,
    record: Option<&IterationRecord>,
    eval: &EvalRecord,
) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| TrainError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    rs.playbook.save(&dir.join("playbook.json"))?;
    write_json(&dir.join("buffer.json"), &rs.buffer)?;
    write_json(&dir.join("state.json"), &rs.state_doc)?;
    write_json(&dir.join("eval.json"), eval)?;
    if let Some(diags) = diagnostics {
        write_json(&dir.join("diagnostics.json"), &diags)?;
    }
    if let Some(rec) = record {
        write_json(&dir.join("record.json"), rec)?;
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Load a checkpoint directory (e.g. `.../checkpoints/iter_0005`) plus the
/// eval history of every checkpoint up to it from the same run, so metrics
/// windows continue seamlessly.
pub fn load_resume_point(path: &Path) -> Result<(RunState, Vec<EvalRecord>), TrainError> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let iteration: u64 = name
        .strip_prefix("iter_")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| TrainError::Resume {
            path: path.display().to_string(),
            detail: "directory name must look like iter_0005".into(),
        })?;
    let playbook = Playbook::load(&path.join("playbook.json"))?;
    let buffer: ReplayBuffer = read_json(&path.join("buffer.json"))?;
    let state_doc: StateDoc = read_json(&path.join("state.json"))?;
    let parent = path.parent().ok_or_else(|| TrainError::Resume {
        path: path.display().to_string(),
        detail: "checkpoint has no parent directory".into(),
    })?;
    let mut history = Vec::new();
    for t in 0..=iteration {
        let eval_path = parent.join(checkpoint_dir_name(t)).join("eval.json");
        let eval: EvalRecord = read_json(&eval_path).map_err(|e| TrainError::Resume {
            path: eval_path.display().to_string(),
            detail: format!("missing eval history for checkpoint {t}: {e}"),
        })?;
        history.push(eval);
    }
    Ok((
        RunState {
            iteration,
            playbook,
            buffer,
            state_doc,
        },
        history,
    ))
}

/// Rebuild the solve matrix of a finished run from its checkpoint tree.
pub fn load_run_matrix(run_dir: &Path) -> Result<SolveMatrix, TrainError> {
    let checkpoints_dir = run_dir.join("checkpoints");
    let mut indices: Vec<u64> = Vec::new();
    let entries = std::fs::read_dir(&checkpoints_dir).map_err(|e| TrainError::Io {
        path: checkpoints_dir.display().to_string(),
        source: e,
    })?;
    for entry in entries.flatten() {
        if let Some(t) = entry
            .file_name()
            .to_str()
            .and_then(|n| n.strip_prefix("iter_"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            indices.push(t);
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(TrainError::Invalid(format!(
            "no checkpoints under {}",
            checkpoints_dir.display()
        )));
    }
    let mut matrix: Option<SolveMatrix> = None;
    for t in &indices {
        let eval: EvalRecord =
            read_json(&checkpoints_dir.join(checkpoint_dir_name(*t)).join("eval.json"))?;
        let m = matrix.get_or_insert_with(|| {
            SolveMatrix::new(eval.solved.keys().cloned().collect())
        });
        m.push_checkpoint(&eval.solved);
    }
    Ok(matrix.expect("at least one checkpoint"))
}
