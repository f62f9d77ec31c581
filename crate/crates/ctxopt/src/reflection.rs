//! The backward pass: turn trajectories and outcomes into structured
//! diagnostics.
//!
//! A diagnostic carries three heads: a failure attribution class, a root
//! cause, and a coverage gap naming what the playbook lacks. Reflection runs
//! in four modes: single trace, contrastive (the only mode that sees a
//! positive trace), dual trace (standard + instrumented companion), and
//! batched. No reflection signature accepts the optimizer state document;
//! that asymmetry is the point of keeping reflection unbiased by the
//! mutation history.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::{Outcome, Trajectory};
use crate::model::{self, ModelClient, ModelError};
use crate::playbook::{EntryId, Playbook};
use crate::ruleworld;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    /// The playbook is missing or carries wrong guidance; an edit can help.
    ActionableGap,
    /// The playbook covers the case; the failure looks like execution noise.
    ExecutionVariance,
    /// No playbook edit can plausibly fix this task.
    Intractable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionMode {
    Single,
    Contrastive,
    Dual,
    Batched,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub attribution: Attribution,
    pub root_cause: String,
    pub coverage_gap: String,
    pub cited_entry_ids: Vec<EntryId>,
    pub source_task_id: String,
    pub mode: ReflectionMode,
}

impl Diagnostic {
    /// Tokens named by the coverage gap head, comma separated.
    pub fn gap_tokens(&self) -> Vec<String> {
        self.coverage_gap
            .split(',')
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty() && t != "(none)")
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum ReflectError {
    #[error("reflection precondition violated: {0}")]
    Precondition(String),
    #[error("model output unparseable after {attempts} attempts: {detail}")]
    MalformedModelOutput { attempts: u32, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The mode-specific payload handed to a reflector backend. Deliberately has
/// no field for the optimizer state or for the annotated outcome.
pub enum ReflectionRequest<'a> {
    Single {
        trace: &'a Trajectory,
        outcome: &'a Outcome,
    },
    Contrastive {
        pos: &'a Trajectory,
        neg: &'a Trajectory,
        pos_out: &'a Outcome,
        neg_out: &'a Outcome,
        /// Instrumented companion trace, attached when credit assignment is
        /// active. Only its citations are consumed, never its outcome.
        annotated: Option<&'a Trajectory>,
    },
    Dual {
        std_trace: &'a Trajectory,
        annotated: &'a Trajectory,
        std_out: &'a Outcome,
    },
    Batched {
        traces: &'a [(Trajectory, Outcome)],
    },
}

impl ReflectionRequest<'_> {
    fn mode(&self) -> ReflectionMode {
        match self {
            ReflectionRequest::Single { .. } => ReflectionMode::Single,
            ReflectionRequest::Contrastive { .. } => ReflectionMode::Contrastive,
            ReflectionRequest::Dual { .. } => ReflectionMode::Dual,
            ReflectionRequest::Batched { .. } => ReflectionMode::Batched,
        }
    }

    fn source_task_id(&self) -> String {
        match self {
            ReflectionRequest::Single { trace, .. } => trace.task_id.clone(),
            ReflectionRequest::Contrastive { neg, .. } => neg.task_id.clone(),
            ReflectionRequest::Dual { std_trace, .. } => std_trace.task_id.clone(),
            ReflectionRequest::Batched { traces } => {
                let mut ids: Vec<&str> = Vec::new();
                for (t, _) in traces.iter() {
                    if !ids.contains(&t.task_id.as_str()) {
                        ids.push(&t.task_id);
                    }
                }
                ids.join(",")
            }
        }
    }
}

pub trait ReflectorBackend: Send + Sync {
    fn reflect(
        &self,
        request: &ReflectionRequest,
        playbook: &Playbook,
    ) -> Result<Diagnostic, ReflectError>;
}

/// Run a backend on a request, then enforce op-level invariants: mode and
/// source task stamped from the request, citations restricted to entries
/// that exist in the reflected-upon playbook.
pub fn reflect(
    backend: &dyn ReflectorBackend,
    request: &ReflectionRequest,
    playbook: &Playbook,
) -> Result<Diagnostic, ReflectError> {
    check_preconditions(request)?;
    let mut diag = backend.reflect(request, playbook)?;
    diag.mode = request.mode();
    diag.source_task_id = request.source_task_id();
    let known = playbook.entry_ids();
    diag.cited_entry_ids.retain(|id| known.contains(id));
    Ok(diag)
}

fn check_preconditions(request: &ReflectionRequest) -> Result<(), ReflectError> {
    match request {
        ReflectionRequest::Single { outcome, .. } => {
            if outcome.passed {
                return Err(ReflectError::Precondition(
                    "single-trace reflection targets failures, got a passing trace".into(),
                ));
            }
        }
        ReflectionRequest::Contrastive {
            pos,
            neg,
            pos_out,
            neg_out,
            ..
        } => {
            if !pos_out.passed || neg_out.passed {
                return Err(ReflectError::Precondition(
                    "contrastive reflection needs a passing and a failing trace".into(),
                ));
            }
            if pos.task_id != neg.task_id {
                return Err(ReflectError::Precondition(
                    "contrastive traces must share a task".into(),
                ));
            }
        }
        ReflectionRequest::Dual {
            std_trace,
            annotated,
            ..
        } => {
            if !annotated.annotated || std_trace.annotated {
                return Err(ReflectError::Precondition(
                    "dual reflection needs one standard and one annotated trace".into(),
                ));
            }
            if std_trace.task_id != annotated.task_id {
                return Err(ReflectError::Precondition(
                    "dual traces must share a task".into(),
                ));
            }
        }
        ReflectionRequest::Batched { traces } => {
            if !traces.iter().any(|(_, o)| !o.passed) {
                return Err(ReflectError::Precondition(
                    "batched reflection needs at least one failed trace".into(),
                ));
            }
        }
    }
    Ok(())
}

pub fn reflect_single(
    backend: &dyn ReflectorBackend,
    trace: &Trajectory,
    outcome: &Outcome,
    playbook: &Playbook,
) -> Result<Diagnostic, ReflectError> {
    reflect(backend, &ReflectionRequest::Single { trace, outcome }, playbook)
}

pub fn reflect_contrastive(
    backend: &dyn ReflectorBackend,
    pos: &Trajectory,
    neg: &Trajectory,
    pos_out: &Outcome,
    neg_out: &Outcome,
    playbook: &Playbook,
) -> Result<Diagnostic, ReflectError> {
    reflect(
        backend,
        &ReflectionRequest::Contrastive {
            pos,
            neg,
            pos_out,
            neg_out,
            annotated: None,
        },
        playbook,
    )
}

/// The annotated outcome is not a parameter: instrumentation alters behavior,
/// so only the standard outcome may inform the diagnosis.
pub fn reflect_dual(
    backend: &dyn ReflectorBackend,
    std_trace: &Trajectory,
    annotated: &Trajectory,
    std_out: &Outcome,
    playbook: &Playbook,
) -> Result<Diagnostic, ReflectError> {
    reflect(
        backend,
        &ReflectionRequest::Dual {
            std_trace,
            annotated,
            std_out,
        },
        playbook,
    )
}

pub fn reflect_batched(
    backend: &dyn ReflectorBackend,
    traces: &[(Trajectory, Outcome)],
    playbook: &Playbook,
) -> Result<Diagnostic, ReflectError> {
    reflect(backend, &ReflectionRequest::Batched { traces }, playbook)
}

// ---------------------------------------------------------------------------
// Scripted oracle backend
// ---------------------------------------------------------------------------

/// Deterministic reflector for the hermetic environment. It re-derives token
/// coverage from the trace's recorded demands and the playbook, so its
/// coverage gaps are exact. With `structured` off it skips the attribution
/// discipline and labels everything an actionable gap.
pub struct ScriptedReflector {
    pub structured: bool,
}

impl Default for ScriptedReflector {
    fn default() -> Self {
        ScriptedReflector { structured: true }
    }
}

impl ScriptedReflector {
    fn classify(&self, attribution: Attribution) -> Attribution {
        if self.structured {
            attribution
        } else {
            Attribution::ActionableGap
        }
    }

    fn analyze_trace(&self, trace: &Trajectory, playbook: &Playbook) -> (Attribution, String, String) {
        let demands = ruleworld::demands_from_trajectory(trace);
        if demands.is_empty() {
            return (
                self.classify(Attribution::Intractable),
                "trace shows no demanded practices; no playbook edit can address this failure"
                    .to_string(),
                String::new(),
            );
        }
        let missing: Vec<String> = demands
            .iter()
            .filter(|t| !playbook.contains_text(t.as_str()))
            .cloned()
            .collect();
        if missing.is_empty() {
            (
                self.classify(Attribution::ExecutionVariance),
                "playbook covers every demanded practice; failure looks like transient execution noise"
                    .to_string(),
                String::new(),
            )
        } else {
            let gap = missing.join(", ");
            (
                self.classify(Attribution::ActionableGap),
                format!("playbook lacks guidance for demanded practice(s): {gap}"),
                gap,
            )
        }
    }
}

impl ReflectorBackend for ScriptedReflector {
    fn reflect(
        &self,
        request: &ReflectionRequest,
        playbook: &Playbook,
    ) -> Result<Diagnostic, ReflectError> {
        let diag = match request {
            ReflectionRequest::Single { trace, .. } => {
                let (attribution, root_cause, coverage_gap) = self.analyze_trace(trace, playbook);
                Diagnostic {
                    attribution,
                    root_cause,
                    coverage_gap,
                    cited_entry_ids: Vec::new(),
                    source_task_id: String::new(),
                    mode: ReflectionMode::Single,
                }
            }
            ReflectionRequest::Contrastive {
                pos,
                neg,
                annotated,
                ..
            } => {
                let cited = annotated
                    .map(|a| a.cited_entry_ids.clone())
                    .unwrap_or_default();
                if pos.steps == neg.steps && pos.final_answer == neg.final_answer {
                    Diagnostic {
                        attribution: self.classify(Attribution::ExecutionVariance),
                        root_cause:
                            "passing and failing traces are identical; no differing decision exists"
                                .to_string(),
                        coverage_gap: String::new(),
                        cited_entry_ids: cited,
                        source_task_id: String::new(),
                        mode: ReflectionMode::Contrastive,
                    }
                } else {
                    let divergence = first_divergence(pos, neg);
                    let (attribution, _, coverage_gap) = self.analyze_trace(neg, playbook);
                    Diagnostic {
                        attribution,
                        root_cause: divergence,
                        coverage_gap,
                        cited_entry_ids: cited,
                        source_task_id: String::new(),
                        mode: ReflectionMode::Contrastive,
                    }
                }
            }
            ReflectionRequest::Dual {
                std_trace,
                annotated,
                ..
            } => {
                let (attribution, mut root_cause, coverage_gap) =
                    self.analyze_trace(std_trace, playbook);
                if annotated.cited_entry_ids.is_empty() {
                    root_cause.push_str("; annotated run consulted no entries");
                } else {
                    let ids = annotated
                        .cited_entry_ids
                        .iter()
                        .map(|id| id.to_string())
                        .collect::<Vec<_>>()
                        .join(", ");
                    root_cause.push_str(&format!("; annotated run consulted entries [{ids}]"));
                }
                Diagnostic {
                    attribution,
                    root_cause,
                    coverage_gap,
                    cited_entry_ids: annotated.cited_entry_ids.clone(),
                    source_task_id: String::new(),
                    mode: ReflectionMode::Dual,
                }
            }
            ReflectionRequest::Batched { traces } => self.analyze_batch(traces, playbook),
        };
        Ok(diag)
    }
}

impl ScriptedReflector {
    fn analyze_batch(&self, traces: &[(Trajectory, Outcome)], playbook: &Playbook) -> Diagnostic {
        let failed: Vec<&Trajectory> = traces
            .iter()
            .filter(|(_, o)| !o.passed)
            .map(|(t, _)| t)
            .collect();
        let mut missing_sets: Vec<Vec<String>> = Vec::new();
        let mut any_demands = false;
        for trace in &failed {
            let demands = ruleworld::demands_from_trajectory(trace);
            if demands.is_empty() {
                continue;
            }
            any_demands = true;
            let missing: Vec<String> = demands
                .iter()
                .filter(|t| !playbook.contains_text(t.as_str()))
                .cloned()
                .collect();
            if !missing.is_empty() {
                missing_sets.push(missing);
            }
        }

        if !any_demands {
            return Diagnostic {
                attribution: self.classify(Attribution::Intractable),
                root_cause: "no failed trace shows demanded practices; nothing to edit".into(),
                coverage_gap: String::new(),
                cited_entry_ids: Vec::new(),
                source_task_id: String::new(),
                mode: ReflectionMode::Batched,
            };
        }
        if missing_sets.is_empty() {
            return Diagnostic {
                attribution: self.classify(Attribution::ExecutionVariance),
                root_cause: format!(
                    "playbook covers every demanded practice across {} failures; transient noise",
                    failed.len()
                ),
                coverage_gap: String::new(),
                cited_entry_ids: Vec::new(),
                source_task_id: String::new(),
                mode: ReflectionMode::Batched,
            };
        }

        // shared gaps first; otherwise rank the union by how often each token
        // is missing, flagging the causes as competing
        let mut common: Vec<String> = missing_sets[0].clone();
        common.retain(|t| missing_sets.iter().all(|s| s.contains(t)));
        common.sort();
        if !common.is_empty() {
            let gap = common.join(", ");
            return Diagnostic {
                attribution: self.classify(Attribution::ActionableGap),
                root_cause: format!(
                    "shared coverage gap across {} failures: {gap}",
                    missing_sets.len()
                ),
                coverage_gap: gap,
                cited_entry_ids: Vec::new(),
                source_task_id: String::new(),
                mode: ReflectionMode::Batched,
            };
        }
        let mut counts: std::collections::BTreeMap<String, usize> = Default::default();
        for set in &missing_sets {
            for token in set {
                *counts.entry(token.clone()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let gap = ranked
            .iter()
            .map(|(t, _)| t.clone())
            .collect::<Vec<_>>()
            .join(", ");
        let detail = ranked
            .iter()
            .map(|(t, c)| format!("{t} (missing in {c})"))
            .collect::<Vec<_>>()
            .join(", ");
        Diagnostic {
            attribution: self.classify(Attribution::ActionableGap),
            root_cause: format!("competing causes across failures: {detail}"),
            coverage_gap: gap,
            cited_entry_ids: Vec::new(),
            source_task_id: String::new(),
            mode: ReflectionMode::Batched,
        }
    }
}

fn first_divergence(pos: &Trajectory, neg: &Trajectory) -> String {
    for (i, (p, n)) in pos.steps.iter().zip(neg.steps.iter()).enumerate() {
        if p != n {
            return format!(
                "decision divergence at step {i}: passing run observed '{}' vs failing run '{}'",
                p.observation, n.observation
            );
        }
    }
    if pos.final_answer != neg.final_answer {
        return format!(
            "final answers diverge: passing '{}' vs failing '{}'",
            pos.final_answer, neg.final_answer
        );
    }
    format!(
        "step counts diverge: passing {} vs failing {}",
        pos.steps.len(),
        neg.steps.len()
    )
}

// ---------------------------------------------------------------------------
// Model-backed backend
// ---------------------------------------------------------------------------

/// Prompt templates per reflection mode, with `{{...}}` placeholder slots.
pub struct ReflectorTemplates {
    pub single: String,
    pub contrastive: String,
    pub dual: String,
    pub batched: String,
}

impl Default for ReflectorTemplates {
    fn default() -> Self {
        ReflectorTemplates {
            single: include_str!("../prompts/reflector_single.txt").to_string(),
            contrastive: include_str!("../prompts/reflector_contrastive.txt").to_string(),
            dual: include_str!("../prompts/reflector_dual.txt").to_string(),
            batched: include_str!("../prompts/reflector_batched.txt").to_string(),
        }
    }
}

/// Reflector backed by a chat model. Emits are expected as a fenced
/// `diagnostic` block of `key: value` lines; unparseable output is retried
/// up to `retry_budget` extra times, then surfaced as malformed.
pub struct ModelReflector {
    pub client: ModelClient,
    pub templates: ReflectorTemplates,
    pub structured: bool,
    pub retry_budget: u32,
}

impl ModelReflector {
    pub fn new(client: ModelClient) -> Self {
        ModelReflector {
            client,
            templates: ReflectorTemplates::default(),
            structured: true,
            retry_budget: 2,
        }
    }

    fn prompt_for(&self, request: &ReflectionRequest, playbook: &Playbook) -> String {
        let playbook_text = playbook.render();
        match request {
            ReflectionRequest::Single { trace, outcome } => model::apply_template(
                &self.templates.single,
                &[
                    ("playbook", playbook_text.as_str()),
                    ("trajectory", &format_trajectory(trace)),
                    ("outcome", &format_outcome(outcome)),
                ],
            ),
            ReflectionRequest::Contrastive {
                pos,
                neg,
                pos_out,
                neg_out,
                annotated,
            } => {
                let ann = annotated
                    .map(format_trajectory)
                    .unwrap_or_else(|| "(not available)".into());
                model::apply_template(
                    &self.templates.contrastive,
                    &[
                        ("playbook", playbook_text.as_str()),
                        ("pos_trajectory", &format_trajectory(pos)),
                        ("neg_trajectory", &format_trajectory(neg)),
                        ("pos_outcome", &format_outcome(pos_out)),
                        ("neg_outcome", &format_outcome(neg_out)),
                        ("annotated_trajectory", &ann),
                    ],
                )
            }
            ReflectionRequest::Dual {
                std_trace,
                annotated,
                std_out,
            } => model::apply_template(
                &self.templates.dual,
                &[
                    ("playbook", playbook_text.as_str()),
                    ("trajectory", &format_trajectory(std_trace)),
                    ("annotated_trajectory", &format_trajectory(annotated)),
                    ("outcome", &format_outcome(std_out)),
                ],
            ),
            ReflectionRequest::Batched { traces } => {
                let joined = traces
                    .iter()
                    .enumerate()
                    .map(|(i, (t, o))| {
                        format!(
                            "--- trace {} ({}) ---\n{}",
                            i,
                            format_outcome(o),
                            format_trajectory(t)
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("\n");
                model::apply_template(
                    &self.templates.batched,
                    &[
                        ("playbook", playbook_text.as_str()),
                        ("traces", joined.as_str()),
                    ],
                )
            }
        }
    }
}

impl ReflectorBackend for ModelReflector {
    fn reflect(
        &self,
        request: &ReflectionRequest,
        playbook: &Playbook,
    ) -> Result<Diagnostic, ReflectError> {
        let prompt = self.prompt_for(request, playbook);
        let messages = [model::ChatMessage::user(prompt)];
        let attempts = self.retry_budget + 1;
        let mut last_err = String::new();
        for _ in 0..attempts {
            let text = self.client.complete(&messages, None)?;
            match parse_diagnostic_block(&text, self.structured) {
                Ok(parsed) => {
                    return Ok(Diagnostic {
                        attribution: parsed.0,
                        root_cause: parsed.1,
                        coverage_gap: parsed.2,
                        cited_entry_ids: parsed.3,
                        source_task_id: String::new(),
                        mode: request.mode(),
                    })
                }
                Err(e) => last_err = e,
            }
        }
        Err(ReflectError::MalformedModelOutput {
            attempts,
            detail: last_err,
        })
    }
}

pub fn format_trajectory(traj: &Trajectory) -> String {
    let mut out = String::new();
    for (i, step) in traj.steps.iter().enumerate() {
        out.push_str(&format!(
            "step {i}: thought: {} | action: {} | observation: {}\n",
            step.thought, step.action, step.observation
        ));
    }
    out.push_str(&format!("final answer: {}", traj.final_answer));
    out
}

fn format_outcome(outcome: &Outcome) -> String {
    format!(
        "reward={:.3} passed={}",
        outcome.reward,
        if outcome.passed { "yes" } else { "no" }
    )
}

type ParsedDiagnostic = (Attribution, String, String, Vec<EntryId>);

/// Parse the fenced `diagnostic` block out of model output. With
/// `structured` set the attribution head is required; otherwise it defaults
/// to an actionable gap.
pub fn parse_diagnostic_block(text: &str, structured: bool) -> Result<ParsedDiagnostic, String> {
    let block = model::extract_fenced_block(text, "diagnostic")
        .ok_or_else(|| "no fenced diagnostic block found".to_string())?;
    let mut attribution: Option<Attribution> = None;
    let mut root_cause: Option<String> = None;
    let mut coverage_gap: Option<String> = None;
    let mut cited: Vec<EntryId> = Vec::new();
    for line in block.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| format!("line without key: '{line}'"))?;
        let value = value.trim();
        match key.trim() {
            "attribution" => {
                attribution = Some(match value {
                    "actionable_gap" => Attribution::ActionableGap,
                    "execution_variance" => Attribution::ExecutionVariance,
                    "intractable" => Attribution::Intractable,
                    other => return Err(format!("unknown attribution '{other}'")),
                });
            }
            "root_cause" => root_cause = Some(value.to_string()),
            "coverage_gap" => coverage_gap = Some(value.to_string()),
            "cited_entries" => {
                for part in value
                    .trim_start_matches('[')
                    .trim_end_matches(']')
                    .split(',')
                {
                    let part = part.trim();
                    if part.is_empty() {
                        continue;
                    }
                    let id: u64 = part
                        .parse()
                        .map_err(|_| format!("bad entry id '{part}' in cited_entries"))?;
                    cited.push(EntryId(id));
                }
            }
            other => return Err(format!("unknown diagnostic key '{other}'")),
        }
    }
    let root_cause = root_cause.ok_or_else(|| "missing root_cause head".to_string())?;
    let coverage_gap = coverage_gap.ok_or_else(|| "missing coverage_gap head".to_string())?;
    let attribution = match attribution {
        Some(a) => a,
        None if !structured => Attribution::ActionableGap,
        None => return Err("missing attribution head".to_string()),
    };
    Ok((attribution, root_cause, coverage_gap, cited))
}
