//! Hermetic synthetic environment with an analytic oracle for every
//! execution-side primitive.
//!
//! A task demands a set of practice tokens; the scripted agent applies the
//! demanded practices its playbook mentions and reports them on an
//! `applied:` line. Grading checks that every required token was applied and
//! that the playbook recommends no forbidden practice. A stochastic variant
//! makes the agent slip (drop an applied practice) or improvise (apply the
//! missing ones) with the task's flip probability, so outcome noise is
//! visible in the trace itself and pass rates stay analytically computable.

use rand::Rng;

use crate::execution::{AgentBackend, AgentFailure, ExecContext, Step, TaskSpec, Trajectory};
use crate::playbook::EntryId;
use crate::rng::rng_from;

/// Binary environments: passed := reward >= this.
pub const PASS_THRESHOLD: f64 = 0.999;

const NONE_MARKER: &str = "(none)";

/// Task text for a token task, stating exactly what the environment grades.
pub fn synthesize_input(task: &TaskSpec) -> String {
    let demands = if task.required_tokens.is_empty() {
        NONE_MARKER.to_string()
    } else {
        task.required_tokens.join(", ")
    };
    let mut input = format!(
        "Task {id}: complete the job, applying every demanded practice. demands: {demands}",
        id = task.task_id
    );
    if task.flip_prob > 0.0 {
        input.push_str(&format!("\nslip: {}", task.flip_prob));
    }
    input
}

/// Hand-written inputs must state the same demands the grader will check.
pub fn check_input_coherence(task: &TaskSpec) -> Result<(), String> {
    let parsed = parse_demands(&task.input);
    let mut declared: Vec<String> = task.required_tokens.clone();
    declared.sort();
    let mut found = parsed;
    found.sort();
    if !task.required_tokens.is_empty() && found != declared {
        return Err(format!(
            "input demands {found:?} do not match required_tokens {declared:?}"
        ));
    }
    if task.flip_prob > 0.0 && (parse_slip(&task.input) - task.flip_prob).abs() > 1e-12 {
        return Err("input slip clause does not match flip_prob".into());
    }
    Ok(())
}

/// Extract the demanded practice tokens from task text.
pub fn parse_demands(input: &str) -> Vec<String> {
    for line in input.lines() {
        if let Some(pos) = line.find("demands:") {
            let rest = &line[pos + "demands:".len()..];
            return rest
                .split(',')
                .map(|t| t.trim().to_string())
                .filter(|t| !t.is_empty() && t != NONE_MARKER)
                .collect();
        }
    }
    Vec::new()
}

fn parse_slip(input: &str) -> f64 {
    for line in input.lines() {
        if let Some(pos) = line.find("slip:") {
            if let Ok(p) = line[pos + "slip:".len()..].trim().parse::<f64>() {
                return p.clamp(0.0, 1.0);
            }
        }
    }
    0.0
}

/// Split tokens into (present, missing) by substring search over `text`.
pub fn coverage(tokens: &[String], text: &str) -> (Vec<String>, Vec<String>) {
    let mut present = Vec::new();
    let mut missing = Vec::new();
    for t in tokens {
        if text.contains(t.as_str()) {
            present.push(t.clone());
        } else {
            missing.push(t.clone());
        }
    }
    (present, missing)
}

fn list_or_none(tokens: &[String]) -> String {
    if tokens.is_empty() {
        NONE_MARKER.to_string()
    } else {
        tokens.join(", ")
    }
}

/// The line of the answer that declares applied practices; grading scopes
/// token search to it so that mentions elsewhere (e.g. a "Missing:" flag)
/// cannot count as applied.
fn applied_scope(answer: &str) -> &str {
    answer
        .lines()
        .find(|l| l.trim_start().to_ascii_lowercase().starts_with("applied:"))
        .unwrap_or(answer)
}

/// Grade a finished trajectory.
///
/// Token tasks: reward is the fraction of required practices applied, zeroed
/// if the playbook recommends a forbidden practice. Tasks without tokens fall
/// back to exact label match. Annotated context carries the same entry
/// contents inside tags, so coverage is unaffected by instrumentation.
pub fn grade(task: &TaskSpec, context: &str, final_answer: &str) -> (f64, bool) {
    let token_task = !task.required_tokens.is_empty() || !task.forbidden_tokens.is_empty();
    if !token_task {
        let reward = if !task.label.trim().is_empty()
            && final_answer.trim() == task.label.trim()
        {
            1.0
        } else {
            0.0
        };
        return (reward, reward >= PASS_THRESHOLD);
    }

    let forbidden_hit = task
        .forbidden_tokens
        .iter()
        .any(|t| context.contains(t.as_str()));
    if forbidden_hit {
        return (0.0, false);
    }
    let scope = applied_scope(final_answer);
    let applied = task
        .required_tokens
        .iter()
        .filter(|t| scope.contains(t.as_str()))
        .count();
    let reward = if task.required_tokens.is_empty() {
        1.0
    } else {
        applied as f64 / task.required_tokens.len() as f64
    };
    (reward, reward >= PASS_THRESHOLD)
}

/// Deterministic agent for token tasks: applies every demanded practice its
/// playbook mentions. With a slip clause it misexecutes with that
/// probability, either dropping one applied practice or improvising the
/// missing ones, so grouped rollouts can disagree at the trace level.
pub struct ScriptedAgent;

impl AgentBackend for ScriptedAgent {
    fn run(
        &self,
        input: &str,
        context: &str,
        annotated: bool,
        exec: ExecContext,
    ) -> Result<Trajectory, AgentFailure> {
        let demanded = parse_demands(input);
        let slip_prob = parse_slip(input);
        let (mut applied, mut missing) = coverage(&demanded, context);

        if slip_prob > 0.0 {
            let mut rng = rng_from(exec.seed, &["slip"]);
            if rng.gen::<f64>() < slip_prob {
                if missing.is_empty() {
                    if !applied.is_empty() {
                        let idx = rng.gen_range(0..applied.len());
                        let dropped = applied.remove(idx);
                        missing.push(dropped);
                    }
                } else {
                    applied = demanded.clone();
                    missing.clear();
                }
            }
        }

        let steps = vec![
            Step {
                thought: "parse the task demands".into(),
                action: "read_input".into(),
                observation: format!("demands: {}", list_or_none(&demanded)),
            },
            Step {
                thought: "consult the playbook and apply its guidance".into(),
                action: "apply_guidance".into(),
                observation: format!(
                    "applied: {}; missing: {}",
                    list_or_none(&applied),
                    list_or_none(&missing)
                ),
            },
        ];

        let cited = if annotated {
            cited_entries(context, &demanded)
        } else {
            Vec::new()
        };

        let mut final_answer = format!("applied: {}", list_or_none(&applied));
        if annotated {
            let ids = cited
                .iter()
                .map(|id| id.to_string())
                .collect::<Vec<_>>()
                .join(", ");
            final_answer.push_str(&format!("\nConsulted: [{ids}]"));
            final_answer.push_str(&format!("\nMissing: {}", list_or_none(&missing)));
        }

        Ok(Trajectory {
            task_id: String::new(),
            steps,
            final_answer,
            annotated,
            cited_entry_ids: cited,
        })
    }
}

/// Ids of annotated entries whose content mentions any demanded token.
fn cited_entries(annotated_context: &str, demanded: &[String]) -> Vec<EntryId> {
    let mut out = Vec::new();
    for line in annotated_context.lines() {
        if let Some(rest) = line.strip_prefix("<entry id=\"") {
            if let Some((id_part, body)) = rest.split_once("\">") {
                if let Some(content) = body.strip_suffix("</entry>") {
                    if let Ok(id) = id_part.parse::<u64>() {
                        if demanded.iter().any(|t| content.contains(t.as_str())) {
                            out.push(EntryId(id));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Parse the demands a trajectory observed, for reflector backends that only
/// see the trace.
pub fn demands_from_trajectory(traj: &Trajectory) -> Vec<String> {
    for step in &traj.steps {
        let parsed = parse_demands(&step.observation);
        if !parsed.is_empty() || step.observation.contains("demands:") {
            return parsed;
        }
    }
    Vec::new()
}
