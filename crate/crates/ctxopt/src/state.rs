//! Rolling optimizer state: the momentum analogue.
//!
//! A structured document tracking what changed and why, how the playbook is
//! doing, open hypotheses, and the optimization phase. It is injected into
//! the mutator only; reflection never sees it, so diagnostics stay unbiased
//! by the consensus of past iterations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, ModelClient, ModelError};
use crate::playbook::{diff, EditOp, Playbook};
use crate::reflection::{Attribution, Diagnostic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Exploratory,
    Convergent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub iteration: u64,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDoc {
    pub change_ledger: Vec<LedgerRecord>,
    pub playbook_assessment: String,
    pub open_hypotheses: Vec<String>,
    pub phase: Phase,
    pub iteration: u64,
}

impl StateDoc {
    pub fn initial() -> Self {
        StateDoc {
            change_ledger: Vec::new(),
            playbook_assessment: String::new(),
            open_hypotheses: Vec::new(),
            phase: Phase::Exploratory,
            iteration: 0,
        }
    }

    /// Deterministic serialization consumed only by the mutator. JSON body
    /// keeps the rendering injective up to field equality.
    pub fn render_for_mutator(&self) -> String {
        format!(
            "# Optimizer State\n{}\n",
            serde_json::to_string_pretty(self).expect("state serializes")
        )
    }
}

impl Default for StateDoc {
    fn default() -> Self {
        Self::initial()
    }
}

/// Ledger summary used for iterations whose mutation was a no-op. The
/// scripted phase rule counts trailing records with this summary.
pub const NO_EDIT_SUMMARY: &str = "no edit";

#[derive(Debug, Error)]
pub enum StateError {
    #[error("state update precondition violated: {0}")]
    Precondition(String),
    #[error("model output unparseable after {attempts} attempts: {detail}")]
    MalformedModelOutput { attempts: u32, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// What a backend contributes to the next state; the op layer owns the
/// ledger append and iteration bump.
pub struct StateParts {
    pub summary: String,
    pub assessment: String,
    pub hypotheses: Vec<String>,
    pub phase: Phase,
}

pub trait StateUpdaterBackend: Send + Sync {
    fn update(
        &self,
        state: &StateDoc,
        diagnostics: &[Diagnostic],
        old: &Playbook,
        new: &Playbook,
    ) -> Result<StateParts, StateError>;
}

/// Advance the state document by one iteration: exactly one ledger record
/// summarizing the playbook change, iteration incremented.
pub fn update_state(
    backend: &dyn StateUpdaterBackend,
    state: &StateDoc,
    diagnostics: &[Diagnostic],
    old: &Playbook,
    new: &Playbook,
) -> Result<StateDoc, StateError> {
    if new.version < old.version {
        return Err(StateError::Precondition(format!(
            "new playbook version {} below old {}",
            new.version, old.version
        )));
    }
    let parts = backend.update(state, diagnostics, old, new)?;
    let iteration = state.iteration + 1;
    let mut change_ledger = state.change_ledger.clone();
    change_ledger.push(LedgerRecord {
        iteration,
        summary: parts.summary,
    });
    Ok(StateDoc {
        change_ledger,
        playbook_assessment: parts.assessment,
        open_hypotheses: parts.hypotheses,
        phase: parts.phase,
        iteration,
    })
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

/// Deterministic updater: summarizes the diff between playbooks, keeps
/// unresolved actionable gap tokens as open hypotheses, and flips to the
/// convergent phase after three consecutive no-op iterations.
pub struct ScriptedStateUpdater;

impl StateUpdaterBackend for ScriptedStateUpdater {
    fn update(
        &self,
        state: &StateDoc,
        diagnostics: &[Diagnostic],
        old: &Playbook,
        new: &Playbook,
    ) -> Result<StateParts, StateError> {
        let summary = summarize_change(old, new);
        // convergent exactly when the last three iterations (including this
        // one) were all no-ops
        let trailing_noops = if summary == NO_EDIT_SUMMARY {
            1 + state
                .change_ledger
                .iter()
                .rev()
                .take_while(|r| r.summary == NO_EDIT_SUMMARY)
                .count()
        } else {
            0
        };
        let phase = if trailing_noops >= 3 {
            Phase::Convergent
        } else {
            Phase::Exploratory
        };

        let mut hypotheses: Vec<String> = diagnostics
            .iter()
            .filter(|d| d.attribution == Attribution::ActionableGap)
            .flat_map(|d| d.gap_tokens())
            .filter(|t| !new.contains_text(t))
            .collect();
        hypotheses.sort();
        hypotheses.dedup();
        let hypotheses = hypotheses
            .into_iter()
            .map(|t| format!("unresolved coverage gap: {t}"))
            .collect();

        Ok(StateParts {
            summary,
            assessment: format!(
                "{} entries across {} sections at version {}",
                new.entry_count(),
                new.sections.len(),
                new.version
            ),
            hypotheses,
            phase,
        })
    }
}

fn summarize_change(old: &Playbook, new: &Playbook) -> String {
    let edits = diff(old, new);
    if edits.is_empty() {
        return NO_EDIT_SUMMARY.to_string();
    }
    let old_ids = old.entry_ids();
    let added: Vec<String> = new
        .sections
        .iter()
        .flat_map(|s| {
            s.entries
                .iter()
                .filter(|e| !old_ids.contains(&e.id))
                .map(move |e| format!("{} to '{}' ({})", e.id, s.name, shorten(&e.content)))
        })
        .collect();
    let mut parts = Vec::new();
    if !added.is_empty() {
        parts.push(format!("added {}", added.join(", ")));
    }
    let updated: Vec<String> = edits
        .iter()
        .filter_map(|e| match e {
            EditOp::Update { id, .. } => Some(id.to_string()),
            _ => None,
        })
        .collect();
    if !updated.is_empty() {
        parts.push(format!("updated [{}]", updated.join(", ")));
    }
    let deleted: Vec<String> = edits
        .iter()
        .filter_map(|e| match e {
            EditOp::Delete { id } if new.entry(*id).is_none() => Some(id.to_string()),
            _ => None,
        })
        .collect();
    if !deleted.is_empty() {
        parts.push(format!("deleted [{}]", deleted.join(", ")));
    }
    if parts.is_empty() {
        // diff expressed the change as a rebuild; fall back to a coarse note
        parts.push(format!(
            "restructured playbook ({} -> {} entries)",
            old.entry_count(),
            new.entry_count()
        ));
    }
    parts.join("; ")
}

fn shorten(content: &str) -> String {
    const LIMIT: usize = 48;
    if content.len() <= LIMIT {
        content.to_string()
    } else {
        let cut = content
            .char_indices()
            .take_while(|(i, _)| *i < LIMIT)
            .last()
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or(content.len());
        format!("{}...", &content[..cut])
    }
}

// ---------------------------------------------------------------------------
// Model-backed backend
// ---------------------------------------------------------------------------

pub struct ModelStateUpdater {
    pub client: ModelClient,
    pub template: String,
    pub retry_budget: u32,
}

impl ModelStateUpdater {
    pub fn new(client: ModelClient) -> Self {
        ModelStateUpdater {
            client,
            template: include_str!("../prompts/state_updater.txt").to_string(),
            retry_budget: 2,
        }
    }
}

impl StateUpdaterBackend for ModelStateUpdater {
    fn update(
        &self,
        state: &StateDoc,
        diagnostics: &[Diagnostic],
        old: &Playbook,
        new: &Playbook,
    ) -> Result<StateParts, StateError> {
        let diag_text = diagnostics
            .iter()
            .map(|d| {
                format!(
                    "- [{:?}] root cause: {} | coverage gap: {}",
                    d.attribution, d.root_cause, d.coverage_gap
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = model::apply_template(
            &self.template,
            &[
                ("state", &state.render_for_mutator()),
                ("diagnostics", &diag_text),
                ("old_playbook", &old.render()),
                ("new_playbook", &new.render()),
            ],
        );
        let messages = [model::ChatMessage::user(prompt)];
        let attempts = self.retry_budget + 1;
        let mut last_err = String::new();
        for _ in 0..attempts {
            let text = self.client.complete(&messages, None)?;
            match parse_state_block(&text) {
                Ok(parts) => return Ok(parts),
                Err(e) => last_err = e,
            }
        }
        Err(StateError::MalformedModelOutput {
            attempts,
            detail: last_err,
        })
    }
}

/// Parse the fenced `state` block: `ledger:`, `assessment:`, `phase:` lines
/// plus any number of `hypothesis:` lines.
pub fn parse_state_block(text: &str) -> Result<StateParts, String> {
    let block = model::extract_fenced_block(text, "state")
        .ok_or_else(|| "no fenced state block found".to_string())?;
    let mut summary = None;
    let mut assessment = None;
    let mut phase = None;
    let mut hypotheses = Vec::new();
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
            "ledger" => summary = Some(value.to_string()),
            "assessment" => assessment = Some(value.to_string()),
            "hypothesis" => hypotheses.push(value.to_string()),
            "phase" => {
                phase = Some(match value {
                    "exploratory" => Phase::Exploratory,
                    "convergent" => Phase::Convergent,
                    other => return Err(format!("unknown phase '{other}'")),
                })
            }
            other => return Err(format!("unknown state key '{other}'")),
        }
    }
    Ok(StateParts {
        summary: summary.ok_or("missing ledger line")?,
        assessment: assessment.ok_or("missing assessment line")?,
        phase: phase.ok_or("missing phase line")?,
        hypotheses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::playbook::EditOp;
    use crate::reflection::ReflectionMode;

    fn add(content: &str) -> EditOp {
        EditOp::Add {
            section: "rules".into(),
            content: content.into(),
        }
    }

    fn gap_diag(token: &str) -> Diagnostic {
        Diagnostic {
            attribution: Attribution::ActionableGap,
            root_cause: format!("missing {token}"),
            coverage_gap: token.into(),
            cited_entry_ids: vec![],
            source_task_id: "t".into(),
            mode: ReflectionMode::Single,
        }
    }

    #[test]
    fn noop_iteration_appends_no_edit_record() {
        let p = Playbook::empty().apply_edits(&[add("a")]).unwrap();
        let state = StateDoc::initial();
        let next = update_state(&ScriptedStateUpdater, &state, &[], &p, &p).unwrap();
        assert_eq!(next.iteration, 1);
        assert_eq!(next.change_ledger.len(), 1);
        assert_eq!(next.change_ledger[0].summary, NO_EDIT_SUMMARY);
        assert!(next.open_hypotheses.is_empty());
    }

    #[test]
    fn three_consecutive_noops_flip_to_convergent() {
        let p = Playbook::empty().apply_edits(&[add("a")]).unwrap();
        let mut state = StateDoc::initial();
        for i in 0..3 {
            state = update_state(&ScriptedStateUpdater, &state, &[], &p, &p).unwrap();
            if i < 2 {
                assert_eq!(state.phase, Phase::Exploratory, "iteration {i}");
            }
        }
        assert_eq!(state.phase, Phase::Convergent);
    }

    #[test]
    fn edit_resets_phase_and_names_added_entry() {
        let p = Playbook::empty();
        let q = p.apply_edits(&[add("always paginate")]).unwrap();
        let state = update_state(&ScriptedStateUpdater, &StateDoc::initial(), &[], &p, &q).unwrap();
        assert_eq!(state.change_ledger.len(), 1);
        assert!(state.change_ledger[0].summary.contains("always paginate"));
        assert_eq!(state.phase, Phase::Exploratory);
    }

    #[test]
    fn unresolved_gaps_become_hypotheses() {
        let p = Playbook::empty();
        let q = p.apply_edits(&[add("always paginate")]).unwrap();
        let diags = vec![gap_diag("paginate"), gap_diag("retry")];
        let state =
            update_state(&ScriptedStateUpdater, &StateDoc::initial(), &diags, &p, &q).unwrap();
        assert_eq!(state.open_hypotheses, vec!["unresolved coverage gap: retry"]);
    }

    #[test]
    fn version_regression_is_rejected() {
        let p = Playbook::empty().apply_edits(&[add("a")]).unwrap();
        let err = update_state(
            &ScriptedStateUpdater,
            &StateDoc::initial(),
            &[],
            &p,
            &Playbook::empty(),
        )
        .unwrap_err();
        assert!(matches!(err, StateError::Precondition(_)));
    }

    #[test]
    fn fresh_state_renders_fixed_header() {
        let a = StateDoc::initial().render_for_mutator();
        let b = StateDoc::initial().render_for_mutator();
        assert_eq!(a, b);
        assert!(a.starts_with("# Optimizer State\n"));
    }

    #[test]
    fn render_is_injective_over_random_states() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(5);
        let mut states = Vec::new();
        for _ in 0..40 {
            let n = rng.gen_range(0..4);
            states.push(StateDoc {
                change_ledger: (0..n)
                    .map(|i| LedgerRecord {
                        iteration: i,
                        summary: format!("s{}", rng.gen_range(0..6)),
                    })
                    .collect(),
                playbook_assessment: format!("a{}", rng.gen_range(0..6)),
                open_hypotheses: (0..rng.gen_range(0..3))
                    .map(|_| format!("h{}", rng.gen_range(0..6)))
                    .collect(),
                phase: if rng.gen_bool(0.5) {
                    Phase::Exploratory
                } else {
                    Phase::Convergent
                },
                iteration: rng.gen_range(0..5),
            });
        }
        for a in &states {
            for b in &states {
                assert_eq!(
                    a == b,
                    a.render_for_mutator() == b.render_for_mutator(),
                    "render must be injective up to field equality"
                );
            }
        }
    }

    #[test]
    fn ledger_length_tracks_update_calls() {
        let p = Playbook::empty();
        let mut state = StateDoc::initial();
        for i in 1..=5 {
            state = update_state(&ScriptedStateUpdater, &state, &[], &p, &p).unwrap();
            assert_eq!(state.change_ledger.len(), i);
            assert_eq!(state.iteration, i as u64);
        }
    }

    #[test]
    fn parse_state_block_round_trip() {
        let text = "```state\nledger: added a rule\nassessment: 3 entries\nphase: exploratory\nhypothesis: maybe caching\nhypothesis: maybe retries\n```";
        let parts = parse_state_block(text).unwrap();
        assert_eq!(parts.summary, "added a rule");
        assert_eq!(parts.hypotheses.len(), 2);
        assert_eq!(parts.phase, Phase::Exploratory);
    }
}
