//! The optimizer step: map diagnostics onto constrained playbook edits.
//!
//! Backends propose edits; the op layer sanitizes them against the current
//! playbook. Invalid edits (stale ids, empty content) and duplicate-content
//! additions are dropped individually and reported rather than failing the
//! iteration, so long runs survive a misbehaving model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, ModelClient, ModelError};
use crate::playbook::{EditError, EditOp, EntryId, Playbook};
use crate::reflection::{Attribution, Diagnostic};
use crate::state::StateDoc;

pub const DEFAULT_EDIT_CAP: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationResult {
    pub edits: Vec<EditOp>,
    pub rationale: String,
    pub no_op: bool,
    /// Edits proposed but rejected during sanitization, with reasons.
    #[serde(default)]
    pub dropped: Vec<DroppedEdit>,
}

impl MutationResult {
    pub fn noop(rationale: impl Into<String>) -> Self {
        MutationResult {
            edits: Vec::new(),
            rationale: rationale.into(),
            no_op: true,
            dropped: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedEdit {
    pub edit: String,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum MutateError {
    #[error("model output unparseable after {attempts} attempts: {detail}")]
    MalformedModelOutput { attempts: u32, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Edit(#[from] EditError),
}

/// What a backend returns before sanitization.
pub struct ProposedMutation {
    pub edits: Vec<EditOp>,
    pub rationale: String,
}

pub trait MutatorBackend: Send + Sync {
    fn propose(
        &self,
        playbook: &Playbook,
        diagnostics: &[Diagnostic],
        state: Option<&StateDoc>,
    ) -> Result<ProposedMutation, MutateError>;
}

/// Run the mutator and sanitize its proposal. An empty diagnostics list is a
/// guaranteed no-op for every backend; the backend is not even consulted.
pub fn mutate(
    backend: &dyn MutatorBackend,
    playbook: &Playbook,
    diagnostics: &[Diagnostic],
    state: Option<&StateDoc>,
    edit_cap: usize,
) -> Result<MutationResult, MutateError> {
    if diagnostics.is_empty() {
        return Ok(MutationResult::noop("no diagnostics; nothing to change"));
    }
    let proposal = backend.propose(playbook, diagnostics, state)?;
    Ok(sanitize(playbook, proposal, edit_cap))
}

/// Apply a mutation result. No-ops return the identical playbook at the same
/// version.
pub fn apply_mutation(playbook: &Playbook, result: &MutationResult) -> Result<Playbook, EditError> {
    playbook.apply_edits(&result.edits)
}

fn sanitize(playbook: &Playbook, proposal: ProposedMutation, edit_cap: usize) -> MutationResult {
    let known = playbook.entry_ids();
    let mut existing_contents: std::collections::BTreeSet<String> = playbook
        .entries()
        .map(|e| e.content.trim().to_string())
        .collect();
    let mut edits = Vec::new();
    let mut dropped = Vec::new();
    for edit in proposal.edits {
        if edits.len() >= edit_cap {
            dropped.push(DroppedEdit {
                edit: format_edit(&edit),
                reason: format!("edit cap of {edit_cap} per iteration reached"),
            });
            continue;
        }
        match &edit {
            EditOp::Update { id, content } => {
                if !known.contains(id) {
                    dropped.push(DroppedEdit {
                        edit: format_edit(&edit),
                        reason: format!("unknown entry id {id}"),
                    });
                    continue;
                }
                if content.trim().is_empty() {
                    dropped.push(DroppedEdit {
                        edit: format_edit(&edit),
                        reason: "empty content".into(),
                    });
                    continue;
                }
                edits.push(edit);
            }
            EditOp::Add { section, content } => {
                let trimmed = content.trim().to_string();
                if trimmed.is_empty() || section.trim().is_empty() {
                    dropped.push(DroppedEdit {
                        edit: format_edit(&edit),
                        reason: "empty content or section".into(),
                    });
                    continue;
                }
                if existing_contents.contains(&trimmed) {
                    dropped.push(DroppedEdit {
                        edit: format_edit(&edit),
                        reason: "duplicate of an existing entry; coalesced".into(),
                    });
                    continue;
                }
                existing_contents.insert(trimmed);
                edits.push(edit);
            }
            EditOp::Delete { id } => {
                if !known.contains(id) {
                    dropped.push(DroppedEdit {
                        edit: format_edit(&edit),
                        reason: format!("unknown entry id {id}"),
                    });
                    continue;
                }
                edits.push(edit);
            }
        }
    }
    for item in &dropped {
        log::warn!("dropped proposed edit ({}): {}", item.reason, item.edit);
    }
    let no_op = edits.is_empty();
    MutationResult {
        edits,
        rationale: proposal.rationale,
        no_op,
        dropped,
    }
}

/// One-line rendering of an edit; `parse_edit_line` inverts it.
pub fn format_edit(edit: &EditOp) -> String {
    match edit {
        EditOp::Update { id, content } => format!("update {id}: {content}"),
        EditOp::Add { section, content } => format!("add {section}: {content}"),
        EditOp::Delete { id } => format!("delete {id}"),
    }
}

pub fn parse_edit_line(line: &str) -> Result<EditOp, String> {
    let line = line.trim();
    if let Some(rest) = line.strip_prefix("update ") {
        let (id, content) = rest
            .split_once(':')
            .ok_or_else(|| format!("update without ':' in '{line}'"))?;
        let id: u64 = id
            .trim()
            .parse()
            .map_err(|_| format!("bad entry id in '{line}'"))?;
        Ok(EditOp::Update {
            id: EntryId(id),
            content: content.trim().to_string(),
        })
    } else if let Some(rest) = line.strip_prefix("add ") {
        let (section, content) = rest
            .split_once(':')
            .ok_or_else(|| format!("add without ':' in '{line}'"))?;
        Ok(EditOp::Add {
            section: section.trim().to_string(),
            content: content.trim().to_string(),
        })
    } else if let Some(rest) = line.strip_prefix("delete ") {
        let id: u64 = rest
            .trim()
            .parse()
            .map_err(|_| format!("bad entry id in '{line}'"))?;
        Ok(EditOp::Delete { id: EntryId(id) })
    } else {
        Err(format!("unrecognized edit line '{line}'"))
    }
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

/// Deterministic majority-vote mutator. Adds one rule per coverage-gap token
/// named by at least ceil(k/2) of the k diagnostics; pure execution-variance
/// batches produce no edit. Tokens the playbook already covers are skipped.
pub struct ScriptedMutator {
    pub section: String,
}

impl Default for ScriptedMutator {
    fn default() -> Self {
        ScriptedMutator {
            section: "rules".into(),
        }
    }
}

pub fn rule_content(token: &str) -> String {
    format!("Always apply the practice '{token}' when the task demands it.")
}

impl MutatorBackend for ScriptedMutator {
    fn propose(
        &self,
        playbook: &Playbook,
        diagnostics: &[Diagnostic],
        _state: Option<&StateDoc>,
    ) -> Result<ProposedMutation, MutateError> {
        let k = diagnostics.len();
        let threshold = k.div_ceil(2);
        let actionable: Vec<&Diagnostic> = diagnostics
            .iter()
            .filter(|d| d.attribution == Attribution::ActionableGap)
            .collect();
        if actionable.is_empty() {
            return Ok(ProposedMutation {
                edits: Vec::new(),
                rationale: format!(
                    "no actionable diagnostics among {k}; biasing to no-op to avoid edits from noise"
                ),
            });
        }
        let mut counts: std::collections::BTreeMap<String, usize> = Default::default();
        for diag in &actionable {
            let mut tokens = diag.gap_tokens();
            tokens.sort();
            tokens.dedup();
            for token in tokens {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= threshold)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut edits = Vec::new();
        let mut noted = Vec::new();
        for (token, count) in &ranked {
            if playbook.contains_text(token) {
                continue;
            }
            noted.push(format!("{token} ({count}/{k})"));
            edits.push(EditOp::Add {
                section: self.section.clone(),
                content: rule_content(token),
            });
        }
        let rationale = if edits.is_empty() {
            format!("no coverage gap reached the majority threshold of {threshold}/{k}")
        } else {
            format!("recurring coverage gaps: {}", noted.join(", "))
        };
        Ok(ProposedMutation { edits, rationale })
    }
}

// ---------------------------------------------------------------------------
// Model-backed backend
// ---------------------------------------------------------------------------

pub struct ModelMutator {
    pub client: ModelClient,
    pub template: String,
    pub retry_budget: u32,
}

impl ModelMutator {
    pub fn new(client: ModelClient) -> Self {
        ModelMutator {
            client,
            template: include_str!("../prompts/mutator.txt").to_string(),
            retry_budget: 2,
        }
    }
}

impl MutatorBackend for ModelMutator {
    fn propose(
        &self,
        playbook: &Playbook,
        diagnostics: &[Diagnostic],
        state: Option<&StateDoc>,
    ) -> Result<ProposedMutation, MutateError> {
        let diag_text = diagnostics
            .iter()
            .enumerate()
            .map(|(i, d)| {
                format!(
                    "diagnostic {i} (task {task}, {mode:?}): attribution={attr:?} | root cause: {root} | coverage gap: {gap}",
                    task = d.source_task_id,
                    mode = d.mode,
                    attr = d.attribution,
                    root = d.root_cause,
                    gap = d.coverage_gap,
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        let state_text = state
            .map(|s| s.render_for_mutator())
            .unwrap_or_else(|| "(no optimizer state)".into());
        let prompt = model::apply_template(
            &self.template,
            &[
                ("playbook", &playbook.render()),
                ("diagnostics", &diag_text),
                ("state", &state_text),
            ],
        );
        let messages = [model::ChatMessage::user(prompt)];
        let attempts = self.retry_budget + 1;
        let mut last_err = String::new();
        for _ in 0..attempts {
            let text = self.client.complete(&messages, None)?;
            match parse_edits_block(&text) {
                Ok(p) => return Ok(p),
                Err(e) => last_err = e,
            }
        }
        Err(MutateError::MalformedModelOutput {
            attempts,
            detail: last_err,
        })
    }
}

/// Parse the fenced `edits` block: an optional `rationale:` line followed by
/// edit lines (`add <section>: <content>`, `update <id>: <content>`,
/// `delete <id>`), or a single `noop` line.
pub fn parse_edits_block(text: &str) -> Result<ProposedMutation, String> {
    let block = model::extract_fenced_block(text, "edits")
        .ok_or_else(|| "no fenced edits block found".to_string())?;
    let mut rationale = String::new();
    let mut edits = Vec::new();
    let mut saw_noop = false;
    for line in block.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(value) = line.strip_prefix("rationale:") {
            rationale = value.trim().to_string();
            continue;
        }
        if line == "noop" {
            saw_noop = true;
            continue;
        }
        edits.push(parse_edit_line(line)?);
    }
    if saw_noop && !edits.is_empty() {
        return Err("block mixes 'noop' with edit lines".into());
    }
    Ok(ProposedMutation { edits, rationale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reflection::ReflectionMode;

    fn diag(attr: Attribution, gap: &str) -> Diagnostic {
        Diagnostic {
            attribution: attr,
            root_cause: format!("cause: {gap}"),
            coverage_gap: gap.into(),
            cited_entry_ids: vec![],
            source_task_id: "t".into(),
            mode: ReflectionMode::Single,
        }
    }

    fn gap(token: &str) -> Diagnostic {
        diag(Attribution::ActionableGap, token)
    }

    #[test]
    fn empty_diagnostics_is_noop_without_consulting_backend() {
        struct Panicking;
        impl MutatorBackend for Panicking {
            fn propose(
                &self,
                _: &Playbook,
                _: &[Diagnostic],
                _: Option<&StateDoc>,
            ) -> Result<ProposedMutation, MutateError> {
                panic!("backend must not be consulted for an empty batch");
            }
        }
        let result = mutate(&Panicking, &Playbook::empty(), &[], None, DEFAULT_EDIT_CAP).unwrap();
        assert!(result.no_op);
        assert!(result.edits.is_empty());
    }

    #[test]
    fn majority_gap_token_becomes_one_add() {
        let diags = vec![gap("paginate"), gap("paginate"), gap("paginate")];
        let result = mutate(
            &ScriptedMutator::default(),
            &Playbook::empty(),
            &diags,
            None,
            DEFAULT_EDIT_CAP,
        )
        .unwrap();
        assert_eq!(result.edits.len(), 1);
        match &result.edits[0] {
            EditOp::Add { content, .. } => assert!(content.contains("paginate")),
            other => panic!("expected add, got {other:?}"),
        }
    }

    #[test]
    fn minority_tokens_are_filtered() {
        let diags = vec![gap("paginate"), gap("paginate"), gap("retry")];
        let result = mutate(
            &ScriptedMutator::default(),
            &Playbook::empty(),
            &diags,
            None,
            DEFAULT_EDIT_CAP,
        )
        .unwrap();
        let contents: Vec<String> = result
            .edits
            .iter()
            .map(format_edit)
            .collect();
        assert_eq!(contents.len(), 1);
        assert!(contents[0].contains("paginate"));
        assert!(!contents[0].contains("retry"));
    }

    #[test]
    fn all_execution_variance_is_noop() {
        let diags = vec![
            diag(Attribution::ExecutionVariance, ""),
            diag(Attribution::ExecutionVariance, ""),
            diag(Attribution::ExecutionVariance, ""),
        ];
        let result = mutate(
            &ScriptedMutator::default(),
            &Playbook::empty(),
            &diags,
            None,
            DEFAULT_EDIT_CAP,
        )
        .unwrap();
        assert!(result.no_op);
    }

    #[test]
    fn covered_tokens_are_skipped() {
        let pb = Playbook::empty()
            .apply_edits(&[EditOp::Add {
                section: "rules".into(),
                content: rule_content("paginate"),
            }])
            .unwrap();
        let result = mutate(
            &ScriptedMutator::default(),
            &pb,
            &[gap("paginate")],
            None,
            DEFAULT_EDIT_CAP,
        )
        .unwrap();
        assert!(result.no_op);
    }

    #[test]
    fn duplicate_adds_are_coalesced() {
        struct Duplicating;
        impl MutatorBackend for Duplicating {
            fn propose(
                &self,
                _: &Playbook,
                _: &[Diagnostic],
                _: Option<&StateDoc>,
            ) -> Result<ProposedMutation, MutateError> {
                Ok(ProposedMutation {
                    edits: vec![
                        EditOp::Add {
                            section: "rules".into(),
                            content: "same rule".into(),
                        },
                        EditOp::Add {
                            section: "rules".into(),
                            content: "same rule".into(),
                        },
                    ],
                    rationale: "test".into(),
                })
            }
        }
        let result = mutate(
            &Duplicating,
            &Playbook::empty(),
            &[gap("x")],
            None,
            DEFAULT_EDIT_CAP,
        )
        .unwrap();
        assert_eq!(result.edits.len(), 1);
        assert_eq!(result.dropped.len(), 1);
        assert!(result.dropped[0].reason.contains("coalesced"));
    }

    #[test]
    fn invalid_edits_dropped_individually() {
        struct Mixed;
        impl MutatorBackend for Mixed {
            fn propose(
                &self,
                _: &Playbook,
                _: &[Diagnostic],
                _: Option<&StateDoc>,
            ) -> Result<ProposedMutation, MutateError> {
                Ok(ProposedMutation {
                    edits: vec![
                        EditOp::Update {
                            id: EntryId(99),
                            content: "nope".into(),
                        },
                        EditOp::Add {
                            section: "rules".into(),
                            content: "good rule".into(),
                        },
                    ],
                    rationale: "test".into(),
                })
            }
        }
        let result = mutate(
            &Mixed,
            &Playbook::empty(),
            &[gap("x")],
            None,
            DEFAULT_EDIT_CAP,
        )
        .unwrap();
        assert_eq!(result.edits.len(), 1);
        assert_eq!(result.dropped.len(), 1);
        assert!(result.dropped[0].reason.contains("unknown entry id 99"));
        assert!(!result.no_op);
    }

    #[test]
    fn edit_cap_truncates() {
        struct Chatty;
        impl MutatorBackend for Chatty {
            fn propose(
                &self,
                _: &Playbook,
                _: &[Diagnostic],
                _: Option<&StateDoc>,
            ) -> Result<ProposedMutation, MutateError> {
                Ok(ProposedMutation {
                    edits: (0..12)
                        .map(|i| EditOp::Add {
                            section: "rules".into(),
                            content: format!("rule {i}"),
                        })
                        .collect(),
                    rationale: "test".into(),
                })
            }
        }
        let result = mutate(&Chatty, &Playbook::empty(), &[gap("x")], None, 8).unwrap();
        assert_eq!(result.edits.len(), 8);
        assert_eq!(result.dropped.len(), 4);
    }

    #[test]
    fn apply_mutation_noop_keeps_version() {
        let pb = Playbook::empty()
            .apply_edits(&[EditOp::Add {
                section: "rules".into(),
                content: "a".into(),
            }])
            .unwrap();
        let applied = apply_mutation(&pb, &MutationResult::noop("nothing")).unwrap();
        assert_eq!(applied, pb);
    }

    #[test]
    fn repeated_scripted_mutations_add_each_majority_token_once() {
        let mut pb = Playbook::empty();
        for _ in 0..10 {
            let diags = vec![gap("paginate"), gap("retry"), gap("paginate")];
            let result =
                mutate(&ScriptedMutator::default(), &pb, &diags, None, DEFAULT_EDIT_CAP).unwrap();
            pb = apply_mutation(&pb, &result).unwrap();
        }
        // both tokens reach the 2/3 majority at least once; each added once
        let paginate_rules = pb
            .entries()
            .filter(|e| e.content.contains("paginate"))
            .count();
        let retry_rules = pb.entries().filter(|e| e.content.contains("retry")).count();
        assert_eq!(paginate_rules, 1);
        assert_eq!(retry_rules, 0); // 1/3 never reaches ceil(3/2)=2
    }

    #[test]
    fn scripted_edits_stay_local_to_diagnosed_gaps() {
        // the scripted backend never rewrites or deletes; every edit is an
        // addition whose content embeds a token named by some diagnostic
        let pb = Playbook::empty()
            .apply_edits(&[EditOp::Add {
                section: "rules".into(),
                content: "unrelated existing entry".into(),
            }])
            .unwrap();
        let diags = vec![gap("paginate"), gap("retry , paginate")];
        let result =
            mutate(&ScriptedMutator::default(), &pb, &diags, None, DEFAULT_EDIT_CAP).unwrap();
        let named: Vec<String> = diags.iter().flat_map(|d| d.gap_tokens()).collect();
        for edit in &result.edits {
            match edit {
                EditOp::Add { content, .. } => {
                    assert!(named.iter().any(|t| content.contains(t.as_str())))
                }
                other => panic!("scripted mutator must only add, got {other:?}"),
            }
        }
    }

    #[test]
    fn parse_edits_block_round_trips_formatting() {
        let ops = vec![
            EditOp::Add {
                section: "rules".into(),
                content: "do the thing".into(),
            },
            EditOp::Update {
                id: EntryId(3),
                content: "fixed".into(),
            },
            EditOp::Delete { id: EntryId(4) },
        ];
        let block = format!(
            "```edits\nrationale: because\n{}\n```",
            ops.iter().map(format_edit).collect::<Vec<_>>().join("\n")
        );
        let parsed = parse_edits_block(&block).unwrap();
        assert_eq!(parsed.edits, ops);
        assert_eq!(parsed.rationale, "because");
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(parse_edits_block("no block here").is_err());
        assert!(parse_edits_block("```edits\nfrobnicate 3\n```").is_err());
        assert!(parse_edits_block("```edits\nnoop\ndelete 1\n```").is_err());
    }
}
