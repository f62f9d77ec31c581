//! The learned context artifact: named sections of addressable entries.
//!
//! Playbooks are immutable values. Editing returns a fresh playbook with the
//! version bumped; entry ids come from a global monotone counter and are never
//! reused after deletion, so a diagnostic citing id 3 stays unambiguous across
//! the whole run.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a single playbook entry. Globally unique within a playbook's
/// lifetime, including deleted entries.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct EntryId(pub u64);

impl fmt::Display for EntryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub id: EntryId,
    pub content: String,
    /// Times this entry was cited in a passing annotated trace.
    #[serde(default)]
    pub helpful: u32,
    /// Times a failure diagnostic named this entry.
    #[serde(default)]
    pub harmful: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Playbook {
    pub version: u64,
    pub next_entry_id: u64,
    pub sections: Vec<Section>,
}

/// A localized edit. The only ways a mutator is allowed to change a playbook.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    Update { id: EntryId, content: String },
    Add { section: String, content: String },
    Delete { id: EntryId },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EditError {
    /// The edit references an id that is not in the playbook, usually a sign
    /// of a stale diagnostic produced against an older version.
    #[error("unknown entry id {0}")]
    UnknownEntryId(EntryId),
    #[error("entry content must be non-empty")]
    EmptyContent,
    #[error("section name must be non-empty")]
    EmptySectionName,
}

impl Default for Playbook {
    fn default() -> Self {
        Self::empty()
    }
}

impl Playbook {
    pub fn empty() -> Self {
        Playbook {
            version: 0,
            next_entry_id: 0,
            sections: Vec::new(),
        }
    }

    pub fn entry(&self, id: EntryId) -> Option<&Entry> {
        self.sections
            .iter()
            .flat_map(|s| s.entries.iter())
            .find(|e| e.id == id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &Entry> {
        self.sections.iter().flat_map(|s| s.entries.iter())
    }

    pub fn entry_ids(&self) -> BTreeSet<EntryId> {
        self.entries().map(|e| e.id).collect()
    }

    pub fn entry_count(&self) -> usize {
        self.sections.iter().map(|s| s.entries.len()).sum()
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Substring check against every entry's content. This is what the
    /// hermetic environment means by "the playbook contains a token".
    pub fn contains_text(&self, needle: &str) -> bool {
        self.entries().any(|e| e.content.contains(needle))
    }

    /// Apply edits in order, returning a fresh playbook. Atomic: any invalid
    /// edit fails the whole call and the input is untouched (it is immutable
    /// anyway). The version bumps exactly when the edit list is non-empty.
    pub fn apply_edits(&self, edits: &[EditOp]) -> Result<Playbook, EditError> {
        let mut next = self.clone();
        for edit in edits {
            match edit {
                EditOp::Update { id, content } => {
                    let content = normalize_content(content)?;
                    let entry = next
                        .sections
                        .iter_mut()
                        .flat_map(|s| s.entries.iter_mut())
                        .find(|e| e.id == *id)
                        .ok_or(EditError::UnknownEntryId(*id))?;
                    entry.content = content;
                }
                EditOp::Add { section, content } => {
                    let content = normalize_content(content)?;
                    if section.trim().is_empty() {
                        return Err(EditError::EmptySectionName);
                    }
                    let id = EntryId(next.next_entry_id);
                    next.next_entry_id += 1;
                    let entry = Entry {
                        id,
                        content,
                        helpful: 0,
                        harmful: 0,
                    };
                    match next.sections.iter_mut().find(|s| s.name == *section) {
                        Some(s) => s.entries.push(entry),
                        None => next.sections.push(Section {
                            name: section.clone(),
                            entries: vec![entry],
                        }),
                    }
                }
                EditOp::Delete { id } => {
                    let mut found = false;
                    for s in next.sections.iter_mut() {
                        if let Some(pos) = s.entries.iter().position(|e| e.id == *id) {
                            s.entries.remove(pos);
                            found = true;
                            break;
                        }
                    }
                    if !found {
                        return Err(EditError::UnknownEntryId(*id));
                    }
                }
            }
        }
        if !edits.is_empty() {
            next.version += 1;
        }
        Ok(next)
    }

    /// Counter bumps are trainer bookkeeping, not edits: no version change.
    pub fn bump_counters(&self, helpful: &[EntryId], harmful: &[EntryId]) -> Playbook {
        let mut next = self.clone();
        for s in next.sections.iter_mut() {
            for e in s.entries.iter_mut() {
                e.helpful += helpful.iter().filter(|id| **id == e.id).count() as u32;
                e.harmful += harmful.iter().filter(|id| **id == e.id).count() as u32;
            }
        }
        next
    }

    /// Deterministic plain rendering: the text injected under the playbook
    /// header of the agent's prompt. Byte-identical for equal playbooks.
    pub fn render(&self) -> String {
        let mut out = String::from("# Playbook\n");
        for section in &self.sections {
            out.push('\n');
            out.push_str("## ");
            out.push_str(&section.name);
            out.push('\n');
            for entry in &section.entries {
                out.push_str(&format!("[{}] {}\n", entry.id, one_line(&entry.content)));
            }
        }
        out
    }

    /// Instrumented rendering: each entry wrapped in a tag carrying its id,
    /// prefixed by instructions asking the agent to cite consulted entries and
    /// flag missing guidance. Stripping the tags recovers `render` exactly.
    pub fn render_annotated(&self) -> String {
        let mut out = String::from("# Playbook\n");
        out.push_str(ANNOTATION_PREAMBLE);
        for section in &self.sections {
            out.push('\n');
            out.push_str("## ");
            out.push_str(&section.name);
            out.push('\n');
            for entry in &section.entries {
                out.push_str(&format!(
                    "<entry id=\"{}\">{}</entry>\n",
                    entry.id,
                    one_line(&entry.content)
                ));
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Playbook, PlaybookIoError> {
        let text = std::fs::read_to_string(path).map_err(|e| PlaybookIoError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let pb: Playbook = serde_json::from_str(&text).map_err(|e| PlaybookIoError::Parse {
            path: path.display().to_string(),
            source: e,
        })?;
        pb.validate()?;
        Ok(pb)
    }

    pub fn save(&self, path: &Path) -> Result<(), PlaybookIoError> {
        let text = serde_json::to_string_pretty(self).expect("playbook serializes");
        std::fs::write(path, text).map_err(|e| PlaybookIoError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Structural invariants enforced on load (constructed values hold them
    /// by construction).
    pub fn validate(&self) -> Result<(), PlaybookIoError> {
        let mut names = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for s in &self.sections {
            if s.name.trim().is_empty() {
                return Err(PlaybookIoError::Invalid("empty section name".into()));
            }
            if !names.insert(s.name.clone()) {
                return Err(PlaybookIoError::Invalid(format!(
                    "duplicate section name '{}'",
                    s.name
                )));
            }
            for e in &s.entries {
                if e.content.trim().is_empty() {
                    return Err(PlaybookIoError::Invalid(format!(
                        "entry {} has empty content",
                        e.id
                    )));
                }
                if !ids.insert(e.id) {
                    return Err(PlaybookIoError::Invalid(format!("duplicate entry id {}", e.id)));
                }
                if e.id.0 >= self.next_entry_id {
                    return Err(PlaybookIoError::Invalid(format!(
                        "entry id {} not below next_entry_id {}",
                        e.id, self.next_entry_id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PlaybookIoError {
    #[error("cannot read playbook at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed playbook at {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid playbook: {0}")]
    Invalid(String),
}

pub const ANNOTATION_PREAMBLE: &str = "<playbook-instructions>\n\
Each entry below is wrapped in a tag carrying its id. While you work, cite \
the id of every entry you consult and flag any point where the playbook gave \
no guidance, using lines of the form:\n\
Consulted: [id, id, ...]\n\
Missing: <what guidance was absent>\n\
</playbook-instructions>\n";

fn normalize_content(content: &str) -> Result<String, EditError> {
    let trimmed = content.trim();
    if trimmed.is_empty() {
        return Err(EditError::EmptyContent);
    }
    Ok(trimmed.to_string())
}

/// Entries render on a single line each; embedded newlines are flattened.
fn one_line(content: &str) -> String {
    content.replace(['\n', '\r'], " ")
}

/// Remove the instrumentation from an annotated rendering, recovering the
/// plain rendering of the same playbook.
pub fn strip_annotations(annotated: &str) -> String {
    let without_preamble = annotated.replacen(ANNOTATION_PREAMBLE, "", 1);
    let mut out = String::new();
    for line in without_preamble.lines() {
        if let Some(rest) = line.strip_prefix("<entry id=\"") {
            if let Some((id_part, body)) = rest.split_once("\">") {
                if let Some(content) = body.strip_suffix("</entry>") {
                    out.push_str(&format!("[{id_part}] {content}\n"));
                    continue;
                }
            }
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

/// Compare playbooks by visible content: non-empty sections in order, each as
/// (name, entry contents in order). Ids, counters, version and empty sections
/// are ignored; this is the equivalence `diff` round-trips under, since ids
/// assigned by replayed Adds depend on counter history and localized edits
/// cannot drop an emptied section.
pub fn content_eq(a: &Playbook, b: &Playbook) -> bool {
    content_view(a) == content_view(b)
}

fn content_view(p: &Playbook) -> Vec<(String, Vec<String>)> {
    p.sections
        .iter()
        .filter(|s| !s.entries.is_empty())
        .map(|s| {
            (
                s.name.clone(),
                s.entries.iter().map(|e| e.content.clone()).collect(),
            )
        })
        .collect()
}

/// Compute edits turning `old` into a playbook content-equal to `new`.
///
/// Tries a minimal id-based diff first (updates for changed contents, deletes
/// for dropped ids, adds for new ids) and verifies it; if verification fails
/// (e.g. entry order diverged in ways appends cannot express), falls back to
/// a full rebuild, which is always content-faithful.
pub fn diff(old: &Playbook, new: &Playbook) -> Vec<EditOp> {
    let minimal = minimal_diff(old, new);
    if let Ok(applied) = old.apply_edits(&minimal) {
        if content_eq(&applied, new) {
            return minimal;
        }
    }
    rebuild_diff(old, new)
}

fn minimal_diff(old: &Playbook, new: &Playbook) -> Vec<EditOp> {
    let mut edits = Vec::new();
    let old_ids = old.entry_ids();

    // Section membership matters: an id that moved sections cannot be
    // expressed as an Update, so treat it as delete + add.
    let old_loc: std::collections::BTreeMap<EntryId, (&str, &str)> = old
        .sections
        .iter()
        .flat_map(|s| {
            s.entries
                .iter()
                .map(move |e| (e.id, (s.name.as_str(), e.content.as_str())))
        })
        .collect();
    let new_loc: std::collections::BTreeMap<EntryId, (&str, &str)> = new
        .sections
        .iter()
        .flat_map(|s| {
            s.entries
                .iter()
                .map(move |e| (e.id, (s.name.as_str(), e.content.as_str())))
        })
        .collect();

    for id in old_ids.iter() {
        match new_loc.get(id) {
            None => edits.push(EditOp::Delete { id: *id }),
            Some((new_sec, _)) if *new_sec != old_loc[id].0 => {
                edits.push(EditOp::Delete { id: *id })
            }
            Some((_, new_content)) if *new_content != old_loc[id].1 => {
                edits.push(EditOp::Update {
                    id: *id,
                    content: (*new_content).to_string(),
                });
            }
            Some(_) => {}
        }
    }
    for section in &new.sections {
        for entry in &section.entries {
            let needs_add = match old_loc.get(&entry.id) {
                None => true,
                Some((old_sec, _)) => *old_sec != section.name,
            };
            if needs_add {
                edits.push(EditOp::Add {
                    section: section.name.clone(),
                    content: entry.content.clone(),
                });
            }
        }
    }
    edits
}

fn rebuild_diff(old: &Playbook, new: &Playbook) -> Vec<EditOp> {
    let mut edits: Vec<EditOp> = old
        .entry_ids()
        .into_iter()
        .map(|id| EditOp::Delete { id })
        .collect();
    for section in &new.sections {
        for entry in &section.entries {
            edits.push(EditOp::Add {
                section: section.name.clone(),
                content: entry.content.clone(),
            });
        }
    }
    edits
}

#[cfg(test)]
mod tests {
    use super::*;

    fn add(section: &str, content: &str) -> EditOp {
        EditOp::Add {
            section: section.into(),
            content: content.into(),
        }
    }

    #[test]
    fn first_add_assigns_id_zero_and_bumps_version() {
        let p = Playbook::empty()
            .apply_edits(&[add("rules", "always paginate")])
            .unwrap();
        assert_eq!(p.entry_count(), 1);
        assert_eq!(p.version, 1);
        assert_eq!(p.sections[0].entries[0].id, EntryId(0));
        assert_eq!(p.next_entry_id, 1);
    }

    #[test]
    fn empty_edit_list_is_identity() {
        let p = Playbook::empty().apply_edits(&[add("rules", "x")]).unwrap();
        let q = p.apply_edits(&[]).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.version, q.version);
    }

    #[test]
    fn deleted_ids_are_never_reused() {
        let p = Playbook::empty()
            .apply_edits(&[add("rules", "a"), add("rules", "b")])
            .unwrap();
        let q = p
            .apply_edits(&[EditOp::Delete { id: EntryId(0) }, add("rules", "x")])
            .unwrap();
        let ids = q.entry_ids();
        assert!(ids.contains(&EntryId(1)));
        assert!(ids.contains(&EntryId(2)));
        assert!(!ids.contains(&EntryId(0)));
        assert_eq!(q.next_entry_id, 3);
    }

    #[test]
    fn unknown_id_is_rejected_atomically() {
        let p = Playbook::empty().apply_edits(&[add("rules", "a")]).unwrap();
        let err = p
            .apply_edits(&[
                add("rules", "b"),
                EditOp::Delete { id: EntryId(42) },
            ])
            .unwrap_err();
        assert_eq!(err, EditError::UnknownEntryId(EntryId(42)));
    }

    #[test]
    fn empty_content_is_rejected() {
        let err = Playbook::empty()
            .apply_edits(&[add("rules", "   ")])
            .unwrap_err();
        assert_eq!(err, EditError::EmptyContent);
    }

    #[test]
    fn update_preserves_order_and_counters() {
        let p = Playbook::empty()
            .apply_edits(&[add("rules", "a"), add("rules", "b")])
            .unwrap();
        let p = p.bump_counters(&[EntryId(0)], &[]);
        let q = p
            .apply_edits(&[EditOp::Update {
                id: EntryId(0),
                content: "a2".into(),
            }])
            .unwrap();
        assert_eq!(q.sections[0].entries[0].content, "a2");
        assert_eq!(q.sections[0].entries[0].helpful, 1);
        assert_eq!(q.sections[0].entries[1].content, "b");
    }

    #[test]
    fn render_empty_is_header_only() {
        assert_eq!(Playbook::empty().render(), "# Playbook\n");
    }

    #[test]
    fn render_lists_entries_with_id_prefix() {
        let p = Playbook::empty()
            .apply_edits(&[add("rules", "a"), add("rules", "b")])
            .unwrap();
        assert_eq!(p.render(), "# Playbook\n\n## rules\n[0] a\n[1] b\n");
    }

    #[test]
    fn annotated_empty_is_preamble_only() {
        let p = Playbook::empty();
        assert_eq!(
            p.render_annotated(),
            format!("# Playbook\n{ANNOTATION_PREAMBLE}")
        );
    }

    #[test]
    fn annotated_wraps_each_entry_once() {
        let p = Playbook {
            version: 1,
            next_entry_id: 4,
            sections: vec![Section {
                name: "rules".into(),
                entries: vec![Entry {
                    id: EntryId(3),
                    content: "paginate".into(),
                    helpful: 0,
                    harmful: 0,
                }],
            }],
        };
        let ann = p.render_annotated();
        assert_eq!(ann.matches("<entry id=\"3\">").count(), 1);
        assert_eq!(ann.matches("</entry>").count(), 1);
    }

    #[test]
    fn strip_recovers_plain_render() {
        let p = Playbook::empty()
            .apply_edits(&[add("rules", "a"), add("checks", "b c"), add("rules", "d")])
            .unwrap();
        assert_eq!(strip_annotations(&p.render_annotated()), p.render());
    }

    #[test]
    fn diff_identity_is_empty() {
        let p = Playbook::empty()
            .apply_edits(&[add("rules", "a")])
            .unwrap();
        assert!(diff(&p, &p).is_empty());
    }

    #[test]
    fn diff_single_add_round_trips() {
        let p = Playbook::empty().apply_edits(&[add("rules", "a")]).unwrap();
        let q = p.apply_edits(&[add("rules", "b")]).unwrap();
        let d = diff(&p, &q);
        assert_eq!(d.len(), 1);
        assert!(matches!(d[0], EditOp::Add { .. }));
        assert!(content_eq(&p.apply_edits(&d).unwrap(), &q));
    }

    #[test]
    fn diff_round_trips_over_random_edit_sequences() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(11);
        for _ in 0..50 {
            let mut p = Playbook::empty();
            // random history, then a random suffix to diff against
            for _ in 0..rng.gen_range(0..12) {
                p = apply_random_edit(&mut rng, &p);
            }
            let mut q = p.clone();
            for _ in 0..rng.gen_range(0..12) {
                q = apply_random_edit(&mut rng, &q);
            }
            let d = diff(&p, &q);
            let applied = p.apply_edits(&d).expect("diff edits apply");
            assert!(content_eq(&applied, &q), "diff round trip failed");
        }
    }

    fn apply_random_edit<R: rand::Rng>(rng: &mut R, p: &Playbook) -> Playbook {
        let sections = ["rules", "checks", "notes"];
        let ids: Vec<EntryId> = p.entry_ids().into_iter().collect();
        let choice = rng.gen_range(0..3);
        let edit = if choice == 0 || ids.is_empty() {
            EditOp::Add {
                section: sections[rng.gen_range(0..sections.len())].to_string(),
                content: format!("rule-{}", rng.gen_range(0..1000)),
            }
        } else if choice == 1 {
            EditOp::Update {
                id: ids[rng.gen_range(0..ids.len())],
                content: format!("rule-{}", rng.gen_range(0..1000)),
            }
        } else {
            EditOp::Delete {
                id: ids[rng.gen_range(0..ids.len())],
            }
        };
        p.apply_edits(&[edit]).unwrap()
    }

    /// Reference implementation: plain maps, no invariant machinery. Replays
    /// the same edits and must land on the same final state.
    #[derive(Default)]
    struct ReferenceBook {
        sections: Vec<(String, Vec<(u64, String)>)>,
        next_id: u64,
        version: u64,
    }

    impl ReferenceBook {
        fn apply(&mut self, edits: &[EditOp]) {
            for edit in edits {
                match edit {
                    EditOp::Add { section, content } => {
                        let id = self.next_id;
                        self.next_id += 1;
                        match self.sections.iter_mut().find(|(n, _)| n == section) {
                            Some((_, entries)) => entries.push((id, content.trim().to_string())),
                            None => self
                                .sections
                                .push((section.clone(), vec![(id, content.trim().to_string())])),
                        }
                    }
                    EditOp::Update { id, content } => {
                        for (_, entries) in self.sections.iter_mut() {
                            for (eid, c) in entries.iter_mut() {
                                if *eid == id.0 {
                                    *c = content.trim().to_string();
                                }
                            }
                        }
                    }
                    EditOp::Delete { id } => {
                        for (_, entries) in self.sections.iter_mut() {
                            entries.retain(|(eid, _)| *eid != id.0);
                        }
                    }
                }
            }
            if !edits.is_empty() {
                self.version += 1;
            }
        }

        fn view(&self) -> Vec<(String, Vec<(u64, String)>)> {
            self.sections.clone()
        }
    }

    #[test]
    fn random_edit_replay_matches_reference_implementation() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(23);
        for _ in 0..50 {
            let mut playbook = Playbook::empty();
            let mut reference = ReferenceBook::default();
            for _ in 0..rng.gen_range(1..20) {
                let ids: Vec<EntryId> = playbook.entry_ids().into_iter().collect();
                let n_edits = rng.gen_range(0..3);
                let mut edits = Vec::new();
                for _ in 0..n_edits {
                    let choice = rng.gen_range(0..3);
                    edits.push(if choice == 0 || ids.is_empty() {
                        EditOp::Add {
                            section: ["rules", "checks"][rng.gen_range(0..2)].to_string(),
                            content: format!("rule-{}", rng.gen_range(0..50)),
                        }
                    } else if choice == 1 {
                        EditOp::Update {
                            id: ids[rng.gen_range(0..ids.len())],
                            content: format!("rule-{}", rng.gen_range(0..50)),
                        }
                    } else {
                        EditOp::Delete {
                            id: ids[rng.gen_range(0..ids.len())],
                        }
                    });
                }
                // deletes may target already-deleted ids within one batch;
                // only apply batches the typed implementation accepts
                if let Ok(next) = playbook.apply_edits(&edits) {
                    playbook = next;
                    reference.apply(&edits);
                }
            }
            let view: Vec<(String, Vec<(u64, String)>)> = playbook
                .sections
                .iter()
                .map(|s| {
                    (
                        s.name.clone(),
                        s.entries.iter().map(|e| (e.id.0, e.content.clone())).collect(),
                    )
                })
                .collect();
            assert_eq!(view, reference.view());
            assert_eq!(playbook.next_entry_id, reference.next_id);
            assert_eq!(playbook.version, reference.version);
        }
    }

    #[test]
    fn load_rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"version":1,"next_entry_id":2,"sections":[{"name":"a","entries":[
                {"id":0,"content":"x"},{"id":0,"content":"y"}]}]}"#,
        )
        .unwrap();
        assert!(Playbook::load(&path).is_err());
    }
}
