//! Concept bank, agent memory, editable matrix, and persistence.
//!
//! The bank owns the ordered set of active concepts the model scores against.
//! The memory keeps the agent's full trajectory: every generated concept
//! (`generated`), every deleted one (`deleted`), every fact verdict
//! (`fact_verified`), and a snapshot of the bank at each version. Together
//! they give the agent long-term, traceable state across iterations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Marker used as `source_label` for concepts generated from a
/// multi-label (indistinguishable pair) prompt.
pub const MULTI_LABEL_SOURCE: &str = "multi-label";

/// Stable identifier for a concept: hex prefix of the hash of its
/// normalized text. Same text always yields the same id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConceptId(pub String);

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Lowercase and collapse runs of whitespace. Concept identity is defined
/// over this normal form, so "Red Crest" and "red  crest" are one concept.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Hex-encoded SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl ConceptId {
    /// Derive the id for a concept phrase.
    pub fn from_text(text: &str) -> Self {
        let norm = normalize_text(text);
        ConceptId(sha256_hex(norm.as_bytes())[..16].to_string())
    }
}

/// Lifecycle of a concept. Transitions only move forward:
/// candidate -> active -> deleted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptStatus {
    Candidate,
    Active,
    Deleted,
}

/// A single concept phrase with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: ConceptId,
    pub text: String,
    /// Label name used in the generating prompt, or [`MULTI_LABEL_SOURCE`].
    pub source_label: String,
    pub status: ConceptStatus,
    pub created_iteration: u32,
}

impl Concept {
    pub fn new(text: &str, source_label: &str, iteration: u32) -> Self {
        Concept {
            id: ConceptId::from_text(text),
            text: normalize_text(text),
            source_label: source_label.to_string(),
            status: ConceptStatus::Candidate,
            created_iteration: iteration,
        }
    }
}

/// A classification label, optionally with a superclass used in
/// generation prompts ("bird" for "Cardinal").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMeta {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superclass: Option<String>,
}

impl LabelMeta {
    pub fn new(name: &str) -> Self {
        LabelMeta {
            name: name.to_string(),
            superclass: None,
        }
    }

    pub fn with_superclass(name: &str, superclass: &str) -> Self {
        LabelMeta {
            name: name.to_string(),
            superclass: Some(superclass.to_string()),
        }
    }
}

/// Versioned ordered set of active concepts plus the label list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBank {
    pub version: u64,
    pub labels: Vec<LabelMeta>,
    pub concepts: Vec<Concept>,
}

impl ConceptBank {
    /// Empty bank at version 0. Label names must be unique.
    pub fn new(labels: Vec<LabelMeta>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for l in &labels {
            if !seen.insert(l.name.clone()) {
                return Err(Error::DuplicateLabel(l.name.clone()));
            }
        }
        Ok(ConceptBank {
            version: 0,
            labels,
            concepts: Vec::new(),
        })
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.name == name)
    }

    pub fn contains_concept(&self, id: &ConceptId) -> bool {
        self.concepts.iter().any(|c| &c.id == id)
    }

    pub fn concept(&self, id: &ConceptId) -> Option<&Concept> {
        self.concepts.iter().find(|c| &c.id == id)
    }

    /// Canonical JSON rendering; field order is fixed by the struct, so the
    /// same bank always serializes to the same bytes.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bank serialization cannot fail")
    }

    /// Hash of the canonical JSON. Checkpoints pin this to detect a
    /// bank/parameter mismatch at load time.
    pub fn version_hash(&self) -> String {
        sha256_hex(self.to_canonical_json().as_bytes())
    }

    /// Write `bank_v{N}.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<std::path::PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("bank_v{}.json", self.version));
        std::fs::write(&path, self.to_canonical_json())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// LLM verdict for a (label, concept) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    /// Critical, highly prominent feature of the label.
    Critical,
    /// May occasionally appear; typically not significant.
    Occasional,
    /// Factually incompatible with the label.
    Unrelated,
}

/// One record in the append-only memory log.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum MemoryLogRecord {
    Add {
        payload: Vec<Concept>,
        iteration: u32,
        timestamp: String,
    },
    Delete {
        payload: Vec<ConceptId>,
        iteration: u32,
        timestamp: String,
    },
    Verify {
        label: String,
        concept: ConceptId,
        verdict: Verdict,
        iteration: u32,
        timestamp: String,
    },
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// The agent's persistent memory: generated list, deleted list, verdict
/// cache, bank snapshots, and the append-only operation log.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AgentMemory {
    /// Every concept ever generated (M_g), in generation order.
    pub generated: Vec<Concept>,
    /// Every concept ever deleted from the bank (M_d).
    pub deleted: Vec<Concept>,
    /// Verdict cache keyed by (label name, concept id) (M_f).
    pub fact_verified: BTreeMap<String, Verdict>,
    /// Bank snapshot at every version, gap-free and strictly increasing.
    pub bank_history: Vec<ConceptBank>,
    /// Append-only audit log.
    pub log: Vec<MemoryLogRecord>,
}

/// Key encoding for the verdict map: `label\u{1f}concept_id`.
/// BTreeMap over strings keeps serialization order stable.
fn verdict_key(label: &str, concept: &ConceptId) -> String {
    format!("{label}\u{1f}{concept}")
}

impl AgentMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_generated(&self, id: &ConceptId) -> bool {
        self.generated.iter().any(|c| &c.id == id)
    }

    pub fn is_deleted(&self, id: &ConceptId) -> bool {
        self.deleted.iter().any(|c| &c.id == id)
    }

    pub fn verdict(&self, label: &str, concept: &ConceptId) -> Option<Verdict> {
        self.fact_verified.get(&verdict_key(label, concept)).copied()
    }

    pub fn record_verdict(
        &mut self,
        label: &str,
        concept: &ConceptId,
        verdict: Verdict,
        iteration: u32,
    ) {
        self.fact_verified
            .insert(verdict_key(label, concept), verdict);
        self.log.push(MemoryLogRecord::Verify {
            label: label.to_string(),
            concept: concept.clone(),
            verdict,
            iteration,
            timestamp: now_rfc3339(),
        });
    }

    /// Candidates eligible for selection: generated, not active, not deleted.
    pub fn candidate_pool(&self, bank: &ConceptBank) -> Vec<Concept> {
        self.generated
            .iter()
            .filter(|c| !bank.contains_concept(&c.id) && !self.is_deleted(&c.id))
            .cloned()
            .collect()
    }

    fn snapshot(&mut self, bank: &ConceptBank) {
        debug_assert!(
            self.bank_history
                .last()
                .map(|b| b.version + 1 == bank.version)
                .unwrap_or(bank.version == 0),
            "bank history must be gap-free"
        );
        self.bank_history.push(bank.clone());
    }

    /// Record the initial (version 0) bank so history starts complete.
    pub fn record_initial(&mut self, bank: &ConceptBank) {
        if self.bank_history.is_empty() {
            self.snapshot(bank);
        }
    }

    /// Append one JSON line per log record to `path`, then clear the
    /// in-memory buffer that was flushed.
    pub fn append_log(&self, path: &Path, from: usize) -> Result<usize> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        for rec in &self.log[from..] {
            writeln!(f, "{}", serde_json::to_string(rec)?)?;
        }
        Ok(self.log.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Register freshly generated phrases as candidates in M_g.
///
/// Duplicates (an id already generated, active, or deleted) are silently
/// skipped, so the operation is idempotent. The bank itself never changes
/// here; concepts only enter it through selection.
///
/// Returns the concepts actually added.
pub fn add_concepts(
    bank: &ConceptBank,
    memory: &mut AgentMemory,
    phrases: &[String],
    source_label: &str,
    iteration: u32,
) -> Result<Vec<Concept>> {
    let mut added = Vec::new();
    for phrase in phrases {
        if normalize_text(phrase).is_empty() {
            return Err(Error::EmptyInput(
                "concept phrases must be non-empty".to_string(),
            ));
        }
        let concept = Concept::new(phrase, source_label, iteration);
        if memory.is_generated(&concept.id)
            || memory.is_deleted(&concept.id)
            || bank.contains_concept(&concept.id)
        {
            continue;
        }
        memory.generated.push(concept.clone());
        added.push(concept);
    }
    if !added.is_empty() {
        memory.log.push(MemoryLogRecord::Add {
            payload: added.clone(),
            iteration,
            timestamp: now_rfc3339(),
        });
    }
    Ok(added)
}

/// Promote candidate concepts into the bank; bumps the version by one and
/// snapshots the new bank. Ids must refer to generated candidates that are
/// neither active nor deleted.
pub fn activate_concepts(
    bank: &mut ConceptBank,
    memory: &mut AgentMemory,
    ids: &[ConceptId],
) -> Result<()> {
    if ids.is_empty() {
        return Ok(());
    }
    for id in ids {
        if bank.contains_concept(id) || memory.is_deleted(id) {
            return Err(Error::UnknownConcept(format!(
                "{id} is not an eligible candidate"
            )));
        }
        let concept = memory
            .generated
            .iter_mut()
            .find(|c| &c.id == id)
            .ok_or_else(|| Error::UnknownConcept(id.to_string()))?;
        concept.status = ConceptStatus::Active;
        let mut active = concept.clone();
        active.status = ConceptStatus::Active;
        bank.concepts.push(active);
    }
    bank.version += 1;
    memory.snapshot(bank);
    Ok(())
}

/// Remove active concepts from the bank and append them to M_d.
///
/// Deleting an empty list is the identity (no version bump). An id that is
/// not active in the bank is a hard error naming the id.
pub fn delete_concepts(
    bank: &mut ConceptBank,
    memory: &mut AgentMemory,
    ids: &[ConceptId],
    iteration: u32,
) -> Result<()> {
    if ids.is_empty() {
        return Ok(());
    }
    for id in ids {
        if !bank.contains_concept(id) {
            return Err(Error::UnknownConcept(id.to_string()));
        }
    }
    for id in ids {
        let pos = bank
            .concepts
            .iter()
            .position(|c| &c.id == id)
            .expect("checked above");
        let mut concept = bank.concepts.remove(pos);
        concept.status = ConceptStatus::Deleted;
        if let Some(g) = memory.generated.iter_mut().find(|c| &c.id == id) {
            g.status = ConceptStatus::Deleted;
        }
        memory.deleted.push(concept);
    }
    bank.version += 1;
    memory.snapshot(bank);
    memory.log.push(MemoryLogRecord::Delete {
        payload: ids.to_vec(),
        iteration,
        timestamp: now_rfc3339(),
    });
    Ok(())
}

/// N x M binary mask of factually incompatible (label, concept) pairs.
/// Entry (j, k) is 1 exactly when the verdict for (label j, concept k)
/// is `Unrelated`; those concept scores get clamped to <= 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditableMatrix {
    pub entries: Vec<Vec<u8>>,
    pub bank_version: u64,
}

impl EditableMatrix {
    pub fn n_labels(&self) -> usize {
        self.entries.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.entries.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn is_clamped(&self, label: usize, concept: usize) -> bool {
        self.entries[label][concept] == 1
    }

    /// All-zero matrix (no clamping) for ablation runs.
    pub fn all_clear(n_labels: usize, n_concepts: usize, bank_version: u64) -> Self {
        EditableMatrix {
            entries: vec![vec![0; n_concepts]; n_labels],
            bank_version,
        }
    }
}

/// Build the editable matrix from the verdict cache.
///
/// Every (label, active concept) pair must have a verdict; missing pairs
/// are a hard error listing them all.
pub fn build_editable_matrix(memory: &AgentMemory, bank: &ConceptBank) -> Result<EditableMatrix> {
    let mut missing = Vec::new();
    let mut entries = vec![vec![0u8; bank.n_concepts()]; bank.n_labels()];
    for (j, label) in bank.labels.iter().enumerate() {
        for (k, concept) in bank.concepts.iter().enumerate() {
            match memory.verdict(&label.name, &concept.id) {
                Some(Verdict::Unrelated) => entries[j][k] = 1,
                Some(_) => entries[j][k] = 0,
                None => missing.push((label.name.clone(), concept.text.clone())),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingVerdicts(missing));
    }
    Ok(EditableMatrix {
        entries,
        bank_version: bank.version,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank2() -> ConceptBank {
        ConceptBank::new(vec![LabelMeta::new("y1"), LabelMeta::new("y2")]).unwrap()
    }

    fn phrases(ps: &[&str]) -> Vec<String> {
        ps.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn id_is_deterministic_over_normal_form() {
        assert_eq!(
            ConceptId::from_text("Red  Crest"),
            ConceptId::from_text("red crest")
        );
        assert_ne!(
            ConceptId::from_text("red crest"),
            ConceptId::from_text("crest red")
        );
    }

    #[test]
    fn add_twice_dedups_by_id() {
        let bank = bank2();
        let mut mem = AgentMemory::new();
        add_concepts(&bank, &mut mem, &phrases(&["red crest"]), "y1", 0).unwrap();
        add_concepts(&bank, &mut mem, &phrases(&["Red Crest"]), "y1", 0).unwrap();
        assert_eq!(mem.generated.len(), 1);
    }

    #[test]
    fn add_three_fresh_grows_by_three() {
        let bank = bank2();
        let mut mem = AgentMemory::new();
        let added = add_concepts(&bank, &mut mem, &phrases(&["a b", "c d", "e f"]), "y1", 0)
            .unwrap();
        assert_eq!(added.len(), 3);
        assert_eq!(mem.generated.len(), 3);
    }

    #[test]
    fn add_empty_phrase_is_an_error() {
        let bank = bank2();
        let mut mem = AgentMemory::new();
        assert!(add_concepts(&bank, &mut mem, &phrases(&["  "]), "y1", 0).is_err());
    }

    fn bank_with_active(n: usize) -> (ConceptBank, AgentMemory) {
        let mut bank = bank2();
        let mut mem = AgentMemory::new();
        mem.record_initial(&bank);
        let texts: Vec<String> = (0..n).map(|i| format!("concept number {i}")).collect();
        let added = add_concepts(&bank, &mut mem, &texts, "y1", 0).unwrap();
        let ids: Vec<ConceptId> = added.iter().map(|c| c.id.clone()).collect();
        activate_concepts(&mut bank, &mut mem, &ids).unwrap();
        (bank, mem)
    }

    #[test]
    fn delete_one_of_five() {
        let (mut bank, mut mem) = bank_with_active(5);
        let v = bank.version;
        let id = bank.concepts[2].id.clone();
        delete_concepts(&mut bank, &mut mem, &[id], 1).unwrap();
        assert_eq!(bank.n_concepts(), 4);
        assert_eq!(mem.deleted.len(), 1);
        assert_eq!(bank.version, v + 1);
    }

    #[test]
    fn delete_empty_is_identity() {
        let (mut bank, mut mem) = bank_with_active(3);
        let v = bank.version;
        delete_concepts(&mut bank, &mut mem, &[], 1).unwrap();
        assert_eq!(bank.n_concepts(), 3);
        assert_eq!(bank.version, v);
    }

    #[test]
    fn delete_unknown_id_names_it() {
        let (mut bank, mut mem) = bank_with_active(1);
        let err = delete_concepts(&mut bank, &mut mem, &[ConceptId("dead".into())], 1)
            .unwrap_err();
        assert!(err.to_string().contains("dead"));
    }

    #[test]
    fn deleted_phrase_cannot_be_readded() {
        let (mut bank, mut mem) = bank_with_active(2);
        let victim = bank.concepts[0].clone();
        delete_concepts(&mut bank, &mut mem, &[victim.id.clone()], 1).unwrap();
        let added = add_concepts(&bank, &mut mem, &[victim.text.clone()], "y1", 2).unwrap();
        assert!(added.is_empty());
        assert!(!bank.contains_concept(&victim.id));
    }

    #[test]
    fn editable_matrix_from_verdicts() {
        let (bank, mut mem) = bank_with_active(2);
        let c1 = bank.concepts[0].id.clone();
        let c2 = bank.concepts[1].id.clone();
        mem.record_verdict("y1", &c1, Verdict::Occasional, 0);
        mem.record_verdict("y1", &c2, Verdict::Unrelated, 0);
        mem.record_verdict("y2", &c1, Verdict::Critical, 0);
        mem.record_verdict("y2", &c2, Verdict::Critical, 0);
        let e = build_editable_matrix(&mem, &bank).unwrap();
        assert_eq!(e.entries[0], vec![0, 1]);
        assert_eq!(e.entries[1], vec![0, 0]);
    }

    #[test]
    fn editable_matrix_all_critical_is_zero() {
        let (bank, mut mem) = bank_with_active(3);
        for l in &bank.labels {
            for c in &bank.concepts {
                mem.record_verdict(&l.name, &c.id, Verdict::Critical, 0);
            }
        }
        let e = build_editable_matrix(&mem, &bank).unwrap();
        assert!(e.entries.iter().flatten().all(|&x| x == 0));
    }

    #[test]
    fn editable_matrix_all_unrelated_is_one() {
        let (bank, mut mem) = bank_with_active(3);
        for l in &bank.labels {
            for c in &bank.concepts {
                mem.record_verdict(&l.name, &c.id, Verdict::Unrelated, 0);
            }
        }
        let e = build_editable_matrix(&mem, &bank).unwrap();
        assert!(e.entries.iter().flatten().all(|&x| x == 1));
    }

    #[test]
    fn editable_matrix_missing_pairs_listed() {
        let (bank, mem) = bank_with_active(2);
        let err = build_editable_matrix(&mem, &bank).unwrap_err();
        match err {
            Error::MissingVerdicts(pairs) => assert_eq!(pairs.len(), 4),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn serialization_round_trip_preserves_order() {
        let (bank, mut mem) = bank_with_active(4);
        mem.record_verdict("y1", &bank.concepts[0].id, Verdict::Critical, 0);
        let dir = tempfile::tempdir().unwrap();
        let bank_path = bank.save(dir.path()).unwrap();
        let mem_path = dir.path().join("memory.json");
        mem.save(&mem_path).unwrap();
        let bank2 = ConceptBank::load(&bank_path).unwrap();
        let mem2 = AgentMemory::load(&mem_path).unwrap();
        assert_eq!(bank, bank2);
        assert_eq!(mem.generated, mem2.generated);
        assert_eq!(mem.fact_verified, mem2.fact_verified);
        assert_eq!(bank.version_hash(), bank2.version_hash());
    }

    #[test]
    fn version_history_is_gap_free() {
        let (bank, mem) = bank_with_active(3);
        let versions: Vec<u64> = mem.bank_history.iter().map(|b| b.version).collect();
        assert_eq!(versions, vec![0, 1]);
        assert_eq!(bank.version, 1);
    }

    #[test]
    fn global_dedup_invariant_holds() {
        let (mut bank, mut mem) = bank_with_active(4);
        let id = bank.concepts[1].id.clone();
        delete_concepts(&mut bank, &mut mem, &[id], 1).unwrap();
        let mut all: Vec<&ConceptId> = bank.concepts.iter().map(|c| &c.id).collect();
        all.extend(mem.deleted.iter().map(|c| &c.id));
        let set: BTreeSet<_> = all.iter().collect();
        assert_eq!(set.len(), all.len());
    }

    #[test]
    fn duplicate_label_rejected() {
        assert!(ConceptBank::new(vec![LabelMeta::new("x"), LabelMeta::new("x")]).is_err());
    }
}
