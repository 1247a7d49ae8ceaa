//! The agent's action module: concept generation, selection, fact
//! verification, instance selection, and environment perception.

pub mod instances;
pub mod selection;

pub use instances::{select_instances, split_instances, stratified_split, InstanceSet};
pub use selection::{select_concepts, SelectionConfig, SelectionOutcome, SelectionTarget};

use crate::backends::llm::LlmClient;
use crate::backends::{Sample, TextEncoder};
use crate::bank::{
    add_concepts, build_editable_matrix, AgentMemory, Concept, ConceptBank, EditableMatrix,
    MULTI_LABEL_SOURCE,
};
use crate::cocobm::{train, TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Generate candidate concepts for one label. Deleted concepts previously
/// generated by the same label's prompt are appended to the prompt as
/// exclusions, so they cannot be regenerated; surviving phrases enter the
/// candidate pool through the usual dedup.
pub fn generate_for_label(
    bank: &ConceptBank,
    memory: &mut AgentMemory,
    client: &LlmClient,
    label: &str,
    iteration: u32,
) -> Result<Vec<Concept>> {
    let meta = bank
        .labels
        .iter()
        .find(|l| l.name == label)
        .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
    let exclusions: Vec<String> = memory
        .deleted
        .iter()
        .filter(|c| c.source_label == label)
        .map(|c| c.text.clone())
        .collect();
    let phrases = client.generate_concepts(label, meta.superclass.as_deref(), &exclusions)?;
    add_concepts(bank, memory, &phrases, label, iteration)
}

/// Generate candidates that distinguish between a confusable label group.
/// Requires at least two labels, all present in the bank.
pub fn generate_for_confusable(
    bank: &ConceptBank,
    memory: &mut AgentMemory,
    client: &LlmClient,
    labels: &[String],
    iteration: u32,
) -> Result<Vec<Concept>> {
    if labels.len() < 2 {
        return Err(Error::EmptyInput(
            "confusable generation needs at least two labels".to_string(),
        ));
    }
    for l in labels {
        if bank.label_index(l).is_none() {
            return Err(Error::UnknownLabel(l.clone()));
        }
    }
    let exclusions: Vec<String> = memory
        .deleted
        .iter()
        .filter(|c| c.source_label == MULTI_LABEL_SOURCE)
        .map(|c| c.text.clone())
        .collect();
    let phrases = client.generate_concepts_multi(labels, &exclusions)?;
    add_concepts(bank, memory, &phrases, MULTI_LABEL_SOURCE, iteration)
}

/// Verify every unverified (label, active concept) pair and cache the
/// verdicts in memory. Already-verified pairs are untouched, so the number
/// of LLM calls equals the number of uncached pairs exactly. On an LLM
/// error the verdicts recorded so far stay cached.
pub fn verify_all(
    bank: &ConceptBank,
    memory: &mut AgentMemory,
    client: &LlmClient,
    iteration: u32,
) -> Result<usize> {
    if bank.n_concepts() == 0 {
        return Err(Error::EmptyInput("bank has no active concepts".to_string()));
    }
    let mut calls = 0usize;
    for label in bank.labels.clone() {
        for concept in bank.concepts.clone() {
            if memory.verdict(&label.name, &concept.id).is_some() {
                continue;
            }
            let verdict = client.verify_fact(&concept.text, &label.name)?;
            memory.record_verdict(&label.name, &concept.id, verdict, iteration);
            calls += 1;
        }
    }
    Ok(calls)
}

/// Environment perception: train a fresh bottleneck on the frozen instance
/// train split and return the outcome. The planner must consume only the
/// validation score tensors; labels never enter its pattern math.
pub fn perceive<T: Scalar, E: TextEncoder<T>>(
    encoder: &E,
    bank: &ConceptBank,
    e_matrix: &EditableMatrix,
    instance_train: &[Sample<T>],
    instance_val: &[Sample<T>],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train(
        encoder,
        bank,
        e_matrix,
        instance_train,
        instance_val,
        config,
        None,
    )
}

/// Convenience: perceive with the editable matrix built from memory.
pub fn perceive_with_memory<T: Scalar, E: TextEncoder<T>>(
    encoder: &E,
    bank: &ConceptBank,
    memory: &AgentMemory,
    instance_train: &[Sample<T>],
    instance_val: &[Sample<T>],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let e_matrix = build_editable_matrix(memory, bank)?;
    perceive(encoder, bank, &e_matrix, instance_train, instance_val, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::llm::LlmClientConfig;
    use crate::backends::scripted::ScriptedLlm;
    use crate::backends::synthetic::{SyntheticWorld, WorldSpec};
    use crate::backends::LlmApi;
    use crate::bank::{activate_concepts, LabelMeta, Verdict};
    use std::time::Duration;

    fn client_with(llm: ScriptedLlm) -> LlmClient {
        LlmClient::new(
            Box::new(llm),
            LlmClientConfig {
                backoff: Duration::ZERO,
                ..Default::default()
            },
        )
    }

    fn bank_cat_dog() -> ConceptBank {
        ConceptBank::new(vec![
            LabelMeta::with_superclass("cat", "animal"),
            LabelMeta::with_superclass("dog", "animal"),
        ])
        .unwrap()
    }

    #[test]
    fn generation_adds_fixture_list() {
        let bank = bank_cat_dog();
        let mut mem = AgentMemory::new();
        let llm = ScriptedLlm::new();
        llm.script_generation("cat", &["slender whiskered muzzle", "vertical pupils"]);
        let client = client_with(llm);
        let added = generate_for_label(&bank, &mut mem, &client, "cat", 0).unwrap();
        assert_eq!(added.len(), 2);
        assert_eq!(mem.generated.len(), 2);
    }

    #[test]
    fn generation_unknown_label_errors() {
        let bank = bank_cat_dog();
        let mut mem = AgentMemory::new();
        let client = client_with(ScriptedLlm::new());
        assert!(generate_for_label(&bank, &mut mem, &client, "fox", 0).is_err());
    }

    #[test]
    fn deleted_phrases_are_excluded_from_regeneration() {
        let mut bank = bank_cat_dog();
        let mut mem = AgentMemory::new();
        mem.record_initial(&bank);
        let llm = ScriptedLlm::new();
        llm.script_generation("cat", &["slender whiskered muzzle", "vertical pupils"]);
        let client = client_with(llm);
        let added = generate_for_label(&bank, &mut mem, &client, "cat", 0).unwrap();
        let ids: Vec<_> = added.iter().map(|c| c.id.clone()).collect();
        activate_concepts(&mut bank, &mut mem, &ids).unwrap();
        crate::bank::delete_concepts(&mut bank, &mut mem, &ids[..1], 1).unwrap();

        // The rendered prompt must carry the deleted phrase (and only it).
        let again = generate_for_label(&bank, &mut mem, &client, "cat", 1).unwrap();
        assert!(again.is_empty(), "deleted and active phrases are both deduped");
        let prompts: Vec<String> = client
            .transcripts()
            .iter()
            .map(|ex| ex.prompt.clone())
            .collect();
        let last = prompts.last().unwrap();
        assert!(last.ends_with("following features:\nslender whiskered muzzle"));
        assert!(!last.contains("following features:\nslender whiskered muzzle\nvertical"));
    }

    #[test]
    fn confusable_generation_requires_two_labels() {
        let bank = bank_cat_dog();
        let mut mem = AgentMemory::new();
        let client = client_with(ScriptedLlm::new());
        assert!(
            generate_for_confusable(&bank, &mut mem, &client, &["cat".into()], 0).is_err()
        );
    }

    #[test]
    fn confusable_candidates_use_multi_label_source_and_dedup() {
        let mut bank = bank_cat_dog();
        let mut mem = AgentMemory::new();
        mem.record_initial(&bank);
        let llm = ScriptedLlm::new();
        llm.script_generation("cat", &["pointed upright ears"]);
        llm.script_generation_multi(
            &["cat".into(), "dog".into()],
            &["pointed upright ears", "rounded padded paws"],
        );
        let client = client_with(llm);
        let added = generate_for_label(&bank, &mut mem, &client, "cat", 0).unwrap();
        let ids: Vec<_> = added.iter().map(|c| c.id.clone()).collect();
        activate_concepts(&mut bank, &mut mem, &ids).unwrap();
        let multi = generate_for_confusable(
            &bank,
            &mut mem,
            &client,
            &["cat".into(), "dog".into()],
            1,
        )
        .unwrap();
        // The already-active phrase is skipped; the fresh one lands with the
        // multi-label source marker.
        assert_eq!(multi.len(), 1);
        assert_eq!(multi[0].source_label, MULTI_LABEL_SOURCE);
    }

    fn verified_world() -> (ConceptBank, AgentMemory, ScriptedLlm) {
        let mut bank = bank_cat_dog();
        let mut mem = AgentMemory::new();
        mem.record_initial(&bank);
        let llm = ScriptedLlm::new();
        llm.script_generation(
            "cat",
            &["slender whiskered muzzle", "vertical pupils", "retractable claws"],
        );
        llm.script_verdict("slender whiskered muzzle", "cat", Verdict::Critical);
        llm.script_verdict("vertical pupils", "cat", Verdict::Critical);
        llm.script_verdict("retractable claws", "cat", Verdict::Occasional);
        llm.script_verdict("slender whiskered muzzle", "dog", Verdict::Unrelated);
        llm.script_verdict("vertical pupils", "dog", Verdict::Unrelated);
        llm.script_verdict("retractable claws", "dog", Verdict::Unrelated);
        let client = client_with(llm.clone());
        let added = generate_for_label(&bank, &mut mem, &client, "cat", 0).unwrap();
        let ids: Vec<_> = added.iter().map(|c| c.id.clone()).collect();
        activate_concepts(&mut bank, &mut mem, &ids).unwrap();
        (bank, mem, llm)
    }

    #[test]
    fn verify_all_counts_uncached_pairs_exactly() {
        let (bank, mut mem, llm) = verified_world();
        let client = client_with(llm.clone());
        let before = llm.calls();
        let calls = verify_all(&bank, &mut mem, &client, 0).unwrap();
        assert_eq!(calls, 6, "2 labels x 3 concepts");
        assert_eq!(llm.calls() - before, 6);
        let calls = verify_all(&bank, &mut mem, &client, 0).unwrap();
        assert_eq!(calls, 0, "second run is fully cached");
        assert_eq!(llm.calls() - before, 6);
    }

    #[test]
    fn verify_all_matches_planted_truth_table() {
        let (bank, mut mem, llm) = verified_world();
        let client = client_with(llm);
        verify_all(&bank, &mut mem, &client, 0).unwrap();
        let e = build_editable_matrix(&mem, &bank).unwrap();
        // cat row: all compatible; dog row: all unrelated.
        assert_eq!(e.entries[0], vec![0, 0, 0]);
        assert_eq!(e.entries[1], vec![1, 1, 1]);
    }

    #[test]
    fn perceive_is_deterministic_and_clamp_safe() {
        use crate::backends::synthetic::{WorldConcept, WorldLabel};
        use std::collections::BTreeMap;
        let spec = WorldSpec {
            d: 16,
            d_tok: 8,
            labels: vec![
                WorldLabel { name: "cat".into(), superclass: None },
                WorldLabel { name: "dog".into(), superclass: None },
            ],
            concepts: vec![
                WorldConcept {
                    text: "slender whiskered muzzle".into(),
                    verdicts: BTreeMap::from([("cat".into(), Verdict::Critical)]),
                    presence: BTreeMap::from([("cat".into(), 1.0)]),
                    generated_for: vec!["cat".into()],
                    confusable_for: vec![],
                },
                WorldConcept {
                    text: "broad floppy ears".into(),
                    verdicts: BTreeMap::from([("dog".into(), Verdict::Critical)]),
                    presence: BTreeMap::from([("dog".into(), 1.0)]),
                    generated_for: vec!["dog".into()],
                    confusable_for: vec![],
                },
            ],
            train_per_label: 8,
            test_per_label: 2,
            noise_sigma: 0.02,
        };
        let world = SyntheticWorld::<f64>::new(spec.clone(), 5).unwrap();
        let data = world.make_dataset(5).unwrap();

        let mut bank = ConceptBank::new(world.spec.label_metas()).unwrap();
        let mut mem = AgentMemory::new();
        mem.record_initial(&bank);
        let llm = ScriptedLlm::from_world(&spec);
        let client = client_with(llm);
        let mut all = Vec::new();
        for label in ["cat", "dog"] {
            all.extend(generate_for_label(&bank, &mut mem, &client, label, 0).unwrap());
        }
        let ids: Vec<_> = all.iter().map(|c| c.id.clone()).collect();
        activate_concepts(&mut bank, &mut mem, &ids).unwrap();
        verify_all(&bank, &mut mem, &client, 0).unwrap();

        let instances = select_instances(&data, 4, 9).unwrap();
        let (tr, va) = split_instances(&instances, &data, 9).unwrap();
        let config = TrainConfig {
            q: 2,
            max_epochs: 30,
            patience: 30,
            seed: 9,
            ..Default::default()
        };
        let a = perceive_with_memory(&world.encoder, &bank, &mem, &tr, &va, &config).unwrap();
        let b = perceive_with_memory(&world.encoder, &bank, &mem, &tr, &va, &config).unwrap();
        assert_eq!(a.val_tensors.len(), va.len());
        for (x, y) in a.val_tensors.iter().zip(&b.val_tensors) {
            assert_eq!(x.scores, y.scores, "same seed must reproduce feedback");
        }
        let e_matrix = build_editable_matrix(&mem, &bank).unwrap();
        for t in &a.val_tensors {
            for j in 0..2 {
                for k in 0..2 {
                    if e_matrix.is_clamped(j, k) {
                        assert!(t.scores[(j, k)] <= 0.0);
                    }
                }
            }
        }
    }
}
