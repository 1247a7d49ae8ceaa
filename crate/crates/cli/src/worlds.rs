//! Bundled planted worlds for offline runs and demos.
//!
//! The demo world plants six bird labels with four ground-truth concepts
//! each. Concepts carry per-label fact verdicts (which drive the scripted
//! verifier and the editable matrix) and presence tables (which drive the
//! image generator), so the agent loop's findings can be checked against
//! the plant. Two falcon labels share all four of their initially
//! generated concepts: they are indistinguishable until the agent detects
//! the confusable pair and asks for discriminating concepts, which only the
//! multi-label fixture provides.

use std::collections::BTreeMap;

use cocobm_core::backends::synthetic::{WorldConcept, WorldLabel, WorldSpec};
use cocobm_core::bank::Verdict;

const LABELS: [&str; 6] = ["oriole", "bluejay", "tanager", "warbler", "kestrel", "merlin"];

fn concept(
    text: &str,
    compatible: &[(usize, Verdict)],
    present_in: &[usize],
    generated_for: &[usize],
) -> WorldConcept {
    WorldConcept {
        text: text.to_string(),
        verdicts: compatible
            .iter()
            .map(|&(j, v)| (LABELS[j].to_string(), v))
            .collect(),
        presence: present_in
            .iter()
            .map(|&j| (LABELS[j].to_string(), 1.0))
            .collect(),
        generated_for: generated_for.iter().map(|&j| LABELS[j].to_string()).collect(),
        confusable_for: vec![],
    }
}

/// The six-label planted demo world.
///
/// Labels 0-3 each own four concepts whose verdict rows (and therefore
/// activation patterns) are pairwise distinct sets. Labels 4 and 5 share
/// four concepts with identical verdict rows, plus one discriminator each
/// that only the confusable-pair prompt yields. One decoy phrase per label
/// is generated but never appears in images and is factually unrelated to
/// every label, so it must be pruned as inactive.
pub fn demo_world(noise_sigma: f64) -> WorldSpec {
    let crit = Verdict::Critical;
    let occ = Verdict::Occasional;
    let mut concepts = Vec::new();

    // Distinct verdict-row sets per concept, all containing the owner.
    // Every set has at least two labels: a concept compatible with a single
    // label sees signal in only 1/N of the validation samples, and the
    // per-column normalization inflates cross-label noise enough to make
    // its activation a coin flip. Sets touching the falcon labels always
    // include both, so the confusable pair stays symmetric until the
    // discriminators arrive.
    let own_texts = [
        [
            "flame orange breast patch",
            "jet black hooded head",
            "white slashed wing bars",
            "tapered silver beak",
        ],
        [
            "crested cobalt crown",
            "barred azure wing panels",
            "white rounded underbelly",
            "black beaded necklace band",
        ],
        [
            "scarlet saturated body plumage",
            "charcoal shaded wing edges",
            "stout pale seed beak",
            "notched crimson tail fan",
        ],
        [
            "olive streaked back feathers",
            "yellow washed throat patch",
            "thin pointed insect bill",
            "pale arched eyebrow stripe",
        ],
    ];
    let rows_per_label: [[&[usize]; 4]; 4] = [
        [&[0, 1], &[0, 2], &[0, 1, 2], &[0, 4, 5]],
        [&[1, 2], &[1, 2, 3], &[1, 4, 5], &[0, 1, 4, 5]],
        [&[2, 3], &[0, 2, 3], &[0, 1, 2, 3], &[2, 4, 5]],
        [&[0, 3], &[1, 3], &[0, 1, 3], &[3, 4, 5]],
    ];
    for t in 0..4usize {
        for (i, row) in rows_per_label[t].iter().enumerate() {
            let verdicts: Vec<(usize, Verdict)> = row
                .iter()
                .map(|&j| (j, if j == t { crit } else { occ }))
                .collect();
            concepts.push(concept(own_texts[t][i], &verdicts, row, &[t]));
        }
    }

    // Shared falcon concepts: critical for both kestrel and merlin,
    // present in both, listed by both generation fixtures.
    let shared = [
        "hooked sharp raptor beak",
        "banded tapered tail feathers",
        "piercing forward set eyes",
        "sleek pointed wing silhouette",
    ];
    for text in shared {
        concepts.push(concept(text, &[(4, crit), (5, crit)], &[4, 5], &[4, 5]));
    }

    // Discriminators, reachable only through the confusable-pair prompt.
    let mut d_kestrel = concept(
        "rusty spotted back plumage",
        &[(4, crit)],
        &[4],
        &[],
    );
    d_kestrel.confusable_for = vec![vec![LABELS[4].to_string(), LABELS[5].to_string()]];
    let mut d_merlin = concept(
        "slate blue upper wings",
        &[(5, crit)],
        &[5],
        &[],
    );
    d_merlin.confusable_for = vec![vec![LABELS[4].to_string(), LABELS[5].to_string()]];
    concepts.push(d_kestrel);
    concepts.push(d_merlin);

    // Latent concepts: present in images and factually grounded, but listed
    // by no generation fixture. The agent cannot reach them until a test
    // (or a better generator) re-scripts a fixture to mention them; they
    // exist so label support can be honestly rebuilt after deletions.
    concepts.push(concept(
        "golden flecked eye ring",
        &[(0, crit), (2, occ), (4, occ), (5, occ)],
        &[0, 2, 4, 5],
        &[],
    ));
    concepts.push(concept(
        "downy layered chest feathers",
        &[(0, crit), (3, occ), (4, occ), (5, occ)],
        &[0, 3, 4, 5],
        &[],
    ));

    // One decoy per label: generated, never present, unrelated everywhere.
    let decoys = [
        "rusted chain link fence",
        "polished marble countertop",
        "woven wicker basket weave",
        "frosted glass window pane",
        "crumpled paper grocery bag",
        "faded denim jacket sleeve",
    ];
    for (t, text) in decoys.iter().enumerate() {
        concepts.push(WorldConcept {
            text: text.to_string(),
            verdicts: BTreeMap::new(),
            presence: BTreeMap::new(),
            generated_for: vec![LABELS[t].to_string()],
            confusable_for: vec![],
        });
    }

    WorldSpec {
        d: 256,
        d_tok: 128,
        labels: LABELS
            .iter()
            .map(|name| WorldLabel {
                name: name.to_string(),
                superclass: Some("bird".to_string()),
            })
            .collect(),
        concepts,
        train_per_label: 40,
        test_per_label: 20,
        noise_sigma,
    }
}

/// Texts of the demo world's recoverable planted concepts: image-present,
/// fact-compatible, and reachable through some generation fixture. Decoys
/// (never present) and latent concepts (never generated) are excluded.
pub fn demo_planted_texts(spec: &WorldSpec) -> Vec<String> {
    spec.concepts
        .iter()
        .filter(|c| {
            !c.presence.is_empty() && (!c.generated_for.is_empty() || !c.confusable_for.is_empty())
        })
        .map(|c| cocobm_core::bank::normalize_text(&c.text))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_world_has_distinct_patterns_except_shared_falcon_block() {
        let spec = demo_world(0.0);
        let present: Vec<&WorldConcept> =
            spec.concepts.iter().filter(|c| !c.presence.is_empty()).collect();
        assert_eq!(present.len(), 24, "22 reachable planted + 2 latent");
        assert_eq!(demo_planted_texts(&spec).len(), 22);
        let row_of = |c: &WorldConcept| -> Vec<String> {
            let mut row: Vec<String> = c.verdicts.keys().cloned().collect();
            row.sort();
            row
        };
        let mut rows: Vec<Vec<String>> = present.iter().map(|c| row_of(c)).collect();
        rows.sort();
        rows.dedup();
        // 24 present concepts, 4 of which share the falcon row.
        assert_eq!(rows.len(), 21);
    }

    #[test]
    fn falcon_labels_are_initially_symmetric() {
        let spec = demo_world(0.0);
        let kestrel = spec.generation_fixture("kestrel");
        let merlin = spec.generation_fixture("merlin");
        assert_eq!(kestrel.len(), 5, "four shared concepts plus one decoy");
        assert_eq!(merlin.len(), 5);
        let shared: Vec<&String> = kestrel.iter().filter(|c| merlin.contains(c)).collect();
        assert_eq!(shared.len(), 4, "the image-present concepts are identical");
        let discriminators =
            spec.confusable_fixture(&["kestrel".to_string(), "merlin".to_string()]);
        assert_eq!(discriminators.len(), 2);
    }

    #[test]
    fn every_label_has_a_guaranteed_present_concept() {
        let spec = demo_world(0.0);
        for label in spec.label_names() {
            let present = spec
                .concepts
                .iter()
                .any(|c| c.presence.get(&label).copied().unwrap_or(0.0) >= 1.0);
            assert!(present, "label {label} would generate empty images");
        }
    }
}
