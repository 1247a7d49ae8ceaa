//! Quantitative interpretability evaluation.
//!
//! Per label, positively contributing concept scores on the predicted
//! samples are normalized twice (local min-max per sample, then a global
//! min-max over the per-label aggregate) into a ranked explanation profile.
//! Truthfulness asks an LLM judge whether the concept subsets above each
//! contribution threshold align with facts; distinguishability asks the
//! judge to pick the right label from similarity-ranked distractors, given
//! only the explanation. Every MCQ is judged by majority over repeated
//! votes, and the whole question set is a pure function of the seed.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backends::llm::{
    render_distinguishability, render_truthfulness, LlmClient, DEFAULT_SUPERCLASS,
};
use crate::backends::{substream_rng, Dataset, Embedding, TextEncoder};
use crate::bank::ConceptBank;
use crate::cocobm::ScoreTensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Contribution thresholds for hierarchical truthfulness evaluation.
pub const TRUTHFULNESS_THRESHOLDS: [f64; 5] = [0.0, 0.25, 0.50, 0.75, 1.0];

/// Ranked explanation for one label: concepts with globally normalized
/// contributions in (0, 1], strictly non-increasing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplanationProfile {
    pub label: String,
    pub label_index: usize,
    pub concepts: Vec<(String, f64)>,
}

impl ExplanationProfile {
    /// Concepts above a contribution threshold; at the top threshold,
    /// exactly the maximal (1.0) concepts.
    pub fn subset_above(&self, t_c: f64) -> Vec<String> {
        if t_c >= 1.0 {
            self.concepts
                .iter()
                .filter(|(_, s)| *s == 1.0)
                .map(|(c, _)| c.clone())
                .collect()
        } else {
            self.concepts
                .iter()
                .filter(|(_, s)| *s > t_c)
                .map(|(c, _)| c.clone())
                .collect()
        }
    }

    pub fn feature_list(&self) -> Vec<String> {
        self.concepts.iter().map(|(c, _)| c.clone()).collect()
    }
}

/// Extract per-label explanation profiles from scored validation samples
/// and their predicted labels. Labels that were never predicted are
/// excluded with a warning; labels whose scores are all non-positive get
/// an empty profile.
pub fn extract_explanations<T: Scalar>(
    tensors: &[ScoreTensor<T>],
    predictions: &[usize],
    bank: &ConceptBank,
) -> Result<(Vec<Option<ExplanationProfile>>, Vec<String>)> {
    if tensors.len() != predictions.len() {
        return Err(Error::ShapeMismatch {
            context: "tensors vs predictions".to_string(),
            expected: format!("{}", tensors.len()),
            actual: format!("{}", predictions.len()),
        });
    }
    let n = bank.n_labels();
    let m = bank.n_concepts();
    let mut sums = vec![vec![0.0f64; m]; n];
    let mut counts = vec![0usize; n];
    for (tensor, &pred) in tensors.iter().zip(predictions) {
        let row = tensor.scores.row(pred);
        // Local min-max over this sample's positive scores; non-positives
        // become zero. A single positive maps to 1.
        let positives: Vec<f64> = row
            .iter()
            .map(|v| v.as_f64())
            .filter(|&v| v > 0.0)
            .collect();
        counts[pred] += 1;
        if positives.is_empty() {
            continue;
        }
        let max = positives.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = positives.iter().cloned().fold(f64::INFINITY, f64::min);
        for (k, v) in row.iter().enumerate() {
            let v = v.as_f64();
            if v > 0.0 {
                let local = if max > min { (v - min) / (max - min) } else { 1.0 };
                sums[pred][k] += local;
            }
        }
    }

    let mut profiles = Vec::with_capacity(n);
    let mut warnings = Vec::new();
    for (j, label) in bank.labels.iter().enumerate() {
        if counts[j] == 0 {
            warnings.push(format!(
                "label `{}` was never predicted; excluded from evaluation",
                label.name
            ));
            profiles.push(None);
            continue;
        }
        let agg: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
        let max = agg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = agg.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut concepts: Vec<(String, f64)> = Vec::new();
        if max > 0.0 {
            for (k, &v) in agg.iter().enumerate() {
                let norm = if max > min { (v - min) / (max - min) } else { 1.0 };
                if norm > 0.0 {
                    concepts.push((bank.concepts[k].text.clone(), norm));
                }
            }
            concepts.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        }
        profiles.push(Some(ExplanationProfile {
            label: label.name.clone(),
            label_index: j,
            concepts,
        }));
    }
    Ok((profiles, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McqKind {
    Truthfulness,
    Distinguishability,
}

/// How a distinguishability MCQ picked its distractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorMode {
    TextHard,
    TextEasy,
    VisualHard,
    VisualEasy,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mcq {
    pub kind: McqKind,
    pub label: String,
    /// Truthfulness threshold `t_c`, when applicable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Distractor mode, when applicable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distractors: Option<DistractorMode>,
    pub prompt: String,
    pub options: Vec<String>,
    /// Index of the true label among the options (distinguishability only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<usize>,
}

/// The five truthfulness MCQs for one non-empty profile. The global
/// normalization guarantees a 1.0 entry, so no threshold subset is empty.
pub fn truthfulness_mcqs(profile: &ExplanationProfile) -> Result<Vec<Mcq>> {
    if profile.concepts.is_empty() {
        return Err(Error::EmptyInput(format!(
            "label `{}` has an empty explanation profile",
            profile.label
        )));
    }
    let mut out = Vec::with_capacity(TRUTHFULNESS_THRESHOLDS.len());
    for &t_c in &TRUTHFULNESS_THRESHOLDS {
        let subset = profile.subset_above(t_c);
        assert!(
            !subset.is_empty(),
            "global min-max guarantees a 1.0 entry, so no subset is empty"
        );
        out.push(Mcq {
            kind: McqKind::Truthfulness,
            label: profile.label.clone(),
            threshold: Some(t_c),
            distractors: None,
            prompt: render_truthfulness(&profile.label, &subset),
            options: vec![
                "Overall aligns with facts.".to_string(),
                "Most features do not align with facts or are contradictory to each other."
                    .to_string(),
            ],
            correct: None,
        });
    }
    Ok(out)
}

/// Cosine similarity ranking of the other labels, most similar first.
fn similarity_ranking<T: Scalar>(own: usize, embs: &[Embedding<T>]) -> Vec<usize> {
    let mut others: Vec<usize> = (0..embs.len()).filter(|&j| j != own).collect();
    others.sort_by(|&a, &b| {
        embs[own]
            .dot(&embs[b])
            .partial_cmp(&embs[own].dot(&embs[a]))
            .unwrap()
            .then(a.cmp(&b))
    });
    others
}

/// Distractor indices for one mode, degrading gracefully when fewer than
/// nine labels exist (the similar pool shrinks and question overlap is
/// permitted).
fn pick_distractors(
    ranking: &[usize],
    hard: bool,
    want: usize,
) -> Vec<usize> {
    let pool: Vec<usize> = ranking.iter().copied().take(8).collect();
    if hard {
        pool.iter().copied().take(want).collect()
    } else {
        let skip = pool.len().saturating_sub(want);
        pool.iter().copied().skip(skip).take(want).collect()
    }
}

/// The five distinguishability MCQs for one label: per similarity modality
/// (text, visual) one hard (top-4 of the top-8) and one easy (bottom-4 of
/// the top-8) question, plus one with random distractors. Every MCQ offers
/// five options including the true label, in seeded-shuffled order.
#[allow(clippy::too_many_arguments)]
pub fn distinguishability_mcqs<T: Scalar>(
    profile: &ExplanationProfile,
    bank: &ConceptBank,
    text_embs: &[Embedding<T>],
    visual_embs: &[Embedding<T>],
    seed: u64,
    warnings: &mut Vec<String>,
) -> Result<Vec<Mcq>> {
    let n = bank.n_labels();
    if n < 5 {
        return Err(Error::InvalidConfig(format!(
            "distinguishability needs at least 5 labels, got {n}"
        )));
    }
    {
        let mut names: Vec<&str> = bank.labels.iter().map(|l| l.name.as_str()).collect();
        names.sort();
        names.dedup();
        if names.len() != n {
            return Err(Error::DuplicateLabel(
                "label names must be unique for MCQ construction".to_string(),
            ));
        }
    }
    if n < 9 {
        warnings.push(format!(
            "only {n} labels: similarity pools shrink below 8 and duplicate MCQs are possible"
        ));
    }
    let own = profile.label_index;
    let text_rank = similarity_ranking(own, text_embs);
    let visual_rank = similarity_ranking(own, visual_embs);
    let features = profile.feature_list();
    let superclass = bank.labels[own]
        .superclass
        .clone()
        .unwrap_or_else(|| DEFAULT_SUPERCLASS.to_string());

    let modes = [
        (DistractorMode::TextHard, pick_distractors(&text_rank, true, 4)),
        (DistractorMode::TextEasy, pick_distractors(&text_rank, false, 4)),
        (DistractorMode::VisualHard, pick_distractors(&visual_rank, true, 4)),
        (DistractorMode::VisualEasy, pick_distractors(&visual_rank, false, 4)),
        (DistractorMode::Random, {
            let mut rng = substream_rng(seed, &format!("mcq-random:{}", profile.label));
            let mut others: Vec<usize> = (0..n).filter(|&j| j != own).collect();
            others.shuffle(&mut rng);
            others.truncate(4);
            others
        }),
    ];

    let mut out = Vec::with_capacity(5);
    for (mode, distractors) in modes {
        let mut option_idx: Vec<usize> = distractors.clone();
        option_idx.push(own);
        let mut rng = substream_rng(seed, &format!("mcq-shuffle:{}:{:?}", profile.label, mode));
        option_idx.shuffle(&mut rng);
        let options: Vec<String> = option_idx
            .iter()
            .map(|&j| bank.labels[j].name.clone())
            .collect();
        let correct = option_idx
            .iter()
            .position(|&j| j == own)
            .expect("true label is always an option");
        out.push(Mcq {
            kind: McqKind::Distinguishability,
            label: profile.label.clone(),
            threshold: None,
            distractors: Some(mode),
            prompt: render_distinguishability(&features, &superclass, &options),
            options,
            correct: Some(correct),
        });
    }
    Ok(out)
}

/// The full, deterministic MCQ set for a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McqSet {
    pub seed: u64,
    pub mcqs: Vec<Mcq>,
    pub warnings: Vec<String>,
    pub profiles: Vec<Option<ExplanationProfile>>,
}

impl McqSet {
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("MCQ serialization cannot fail")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_json())?;
        Ok(())
    }
}

/// Build all MCQs from scored, predicted validation samples. Labels with a
/// missing or empty profile contribute no questions (and score zero later).
pub fn build_mcq_set<T: Scalar, E: TextEncoder<T>>(
    encoder: &E,
    bank: &ConceptBank,
    dataset: &Dataset<T>,
    tensors: &[ScoreTensor<T>],
    predictions: &[usize],
    seed: u64,
) -> Result<McqSet> {
    let (profiles, mut warnings) = extract_explanations(tensors, predictions, bank)?;
    let text_embs: Vec<Embedding<T>> = bank
        .labels
        .iter()
        .map(|l| encoder.encode_text(&l.name))
        .collect::<Result<Vec<_>>>()?;
    let visual_embs = dataset.mean_train_embeddings()?;
    let mut mcqs = Vec::new();
    for profile in profiles.iter().flatten() {
        if profile.concepts.is_empty() {
            warnings.push(format!(
                "label `{}` has no positively contributing concepts; it scores 0 by convention",
                profile.label
            ));
            continue;
        }
        mcqs.extend(truthfulness_mcqs(profile)?);
        mcqs.extend(distinguishability_mcqs(
            profile,
            bank,
            &text_embs,
            &visual_embs,
            seed,
            &mut warnings,
        )?);
    }
    Ok(McqSet {
        seed,
        mcqs,
        warnings,
        profiles,
    })
}

/// One judged MCQ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McqResult {
    pub label: String,
    pub kind: McqKind,
    pub votes: Vec<usize>,
    pub majority: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<usize>,
}

/// Judge every MCQ through the client (majority of repeated votes).
pub fn judge_mcqs(client: &LlmClient, set: &McqSet) -> Result<Vec<McqResult>> {
    let mut results = Vec::with_capacity(set.mcqs.len());
    for mcq in &set.mcqs {
        let template = match mcq.kind {
            McqKind::Truthfulness => "eval_truthfulness",
            McqKind::Distinguishability => "eval_distinguishability",
        };
        // The rendered prompt is the filled argument set; keying the cache
        // on its hash keeps repeated judgments free without ever colliding
        // across different question sets.
        let prompt_key = crate::bank::sha256_hex(mcq.prompt.as_bytes())[..16].to_string();
        let (majority, votes) = client.answer_mcq_detailed(
            template,
            vec![mcq.label.clone(), prompt_key],
            &mcq.prompt,
            mcq.options.len(),
        )?;
        results.push(McqResult {
            label: mcq.label.clone(),
            kind: mcq.kind,
            votes,
            majority,
            correct: mcq.correct,
        });
    }
    Ok(results)
}

/// Per-label score breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelScoreRow {
    pub label: String,
    pub truthfulness: f64,
    pub distinguishability: f64,
    pub overall: f64,
}

/// Dataset-level interpretability score: the arithmetic mean of
/// truthfulness and distinguishability, each aggregated uniformly over
/// labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpretabilityScore {
    pub truthfulness: f64,
    pub distinguishability: f64,
    pub overall: f64,
    pub per_label: Vec<LabelScoreRow>,
}

/// Aggregate judged MCQs. A truthfulness question counts when the judge
/// picked "aligns with facts" (option A); a distinguishability question
/// counts when the majority hit the true label. Labels without questions
/// score zero by convention.
pub fn score_interpretability(
    results: &[McqResult],
    label_names: &[String],
) -> Result<InterpretabilityScore> {
    let mut per_label = Vec::with_capacity(label_names.len());
    for name in label_names {
        let truth: Vec<&McqResult> = results
            .iter()
            .filter(|r| &r.label == name && r.kind == McqKind::Truthfulness)
            .collect();
        let dist: Vec<&McqResult> = results
            .iter()
            .filter(|r| &r.label == name && r.kind == McqKind::Distinguishability)
            .collect();
        let t = if truth.is_empty() {
            0.0
        } else {
            truth.iter().filter(|r| r.majority == 0).count() as f64 / truth.len() as f64
        };
        let d = if dist.is_empty() {
            0.0
        } else {
            dist.iter()
                .filter(|r| Some(r.majority) == r.correct)
                .count() as f64
                / dist.len() as f64
        };
        per_label.push(LabelScoreRow {
            label: name.clone(),
            truthfulness: t,
            distinguishability: d,
            overall: (t + d) / 2.0,
        });
    }
    let n = per_label.len() as f64;
    let truthfulness = per_label.iter().map(|r| r.truthfulness).sum::<f64>() / n;
    let distinguishability = per_label.iter().map(|r| r.distinguishability).sum::<f64>() / n;
    Ok(InterpretabilityScore {
        truthfulness,
        distinguishability,
        overall: (truthfulness + distinguishability) / 2.0,
        per_label,
    })
}
