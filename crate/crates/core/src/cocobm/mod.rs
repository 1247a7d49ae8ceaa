//! Conditional concept bottleneck model.
//!
//! For every (label j, concept k) pair the model builds a conditional
//! prompt `[t_1..t_q][label][concept]` out of shared learnable condition
//! tokens plus the tokenized label and concept names, encodes it, and
//! scores an image by the dot product with the prompt embedding. The
//! resulting N x M score matrix is masked by the editable matrix (scores
//! of factually incompatible pairs are clamped to <= 0) and aggregated
//! per label by a learned weight row, so each label consumes only its own
//! conditional score row.
//!
//! The shared-score baseline (plain concept text, one score vector reused
//! by every label) is a special case: with no condition tokens and no
//! label in the prompt, every row of the score matrix coincides with the
//! baseline's score vector.

mod train;

pub use train::{
    logits_for, objective, score_with_model, train, EpochInfo, TrainConfig, TrainMetrics,
    TrainOutcome, TrainedModel,
};

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{sample_normal_vector, Embedding, TextEncoder, TokenSequence};
use crate::bank::{ConceptBank, EditableMatrix};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

/// The q learnable condition token vectors, shared across every
/// (label, concept) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTokens<T: Scalar> {
    /// q x d_tok.
    pub tokens: Array2<T>,
}

impl<T: Scalar> ConditionTokens<T> {
    /// Seeded Gaussian initialization (std 0.02, prompt-tuning practice).
    pub fn init(q: usize, d_tok: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut tokens = Array2::zeros((q, d_tok));
        for r in 0..q {
            let row = sample_normal_vector::<T>(rng, d_tok).mapv(|x| x * T::from_f64(std));
            tokens.row_mut(r).assign(&row);
        }
        ConditionTokens { tokens }
    }

    pub fn q(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.ncols()
    }

    fn rows(&self) -> Vec<Array1<T>> {
        (0..self.q()).map(|r| self.tokens.row(r).to_owned()).collect()
    }
}

/// Per-label concept weights W (N x M) and bias (N).
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights<T: Scalar> {
    pub w: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> AggregationWeights<T> {
    /// Zero initialization: symmetric start with the loss at a known value.
    pub fn zeros(n_labels: usize, n_concepts: usize) -> Self {
        AggregationWeights {
            w: Array2::zeros((n_labels, n_concepts)),
            bias: Array1::zeros(n_labels),
        }
    }
}

/// One sample's N x M conditional concept scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor<T: Scalar> {
    pub scores: Array2<T>,
    pub bank_version: u64,
}

impl<T: Scalar> ScoreTensor<T> {
    pub fn n_labels(&self) -> usize {
        self.scores.nrows()
    }

    pub fn n_concepts(&self) -> usize {
        self.scores.ncols()
    }
}

/// Build the conditional prompt for one (label, concept) pair:
/// `[t_1..t_q] ++ tokenize(label) ++ tokenize(concept)`, with the
/// learnable flags on exactly the first q positions.
pub fn build_prompt<T: Scalar, E: TextEncoder<T>>(
    encoder: &E,
    label: &str,
    concept: &str,
    cond: &ConditionTokens<T>,
) -> Result<TokenSequence<T>> {
    let label_toks = encoder.tokenize(label)?;
    let concept_toks = encoder.tokenize(concept)?;
    let suffix = TokenSequence::concat_fixed(&label_toks, &concept_toks);
    Ok(TokenSequence::with_learnable_prefix(cond.rows(), &suffix))
}

/// Precomputed fixed prompt suffixes for a bank, so the per-pair sequences
/// can be rebuilt cheaply whenever the condition tokens change.
pub struct PromptBuilder<T: Scalar> {
    suffixes: Vec<TokenSequence<T>>,
    n_labels: usize,
    n_concepts: usize,
    pub bank_version: u64,
    pub include_label: bool,
}

impl<T: Scalar> PromptBuilder<T> {
    /// Tokenize every (label, concept) suffix. With `include_label` false
    /// the prompts carry only the concept tokens, which makes the text
    /// embedding label-independent (the degenerate shared-score case).
    pub fn new<E: TextEncoder<T>>(
        encoder: &E,
        bank: &ConceptBank,
        include_label: bool,
    ) -> Result<Self> {
        let mut suffixes = Vec::with_capacity(bank.n_labels() * bank.n_concepts());
        for label in &bank.labels {
            let label_toks = encoder.tokenize(&label.name)?;
            for concept in &bank.concepts {
                let concept_toks = encoder.tokenize(&concept.text)?;
                let suffix = if include_label {
                    TokenSequence::concat_fixed(&label_toks, &concept_toks)
                } else {
                    concept_toks
                };
                suffixes.push(suffix);
            }
        }
        Ok(PromptBuilder {
            suffixes,
            n_labels: bank.n_labels(),
            n_concepts: bank.n_concepts(),
            bank_version: bank.version,
            include_label,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    /// The full token sequence for pair (j, k) under `cond`.
    pub fn sequence(&self, j: usize, k: usize, cond: &ConditionTokens<T>) -> TokenSequence<T> {
        TokenSequence::with_learnable_prefix(cond.rows(), &self.suffixes[j * self.n_concepts + k])
    }

    /// Encode all N*M prompt embeddings under `cond`.
    pub fn encode_all<E: TextEncoder<T>>(
        &self,
        encoder: &E,
        cond: &ConditionTokens<T>,
    ) -> Result<Vec<Embedding<T>>> {
        let rows = cond.rows();
        self.suffixes
            .iter()
            .map(|suffix| {
                let seq = TokenSequence::with_learnable_prefix(rows.clone(), suffix);
                encoder.encode_sequence(&seq)
            })
            .collect()
    }
}

fn check_editable_shape<T: Scalar>(
    e: &EditableMatrix,
    n_labels: usize,
    n_concepts: usize,
) -> Result<()> {
    let _ = std::marker::PhantomData::<T>;
    if e.n_labels() != n_labels || e.n_concepts() != n_concepts {
        return Err(Error::ShapeMismatch {
            context: "editable matrix vs bank".to_string(),
            expected: format!("{n_labels}x{n_concepts}"),
            actual: format!("{}x{}", e.n_labels(), e.n_concepts()),
        });
    }
    Ok(())
}

/// Score one image against precomputed prompt embeddings: raw entry (j, k)
/// is the image/prompt dot product; wherever E is set the entry is clamped
/// to `min(raw, 0)`. Clamping applies identically during training and
/// inference.
pub fn score_sample<T: Scalar>(
    image: &Embedding<T>,
    prompt_embs: &[Embedding<T>],
    n_labels: usize,
    n_concepts: usize,
    e: &EditableMatrix,
    bank_version: u64,
) -> Result<ScoreTensor<T>> {
    check_editable_shape::<T>(e, n_labels, n_concepts)?;
    let mut scores = Array2::zeros((n_labels, n_concepts));
    for j in 0..n_labels {
        for k in 0..n_concepts {
            let raw = image.dot(&prompt_embs[j * n_concepts + k]);
            scores[(j, k)] = if e.is_clamped(j, k) { raw.min(T::zero()) } else { raw };
        }
    }
    Ok(ScoreTensor {
        scores,
        bank_version,
    })
}

/// Aggregate a score tensor into label logits: `s_y^j = W[j,:].scores[j,:]
/// + bias_j`. Each label consumes only its own conditional score row.
pub fn aggregate<T: Scalar>(scores: &ScoreTensor<T>, weights: &AggregationWeights<T>) -> Array1<T> {
    let n = scores.n_labels();
    let mut out = Array1::zeros(n);
    for j in 0..n {
        out[j] = scores.scores.row(j).dot(&weights.w.row(j)) + weights.bias[j];
    }
    out
}

/// Per-sample weighted binary cross-entropy over labels with one-hot
/// targets: the positive term carries weight `W_p = N` to compensate for
/// the 1-vs-(N-1) label imbalance inside each sample.
pub fn loss<T: Scalar>(label_logits: &Array1<T>, true_label: usize) -> Result<T> {
    let n = label_logits.len();
    if true_label >= n {
        return Err(Error::InvalidConfig(format!(
            "true label {true_label} out of range for {n} labels"
        )));
    }
    if label_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("label logits".to_string()));
    }
    let n_t = T::from_usize(n);
    let mut total = T::zero();
    for (j, &s) in label_logits.iter().enumerate() {
        if j == true_label {
            // -W_p * log(sigmoid(s)) with W_p = N
            total += n_t * softplus(-s);
        } else {
            // -log(1 - sigmoid(s))
            total += softplus(s);
        }
    }
    Ok(total / n_t)
}

/// Gradient of [`loss`] with respect to the label logits.
pub fn loss_grad<T: Scalar>(label_logits: &Array1<T>, true_label: usize) -> Array1<T> {
    let n = label_logits.len();
    let n_t = T::from_usize(n);
    let mut g = Array1::zeros(n);
    for (j, &s) in label_logits.iter().enumerate() {
        g[j] = if j == true_label {
            sigmoid(s) - T::one()
        } else {
            sigmoid(s) / n_t
        };
    }
    g
}

/// Predicted label: argmax over logits, ties broken by the lowest index.
pub fn predict<T: Scalar>(label_logits: &Array1<T>) -> usize {
    let mut best = 0usize;
    for j in 1..label_logits.len() {
        if label_logits[j] > label_logits[best] {
            best = j;
        }
    }
    best
}

/// Shared-score baseline: `s_k = image . T(concept_k)` with plain concept
/// text, no condition tokens, no label. The same M-vector is reused by
/// every label.
pub fn score_sample_shared<T: Scalar, E: TextEncoder<T>>(
    encoder: &E,
    image: &Embedding<T>,
    bank: &ConceptBank,
) -> Result<Array1<T>> {
    let mut out = Array1::zeros(bank.n_concepts());
    for (k, concept) in bank.concepts.iter().enumerate() {
        out[k] = image.dot(&encoder.encode_text(&concept.text)?);
    }
    Ok(out)
}

/// Serializable model checkpoint, pinned to the bank it was trained on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub q: usize,
    pub d_tok: usize,
    pub condition_tokens: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub bank_version_hash: String,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &TrainedModel<T>, bank: &ConceptBank) -> Self {
        Checkpoint {
            q: model.cond.q(),
            d_tok: model.cond.token_dim(),
            condition_tokens: model
                .cond
                .tokens
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v.as_f64()).collect())
                .collect(),
            w: model
                .weights
                .w
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v.as_f64()).collect())
                .collect(),
            bias: model.weights.bias.iter().map(|v| v.as_f64()).collect(),
            bank_version_hash: bank.version_hash(),
        }
    }

    /// Rebuild the typed model, refusing a bank whose hash differs from the
    /// one the checkpoint was trained against.
    pub fn into_model<T: Scalar>(&self, bank: &ConceptBank) -> Result<TrainedModel<T>> {
        let actual = bank.version_hash();
        if actual != self.bank_version_hash {
            return Err(Error::BankVersionMismatch {
                expected: self.bank_version_hash.clone(),
                actual,
            });
        }
        let mut tokens = Array2::zeros((self.q, self.d_tok));
        for (r, row) in self.condition_tokens.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                tokens[(r, c)] = T::from_f64(v);
            }
        }
        let n = self.w.len();
        let m = self.w.first().map(|r| r.len()).unwrap_or(0);
        let mut w = Array2::zeros((n, m));
        for (r, row) in self.w.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                w[(r, c)] = T::from_f64(v);
            }
        }
        Ok(TrainedModel {
            cond: ConditionTokens { tokens },
            weights: AggregationWeights {
                w,
                bias: Array1::from_iter(self.bias.iter().map(|&v| T::from_f64(v))),
            },
            bank_version: bank.version,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::synthetic::SyntheticTextEncoder;
    use crate::backends::{substream_rng, TextEncoder};
    use crate::bank::{
        activate_concepts, add_concepts, AgentMemory, ConceptBank, LabelMeta,
    };
    use approx::assert_relative_eq;

    fn enc() -> SyntheticTextEncoder<f64> {
        SyntheticTextEncoder::new(16, 8, 3)
    }

    fn small_bank(labels: &[&str], concepts: &[&str]) -> ConceptBank {
        let mut bank =
            ConceptBank::new(labels.iter().map(|l| LabelMeta::new(l)).collect()).unwrap();
        let mut mem = AgentMemory::new();
        mem.record_initial(&bank);
        let texts: Vec<String> = concepts.iter().map(|c| c.to_string()).collect();
        let added = add_concepts(&bank, &mut mem, &texts, "y", 0).unwrap();
        let ids: Vec<_> = added.iter().map(|c| c.id.clone()).collect();
        activate_concepts(&mut bank, &mut mem, &ids).unwrap();
        bank
    }

    #[test]
    fn prompt_length_is_q_plus_label_plus_concept() {
        let e = enc();
        let mut rng = substream_rng(1, "cond");
        let cond = ConditionTokens::<f64>::init(8, 8, 0.02, &mut rng);
        let seq = build_prompt(&e, "cat", "sharp whiskers", &cond).unwrap();
        assert_eq!(seq.len(), 8 + 1 + 2);
        assert_eq!(seq.learnable_prefix, 8);
    }

    #[test]
    fn same_pair_builds_identical_sequences() {
        let e = enc();
        let mut rng = substream_rng(1, "cond");
        let cond = ConditionTokens::<f64>::init(4, 8, 0.02, &mut rng);
        let a = build_prompt(&e, "cat", "whiskers", &cond).unwrap();
        let b = build_prompt(&e, "cat", "whiskers", &cond).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_concepts_share_prefix_through_label() {
        let e = enc();
        let mut rng = substream_rng(1, "cond");
        let cond = ConditionTokens::<f64>::init(4, 8, 0.02, &mut rng);
        let a = build_prompt(&e, "cat", "whiskers", &cond).unwrap();
        let b = build_prompt(&e, "cat", "stripes", &cond).unwrap();
        for p in 0..5 {
            assert_eq!(a.tokens[p], b.tokens[p], "position {p} should match");
        }
        assert_ne!(a.tokens[5], b.tokens[5]);
    }

    fn scores_fixture(raw: &[[f64; 2]; 2], e_entries: &[[u8; 2]; 2]) -> ScoreTensor<f64> {
        let e = EditableMatrix {
            entries: e_entries.iter().map(|r| r.to_vec()).collect(),
            bank_version: 0,
        };
        let mut scores = Array2::zeros((2, 2));
        for j in 0..2 {
            for k in 0..2 {
                let raw_v = raw[j][k];
                scores[(j, k)] = if e.is_clamped(j, k) { raw_v.min(0.0) } else { raw_v };
            }
        }
        ScoreTensor
 {
            scores,
            bank_version: 0,
        }
    }

    #[test]
    fn clamp_all_set_and_positive_gives_zero() {
        let t = scores_fixture(&[[0.5, 0.2], [0.1, 0.9]], &[[1, 1], [1, 1]]);
        assert!(t.scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clamp_clear_is_identity() {
        let t = scores_fixture(&[[0.5, -0.2], [0.1, 0.9]], &[[0, 0], [0, 0]]);
        assert_eq!(t.scores[(0, 1)], -0.2);
        assert_eq!(t.scores[(1, 1)], 0.9);
    }

    #[test]
    fn clamp_keeps_negative_scores() {
        // min(-0.2, 0) = -0.2: the clamp only suppresses positives.
        let t = scores_fixture(&[[-0.2, 0.3], [0.0, 0.0]], &[[1, 0], [0, 0]]);
        assert_eq!(t.scores[(0, 0)], -0.2);
    }

    #[test]
    fn score_sample_rejects_wrong_shape() {
        let e = enc();
        let bank = small_bank(&["a", "b"], &["c one", "c two"]);
        let builder = PromptBuilder::new(&e, &bank, true).unwrap();
        let mut rng = substream_rng(2, "cond");
        let cond = ConditionTokens::init(2, 8, 0.02, &mut rng);
        let embs = builder.encode_all(&e, &cond).unwrap();
        let img = e.encode_text("c one").unwrap();
        let bad = EditableMatrix::all_clear(3, 2, 0);
        assert!(score_sample(&img, &embs, 2, 2, &bad, 0).is_err());
    }

    #[test]
    fn aggregate_is_per_row_dot() {
        let scores = ScoreTensor {
            scores: ndarray::array![[0.2, 0.3], [0.5, -0.1]],
            bank_version: 0,
        };
        let weights = AggregationWeights {
            w: ndarray::array![[1.0, 1.0], [1.0, 1.0]],
            bias: ndarray::array![0.0, 0.0],
        };
        let s = aggregate(&scores, &weights);
        assert_relative_eq!(s[0], 0.5);
        assert_relative_eq!(s[1], 0.4);
    }

    #[test]
    fn aggregate_row_locality() {
        let scores = ScoreTensor {
            scores: ndarray::array![[0.2, 0.3], [0.5, -0.1]],
            bank_version: 0,
        };
        let mut weights = AggregationWeights {
            w: ndarray::array![[1.0, 2.0], [3.0, 4.0]],
            bias: ndarray::array![0.1, -0.2],
        };
        let before = aggregate(&scores, &weights);
        weights.w.row_mut(0).mapv_inplace(|v| v * 2.0);
        let after = aggregate(&scores, &weights);
        assert_relative_eq!(after[0], 2.0 * (before[0] - 0.1) + 0.1);
        assert_relative_eq!(after[1], before[1]);
    }

    #[test]
    fn aggregate_zero_scores_gives_bias() {
        let scores = ScoreTensor {
            scores: Array2::zeros((2, 3)),
            bank_version: 0,
        };
        let weights = AggregationWeights {
            w: Array2::from_elem((2, 3), 5.0),
            bias: ndarray::array![0.7, -0.3],
        };
        let s = aggregate(&scores, &weights);
        assert_relative_eq!(s[0], 0.7);
        assert_relative_eq!(s[1], -0.3);
    }

    #[test]
    fn loss_matches_hand_value_at_zero_logits() {
        // N=2, logits [0,0], true=0:
        // (1/2)[2*(-log 0.5) + (-log 0.5)] = 1.5*ln 2 = 1.0397...
        let l = loss(&ndarray::array![0.0, 0.0], 0).unwrap();
        assert_relative_eq!(l, 1.5 * std::f64::consts::LN_2, max_relative = 1e-12);
        assert_relative_eq!(l, 1.0397, max_relative = 1e-4);
    }

    #[test]
    fn loss_vanishes_at_confident_correct_prediction() {
        let l = loss(&ndarray::array![40.0, -40.0, -40.0], 0).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn loss_with_unit_positive_weight_reduces_to_bce_mean() {
        // With W_p forced to 1 the expression is the plain mean BCE; check
        // by sweeping the same logits through a direct evaluation.
        let logits = ndarray::array![0.3, -0.8, 1.2];
        let l = loss(&logits, 1).unwrap();
        let n = 3.0;
        let mut plain = 0.0;
        for (j, &s) in logits.iter().enumerate() {
            let sig: f64 = 1.0 / (1.0 + (-s as f64).exp());
            if j == 1 {
                plain += -(n) * sig.ln();
            } else {
                plain += -(1.0 - sig).ln();
            }
        }
        assert_relative_eq!(l, plain / n, max_relative = 1e-9);
    }

    #[test]
    fn loss_rejects_non_finite() {
        assert!(loss(&ndarray::array![f64::NAN, 0.0], 0).is_err());
    }

    #[test]
    fn predict_breaks_ties_low() {
        assert_eq!(predict(&ndarray::array![0.5, 0.5, 0.1]), 0);
        assert_eq!(predict(&ndarray::array![0.1, 0.9, 0.9]), 1);
    }

    #[test]
    fn shared_scores_identity_and_orthogonality() {
        let e = enc();
        let bank = small_bank(&["only"], &["lone concept"]);
        let img = e.encode_text("lone concept").unwrap();
        let s = score_sample_shared(&e, &img, &bank).unwrap();
        assert_relative_eq!(s[0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn checkpoint_rejects_other_bank() {
        let bank = small_bank(&["a", "b"], &["c one", "c two"]);
        let other = small_bank(&["a", "b"], &["c one", "c three"]);
        let model = TrainedModel::<f64> {
            cond: ConditionTokens {
                tokens: Array2::zeros((2, 8)),
            },
            weights: AggregationWeights::zeros(2, 2),
            bank_version: bank.version,
        };
        let ckpt = Checkpoint::from_model(&model, &bank);
        assert!(ckpt.into_model::<f64>(&bank).is_ok());
        assert!(matches!(
            ckpt.into_model::<f64>(&other),
            Err(Error::BankVersionMismatch { .. })
        ));
    }
}
