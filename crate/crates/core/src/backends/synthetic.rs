//! Deterministic synthetic encoder and planted-world dataset generator.
//!
//! The text encoder embeds each token as a seeded pseudo-random vector keyed
//! by the token string, mean-pools a sequence, applies a fixed seeded linear
//! projection, and normalizes. It is differentiable in the learnable token
//! positions, order-insensitive, and trivially re-derivable in tests.
//!
//! The world generator plants a ground truth: every label owns a set of
//! concepts, and an image embedding is the normalized sum of the concept
//! text embeddings present in that image plus Gaussian noise. Since presence
//! follows the same per-(label, concept) table that drives the scripted fact
//! verdicts, the agent loop's findings can be checked against the plant.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{
    sample_normal_vector, substream_rng, Dataset, Embedding, Sample, TextEncoder, TokenSequence,
};
use crate::bank::{LabelMeta, Verdict};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean-pool-and-project text encoder over seeded per-token embeddings.
#[derive(Debug, Clone)]
pub struct SyntheticTextEncoder<T: Scalar> {
    d: usize,
    d_tok: usize,
    seed: u64,
    projection: Array2<T>,
}

impl<T: Scalar> SyntheticTextEncoder<T> {
    pub fn new(d: usize, d_tok: usize, seed: u64) -> Self {
        let mut rng = substream_rng(seed, "text-projection");
        let scale = T::from_f64(1.0 / (d_tok as f64).sqrt());
        let mut projection = Array2::zeros((d, d_tok));
        for i in 0..d {
            let row = sample_normal_vector::<T>(&mut rng, d_tok);
            for j in 0..d_tok {
                projection[(i, j)] = row[j] * scale;
            }
        }
        SyntheticTextEncoder {
            d,
            d_tok,
            seed,
            projection,
        }
    }

    /// The token embedding for a single token string.
    pub fn token_embedding(&self, token: &str) -> Array1<T> {
        let mut rng = substream_rng(self.seed, &format!("token:{token}"));
        sample_normal_vector(&mut rng, self.d_tok)
    }

    pub fn projection(&self) -> &Array2<T> {
        &self.projection
    }

    fn pre_normalization(&self, seq: &TokenSequence<T>) -> Array1<T> {
        let len = T::from_usize(seq.len());
        let mut mean = Array1::zeros(self.d_tok);
        for t in &seq.tokens {
            mean = mean + t;
        }
        mean = mean.mapv(|x| x / len);
        self.projection.dot(&mean)
    }
}

impl<T: Scalar> TextEncoder<T> for SyntheticTextEncoder<T> {
    fn dim(&self) -> usize {
        self.d
    }

    fn token_dim(&self) -> usize {
        self.d_tok
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence<T>> {
        let norm = crate::bank::normalize_text(text);
        if norm.is_empty() {
            return Err(Error::EmptyInput("cannot tokenize empty text".to_string()));
        }
        let tokens = norm
            .split_whitespace()
            .map(|tok| self.token_embedding(tok))
            .collect();
        Ok(TokenSequence::fixed(tokens))
    }

    fn encode_sequence(&self, seq: &TokenSequence<T>) -> Result<Embedding<T>> {
        if seq.is_empty() {
            return Err(Error::EmptyInput("cannot encode empty sequence".to_string()));
        }
        Embedding::unit(self.pre_normalization(seq))
    }

    fn backprop_sequence(
        &self,
        seq: &TokenSequence<T>,
        cotangent: &Array1<T>,
    ) -> Result<Array2<T>> {
        if seq.is_empty() {
            return Err(Error::EmptyInput("cannot encode empty sequence".to_string()));
        }
        let u = self.pre_normalization(seq);
        let norm_sq: T = u.iter().map(|&x| x * x).sum();
        let norm = norm_sq.sqrt();
        if norm <= T::epsilon() {
            return Err(Error::NonFinite("zero-norm sequence embedding".to_string()));
        }
        // d(u/|u|)/du applied to the cotangent g: g/|u| - u (u.g)/|u|^3
        let ug = u.dot(cotangent);
        let du = cotangent.mapv(|g| g / norm) - u.mapv(|x| x * ug / (norm * norm_sq));
        // Mean pooling gives every token the same 1/L coefficient.
        let dm = self.projection.t().dot(&du);
        let len = T::from_usize(seq.len());
        let per_token = dm.mapv(|x| x / len);
        let mut grads = Array2::zeros((seq.learnable_prefix, self.d_tok));
        for r in 0..seq.learnable_prefix {
            grads.row_mut(r).assign(&per_token);
        }
        Ok(grads)
    }
}

/// Per-concept ground truth in a planted world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldConcept {
    pub text: String,
    /// Fact verdicts per label name; labels absent from the map are
    /// `unrelated`.
    #[serde(default)]
    pub verdicts: BTreeMap<String, Verdict>,
    /// Probability that this concept appears in an image of each label;
    /// absent labels never contain it.
    #[serde(default)]
    pub presence: BTreeMap<String, f64>,
    /// Labels whose single-label generation prompt lists this phrase.
    #[serde(default)]
    pub generated_for: Vec<String>,
    /// Label groups whose multi-label (confusable) prompt lists this phrase.
    #[serde(default)]
    pub confusable_for: Vec<Vec<String>>,
}

/// One label in a planted world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldLabel {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superclass: Option<String>,
}

/// Serializable definition of a planted synthetic world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    pub d: usize,
    pub d_tok: usize,
    pub labels: Vec<WorldLabel>,
    pub concepts: Vec<WorldConcept>,
    pub train_per_label: usize,
    pub test_per_label: usize,
    /// Standard deviation of per-dimension Gaussian noise added to the
    /// concept-sum before normalization.
    pub noise_sigma: f64,
}

impl WorldSpec {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn label_names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.name.clone()).collect()
    }

    /// The bank-facing label list.
    pub fn label_metas(&self) -> Vec<LabelMeta> {
        self.labels
            .iter()
            .map(|l| match &l.superclass {
                Some(sc) => LabelMeta::with_superclass(&l.name, sc),
                None => LabelMeta::new(&l.name),
            })
            .collect()
    }

    /// Planted verdict, defaulting to `Unrelated` for unlisted pairs.
    pub fn verdict(&self, concept_text: &str, label: &str) -> Verdict {
        let norm = crate::bank::normalize_text(concept_text);
        self.concepts
            .iter()
            .find(|c| crate::bank::normalize_text(&c.text) == norm)
            .and_then(|c| c.verdicts.get(label).copied())
            .unwrap_or(Verdict::Unrelated)
    }

    /// Phrases listed by the generation fixture for one label.
    pub fn generation_fixture(&self, label: &str) -> Vec<String> {
        self.concepts
            .iter()
            .filter(|c| c.generated_for.iter().any(|l| l == label))
            .map(|c| c.text.clone())
            .collect()
    }

    /// Phrases listed by the multi-label fixture for a label group.
    pub fn confusable_fixture(&self, group: &[String]) -> Vec<String> {
        let mut want: Vec<&String> = group.iter().collect();
        want.sort();
        self.concepts
            .iter()
            .filter(|c| {
                c.confusable_for.iter().any(|g| {
                    let mut have: Vec<&String> = g.iter().collect();
                    have.sort();
                    have == want
                })
            })
            .map(|c| c.text.clone())
            .collect()
    }
}

/// Runtime view of a planted world: spec + encoder + cached concept
/// embeddings.
pub struct SyntheticWorld<T: Scalar> {
    pub spec: WorldSpec,
    pub encoder: SyntheticTextEncoder<T>,
    concept_embs: Vec<Embedding<T>>,
}

impl<T: Scalar> SyntheticWorld<T> {
    pub fn new(spec: WorldSpec, seed: u64) -> Result<Self> {
        let encoder = SyntheticTextEncoder::new(spec.d, spec.d_tok, seed);
        let concept_embs = spec
            .concepts
            .iter()
            .map(|c| encoder.encode_text(&c.text))
            .collect::<Result<Vec<_>>>()?;
        Ok(SyntheticWorld {
            spec,
            encoder,
            concept_embs,
        })
    }

    /// Generate the full embedded dataset. Pure function of (seed, spec).
    pub fn make_dataset(&self, seed: u64) -> Result<Dataset<T>> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (split, count, out) in [
            ("train", self.spec.train_per_label, &mut train),
            ("test", self.spec.test_per_label, &mut test),
        ] {
            for (j, label) in self.spec.labels.iter().enumerate() {
                for i in 0..count {
                    let id = format!("{split}:{}:{i}", label.name);
                    let emb = self.image_embedding(&label.name, seed, &id)?;
                    out.push(Sample { id, label: j, emb });
                }
            }
        }
        Ok(Dataset {
            labels: self.spec.label_metas(),
            train,
            test,
        })
    }

    fn image_embedding(&self, label: &str, seed: u64, image_id: &str) -> Result<Embedding<T>> {
        let mut rng = substream_rng(seed, &format!("img:{image_id}"));
        let mut sum: Array1<T> = Array1::zeros(self.spec.d);
        let mut any = false;
        for (c, emb) in self.spec.concepts.iter().zip(&self.concept_embs) {
            let rate = c.presence.get(label).copied().unwrap_or(0.0);
            // Draw the coin even for rate 0/1 so presence schedules stay
            // aligned when rates change between worlds.
            let coin: f64 = rng.random();
            if rate > 0.0 && coin < rate {
                sum = sum + emb.as_array();
                any = true;
            }
        }
        if !any {
            return Err(Error::InvalidConfig(format!(
                "label `{label}` has no present concept for image {image_id}; give it at least one presence-1.0 concept"
            )));
        }
        if self.spec.noise_sigma > 0.0 {
            let noise =
                sample_normal_vector::<T>(&mut rng, self.spec.d).mapv(|x| {
                    x * T::from_f64(self.spec.noise_sigma)
                });
            sum = sum + &noise;
        }
        Embedding::unit(sum)
    }
}
