//! Pluggable encoder and LLM backends.
//!
//! Every downstream module talks to the encoder/LLM through the traits in
//! this module. The synthetic implementations are pure functions of
//! (seed, input), which makes the whole agent loop verifiable offline; the
//! real implementations (precomputed-feature encoder, HTTP LLM) plug in
//! behind the same traits.

pub mod cache;
pub mod http;
pub mod llm;
pub mod scripted;
pub mod synthetic;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Unit-normalized d-dimensional embedding. Because every encoder output
/// is normalized, cosine similarity is a plain dot product.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T: Scalar>(pub Array1<T>);

impl<T: Scalar> Embedding<T> {
    /// Normalize `v` to unit length. A zero or non-finite vector is an error.
    pub fn unit(v: Array1<T>) -> Result<Self> {
        let norm_sq: T = v.iter().map(|&x| x * x).sum();
        if !norm_sq.is_finite() {
            return Err(Error::NonFinite("embedding".to_string()));
        }
        let norm = norm_sq.sqrt();
        if norm <= T::epsilon() {
            return Err(Error::NonFinite("zero-norm embedding".to_string()));
        }
        Ok(Embedding(v.mapv(|x| x / norm)))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding<T>) -> T {
        self.0.dot(&other.0)
    }

    pub fn norm(&self) -> T {
        self.0.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn as_array(&self) -> &Array1<T> {
        &self.0
    }
}

/// Ordered token embeddings, with learnable positions occupying a
/// contiguous prefix of length `learnable_prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T: Scalar> {
    pub tokens: Vec<Array1<T>>,
    pub learnable_prefix: usize,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn fixed(tokens: Vec<Array1<T>>) -> Self {
        TokenSequence {
            tokens,
            learnable_prefix: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Prepend learnable tokens to a fixed suffix.
    pub fn with_learnable_prefix(prefix: Vec<Array1<T>>, suffix: &TokenSequence<T>) -> Self {
        let learnable_prefix = prefix.len();
        let mut tokens = prefix;
        tokens.extend(suffix.tokens.iter().cloned());
        TokenSequence {
            tokens,
            learnable_prefix,
        }
    }

    /// Concatenate two fixed sequences.
    pub fn concat_fixed(a: &TokenSequence<T>, b: &TokenSequence<T>) -> Self {
        let mut tokens = a.tokens.clone();
        tokens.extend(b.tokens.iter().cloned());
        TokenSequence {
            tokens,
            learnable_prefix: 0,
        }
    }
}

/// Text encoder: tokenize into embedding space and pool a token sequence
/// into a unit-normalized d-vector. The pooling map must be differentiable
/// with respect to the learnable token positions.
pub trait TextEncoder<T: Scalar> {
    /// Output embedding dimension d.
    fn dim(&self) -> usize;
    /// Token embedding dimension.
    fn token_dim(&self) -> usize;
    /// Deterministic fixed token embeddings for a non-empty text.
    fn tokenize(&self, text: &str) -> Result<TokenSequence<T>>;
    /// Pool a sequence into a unit d-vector.
    fn encode_sequence(&self, seq: &TokenSequence<T>) -> Result<Embedding<T>>;
    /// Pull an output cotangent back to the learnable token positions.
    /// Returns a (learnable_prefix x token_dim) gradient matrix.
    fn backprop_sequence(
        &self,
        seq: &TokenSequence<T>,
        cotangent: &Array1<T>,
    ) -> Result<Array2<T>>;

    /// Encode plain text with no learnable positions.
    fn encode_text(&self, text: &str) -> Result<Embedding<T>> {
        let seq = self.tokenize(text)?;
        self.encode_sequence(&seq)
    }
}

/// Where an image embedding comes from.
#[derive(Debug, Clone)]
pub enum ImageSource {
    /// Path to an image whose feature was precomputed into a cache.
    File(std::path::PathBuf),
    /// An already-computed feature vector.
    Feature(Vec<f64>),
}

/// Image encoder: maps an image source to a unit-normalized d-vector.
pub trait ImageEncoder<T: Scalar> {
    fn dim(&self) -> usize;
    fn encode(&self, source: &ImageSource) -> Result<Embedding<T>>;
}

/// One embedded image sample.
#[derive(Debug, Clone)]
pub struct Sample<T: Scalar> {
    pub id: String,
    pub label: usize,
    pub emb: Embedding<T>,
}

/// An embedded dataset split into train and test, with the label list.
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub labels: Vec<crate::bank::LabelMeta>,
    pub train: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    /// Train-sample indices grouped by label.
    pub fn train_by_label(&self) -> Vec<Vec<usize>> {
        let mut by_label = vec![Vec::new(); self.labels.len()];
        for (i, s) in self.train.iter().enumerate() {
            by_label[s.label].push(i);
        }
        by_label
    }

    /// Per-label mean image embedding over the train split (used for
    /// visual-similarity rankings).
    pub fn mean_train_embeddings(&self) -> Result<Vec<Embedding<T>>> {
        let mut sums: Vec<Array1<T>> =
            (0..self.labels.len()).map(|_| Array1::zeros(self.dim())).collect();
        let mut counts = vec![0usize; self.labels.len()];
        for s in &self.train {
            sums[s.label] = &sums[s.label] + s.emb.as_array();
            counts[s.label] += 1;
        }
        sums.into_iter()
            .zip(counts)
            .enumerate()
            .map(|(j, (sum, c))| {
                if c == 0 {
                    return Err(Error::EmptyInput(format!(
                        "label `{}` has no train samples",
                        self.labels[j].name
                    )));
                }
                Embedding::unit(sum)
            })
            .collect()
    }

    fn dim(&self) -> usize {
        self.train
            .first()
            .or_else(|| self.test.first())
            .map(|s| s.emb.dim())
            .unwrap_or(0)
    }
}

/// One logged LLM round trip. `parsed` is present exactly when the raw
/// response passed format validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlmExchange {
    pub template: String,
    pub args: Vec<String>,
    pub prompt: String,
    pub raw_response: String,
    pub parsed: Option<serde_json::Value>,
    pub retries_used: usize,
}

/// Raw text-in/text-out LLM transport. `sample_index` distinguishes the
/// repeated draws used for majority voting.
pub trait LlmApi {
    fn complete(&self, prompt: &str, temperature: f64, sample_index: usize) -> Result<String>;
    /// Total completions issued so far (for call-count contracts in tests).
    fn calls(&self) -> usize;
}

/// Deterministic named substream of a root seed. Every randomized stage
/// (splits, inits, shuffles, MCQ sampling) derives its RNG this way, so a
/// single root seed pins the whole run.
pub fn substream_rng(root_seed: u64, name: &str) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut material = root_seed.to_le_bytes().to_vec();
    material.extend_from_slice(name.as_bytes());
    let digest = crate::bank::sha256_hex(&material);
    let mut seed = [0u8; 32];
    for (i, chunk) in digest.as_bytes().chunks(2).take(32).enumerate() {
        seed[i] = u8::from_str_radix(std::str::from_utf8(chunk).unwrap(), 16).unwrap();
    }
    ChaCha8Rng::from_seed(seed)
}

/// Derive a child seed for a named stage.
pub fn derive_seed(root_seed: u64, name: &str) -> u64 {
    use rand::RngCore;
    substream_rng(root_seed, name).next_u64()
}

/// Sample a standard-normal vector of length `n`.
pub fn sample_normal_vector<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Array1<T> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    Array1::from_iter((0..n).map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_are_deterministic_and_independent() {
        use rand::RngCore;
        let mut a1 = substream_rng(7, "split");
        let mut a2 = substream_rng(7, "split");
        let mut b = substream_rng(7, "init");
        assert_eq!(a1.next_u64(), a2.next_u64());
        let mut a3 = substream_rng(7, "split");
        assert_ne!(a3.next_u64(), b.next_u64());
    }

    #[test]
    fn unit_normalization() {
        let e = Embedding::unit(Array1::from(vec![3.0_f64, 4.0])).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-12);
        assert!(Embedding::unit(Array1::from(vec![0.0_f64, 0.0])).is_err());
    }

    #[test]
    fn learnable_prefix_is_contiguous() {
        let fixed = TokenSequence::fixed(vec![Array1::from(vec![1.0_f64])]);
        let seq = TokenSequence::with_learnable_prefix(
            vec![Array1::from(vec![0.0_f64]), Array1::from(vec![2.0])],
            &fixed,
        );
        assert_eq!(seq.learnable_prefix, 2);
        assert_eq!(seq.len(), 3);
    }
}
