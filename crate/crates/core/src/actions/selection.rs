//! Concept selection by learning-to-search.
//!
//! A dictionary of K learnable d-vectors is trained with a linear
//! classification head on top of the image/atom dot products, by
//! categorical cross-entropy. In repair mode the head predicts |n|+1
//! classes: one per unidentifiable label plus a single negative class for
//! everything else. After training, atoms are unit-normalized and each is
//! greedily mapped (highest head-weight norm first) to its nearest unused
//! candidate concept embedding by cosine, yielding K distinct concepts.

use ndarray::{Array1, Array2};

use crate::backends::{sample_normal_vector, substream_rng, Embedding, Sample, TextEncoder};
use crate::bank::Concept;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which classes the dictionary head predicts.
#[derive(Debug, Clone, PartialEq)]
pub enum SelectionTarget {
    /// One class per bank label.
    AllLabels,
    /// Repair mode: the listed label indices each get a class; all other
    /// labels collapse into one negative class.
    Repair(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct SelectionConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            epochs: 100,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

/// Result of one selection round.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    /// K distinct concepts, in atom-influence order.
    pub chosen: Vec<Concept>,
    /// Output width of the classification head (N, or |n|+1 in repair mode).
    pub head_width: usize,
}

fn softmax_stable<T: Scalar>(logits: &Array1<T>) -> Array1<T> {
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps = logits.mapv(|v| (v - max).exp());
    let sum: T = exps.iter().cloned().sum();
    exps.mapv(|v| v / sum)
}

/// Select `k` concepts from the candidate pool against labeled training
/// image embeddings.
pub fn select_concepts<T: Scalar, E: TextEncoder<T>>(
    encoder: &E,
    pool: &[Concept],
    k: usize,
    target: &SelectionTarget,
    n_labels: usize,
    train_samples: &[Sample<T>],
    config: &SelectionConfig,
) -> Result<SelectionOutcome> {
    if k == 0 {
        return Err(Error::InvalidConfig("cannot select zero concepts".to_string()));
    }
    if pool.len() < k {
        return Err(Error::PoolTooSmall { pool: pool.len(), k });
    }
    if train_samples.is_empty() {
        return Err(Error::EmptyInput("selection needs training images".to_string()));
    }

    let candidate_embs: Vec<Embedding<T>> = pool
        .iter()
        .map(|c| encoder.encode_text(&c.text))
        .collect::<Result<Vec<_>>>()?;
    let tol = T::from_f64(1e-9);
    let all_identical = candidate_embs.iter().skip(1).all(|e| {
        e.as_array()
            .iter()
            .zip(candidate_embs[0].as_array().iter())
            .all(|(&a, &b)| (a - b).abs() < tol)
    });
    if candidate_embs.len() > 1 && all_identical {
        return Err(Error::DegenerateCandidates);
    }

    // Class remapping for the head.
    let (head_width, class_of): (usize, Box<dyn Fn(usize) -> usize>) = match target {
        SelectionTarget::AllLabels => (n_labels, Box::new(|l| l)),
        SelectionTarget::Repair(subset) => {
            let subset = subset.clone();
            let width = subset.len() + 1;
            let neg = subset.len();
            (
                width,
                Box::new(move |l| subset.iter().position(|&s| s == l).unwrap_or(neg)),
            )
        }
    };

    let d = encoder.dim();
    let mut rng = substream_rng(config.seed, "dict-init");
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut atoms = Array2::<T>::zeros((k, d));
    for r in 0..k {
        let row = sample_normal_vector::<T>(&mut rng, d).mapv(|v| v * scale);
        atoms.row_mut(r).assign(&row);
    }
    let mut head = Array2::<T>::zeros((head_width, k));
    let mut bias = Array1::<T>::zeros(head_width);

    let lr = T::from_f64(config.learning_rate);
    let count = T::from_usize(train_samples.len());
    // Plain full-batch gradient descent with Adam-style constant step is
    // overkill here; the problem is tiny and convex-ish, so Adam it is for
    // consistency with the bottleneck trainer.
    let mut adam = AdamBuf::<T>::new(k * d + head_width * k + head_width, config.learning_rate);
    let _ = lr;

    for _epoch in 0..config.epochs {
        let mut d_atoms = Array2::<T>::zeros((k, d));
        let mut d_head = Array2::<T>::zeros((head_width, k));
        let mut d_bias = Array1::<T>::zeros(head_width);
        for s in train_samples {
            let x = s.emb.as_array();
            let z = atoms.dot(x);
            let logits = head.dot(&z) + &bias;
            let mut delta = softmax_stable(&logits);
            let class = class_of(s.label);
            delta[class] -= T::one();
            let delta = delta.mapv(|v| v / count);
            for c in 0..head_width {
                d_bias[c] += delta[c];
                for a in 0..k {
                    d_head[(c, a)] += delta[c] * z[a];
                }
            }
            let dz = head.t().dot(&delta);
            for a in 0..k {
                if dz[a] != T::zero() {
                    d_atoms.row_mut(a).scaled_add(dz[a], x);
                }
            }
        }
        adam.step(&mut [
            (atoms.as_slice_mut().unwrap(), d_atoms.as_slice().unwrap()),
            (head.as_slice_mut().unwrap(), d_head.as_slice().unwrap()),
            (bias.as_slice_mut().unwrap(), d_bias.as_slice().unwrap()),
        ]);
    }

    // Atom influence: head column norm, descending; ties keep atom order.
    let mut order: Vec<usize> = (0..k).collect();
    let col_norm = |a: usize| -> f64 {
        (0..head_width)
            .map(|c| head[(c, a)].as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    };
    order.sort_by(|&a, &b| col_norm(b).partial_cmp(&col_norm(a)).unwrap().then(a.cmp(&b)));

    let mut used = vec![false; pool.len()];
    let mut chosen = Vec::with_capacity(k);
    for &a in &order {
        let atom = atoms.row(a).to_owned();
        let atom_unit = match Embedding::unit(atom) {
            Ok(u) => u,
            // A dead (all-zero) atom has no direction; fall back to the
            // first unused candidate so the mapping stays total.
            Err(_) => {
                let idx = used.iter().position(|&u| !u).expect("k <= pool");
                used[idx] = true;
                chosen.push(pool[idx].clone());
                continue;
            }
        };
        let best = (0..pool.len())
            .filter(|&i| !used[i])
            .max_by(|&i, &j| {
                atom_unit
                    .dot(&candidate_embs[i])
                    .partial_cmp(&atom_unit.dot(&candidate_embs[j]))
                    .unwrap()
            })
            .expect("k <= pool guarantees an unused candidate");
        used[best] = true;
        chosen.push(pool[best].clone());
    }

    Ok(SelectionOutcome { chosen, head_width })
}

/// Adam over several parameter buffers sharing one timestep.
struct AdamBuf<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
    lr: T,
}

impl<T: Scalar> AdamBuf<T> {
    fn new(len: usize, lr: f64) -> Self {
        AdamBuf {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            lr: T::from_f64(lr),
        }
    }

    fn step(&mut self, groups: &mut [(&mut [T], &[T])]) {
        let beta1 = T::from_f64(0.9);
        let beta2 = T::from_f64(0.999);
        let eps = T::from_f64(1e-8);
        self.t += 1;
        let bc1 = T::one() - beta1.powi(self.t);
        let bc2 = T::one() - beta2.powi(self.t);
        let mut offset = 0usize;
        for (params, grads) in groups.iter_mut() {
            for i in 0..params.len() {
                let gi = grads[i];
                let idx = offset + i;
                self.m[idx] = beta1 * self.m[idx] + (T::one() - beta1) * gi;
                self.v[idx] = beta2 * self.v[idx] + (T::one() - beta2) * gi * gi;
                params[i] -= self.lr * (self.m[idx] / bc1) / ((self.v[idx] / bc2).sqrt() + eps);
            }
            offset += params.len();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::synthetic::SyntheticTextEncoder;
    use crate::backends::{substream_rng, TextEncoder};

    fn enc() -> SyntheticTextEncoder<f64> {
        SyntheticTextEncoder::new(64, 32, 21)
    }

    fn concept(text: &str) -> Concept {
        Concept::new(text, "fixture", 0)
    }

    /// Planted world: each of 3 labels owns 2 concepts; images are noisy
    /// sums of the label's concept embeddings. Decoys are random phrases
    /// that never appear in images.
    fn planted() -> (
        SyntheticTextEncoder<f64>,
        Vec<Concept>,
        Vec<Sample<f64>>,
        Vec<usize>,
    ) {
        let e = enc();
        let planted_texts = [
            ["ridged curved horn", "matted shaggy coat"],
            ["iridescent blue plumage", "forked narrow tail"],
            ["translucent veined wing", "segmented chitinous shell"],
        ];
        let decoys = ["gleaming chrome bumper", "weathered brick chimney", "tangled fishing net"];
        let mut pool = Vec::new();
        let mut planted_idx = Vec::new();
        for row in &planted_texts {
            for t in row {
                planted_idx.push(pool.len());
                pool.push(concept(t));
            }
        }
        for t in &decoys {
            pool.push(concept(t));
        }
        let mut samples = Vec::new();
        for (label, row) in planted_texts.iter().enumerate() {
            let base: Array1<f64> = row
                .iter()
                .map(|t| e.encode_text(t).unwrap().as_array().clone())
                .fold(Array1::zeros(64), |acc, v| acc + v);
            for i in 0..10 {
                let mut rng = substream_rng(7, &format!("sel:{label}:{i}"));
                let noise = sample_normal_vector::<f64>(&mut rng, 64).mapv(|x| x * 0.05);
                samples.push(Sample {
                    id: format!("{label}:{i}"),
                    label,
                    emb: Embedding::unit(&base + &noise).unwrap(),
                });
            }
        }
        (e, pool, samples, planted_idx)
    }

    #[test]
    fn planted_concepts_are_the_discriminative_ones() {
        // Brute-force oracle for the plant itself: rank every candidate by
        // its class-discriminative margin for each label (mean dot on that
        // label minus the best mean dot on any other label). The label's
        // own planted pair must occupy the top two ranks.
        let (e, pool, samples, planted_idx) = planted();
        let mean_dot = |c: &Concept, label: usize| -> f64 {
            let emb = e.encode_text(&c.text).unwrap();
            let of_label: Vec<f64> = samples
                .iter()
                .filter(|s| s.label == label)
                .map(|s| s.emb.dot(&emb))
                .collect();
            of_label.iter().sum::<f64>() / of_label.len() as f64
        };
        for label in 0..3 {
            let margin = |c: &Concept| -> f64 {
                let own = mean_dot(c, label);
                let best_other = (0..3)
                    .filter(|&o| o != label)
                    .map(|o| mean_dot(c, o))
                    .fold(f64::NEG_INFINITY, f64::max);
                own - best_other
            };
            let mut ranked: Vec<usize> = (0..pool.len()).collect();
            ranked.sort_by(|&a, &b| margin(&pool[b]).partial_cmp(&margin(&pool[a])).unwrap());
            let own_planted: Vec<usize> = planted_idx
                .iter()
                .copied()
                .filter(|&i| i / 2 == label)
                .collect();
            for want in own_planted {
                assert!(
                    ranked[..2].contains(&want),
                    "label {label}: planted concept {} not among the top discriminators",
                    pool[want].text
                );
            }
        }
    }

    #[test]
    fn selection_recovers_planted_concepts() {
        let (e, pool, samples, planted_idx) = planted();
        let out = select_concepts(
            &e,
            &pool,
            6,
            &SelectionTarget::AllLabels,
            3,
            &samples,
            &SelectionConfig::default(),
        )
        .unwrap();
        assert_eq!(out.head_width, 3);
        let planted_texts: Vec<&str> = planted_idx.iter().map(|&i| pool[i].text.as_str()).collect();
        let recovered = out
            .chosen
            .iter()
            .filter(|c| planted_texts.contains(&c.text.as_str()))
            .count();
        assert!(
            recovered as f64 / 6.0 >= 0.8,
            "recovered only {recovered}/6 planted concepts"
        );
    }

    #[test]
    fn k_equal_pool_is_a_bijection() {
        let (e, pool, samples, _) = planted();
        let out = select_concepts(
            &e,
            &pool,
            pool.len(),
            &SelectionTarget::AllLabels,
            3,
            &samples,
            &SelectionConfig::default(),
        )
        .unwrap();
        let mut got: Vec<&str> = out.chosen.iter().map(|c| c.text.as_str()).collect();
        let mut want: Vec<&str> = pool.iter().map(|c| c.text.as_str()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn repair_mode_head_width_is_subset_plus_one() {
        let (e, pool, samples, _) = planted();
        let out = select_concepts(
            &e,
            &pool,
            2,
            &SelectionTarget::Repair(vec![1]),
            3,
            &samples,
            &SelectionConfig::default(),
        )
        .unwrap();
        assert_eq!(out.head_width, 2);
    }

    #[test]
    fn pool_smaller_than_k_errors() {
        let (e, pool, samples, _) = planted();
        let err = select_concepts(
            &e,
            &pool[..2],
            5,
            &SelectionTarget::AllLabels,
            3,
            &samples,
            &SelectionConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::PoolTooSmall { pool: 2, k: 5 }));
    }

    #[test]
    fn degenerate_pool_errors() {
        let (e, _, samples, _) = planted();
        // Identical normalized text yields identical embeddings; so does a
        // token permutation under mean pooling.
        let pool = vec![concept("ridged curved horn"), concept("horn ridged curved")];
        let err = select_concepts(
            &e,
            &pool,
            1,
            &SelectionTarget::AllLabels,
            3,
            &samples,
            &SelectionConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateCandidates));
    }

    #[test]
    fn selection_is_deterministic() {
        let (e, pool, samples, _) = planted();
        let run = || {
            select_concepts(
                &e,
                &pool,
                4,
                &SelectionTarget::AllLabels,
                3,
                &samples,
                &SelectionConfig::default(),
            )
            .unwrap()
            .chosen
            .iter()
            .map(|c| c.text.clone())
            .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
