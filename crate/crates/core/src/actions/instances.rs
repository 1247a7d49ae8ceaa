//! Few-shot instance selection.
//!
//! Per label, k-means (seeded, k-means++ init) clusters that label's image
//! embeddings into beta clusters; the sample nearest each centroid becomes
//! an instance. Centroids themselves are averages, not real images, so the
//! nearest real sample stands in. The resulting instance set is frozen for
//! the rest of the run, which keeps the feedback environment stable.

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{substream_rng, Dataset, Sample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Frozen per-label instance ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSet {
    pub beta: usize,
    /// Selected sample ids, grouped by label index.
    pub per_label: Vec<Vec<String>>,
}

impl InstanceSet {
    /// Resolve the ids back to samples of a dataset's train split.
    pub fn resolve<'a, T: Scalar>(&self, dataset: &'a Dataset<T>) -> Result<Vec<&'a Sample<T>>> {
        let mut out = Vec::new();
        for ids in &self.per_label {
            for id in ids {
                let sample = dataset
                    .train
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::EmptyInput(format!("instance id {id} not in dataset")))?;
                out.push(sample);
            }
        }
        Ok(out)
    }
}

fn sq_dist<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> T {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// k-means++ seeding: first center uniform, then D^2 sampling.
fn kmeanspp_init<T: Scalar>(
    points: &[&Array1<T>],
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Array1<T>> {
    let mut centers: Vec<Array1<T>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())].clone());
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| sq_dist(p, c).as_f64())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // All points coincide with existing centers; duplicate one.
            centers.push(points[0].clone());
            continue;
        }
        let mut target = rng.random::<f64>() * total;
        let mut chosen = points.len() - 1;
        for (i, &w) in d2.iter().enumerate() {
            if target < w {
                chosen = i;
                break;
            }
            target -= w;
        }
        centers.push(points[chosen].clone());
    }
    centers
}

/// Lloyd iterations; returns per-point assignments and final centroids.
fn kmeans<T: Scalar>(
    points: &[&Array1<T>],
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Vec<usize>, Vec<Array1<T>>) {
    let mut centers = kmeanspp_init(points, k, rng);
    let mut assign = vec![0usize; points.len()];
    for _round in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = sq_dist(p, &centers[0]);
            for (c, center) in centers.iter().enumerate().skip(1) {
                let d = sq_dist(p, center);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        // Recompute centroids; an empty cluster is reseeded to the point
        // farthest from its assigned centroid.
        let dim = points[0].len();
        let mut sums: Vec<Array1<T>> = (0..k).map(|_| Array1::zeros(dim)).collect();
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            sums[assign[i]] = &sums[assign[i]] + *p;
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        sq_dist(points[a], &centers[assign[a]])
                            .partial_cmp(&sq_dist(points[b], &centers[assign[b]]))
                            .unwrap()
                    })
                    .expect("points non-empty");
                centers[c] = points[far].clone();
                assign[far] = c;
                changed = true;
            } else {
                centers[c] = sums[c].mapv(|v| v / T::from_usize(counts[c]));
            }
        }
        if !changed {
            break;
        }
    }
    (assign, centers)
}

/// Select beta representative instances per label from the train split.
/// A label with fewer than beta images is an error suggesting a smaller
/// beta. The same (dataset, beta, seed) always yields the same set.
pub fn select_instances<T: Scalar>(
    dataset: &Dataset<T>,
    beta: usize,
    seed: u64,
) -> Result<InstanceSet> {
    if beta == 0 {
        return Err(Error::InvalidConfig("beta must be >= 1".to_string()));
    }
    let by_label = dataset.train_by_label();
    let mut per_label = Vec::with_capacity(by_label.len());
    for (j, idxs) in by_label.iter().enumerate() {
        let label = &dataset.labels[j].name;
        if idxs.len() < beta {
            return Err(Error::TooFewImages {
                label: label.clone(),
                have: idxs.len(),
                beta,
            });
        }
        if idxs.len() == beta {
            per_label.push(idxs.iter().map(|&i| dataset.train[i].id.clone()).collect());
            continue;
        }
        let points: Vec<&Array1<T>> = idxs
            .iter()
            .map(|&i| dataset.train[i].emb.as_array())
            .collect();
        let mut rng = substream_rng(seed, &format!("instances:{label}"));
        let (assign, centers) = kmeans(&points, beta, &mut rng);
        let mut ids = Vec::with_capacity(beta);
        for (c, center) in centers.iter().enumerate() {
            // Nearest member of this centroid's own cluster, so the beta
            // chosen samples are always distinct.
            let nearest = (0..points.len())
                .filter(|&i| assign[i] == c)
                .min_by(|&a, &b| {
                    sq_dist(points[a], center)
                        .partial_cmp(&sq_dist(points[b], center))
                        .unwrap()
                })
                .expect("clusters are non-empty after reseeding");
            ids.push(dataset.train[idxs[nearest]].id.clone());
        }
        per_label.push(ids);
    }
    Ok(InstanceSet { beta, per_label })
}

/// Stratified 50/50 split of the frozen instances into train and
/// validation sample lists. Odd groups put the extra sample in train.
pub fn split_instances<T: Scalar>(
    instances: &InstanceSet,
    dataset: &Dataset<T>,
    seed: u64,
) -> Result<(Vec<Sample<T>>, Vec<Sample<T>>)> {
    use rand::seq::SliceRandom;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (j, ids) in instances.per_label.iter().enumerate() {
        if ids.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "label index {j} has {} instances; need >= 2 to split",
                ids.len()
            )));
        }
        let mut shuffled = ids.clone();
        shuffled.shuffle(&mut substream_rng(seed, &format!("split:{j}")));
        let cut = shuffled.len().div_ceil(2);
        for (pos, id) in shuffled.iter().enumerate() {
            let sample = dataset
                .train
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| Error::EmptyInput(format!("instance id {id} not in dataset")))?
                .clone();
            if pos < cut {
                train.push(sample);
            } else {
                val.push(sample);
            }
        }
    }
    Ok((train, val))
}

/// Stratified split of arbitrary samples into (fit, held) by fraction,
/// keeping at least one sample per label on each side when possible.
pub fn stratified_split<T: Scalar>(
    samples: &[Sample<T>],
    n_labels: usize,
    frac: f64,
    seed: u64,
) -> (Vec<Sample<T>>, Vec<Sample<T>>) {
    use rand::seq::SliceRandom;
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); n_labels];
    for (i, s) in samples.iter().enumerate() {
        by_label[s.label].push(i);
    }
    let mut fit = Vec::new();
    let mut held = Vec::new();
    for (j, idxs) in by_label.iter().enumerate() {
        let mut order = idxs.clone();
        order.shuffle(&mut substream_rng(seed, &format!("stratified:{j}")));
        let cut = ((order.len() as f64) * frac).ceil() as usize;
        let cut = cut.clamp(1, order.len().saturating_sub(1).max(1));
        for (pos, &i) in order.iter().enumerate() {
            if pos < cut {
                fit.push(samples[i].clone());
            } else {
                held.push(samples[i].clone());
            }
        }
    }
    (fit, held)
}
