//! Gradient training of the conditional bottleneck.
//!
//! Only the condition tokens and the aggregation weights receive gradients;
//! the encoders stay frozen. The clamp applied where the editable matrix is
//! set uses a straight-through rule: the gradient passes while the raw score
//! is negative (min is the identity there) and is blocked once the entry is
//! clamped, so the model cannot relearn a forbidden activation.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;

use crate::backends::{substream_rng, Embedding, Sample, TextEncoder};
use crate::bank::{ConceptBank, EditableMatrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{
    aggregate, loss, loss_grad, predict, AggregationWeights, ConditionTokens, PromptBuilder,
    ScoreTensor,
};

/// Hyperparameters for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Number of learnable condition tokens.
    pub q: usize,
    pub learning_rate: f64,
    /// Separate Adam rate for the condition tokens. The tokens sit inside
    /// a mean pool with no frozen backbone anchoring them, so a step size
    /// that is harmless for the aggregation weights can drag every prompt
    /// embedding far from its text and invert score signs; keep this small
    /// relative to `learning_rate`.
    pub token_learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience on validation loss, in epochs.
    pub patience: usize,
    pub token_init_std: f64,
    /// Fixed multiplier applied to label logits before the loss; raw cosine
    /// logits are small, so this is exposed for calibration.
    pub logit_scale: f64,
    /// When false, prompts omit the label tokens (degenerate shared-score
    /// configuration used by the collapse comparison).
    pub include_label: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            q: 8,
            learning_rate: 0.01,
            token_learning_rate: 0.001,
            batch_size: 2048,
            max_epochs: 200,
            patience: 20,
            token_init_std: 0.02,
            logit_scale: 1.0,
            include_label: true,
            seed: 0,
        }
    }
}

/// Trained parameters.
#[derive(Debug, Clone)]
pub struct TrainedModel<T: Scalar> {
    pub cond: ConditionTokens<T>,
    pub weights: AggregationWeights<T>,
    pub bank_version: u64,
}

/// Scalar training diagnostics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainMetrics {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss_curve: Vec<f64>,
    pub val_loss_curve: Vec<f64>,
    pub val_accuracy: f64,
}

/// Everything a caller needs after training: the model, diagnostics, and
/// the validation score tensors (the planner's feedback signal).
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub model: TrainedModel<T>,
    pub metrics: TrainMetrics,
    pub val_tensors: Vec<ScoreTensor<T>>,
}

/// Per-epoch view handed to the optional training hook.
pub struct EpochInfo<'a, T: Scalar> {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub train_tensors: &'a [ScoreTensor<T>],
    pub val_tensors: &'a [ScoreTensor<T>],
}

/// Adam over one flat parameter buffer.
struct Adam<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
}

impl<T: Scalar> Adam<T> {
    fn new(len: usize, lr: f64) -> Self {
        Adam {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
        }
    }

    fn step(&mut self, params: &mut [T], grads: &[T]) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t);
        let bc2 = T::one() - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn raw_scores<T: Scalar>(
    image: &Embedding<T>,
    prompt_embs: &[Embedding<T>],
    n: usize,
    m: usize,
) -> Array2<T> {
    let mut scores = Array2::zeros((n, m));
    for j in 0..n {
        for k in 0..m {
            scores[(j, k)] = image.dot(&prompt_embs[j * m + k]);
        }
    }
    scores
}

fn clamp_scores<T: Scalar>(raw: &Array2<T>, e: &EditableMatrix) -> Array2<T> {
    let mut out = raw.clone();
    for j in 0..out.nrows() {
        for k in 0..out.ncols() {
            if e.is_clamped(j, k) {
                out[(j, k)] = out[(j, k)].min(T::zero());
            }
        }
    }
    out
}

/// The mean training objective over `samples` for explicit parameters.
/// This is the exact quantity the trainer descends; the finite-difference
/// gradient checks re-evaluate it directly.
pub fn objective<T: Scalar, E: TextEncoder<T>>(
    encoder: &E,
    builder: &PromptBuilder<T>,
    cond: &ConditionTokens<T>,
    weights: &AggregationWeights<T>,
    e_matrix: &EditableMatrix,
    samples: &[Sample<T>],
    logit_scale: f64,
) -> Result<T> {
    let embs = builder.encode_all(encoder, cond)?;
    let n = builder.n_labels();
    let m = builder.n_concepts();
    let scale = T::from_f64(logit_scale);
    let mut total = T::zero();
    for s in samples {
        let raw = raw_scores(&s.emb, &embs, n, m);
        let clamped = clamp_scores(&raw, e_matrix);
        let tensor = ScoreTensor {
            scores: clamped,
            bank_version: builder.bank_version,
        };
        let logits = aggregate(&tensor, weights).mapv(|v| v * scale);
        total += loss(&logits, s.label)?;
    }
    Ok(total / T::from_usize(samples.len()))
}

/// Gradients of [`objective`] with respect to the condition tokens, the
/// weight matrix, and the bias, in one backward pass. This is the exact
/// computation the trainer steps on; the acceptance suite checks it
/// against central finite differences of [`objective`].
pub fn gradients<T: Scalar, E: TextEncoder<T>>(
    encoder: &E,
    builder: &PromptBuilder<T>,
    cond: &ConditionTokens<T>,
    weights: &AggregationWeights<T>,
    e_matrix: &EditableMatrix,
    samples: &[Sample<T>],
    logit_scale: f64,
) -> Result<(Array2<T>, Array2<T>, Array1<T>)> {
    let n = builder.n_labels();
    let m = builder.n_concepts();
    let d = encoder.dim();
    let scale = T::from_f64(logit_scale);
    let embs = builder.encode_all(encoder, cond)?;
    let count = T::from_usize(samples.len());
    let mut d_w = Array2::<T>::zeros((n, m));
    let mut d_b = Array1::<T>::zeros(n);
    let mut prompt_cot: Vec<Array1<T>> = vec![Array1::zeros(d); n * m];
    for s in samples {
        let raw = raw_scores(&s.emb, &embs, n, m);
        let clamped = clamp_scores(&raw, e_matrix);
        let tensor = ScoreTensor {
            scores: clamped,
            bank_version: builder.bank_version,
        };
        let logits = aggregate(&tensor, weights).mapv(|v| v * scale);
        let g = loss_grad(&logits, s.label).mapv(|v| v * scale / count);
        for j in 0..n {
            d_b[j] += g[j];
            for k in 0..m {
                d_w[(j, k)] += g[j] * tensor.scores[(j, k)];
                // Straight-through min: blocked once the entry is clamped.
                let blocked = e_matrix.is_clamped(j, k) && raw[(j, k)] >= T::zero();
                if !blocked {
                    let delta = g[j] * weights.w[(j, k)];
                    if delta != T::zero() {
                        prompt_cot[j * m + k].scaled_add(delta, s.emb.as_array());
                    }
                }
            }
        }
    }
    let q = cond.q();
    let mut d_cond = Array2::<T>::zeros((q, encoder.token_dim()));
    if q > 0 {
        for j in 0..n {
            for k in 0..m {
                let cot = &prompt_cot[j * m + k];
                if cot.iter().all(|&v| v == T::zero()) {
                    continue;
                }
                let seq = builder.sequence(j, k, cond);
                d_cond += &encoder.backprop_sequence(&seq, cot)?;
            }
        }
    }
    Ok((d_cond, d_w, d_b))
}

/// Loss/accuracy/tensors of a split under fixed parameters.
fn evaluate_split<T: Scalar, E: TextEncoder<T>>(
    encoder: &E,
    builder: &PromptBuilder<T>,
    cond: &ConditionTokens<T>,
    weights: &AggregationWeights<T>,
    e_matrix: &EditableMatrix,
    samples: &[Sample<T>],
    logit_scale: f64,
) -> Result<(f64, f64, Vec<ScoreTensor<T>>)> {
    let embs = builder.encode_all(encoder, cond)?;
    let n = builder.n_labels();
    let m = builder.n_concepts();
    let scale = T::from_f64(logit_scale);
    let mut total = T::zero();
    let mut correct = 0usize;
    let mut tensors = Vec::with_capacity(samples.len());
    for s in samples {
        let raw = raw_scores(&s.emb, &embs, n, m);
        let clamped = clamp_scores(&raw, e_matrix);
        let tensor = ScoreTensor {
            scores: clamped,
            bank_version: builder.bank_version,
        };
        let logits = aggregate(&tensor, weights).mapv(|v| v * scale);
        total += loss(&logits, s.label)?;
        if predict(&logits) == s.label {
            correct += 1;
        }
        tensors.push(tensor);
    }
    let loss_mean = (total / T::from_usize(samples.len())).as_f64();
    let acc = correct as f64 / samples.len() as f64;
    Ok((loss_mean, acc, tensors))
}

/// Score a sample set under a trained model (clamp included).
pub fn score_with_model<T: Scalar, E: TextEncoder<T>>(
    encoder: &E,
    bank: &ConceptBank,
    model: &TrainedModel<T>,
    e_matrix: &EditableMatrix,
    samples: &[Sample<T>],
    include_label: bool,
) -> Result<Vec<ScoreTensor<T>>> {
    let builder = PromptBuilder::new(encoder, bank, include_label)?;
    let embs = builder.encode_all(encoder, &model.cond)?;
    let n = builder.n_labels();
    let m = builder.n_concepts();
    Ok(samples
        .iter()
        .map(|s| {
            let raw = raw_scores(&s.emb, &embs, n, m);
            ScoreTensor {
                scores: clamp_scores(&raw, e_matrix),
                bank_version: bank.version,
            }
        })
        .collect())
}

/// Label logits for one already-scored tensor under a model.
pub fn logits_for<T: Scalar>(
    tensor: &ScoreTensor<T>,
    model: &TrainedModel<T>,
    logit_scale: f64,
) -> Array1<T> {
    aggregate(tensor, &model.weights).mapv(|v| v * T::from_f64(logit_scale))
}

/// Train condition tokens and aggregation weights on the train split,
/// early-stopping on validation loss. Deterministic per seed.
pub fn train<T: Scalar, E: TextEncoder<T>>(
    encoder: &E,
    bank: &ConceptBank,
    e_matrix: &EditableMatrix,
    train_samples: &[Sample<T>],
    val_samples: &[Sample<T>],
    config: &TrainConfig,
    mut hook: Option<&mut dyn FnMut(&EpochInfo<'_, T>)>,
) -> Result<TrainOutcome<T>> {
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::EmptyInput(
            "training requires non-empty train and validation splits".to_string(),
        ));
    }
    let n = bank.n_labels();
    let m = bank.n_concepts();
    if m == 0 {
        return Err(Error::EmptyInput("bank has no active concepts".to_string()));
    }
    let mut seen = vec![false; n];
    for s in train_samples {
        seen[s.label] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::EmptyInput(format!(
            "label `{}` has no training samples",
            bank.labels[missing].name
        )));
    }

    let builder = PromptBuilder::new(encoder, bank, config.include_label)?;
    let mut cond = ConditionTokens::<T>::init(
        config.q,
        encoder.token_dim(),
        config.token_init_std,
        &mut substream_rng(config.seed, "cocobm-cond-init"),
    );
    let mut weights = AggregationWeights::<T>::zeros(n, m);

    let mut adam_cond = Adam::<T>::new(config.q * encoder.token_dim(), config.token_learning_rate);
    let mut adam_w = Adam::<T>::new(n * m, config.learning_rate);
    let mut adam_b = Adam::<T>::new(n, config.learning_rate);

    let mut best: Option<(f64, usize, ConditionTokens<T>, AggregationWeights<T>)> = None;
    let mut stale_epochs = 0usize;
    let mut train_loss_curve = Vec::new();
    let mut val_loss_curve = Vec::new();
    let mut epochs_run = 0usize;

    for epoch in 0..config.max_epochs {
        epochs_run = epoch + 1;
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut substream_rng(
            config.seed,
            &format!("cocobm-shuffle-{epoch}"),
        ));

        for batch in order.chunks(config.batch_size.max(1)) {
            let batch_samples: Vec<Sample<T>> =
                batch.iter().map(|&i| train_samples[i].clone()).collect();
            let (d_cond, d_w, d_b) = gradients(
                encoder,
                &builder,
                &cond,
                &weights,
                e_matrix,
                &batch_samples,
                config.logit_scale,
            )?;

            if config.q > 0 {
                adam_cond.step(
                    cond.tokens.as_slice_mut().expect("standard layout"),
                    d_cond.as_slice().expect("standard layout"),
                );
            }
            adam_w.step(
                weights.w.as_slice_mut().expect("standard layout"),
                d_w.as_slice().expect("standard layout"),
            );
            adam_b.step(
                weights.bias.as_slice_mut().expect("standard layout"),
                d_b.as_slice().expect("standard layout"),
            );
        }

        let (train_loss, _, train_tensors) = evaluate_split(
            encoder,
            &builder,
            &cond,
            &weights,
            e_matrix,
            train_samples,
            config.logit_scale,
        )?;
        let (val_loss, val_acc, val_tensors) = evaluate_split(
            encoder,
            &builder,
            &cond,
            &weights,
            e_matrix,
            val_samples,
            config.logit_scale,
        )?;
        train_loss_curve.push(train_loss);
        val_loss_curve.push(val_loss);

        if let Some(h) = hook.as_deref_mut() {
            h(&EpochInfo {
                epoch,
                train_loss,
                val_loss,
                val_accuracy: val_acc,
                train_tensors: &train_tensors,
                val_tensors: &val_tensors,
            });
        }

        let improved = best
            .as_ref()
            .map(|(bl, _, _, _)| val_loss < bl - 1e-12)
            .unwrap_or(true);
        if improved {
            best = Some((val_loss, epoch, cond.clone(), weights.clone()));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= config.patience {
                break;
            }
        }
    }

    let (best_epoch, final_cond, final_weights) = match best {
        Some((_, e, c, w)) => (e, c, w),
        None => (0, cond, weights),
    };
    let (val_loss, val_accuracy, val_tensors) = evaluate_split(
        encoder,
        &builder,
        &final_cond,
        &final_weights,
        e_matrix,
        val_samples,
        config.logit_scale,
    )?;
    let _ = val_loss;

    Ok(TrainOutcome {
        model: TrainedModel {
            cond: final_cond,
            weights: final_weights,
            bank_version: bank.version,
        },
        metrics: TrainMetrics {
            epochs_run,
            best_epoch,
            train_loss_curve,
            val_loss_curve,
            val_accuracy,
        },
        val_tensors,
    })
}
