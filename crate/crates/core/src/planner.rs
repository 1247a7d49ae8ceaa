//! Feedback planning: score normalization, activation patterns, redundancy
//! and insufficiency detection, and the iterative grounding loop.
//!
//! The planner consumes only validation score tensors; image labels never
//! enter the pattern math. Per sample and concept, scores across the label
//! axis are normalized to [-1, 1] (positives against the max positive,
//! negatives against the largest magnitude negative), averaged over samples
//! into the score pattern, and thresholded at `t_a` into a binary
//! activation pattern. A concept is redundant when it activates nowhere,
//! or when another concept with the identical activation pattern sits
//! within Manhattan distance `t_m` of its masked score pattern and
//! contributes more. A label is unidentifiable when no concept activates
//! for it or when its activated-concept set equals another label's.

use std::collections::BTreeMap;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::actions::{
    generate_for_confusable, generate_for_label, select_concepts, select_instances,
    split_instances, verify_all, InstanceSet, SelectionConfig, SelectionTarget,
};
use crate::backends::llm::LlmClient;
use crate::backends::{derive_seed, Dataset, Sample, TextEncoder};
use crate::bank::{
    activate_concepts, build_editable_matrix, delete_concepts, AgentMemory, Concept, ConceptBank,
    ConceptId, LabelMeta, MULTI_LABEL_SOURCE,
};
use crate::cocobm::{ScoreTensor, TrainConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Normalize one sample's N x M tensor per concept column: positives are
/// divided by the column's max positive, negatives by the largest absolute
/// negative, zeros stay zero.
pub fn normalize_sample<T: Scalar>(tensor: &ScoreTensor<T>) -> ScoreTensor<T> {
    let n = tensor.n_labels();
    let m = tensor.n_concepts();
    let mut out = tensor.scores.clone();
    for k in 0..m {
        let mut max_pos = T::zero();
        let mut max_neg = T::zero();
        for j in 0..n {
            let v = tensor.scores[(j, k)];
            if v > T::zero() && v > max_pos {
                max_pos = v;
            }
            if v < T::zero() && -v > max_neg {
                max_neg = -v;
            }
        }
        for j in 0..n {
            let v = tensor.scores[(j, k)];
            out[(j, k)] = if v > T::zero() {
                v / max_pos
            } else if v < T::zero() {
                v / max_neg
            } else {
                T::zero()
            };
        }
    }
    ScoreTensor {
        scores: out,
        bank_version: tensor.bank_version,
    }
}

/// Mean normalized score per label for concept `k` over all samples.
pub fn score_pattern<T: Scalar>(normalized: &[ScoreTensor<T>], k: usize) -> Result<Array1<T>> {
    if normalized.is_empty() {
        return Err(Error::EmptyInput(
            "score pattern needs at least one validation sample".to_string(),
        ));
    }
    let n = normalized[0].n_labels();
    let mut mean = Array1::zeros(n);
    for t in normalized {
        for j in 0..n {
            mean[j] += t.scores[(j, k)];
        }
    }
    Ok(mean.mapv(|v: T| v / T::from_usize(normalized.len())))
}

/// Threshold a score pattern into a binary activation pattern. For
/// `t_a < 1` a label activates when its mean exceeds `t_a`; at the `t_a = 1`
/// boundary the strict inequality is unreachable, so exactly the argmax
/// label(s) with positive mean activate (the limit of decreasing
/// thresholds).
pub fn activation_pattern<T: Scalar>(p_sc: &Array1<T>, t_a: f64) -> Vec<u8> {
    if t_a >= 1.0 {
        let max = p_sc.iter().cloned().fold(T::neg_infinity(), T::max);
        if max <= T::zero() {
            return vec![0; p_sc.len()];
        }
        return p_sc.iter().map(|&v| u8::from(v == max)).collect();
    }
    let t = T::from_f64(t_a);
    p_sc.iter().map(|&v| u8::from(v > t)).collect()
}

/// One concept's feedback patterns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptPattern {
    pub concept_id: ConceptId,
    pub text: String,
    pub p_sc: Vec<f64>,
    pub p_act: Vec<u8>,
    /// Sum of the Hadamard product of p_sc and p_act.
    pub total_contribution: f64,
}

impl ConceptPattern {
    fn masked(&self) -> Vec<f64> {
        self.p_sc
            .iter()
            .zip(&self.p_act)
            .map(|(&s, &a)| if a == 1 { s } else { 0.0 })
            .collect()
    }

    pub fn is_active(&self) -> bool {
        self.p_act.iter().any(|&a| a == 1)
    }
}

/// Why a concept was flagged redundant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RemovalReason {
    /// Activates for no label.
    Inactive,
    /// Same activation pattern as `kept`, within Manhattan distance of its
    /// masked scores, and a lower total contribution.
    DuplicateOf { kept: ConceptId, distance: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemovalRecord {
    pub concept_id: ConceptId,
    pub text: String,
    pub reason: RemovalReason,
}

/// Find redundant concepts. Pairs are processed in descending total
/// contribution, so within a group of mutual duplicates exactly the single
/// highest-contribution concept survives.
pub fn find_redundant(patterns: &[ConceptPattern], t_m: f64) -> Vec<RemovalRecord> {
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..patterns.len()).collect();
    order.sort_by(|&a, &b| {
        patterns[b]
            .total_contribution
            .partial_cmp(&patterns[a].total_contribution)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let p = &patterns[i];
        if !p.is_active() {
            records.push(RemovalRecord {
                concept_id: p.concept_id.clone(),
                text: p.text.clone(),
                reason: RemovalReason::Inactive,
            });
            continue;
        }
        let masked = p.masked();
        let duplicate = kept.iter().find_map(|&k| {
            let q = &patterns[k];
            if q.p_act != p.p_act {
                return None;
            }
            let distance: f64 = masked
                .iter()
                .zip(q.masked())
                .map(|(a, b)| (a - b).abs())
                .sum();
            (distance < t_m).then_some((q.concept_id.clone(), distance))
        });
        match duplicate {
            Some((kept_id, distance)) => records.push(RemovalRecord {
                concept_id: p.concept_id.clone(),
                text: p.text.clone(),
                reason: RemovalReason::DuplicateOf {
                    kept: kept_id,
                    distance,
                },
            }),
            None => kept.push(i),
        }
    }
    // Report in bank order for stable serialization.
    records.sort_by_key(|r| {
        patterns
            .iter()
            .position(|p| p.concept_id == r.concept_id)
            .unwrap()
    });
    records
}

/// Why a label was flagged unidentifiable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnidentifiableReason {
    NoActiveConcept,
    IdenticalSupport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelFinding {
    pub label: String,
    pub label_index: usize,
    pub reason: UnidentifiableReason,
}

/// Detect unidentifiable labels among the surviving concepts. Labels with
/// an identical non-empty activated-concept set form maximal confusable
/// groups; labels with no activated concept are flagged individually.
pub fn find_insufficient(
    patterns: &[ConceptPattern],
    labels: &[LabelMeta],
) -> (Vec<LabelFinding>, Vec<Vec<String>>) {
    let n = labels.len();
    let mut support: Vec<Vec<&ConceptId>> = vec![Vec::new(); n];
    for p in patterns {
        for (j, &a) in p.p_act.iter().enumerate() {
            if a == 1 {
                support[j].push(&p.concept_id);
            }
        }
    }
    let mut findings = Vec::new();
    let mut groups_map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (j, sup) in support.iter().enumerate() {
        if sup.is_empty() {
            findings.push(LabelFinding {
                label: labels[j].name.clone(),
                label_index: j,
                reason: UnidentifiableReason::NoActiveConcept,
            });
        } else {
            let key = sup
                .iter()
                .map(|id| id.0.as_str())
                .collect::<Vec<_>>()
                .join(",");
            groups_map.entry(key).or_default().push(j);
        }
    }
    let mut groups = Vec::new();
    for (_, members) in groups_map {
        if members.len() >= 2 {
            for &j in &members {
                findings.push(LabelFinding {
                    label: labels[j].name.clone(),
                    label_index: j,
                    reason: UnidentifiableReason::IdenticalSupport,
                });
            }
            groups.push(members.iter().map(|&j| labels[j].name.clone()).collect());
        }
    }
    findings.sort_by_key(|f| f.label_index);
    (findings, groups)
}

/// Selection performed during a repair round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepairRecord {
    pub prompted_labels: Vec<String>,
    pub confusable_groups: Vec<Vec<String>>,
    pub selected: Vec<String>,
    pub head_width: usize,
}

/// Everything one feedback round observed and decided.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub iteration: u32,
    pub bank_version: u64,
    pub patterns: Vec<ConceptPattern>,
    pub redundant: Vec<RemovalRecord>,
    pub unidentifiable: Vec<LabelFinding>,
    pub confusable_groups: Vec<Vec<String>>,
    /// Filled by the loop after acting on the findings.
    pub repair: Option<RepairRecord>,
    pub terminate: bool,
}

impl FeedbackReport {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Analyze validation feedback tensors into a report. Redundancy removal
/// applies before insufficiency detection: gap analysis runs on the
/// surviving concepts only.
pub fn analyze<T: Scalar>(
    tensors: &[ScoreTensor<T>],
    bank: &ConceptBank,
    t_a: f64,
    t_m: f64,
    iteration: u32,
) -> Result<FeedbackReport> {
    if tensors.is_empty() {
        return Err(Error::EmptyInput("no feedback tensors".to_string()));
    }
    let normalized: Vec<ScoreTensor<T>> = tensors.iter().map(normalize_sample).collect();
    let mut patterns = Vec::with_capacity(bank.n_concepts());
    for (k, concept) in bank.concepts.iter().enumerate() {
        let p_sc = score_pattern(&normalized, k)?;
        let p_act = activation_pattern(&p_sc, t_a);
        let p_sc_f64: Vec<f64> = p_sc.iter().map(|v| v.as_f64()).collect();
        let total_contribution = p_sc_f64
            .iter()
            .zip(&p_act)
            .map(|(&s, &a)| if a == 1 { s } else { 0.0 })
            .sum();
        patterns.push(ConceptPattern {
            concept_id: concept.id.clone(),
            text: concept.text.clone(),
            p_sc: p_sc_f64,
            p_act,
            total_contribution,
        });
    }
    let redundant = find_redundant(&patterns, t_m);
    let survivors: Vec<ConceptPattern> = patterns
        .iter()
        .filter(|p| !redundant.iter().any(|r| r.concept_id == p.concept_id))
        .cloned()
        .collect();
    let (unidentifiable, confusable_groups) = find_insufficient(&survivors, &bank.labels);
    let terminate = redundant.is_empty() && unidentifiable.is_empty();
    Ok(FeedbackReport {
        iteration,
        bank_version: bank.version,
        patterns,
        redundant,
        unidentifiable,
        confusable_groups,
        repair: None,
        terminate,
    })
}

/// Grounding hyperparameters.
#[derive(Debug, Clone)]
pub struct GroundingConfig {
    pub t_a: f64,
    pub t_m: f64,
    pub beta: usize,
    pub max_iterations: u32,
    /// Concepts per selection round; `None` selects one per prompted label.
    /// Either way the count is capped by the candidate pool size.
    pub select_per_round: Option<usize>,
    pub train: TrainConfig,
    pub selection: SelectionConfig,
    pub seed: u64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        GroundingConfig {
            t_a: 0.1,
            t_m: 0.3,
            beta: 16,
            max_iterations: 10,
            select_per_round: None,
            train: TrainConfig::default(),
            selection: SelectionConfig::default(),
            seed: 0,
        }
    }
}

/// Mutable state threaded through the grounding loop.
pub struct GroundingState<T: Scalar> {
    pub bank: ConceptBank,
    pub memory: AgentMemory,
    pub instances: InstanceSet,
    pub instance_train: Vec<Sample<T>>,
    pub instance_val: Vec<Sample<T>>,
    pub iteration: u32,
}

/// Terminal status of a grounding run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GroundingStatus {
    Converged { iterations: u32 },
    /// The iteration cap was hit with findings still open; never a silent
    /// success.
    Capped { iterations: u32 },
}

/// A finished grounding run.
pub struct GroundingRun<T: Scalar> {
    pub status: GroundingStatus,
    pub state: GroundingState<T>,
    pub reports: Vec<FeedbackReport>,
    /// Raw validation feedback tensors per iteration, for audit.
    pub feedback_tensors: Vec<Vec<ScoreTensor<T>>>,
}

/// The iterative grounding agent.
pub struct GroundingLoop<'a, T: Scalar, E: TextEncoder<T>> {
    pub encoder: &'a E,
    pub client: &'a LlmClient,
    pub dataset: &'a Dataset<T>,
    pub config: GroundingConfig,
}

impl<'a, T: Scalar, E: TextEncoder<T>> GroundingLoop<'a, T, E> {
    pub fn new(
        encoder: &'a E,
        client: &'a LlmClient,
        dataset: &'a Dataset<T>,
        config: GroundingConfig,
    ) -> Self {
        GroundingLoop {
            encoder,
            client,
            dataset,
            config,
        }
    }

    fn train_config_for(&self, iteration: u32) -> TrainConfig {
        let mut tc = self.config.train.clone();
        tc.seed = derive_seed(self.config.seed, &format!("perceive:{iteration}"));
        tc
    }

    fn selection_config_for(&self, iteration: u32) -> SelectionConfig {
        let mut sc = self.config.selection.clone();
        sc.seed = derive_seed(self.config.seed, &format!("select:{iteration}"));
        sc
    }

    /// Candidates whose generating prompt belongs to this round.
    fn pool_for(
        &self,
        state: &GroundingState<T>,
        sources: &[String],
    ) -> Vec<Concept> {
        state
            .memory
            .candidate_pool(&state.bank)
            .into_iter()
            .filter(|c| sources.iter().any(|s| s == &c.source_label))
            .collect()
    }

    fn select_and_activate(
        &self,
        state: &mut GroundingState<T>,
        pool: &[Concept],
        prompt_label_count: usize,
        target: &SelectionTarget,
    ) -> Result<Option<crate::actions::SelectionOutcome>> {
        if pool.is_empty() {
            return Ok(None);
        }
        let desired = self
            .config
            .select_per_round
            .unwrap_or(prompt_label_count)
            .max(1);
        let k = desired.min(pool.len());
        let outcome = select_concepts(
            self.encoder,
            pool,
            k,
            target,
            state.bank.n_labels(),
            &state.instance_train,
            &self.selection_config_for(state.iteration),
        )?;
        let ids: Vec<ConceptId> = outcome.chosen.iter().map(|c| c.id.clone()).collect();
        activate_concepts(&mut state.bank, &mut state.memory, &ids)?;
        Ok(Some(outcome))
    }

    /// Iteration 0: freeze instances, generate for every label, select into
    /// the bank, and fact-verify all pairs.
    pub fn initialize(&self, labels: Vec<LabelMeta>) -> Result<GroundingState<T>> {
        let bank = ConceptBank::new(labels)?;
        let mut memory = AgentMemory::new();
        memory.record_initial(&bank);
        let instances = select_instances(
            self.dataset,
            self.config.beta,
            derive_seed(self.config.seed, "instances"),
        )?;
        let (instance_train, instance_val) = split_instances(
            &instances,
            self.dataset,
            derive_seed(self.config.seed, "instance-split"),
        )?;
        let mut state = GroundingState {
            bank,
            memory,
            instances,
            instance_train,
            instance_val,
            iteration: 0,
        };
        let label_names: Vec<String> =
            state.bank.labels.iter().map(|l| l.name.clone()).collect();
        for label in &label_names {
            generate_for_label(&state.bank, &mut state.memory, self.client, label, 0)?;
        }
        let pool = self.pool_for(&state, &label_names);
        if pool.is_empty() {
            return Err(Error::EmptyInput(
                "initial generation produced no candidates".to_string(),
            ));
        }
        self.select_and_activate(
            &mut state,
            &pool,
            label_names.len(),
            &SelectionTarget::AllLabels,
        )?;
        verify_all(&state.bank, &mut state.memory, self.client, 0)?;
        Ok(state)
    }

    /// One feedback round: perceive, analyze, delete redundant concepts,
    /// and repair insufficiency (generate for unidentifiable labels and
    /// confusable groups, select in repair mode, verify the new pairs).
    /// Returns the report along with the raw feedback tensors.
    pub fn run_iteration(
        &self,
        state: &mut GroundingState<T>,
    ) -> Result<(FeedbackReport, Vec<ScoreTensor<T>>)> {
        state.iteration += 1;
        let iteration = state.iteration;
        let e_matrix = build_editable_matrix(&state.memory, &state.bank)?;
        let outcome = crate::actions::perceive(
            self.encoder,
            &state.bank,
            &e_matrix,
            &state.instance_train,
            &state.instance_val,
            &self.train_config_for(iteration),
        )?;
        let mut report = analyze(
            &outcome.val_tensors,
            &state.bank,
            self.config.t_a,
            self.config.t_m,
            iteration,
        )?;
        if report.terminate {
            return Ok((report, outcome.val_tensors));
        }

        let remove: Vec<ConceptId> = report
            .redundant
            .iter()
            .map(|r| r.concept_id.clone())
            .collect();
        delete_concepts(&mut state.bank, &mut state.memory, &remove, iteration)?;

        if !report.unidentifiable.is_empty() {
            let mut prompted: Vec<String> = Vec::new();
            let grouped: Vec<String> = report
                .confusable_groups
                .iter()
                .flatten()
                .cloned()
                .collect();
            for f in &report.unidentifiable {
                if f.reason == UnidentifiableReason::NoActiveConcept {
                    generate_for_label(
                        &state.bank,
                        &mut state.memory,
                        self.client,
                        &f.label,
                        iteration,
                    )?;
                    prompted.push(f.label.clone());
                }
            }
            for group in &report.confusable_groups {
                generate_for_confusable(
                    &state.bank,
                    &mut state.memory,
                    self.client,
                    group,
                    iteration,
                )?;
                prompted.extend(group.iter().cloned());
            }
            let mut sources = prompted.clone();
            if !report.confusable_groups.is_empty() {
                sources.push(MULTI_LABEL_SOURCE.to_string());
            }
            let pool = self.pool_for(state, &sources);
            let repair_labels: Vec<usize> = report
                .unidentifiable
                .iter()
                .map(|f| f.label_index)
                .collect();
            let outcome = self.select_and_activate(
                state,
                &pool,
                prompted.len(),
                &SelectionTarget::Repair(repair_labels),
            )?;
            if let Some(sel) = outcome {
                verify_all(&state.bank, &mut state.memory, self.client, iteration)?;
                report.repair = Some(RepairRecord {
                    prompted_labels: prompted,
                    confusable_groups: report.confusable_groups.clone(),
                    selected: sel.chosen.iter().map(|c| c.text.clone()).collect(),
                    head_width: sel.head_width,
                });
            }
            let _ = grouped;
        }
        Ok((report, outcome.val_tensors))
    }

    /// Run initialization plus feedback rounds until termination or the
    /// iteration cap.
    pub fn run(&self, labels: Vec<LabelMeta>) -> Result<GroundingRun<T>> {
        let mut state = self.initialize(labels)?;
        let mut reports = Vec::new();
        let mut feedback_tensors = Vec::new();
        let status = loop {
            if state.iteration >= self.config.max_iterations {
                break GroundingStatus::Capped {
                    iterations: state.iteration,
                };
            }
            let (report, tensors) = self.run_iteration(&mut state)?;
            let done = report.terminate;
            reports.push(report);
            feedback_tensors.push(tensors);
            if done {
                break GroundingStatus::Converged {
                    iterations: state.iteration,
                };
            }
        };
        Ok(GroundingRun {
            status,
            state,
            reports,
            feedback_tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn tensor(rows: Vec<Vec<f64>>) -> ScoreTensor<f64> {
        let n = rows.len();
        let m = rows[0].len();
        let mut scores = ndarray::Array2::zeros((n, m));
        for (j, row) in rows.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                scores[(j, k)] = v;
            }
        }
        ScoreTensor {
            scores,
            bank_version: 0,
        }
    }

    #[test]
    fn normalize_matches_hand_derivation() {
        // Column [2, -1, 4] -> [2/4, -1/1, 4/4].
        let t = tensor(vec![vec![2.0], vec![-1.0], vec![4.0]]);
        let n = normalize_sample(&t);
        assert_relative_eq!(n.scores[(0, 0)], 0.5);
        assert_relative_eq!(n.scores[(1, 0)], -1.0);
        assert_relative_eq!(n.scores[(2, 0)], 1.0);
    }

    #[test]
    fn normalize_zeros_stay_zero() {
        let t = tensor(vec![vec![0.0], vec![0.0]]);
        let n = normalize_sample(&t);
        assert!(n.scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_single_label_is_self_max() {
        let t = tensor(vec![vec![3.0]]);
        assert_relative_eq!(normalize_sample(&t).scores[(0, 0)], 1.0);
    }

    #[test]
    fn score_pattern_is_the_mean() {
        let ts = vec![
            tensor(vec![vec![0.5], vec![1.0]]),
            tensor(vec![vec![1.0], vec![-1.0]]),
            tensor(vec![vec![0.0], vec![0.0]]),
        ];
        let p = score_pattern(&ts, 0).unwrap();
        assert_relative_eq!(p[0], 0.5);
        assert_relative_eq!(p[1], 0.0);
    }

    #[test]
    fn score_pattern_empty_is_error() {
        assert!(score_pattern::<f64>(&[], 0).is_err());
    }

    #[test]
    fn activation_at_paper_threshold() {
        let p = array![0.5, 0.05, -0.3];
        assert_eq!(activation_pattern(&p, 0.1), vec![1, 0, 0]);
    }

    #[test]
    fn activation_at_zero_keeps_strict_positives_only() {
        let p = array![0.2, 0.0, -0.1];
        assert_eq!(activation_pattern(&p, 0.0), vec![1, 0, 0]);
    }

    #[test]
    fn activation_at_one_is_argmax_and_limit_of_thresholds() {
        let p = array![0.9, 0.4];
        assert_eq!(activation_pattern(&p, 1.0), vec![1, 0]);
        // Limit of decreasing thresholds: just below the max, exactly the
        // argmax set activates.
        assert_eq!(activation_pattern(&p, 0.9 - 1e-9), vec![1, 0]);
        // Nothing activates at t_a = 1 when no mean is positive.
        assert_eq!(activation_pattern(&array![-0.2, -0.9], 1.0), vec![0, 0]);
    }

    fn pattern(id: &str, p_sc: Vec<f64>, t_a: f64) -> ConceptPattern {
        let arr = Array1::from(p_sc.clone());
        let p_act = activation_pattern(&arr, t_a);
        let total = p_sc
            .iter()
            .zip(&p_act)
            .map(|(&s, &a)| if a == 1 { s } else { 0.0 })
            .sum();
        ConceptPattern {
            concept_id: ConceptId(id.to_string()),
            text: id.to_string(),
            p_sc,
            p_act,
            total_contribution: total,
        }
    }

    #[test]
    fn inactive_concept_is_redundant() {
        let ps = vec![pattern("a", vec![0.05, -0.2], 0.1)];
        let r = find_redundant(&ps, 0.3);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].reason, RemovalReason::Inactive);
    }

    #[test]
    fn manhattan_rule_removes_the_weaker_twin() {
        // Hadamard products [0.8, 0] and [0.7, 0]; distance 0.1 < 0.3.
        let ps = vec![
            pattern("strong", vec![0.8, 0.0], 0.1),
            pattern("weak", vec![0.7, 0.0], 0.1),
        ];
        let r = find_redundant(&ps, 0.3);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].concept_id.0, "weak");
        match &r[0].reason {
            RemovalReason::DuplicateOf { kept, distance } => {
                assert_eq!(kept.0, "strong");
                assert_relative_eq!(*distance, 0.1, epsilon = 1e-12);
            }
            other => panic!("unexpected reason {other:?}"),
        }
    }

    #[test]
    fn distance_at_threshold_keeps_both() {
        let ps = vec![
            pattern("a", vec![0.9, 0.0], 0.1),
            pattern("b", vec![0.4, 0.0], 0.1),
        ];
        assert!(find_redundant(&ps, 0.3).is_empty(), "0.5 >= 0.3 keeps both");
    }

    #[test]
    fn different_activation_patterns_are_never_duplicates() {
        let ps = vec![
            pattern("a", vec![0.9, 0.8], 0.1),
            pattern("b", vec![0.9, 0.0], 0.1),
        ];
        assert!(find_redundant(&ps, 10.0).is_empty());
    }

    #[test]
    fn duplicate_groups_keep_single_strongest() {
        let ps = vec![
            pattern("mid", vec![0.75, 0.0], 0.1),
            pattern("top", vec![0.8, 0.0], 0.1),
            pattern("low", vec![0.7, 0.0], 0.1),
        ];
        let r = find_redundant(&ps, 0.3);
        let removed: Vec<&str> = r.iter().map(|x| x.concept_id.0.as_str()).collect();
        assert_eq!(removed, vec!["mid", "low"]);
        for rec in &r {
            match &rec.reason {
                RemovalReason::DuplicateOf { kept, .. } => assert_eq!(kept.0, "top"),
                other => panic!("unexpected reason {other:?}"),
            }
        }
    }

    #[test]
    fn redundancy_removal_is_idempotent() {
        let ps = vec![
            pattern("a", vec![0.8, 0.0], 0.1),
            pattern("b", vec![0.75, 0.0], 0.1),
            pattern("c", vec![0.0, 0.9], 0.1),
        ];
        let first = find_redundant(&ps, 0.3);
        let survivors: Vec<ConceptPattern> = ps
            .iter()
            .filter(|p| !first.iter().any(|r| r.concept_id == p.concept_id))
            .cloned()
            .collect();
        assert!(find_redundant(&survivors, 0.3).is_empty());
    }

    fn labels(names: &[&str]) -> Vec<LabelMeta> {
        names.iter().map(|n| LabelMeta::new(n)).collect()
    }

    #[test]
    fn label_without_support_is_unidentifiable() {
        let ps = vec![pattern("a", vec![0.9, 0.0], 0.1)];
        let (findings, groups) = find_insufficient(&ps, &labels(&["y1", "y2"]));
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].label, "y2");
        assert_eq!(findings[0].reason, UnidentifiableReason::NoActiveConcept);
        assert!(groups.is_empty());
    }

    #[test]
    fn identical_support_forms_confusable_group() {
        let ps = vec![pattern("c1", vec![0.9, 0.8], 0.1)];
        let (findings, groups) = find_insufficient(&ps, &labels(&["y1", "y2"]));
        assert_eq!(findings.len(), 2);
        assert!(findings
            .iter()
            .all(|f| f.reason == UnidentifiableReason::IdenticalSupport));
        assert_eq!(groups, vec![vec!["y1".to_string(), "y2".to_string()]]);
    }

    #[test]
    fn superset_support_is_fine() {
        let ps = vec![
            pattern("c1", vec![0.9, 0.8], 0.1),
            pattern("c2", vec![0.0, 0.7], 0.1),
        ];
        let (findings, groups) = find_insufficient(&ps, &labels(&["y1", "y2"]));
        assert!(findings.is_empty(), "supports {{c1}} and {{c1,c2}} differ");
        assert!(groups.is_empty());
    }

    #[test]
    fn analyze_terminate_iff_no_findings() {
        use crate::bank::{activate_concepts, add_concepts, AgentMemory, ConceptBank};
        let mut bank = ConceptBank::new(labels(&["y1", "y2"])).unwrap();
        let mut mem = AgentMemory::new();
        mem.record_initial(&bank);
        let added = add_concepts(
            &bank,
            &mut mem,
            &["alpha feature".to_string(), "beta feature".to_string()],
            "y1",
            0,
        )
        .unwrap();
        let ids: Vec<_> = added.iter().map(|c| c.id.clone()).collect();
        activate_concepts(&mut bank, &mut mem, &ids).unwrap();

        // Concept 0 supports y1, concept 1 supports y2: clean.
        let clean = vec![
            tensor(vec![vec![0.9, -0.1], vec![-0.5, 0.8]]),
            tensor(vec![vec![0.8, -0.2], vec![-0.4, 0.9]]),
        ];
        let report = analyze(&clean, &bank, 0.1, 0.3, 1).unwrap();
        assert!(report.terminate);
        assert!(report.redundant.is_empty() && report.unidentifiable.is_empty());

        // Concept 1 inactive: y2 loses support, both findings appear.
        let dirty = vec![tensor(vec![vec![0.9, -0.1], vec![-0.5, -0.8]])];
        let report = analyze(&dirty, &bank, 0.1, 0.3, 1).unwrap();
        assert!(!report.terminate);
        assert_eq!(report.redundant.len(), 1);
        assert_eq!(report.unidentifiable.len(), 1);
    }
}
