//! The four commands: ground, train, eval, embed.
//!
//! Each command validates the configuration before writing anything,
//! refuses to overwrite its own primary artifact, and embeds the config
//! hash and seed in every report it writes.

use std::path::{Path, PathBuf};

use anyhow::Context;
use cocobm_core::backends::cache::EmbeddingCache;
use cocobm_core::actions::stratified_split;
use cocobm_core::backends::{derive_seed, Sample, TextEncoder};
use cocobm_core::bank::{build_editable_matrix, AgentMemory, ConceptBank, EditableMatrix};
use cocobm_core::cocobm::{
    logits_for, predict, score_with_model, train, Checkpoint, TrainConfig, TrainedModel,
};
use cocobm_core::evaluate::{
    build_mcq_set, judge_mcqs, score_interpretability, InterpretabilityScore, LabelScoreRow,
};
use cocobm_core::planner::{GroundingLoop, GroundingStatus};
use cocobm_core::{Dataset64, Sample64};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::env::{build, Env};

fn refuse_overwrite(path: &Path) -> anyhow::Result<()> {
    if path.exists() {
        anyhow::bail!(
            "{} already exists; refusing to overwrite a prior run (pick another --out)",
            path.display()
        );
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundReport {
    pub status: GroundingStatus,
    pub iterations: u32,
    pub final_bank_version: u64,
    pub final_bank_hash: String,
    pub n_labels: usize,
    pub n_concepts: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Run initialization plus feedback iterations to termination or the cap,
/// writing every versioned artifact. Exit status distinguishes converged
/// from capped.
pub fn cmd_ground(config: RunConfig) -> anyhow::Result<GroundReport> {
    config.validate()?;
    let env = build(config)?;
    let out = env.config.out.clone();
    std::fs::create_dir_all(&out)?;
    let report_path = out.join("ground_report.json");
    refuse_overwrite(&report_path)?;

    let grounding = env.config.grounding_config();
    let agent = GroundingLoop::new(&env.world.encoder, &env.client, &env.dataset, grounding);
    let run = agent.run(env.spec.label_metas())?;

    for bank in &run.state.memory.bank_history {
        bank.save(&out)?;
    }
    run.state.memory.save(&out.join("memory.json"))?;
    run.state.memory.append_log(&out.join("memory_log.jsonl"), 0)?;
    for report in &run.reports {
        report.save(&out.join(format!("feedback_iter_{}.json", report.iteration)))?;
    }
    env.client.write_transcripts(&out.join("transcripts.jsonl"))?;
    write_json(
        &out.join("instances.json"),
        &run.state.instances,
    )?;

    let iterations = match run.status {
        GroundingStatus::Converged { iterations } | GroundingStatus::Capped { iterations } => {
            iterations
        }
    };
    let report = GroundReport {
        status: run.status.clone(),
        iterations,
        final_bank_version: run.state.bank.version,
        final_bank_hash: run.state.bank.version_hash(),
        n_labels: run.state.bank.n_labels(),
        n_concepts: run.state.bank.n_concepts(),
        seed: env.config.seed,
        config_hash: env.config.hash(),
    };
    write_json(&report_path, &report)?;
    Ok(report)
}

/// Latest `bank_v{N}.json` in a run directory, or a specific version.
pub fn load_bank(out: &Path, version: Option<u64>) -> anyhow::Result<ConceptBank> {
    let version = match version {
        Some(v) => v,
        None => {
            let mut latest = None;
            for entry in std::fs::read_dir(out)
                .with_context(|| format!("reading run directory {}", out.display()))?
            {
                let name = entry?.file_name().to_string_lossy().to_string();
                if let Some(v) = name
                    .strip_prefix("bank_v")
                    .and_then(|s| s.strip_suffix(".json"))
                    .and_then(|s| s.parse::<u64>().ok())
                {
                    latest = Some(latest.map_or(v, |l: u64| l.max(v)));
                }
            }
            latest.ok_or_else(|| {
                anyhow::anyhow!("no bank_v*.json in {}; run `ground` first", out.display())
            })?
        }
    };
    let path = out.join(format!("bank_v{version}.json"));
    ConceptBank::load(&path)
        .with_context(|| format!("loading bank {}", path.display()))
        .map_err(Into::into)
}

fn load_memory(out: &Path) -> anyhow::Result<AgentMemory> {
    AgentMemory::load(&out.join("memory.json"))
        .with_context(|| format!("loading memory from {}", out.display()))
        .map_err(Into::into)
}

fn editable_for(
    memory: &AgentMemory,
    bank: &ConceptBank,
    use_editable: bool,
) -> anyhow::Result<EditableMatrix> {
    if use_editable {
        Ok(build_editable_matrix(memory, bank)?)
    } else {
        Ok(EditableMatrix::all_clear(
            bank.n_labels(),
            bank.n_concepts(),
            bank.version,
        ))
    }
}

/// Stratified split of the train samples for early stopping.
fn holdout_split(dataset: &Dataset64, frac: f64, seed: u64) -> (Vec<Sample64>, Vec<Sample64>) {
    stratified_split(&dataset.train, dataset.n_labels(), frac, seed)
}

fn test_accuracy<E: TextEncoder<f64>>(
    encoder: &E,
    bank: &ConceptBank,
    model: &TrainedModel<f64>,
    e_matrix: &EditableMatrix,
    samples: &[Sample<f64>],
    logit_scale: f64,
) -> anyhow::Result<(f64, Vec<usize>, Vec<cocobm_core::ScoreTensor64>)> {
    let tensors = score_with_model(encoder, bank, model, e_matrix, samples, true)?;
    let mut correct = 0usize;
    let mut predictions = Vec::with_capacity(samples.len());
    for (t, s) in tensors.iter().zip(samples) {
        let p = predict(&logits_for(t, model, logit_scale));
        predictions.push(p);
        if p == s.label {
            correct += 1;
        }
    }
    Ok((correct as f64 / samples.len() as f64, predictions, tensors))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_labels: usize,
    pub n_concepts: usize,
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub epochs_run: usize,
    pub bank_version: u64,
    pub bank_hash: String,
    pub editable_matrix: bool,
    pub seed: u64,
    pub config_hash: String,
}

/// Train the bottleneck on the full dataset against a grounded bank and
/// report test accuracy.
pub fn cmd_train(
    config: RunConfig,
    bank_version: Option<u64>,
    use_editable: bool,
) -> anyhow::Result<TrainReport> {
    config.validate()?;
    let env = build(config)?;
    let out = env.config.out.clone();
    let checkpoint_path = out.join("checkpoint.json");
    refuse_overwrite(&checkpoint_path)?;

    let bank = load_bank(&out, bank_version)?;
    let memory = load_memory(&out)?;
    let e_matrix = editable_for(&memory, &bank, use_editable)?;

    let mut tc: TrainConfig = env.config.train_config();
    tc.seed = derive_seed(env.config.seed, "full-train");
    let (fit, held) = holdout_split(&env.dataset, 0.8, env.config.seed);
    let outcome = train(
        &env.world.encoder,
        &bank,
        &e_matrix,
        &fit,
        &held,
        &tc,
        None,
    )?;
    let (accuracy, _, _) = test_accuracy(
        &env.world.encoder,
        &bank,
        &outcome.model,
        &e_matrix,
        &env.dataset.test,
        tc.logit_scale,
    )?;

    Checkpoint::from_model(&outcome.model, &bank).save(&checkpoint_path)?;
    let report = TrainReport {
        n_labels: bank.n_labels(),
        n_concepts: bank.n_concepts(),
        accuracy,
        val_accuracy: outcome.metrics.val_accuracy,
        epochs_run: outcome.metrics.epochs_run,
        bank_version: bank.version,
        bank_hash: bank.version_hash(),
        editable_matrix: use_editable,
        seed: env.config.seed,
        config_hash: env.config.hash(),
    };
    write_json(&out.join("train_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub accuracy: f64,
    pub truthfulness: f64,
    pub distinguishability: f64,
    pub overall: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Plot-ready accuracy-vs-interpretability rows.
    pub table: Vec<EvalRow>,
    pub per_label: Vec<LabelScoreRow>,
    pub warnings: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
}

fn evaluate_model(
    env: &Env,
    bank: &ConceptBank,
    model: &TrainedModel<f64>,
    e_matrix: &EditableMatrix,
    mcq_path: &Path,
    results_path: &Path,
) -> anyhow::Result<(f64, InterpretabilityScore, Vec<String>)> {
    let (accuracy, predictions, tensors) = test_accuracy(
        &env.world.encoder,
        bank,
        model,
        e_matrix,
        &env.dataset.test,
        env.config.hyper.logit_scale,
    )?;
    let set = build_mcq_set(
        &env.world.encoder,
        bank,
        &env.dataset,
        &tensors,
        &predictions,
        env.config.seed,
    )?;
    set.save(mcq_path)?;
    let results = judge_mcqs(&env.judge, &set)?;
    write_json(results_path, &results)?;
    let label_names: Vec<String> = bank.labels.iter().map(|l| l.name.clone()).collect();
    let score = score_interpretability(&results, &label_names)?;
    Ok((accuracy, score, set.warnings))
}

/// Build, judge, and score the interpretability MCQs for a trained
/// checkpoint. With `ablate_editable`, additionally retrain without the
/// editable matrix and report both rows.
pub fn cmd_eval(config: RunConfig, ablate_editable: bool) -> anyhow::Result<EvalReport> {
    config.validate()?;
    let env = build(config)?;
    let out = env.config.out.clone();
    let report_path = out.join("eval_report.json");
    refuse_overwrite(&report_path)?;

    let bank = load_bank(&out, None)?;
    let memory = load_memory(&out)?;
    let checkpoint = Checkpoint::load(&out.join("checkpoint.json"))
        .with_context(|| "loading checkpoint.json; run `train` first")?;
    let model: TrainedModel<f64> = checkpoint.into_model(&bank)?;
    let e_matrix = editable_for(&memory, &bank, true)?;

    let (accuracy, score, mut warnings) = evaluate_model(
        &env,
        &bank,
        &model,
        &e_matrix,
        &out.join("mcqs.json"),
        &out.join("mcq_results.json"),
    )?;
    let mut table = vec![EvalRow {
        name: "with_editable_matrix".to_string(),
        accuracy,
        truthfulness: score.truthfulness,
        distinguishability: score.distinguishability,
        overall: score.overall,
    }];
    let per_label = score.per_label.clone();

    if ablate_editable {
        let clear = EditableMatrix::all_clear(bank.n_labels(), bank.n_concepts(), bank.version);
        let mut tc = env.config.train_config();
        tc.seed = derive_seed(env.config.seed, "eval-ablation");
        let (fit, held) = holdout_split(&env.dataset, 0.8, env.config.seed);
        let outcome = train(&env.world.encoder, &bank, &clear, &fit, &held, &tc, None)?;
        let (acc_noe, score_noe, warn_noe) = evaluate_model(
            &env,
            &bank,
            &outcome.model,
            &clear,
            &out.join("mcqs_no_editable.json"),
            &out.join("mcq_results_no_editable.json"),
        )?;
        warnings.extend(warn_noe);
        table.push(EvalRow {
            name: "without_editable_matrix".to_string(),
            accuracy: acc_noe,
            truthfulness: score_noe.truthfulness,
            distinguishability: score_noe.distinguishability,
            overall: score_noe.overall,
        });
    }

    let report = EvalReport {
        table,
        per_label,
        warnings,
        seed: env.config.seed,
        config_hash: env.config.hash(),
    };
    write_json(&report_path, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedReport {
    pub cache: PathBuf,
    pub total: usize,
    pub added: usize,
    pub dim: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Materialize the dataset's image embeddings into the binary cache,
/// skipping keys that are already present.
pub fn cmd_embed(config: RunConfig) -> anyhow::Result<EmbedReport> {
    config.validate()?;
    let env = build(config)?;
    let out = env.config.out.clone();
    std::fs::create_dir_all(&out)?;
    let cache_path = out.join("embeddings.bin");
    let mut cache = if cache_path.exists() {
        EmbeddingCache::load(&cache_path)?
    } else {
        EmbeddingCache::new(env.spec.d)
    };
    if cache.dim() != env.spec.d {
        anyhow::bail!(
            "cache at {} holds d={} but the world produces d={}",
            cache_path.display(),
            cache.dim(),
            env.spec.d
        );
    }
    let mut added = 0usize;
    for sample in env.dataset.train.iter().chain(env.dataset.test.iter()) {
        let values: Vec<f64> = sample.emb.as_array().to_vec();
        if cache.insert(&sample.id, &values)? {
            added += 1;
        }
    }
    cache.save(&cache_path)?;
    let report = EmbedReport {
        cache: cache_path,
        total: cache.len(),
        added,
        dim: cache.dim(),
        seed: env.config.seed,
        config_hash: env.config.hash(),
    };
    write_json(&out.join("embed_report.json"), &report)?;
    Ok(report)
}
