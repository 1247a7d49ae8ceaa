//! Assembles the runtime environment (world, dataset, encoder, LLM
//! clients) from a validated configuration.

use std::time::Duration;

use anyhow::Context;
use cocobm_core::backends::http::HttpLlm;
use cocobm_core::backends::llm::{LlmClient, LlmClientConfig};
use cocobm_core::backends::scripted::ScriptedLlm;
use cocobm_core::backends::synthetic::{SyntheticWorld, WorldSpec};
use cocobm_core::Dataset64;

use crate::config::{BackendKind, DatasetKind, RunConfig};

/// Everything a command needs to run.
pub struct Env {
    pub config: RunConfig,
    pub spec: WorldSpec,
    pub world: SyntheticWorld<f64>,
    pub dataset: Dataset64,
    /// Concept generation and fact verification.
    pub client: LlmClient,
    /// MCQ judging (may be a different model).
    pub judge: LlmClient,
}

fn client_config(config: &RunConfig, backoff: Duration) -> LlmClientConfig {
    LlmClientConfig {
        retries: 3,
        backoff,
        generation_temperature: config.hyper.generation_temperature,
        judge_temperature: config.hyper.judge_temperature,
        mcq_votes: config.hyper.mcq_votes,
    }
}

pub fn build(config: RunConfig) -> anyhow::Result<Env> {
    config.validate()?;
    if config.dataset.kind == DatasetKind::Real {
        anyhow::bail!(
            "real image datasets need an external encoder plugin: compute features with your \
             encoder, import them as an embedding cache, and wire an ImageEncoder/TextEncoder \
             implementation (see README). The offline pipeline runs on synthetic worlds."
        );
    }
    let world_path = config.dataset.world.clone().expect("validated");
    let spec = WorldSpec::load(&world_path)
        .with_context(|| format!("loading world {}", world_path.display()))?;
    let world = SyntheticWorld::<f64>::new(spec.clone(), config.seed)?;
    let dataset = world.make_dataset(config.seed)?;
    let (client, judge) = match config.backend.kind {
        BackendKind::Synthetic => {
            let scripted = ScriptedLlm::from_world(&spec);
            (
                LlmClient::new(Box::new(scripted.clone()), client_config(&config, Duration::ZERO)),
                LlmClient::new(Box::new(scripted), client_config(&config, Duration::ZERO)),
            )
        }
        BackendKind::Real => {
            let backoff = Duration::from_millis(250);
            (
                LlmClient::new(
                    Box::new(HttpLlm::from_env(&config.backend.generator_model)?),
                    client_config(&config, backoff),
                ),
                LlmClient::new(
                    Box::new(HttpLlm::from_env(&config.backend.judge_model)?),
                    client_config(&config, backoff),
                ),
            )
        }
    };
    Ok(Env {
        config,
        spec,
        world,
        dataset,
        client,
        judge,
    })
}
