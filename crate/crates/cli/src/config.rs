//! Run configuration: TOML file plus command-line overrides.
//!
//! Every artifact a command writes embeds the hash of the effective
//! configuration and the root seed, so any report can be traced back to
//! the exact run that produced it.

use std::path::{Path, PathBuf};

use cocobm_core::actions::SelectionConfig;
use cocobm_core::bank::sha256_hex;
use cocobm_core::cocobm::TrainConfig;
use cocobm_core::planner::GroundingConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Real,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Planted-world definition file (synthetic datasets).
    pub world: Option<PathBuf>,
    /// Label manifest: one `label[,superclass]` line per label (real
    /// datasets).
    pub manifest: Option<PathBuf>,
    /// Directory-per-label image tree (real datasets).
    pub images: Option<PathBuf>,
    /// Precomputed image feature cache (real datasets).
    pub features: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            world: None,
            manifest: None,
            images: None,
            features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Synthetic,
    Real,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Model used for concept generation and fact verification.
    pub generator_model: String,
    /// Model used for MCQ judging; kept separate so the judge need not be
    /// the generator.
    pub judge_model: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Synthetic,
            generator_model: "gpt-4o".to_string(),
            judge_model: "gpt-4-turbo".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    /// Learnable condition tokens per prompt.
    pub q: usize,
    /// Activation threshold on mean normalized scores.
    pub t_a: f64,
    /// Manhattan-distance threshold for the redundancy rule.
    pub t_m: f64,
    /// Instances per label in the few-shot feedback environment.
    pub beta: usize,
    /// Concepts per selection round; 0 selects one per prompted label.
    pub select_per_round: usize,
    pub max_iterations: u32,
    pub learning_rate: f64,
    /// Condition-token Adam rate (kept below `learning_rate`; see the
    /// trainer docs).
    pub token_learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Dictionary (learning-to-search) training epochs.
    pub dict_epochs: usize,
    /// Fixed multiplier on label logits before the loss.
    pub logit_scale: f64,
    pub generation_temperature: f64,
    pub judge_temperature: f64,
    pub mcq_votes: usize,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            q: 8,
            t_a: 0.1,
            t_m: 0.3,
            beta: 16,
            select_per_round: 0,
            max_iterations: 10,
            learning_rate: 0.01,
            token_learning_rate: 0.001,
            batch_size: 2048,
            epochs: 200,
            patience: 20,
            dict_epochs: 100,
            logit_scale: 1.0,
            generation_temperature: 0.7,
            judge_temperature: 0.0,
            mcq_votes: 3,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub backend: BackendConfig,
    pub hyper: HyperConfig,
}

/// Optional command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub t_a: Option<f64>,
    pub t_m: Option<f64>,
    pub beta: Option<usize>,
    pub q: Option<usize>,
    pub max_iterations: Option<u32>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| anyhow::anyhow!("invalid config {}: {e}", path.display()))?;
        Ok(config)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(v) = overrides.seed {
            self.seed = v;
        }
        if let Some(v) = &overrides.out {
            self.out = v.clone();
        }
        if let Some(v) = &overrides.backend {
            self.backend.kind = v.clone();
        }
        if let Some(v) = overrides.t_a {
            self.hyper.t_a = v;
        }
        if let Some(v) = overrides.t_m {
            self.hyper.t_m = v;
        }
        if let Some(v) = overrides.beta {
            self.hyper.beta = v;
        }
        if let Some(v) = overrides.q {
            self.hyper.q = v;
        }
        if let Some(v) = overrides.max_iterations {
            self.hyper.max_iterations = v;
        }
    }

    /// Range-check everything before any artifact is written or any LLM
    /// request is issued.
    pub fn validate(&self) -> anyhow::Result<()> {
        let h = &self.hyper;
        if !(0.0..=1.0).contains(&h.t_a) {
            anyhow::bail!("t_a must lie in [0, 1], got {}", h.t_a);
        }
        if h.t_m < 0.0 {
            anyhow::bail!("t_m must be >= 0, got {}", h.t_m);
        }
        if h.q < 1 {
            anyhow::bail!("q must be >= 1, got {}", h.q);
        }
        if h.beta < 2 {
            anyhow::bail!(
                "beta must be >= 2 (instances are split 50/50 into train and validation), got {}",
                h.beta
            );
        }
        if h.max_iterations < 1 {
            anyhow::bail!("max_iterations must be >= 1");
        }
        if h.learning_rate <= 0.0 {
            anyhow::bail!("learning_rate must be positive");
        }
        if h.mcq_votes < 1 {
            anyhow::bail!("mcq_votes must be >= 1");
        }
        if self.out.as_os_str().is_empty() {
            anyhow::bail!("output directory must be set (config `out` or --out)");
        }
        match self.dataset.kind {
            DatasetKind::Synthetic => {
                if self.dataset.world.is_none() {
                    anyhow::bail!("synthetic datasets need `dataset.world` pointing at a world file");
                }
            }
            DatasetKind::Real => {
                if self.dataset.manifest.is_none() || self.dataset.features.is_none() {
                    anyhow::bail!(
                        "real datasets need `dataset.manifest` and `dataset.features`; \
                         image features are computed externally and imported as an embedding cache"
                    );
                }
            }
        }
        Ok(())
    }

    /// Hash of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        sha256_hex(canonical.as_bytes())[..16].to_string()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            q: self.hyper.q,
            learning_rate: self.hyper.learning_rate,
            token_learning_rate: self.hyper.token_learning_rate,
            batch_size: self.hyper.batch_size,
            max_epochs: self.hyper.epochs,
            patience: self.hyper.patience,
            token_init_std: 0.02,
            logit_scale: self.hyper.logit_scale,
            include_label: true,
            seed: self.seed,
        }
    }

    pub fn grounding_config(&self) -> GroundingConfig {
        GroundingConfig {
            t_a: self.hyper.t_a,
            t_m: self.hyper.t_m,
            beta: self.hyper.beta,
            max_iterations: self.hyper.max_iterations,
            select_per_round: match self.hyper.select_per_round {
                0 => None,
                k => Some(k),
            },
            train: self.train_config(),
            selection: SelectionConfig {
                epochs: self.hyper.dict_epochs,
                learning_rate: self.hyper.learning_rate,
                seed: self.seed,
            },
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        let mut c = RunConfig {
            out: PathBuf::from("runs/t"),
            ..Default::default()
        };
        c.dataset.world = Some(PathBuf::from("world.json"));
        c
    }

    #[test]
    fn defaults_are_valid() {
        assert!(base().validate().is_ok());
    }

    #[test]
    fn out_of_range_ta_is_rejected() {
        let mut c = base();
        c.hyper.t_a = 1.5;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("t_a"));
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = base();
        let mut b = base();
        assert_eq!(a.hash(), b.hash());
        b.hyper.t_m = 0.31;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn toml_round_trip_with_overrides() {
        let text = r#"
seed = 7
out = "runs/x"

[dataset]
kind = "synthetic"
world = "w.json"

[hyper]
q = 4
t_a = 0.2
"#;
        let mut c: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.hyper.q, 4);
        assert_eq!(c.hyper.t_m, 0.3, "unset fields keep defaults");
        c.apply(&Overrides {
            seed: Some(9),
            t_a: Some(0.15),
            ..Default::default()
        });
        assert_eq!(c.seed, 9);
        assert_eq!(c.hyper.t_a, 0.15);
        assert!(c.validate().is_ok());
    }
}
