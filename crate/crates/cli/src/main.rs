use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cocobm_cli::commands::{cmd_embed, cmd_eval, cmd_ground, cmd_train};
use cocobm_cli::config::{BackendKind, Overrides, RunConfig};
use cocobm_core::planner::GroundingStatus;

/// Concept-agent grounding, bottleneck training, and interpretability
/// evaluation.
#[derive(Parser)]
#[command(name = "cocobm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Root seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Backend: synthetic or real.
    #[arg(long, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    /// Activation threshold t_a.
    #[arg(long)]
    ta: Option<f64>,
    /// Redundancy Manhattan threshold t_m.
    #[arg(long)]
    tm: Option<f64>,
    /// Instances per label.
    #[arg(long)]
    beta: Option<usize>,
    /// Learnable condition tokens.
    #[arg(long)]
    q: Option<usize>,
    /// Grounding iteration cap.
    #[arg(long)]
    max_iters: Option<u32>,
    /// Output directory; overrides the config file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    match s {
        "synthetic" => Ok(BackendKind::Synthetic),
        "real" => Ok(BackendKind::Real),
        other => Err(format!("unknown backend `{other}`; use synthetic or real")),
    }
}

impl CommonArgs {
    fn into_config(self) -> anyhow::Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        config.apply(&Overrides {
            seed: self.seed,
            out: self.out,
            backend: self.backend,
            t_a: self.ta,
            t_m: self.tm,
            beta: self.beta,
            q: self.q,
            max_iterations: self.max_iters,
        });
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Ground a concept bank: generate, select, verify, and iterate on
    /// feedback until every label is supported without redundancy.
    Ground(CommonArgs),
    /// Train the bottleneck on the full dataset against a grounded bank.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Bank version to train against (default: latest).
        #[arg(long)]
        bank_version: Option<u64>,
        /// Train without the editable matrix (scores never clamped).
        #[arg(long)]
        no_editable_matrix: bool,
    },
    /// Build, judge, and score the interpretability MCQs for a checkpoint.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Additionally retrain without the editable matrix and report
        /// both rows.
        #[arg(long)]
        no_editable_matrix: bool,
    },
    /// Materialize dataset embeddings into the binary cache.
    Embed(CommonArgs),
}

fn run() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Ground(common) => {
            let report = cmd_ground(common.into_config()?)?;
            match report.status {
                GroundingStatus::Converged { iterations } => {
                    println!(
                        "converged after {iterations} iteration(s): {} concepts across {} labels (bank v{})",
                        report.n_concepts, report.n_labels, report.final_bank_version
                    );
                    Ok(ExitCode::SUCCESS)
                }
                GroundingStatus::Capped { iterations } => {
                    eprintln!(
                        "did not converge: iteration cap {iterations} reached with findings still open; \
                         see feedback_iter_*.json"
                    );
                    Ok(ExitCode::from(2))
                }
            }
        }
        Command::Train {
            common,
            bank_version,
            no_editable_matrix,
        } => {
            let report = cmd_train(common.into_config()?, bank_version, !no_editable_matrix)?;
            println!(
                "trained on bank v{} ({} concepts): test accuracy {:.4}",
                report.bank_version, report.n_concepts, report.accuracy
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            common,
            no_editable_matrix,
        } => {
            let report = cmd_eval(common.into_config()?, no_editable_matrix)?;
            for row in &report.table {
                println!(
                    "{}: accuracy {:.4}, truthfulness {:.4}, distinguishability {:.4}, overall {:.4}",
                    row.name, row.accuracy, row.truthfulness, row.distinguishability, row.overall
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Embed(common) => {
            let report = cmd_embed(common.into_config()?)?;
            println!(
                "cache {}: {} rows total, {} added (d={})",
                report.cache.display(),
                report.total,
                report.added,
                report.dim
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
