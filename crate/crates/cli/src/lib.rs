//! Command-line experiment runner: data generation, reward-model and
//! denoiser training, sampling, evaluation and the ablation sweeps.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod sweep;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::manifest::RunManifest;
use crate::sweep::Preset;

#[derive(Debug, Parser)]
#[command(name = "perfusion", version, about = "Personalized preference alignment experiments")]
pub struct Cli {
    /// JSON config file; keys not present keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory of the run.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,

    /// `key=value` override applied after the config file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic world and its dataset splits.
    GenData,
    /// Pretrain the reward-model backbone on consistency records.
    PretrainBackbone,
    /// Fine-tune plug-ins on a frozen backbone.
    TrainRm {
        /// Pretrain the backbone in this run instead of loading `backbone_ckpt`.
        #[arg(long)]
        pretrain_backbone: bool,
    },
    /// Ranking metrics of a reward model on every split.
    EvalRm,
    /// Denoising or preference training of the denoiser.
    TrainDiffusion,
    /// Generate items for test (user, prompt) pairs.
    Sample,
    /// Score sample files with the oracle and an optional reward model.
    EvalGen,
    /// Run an ablation over several seeds.
    Sweep {
        #[arg(value_enum)]
        preset: Preset,
        /// Number of seeds, counted up from the config seed.
        #[arg(long)]
        seeds: Option<usize>,
        /// Seeds trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

impl Cli {
    pub fn resolve_config(&self) -> CliResult<ExperimentConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        ExperimentConfig::resolve(self.config.as_deref(), &overrides)
    }
}

/// Runs one parsed invocation. Sweeps return the manifest of their top-level
/// directory.
pub fn run(cli: &Cli) -> CliResult<RunManifest> {
    let cfg = cli.resolve_config()?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg, out),
        Command::PretrainBackbone => commands::pretrain_backbone(&cfg, out),
        Command::TrainRm { pretrain_backbone } => commands::train_rm(&cfg, out, *pretrain_backbone),
        Command::EvalRm => commands::eval_rm(&cfg, out),
        Command::TrainDiffusion => commands::train_diffusion(&cfg, out),
        Command::Sample => commands::sample(&cfg, out),
        Command::EvalGen => commands::eval_gen(&cfg, out),
        Command::Sweep { preset, seeds, jobs } => sweep::run_sweep(&cfg, *preset, *seeds, *jobs, out),
    }
}
