//! Flat experiment configuration: one JSON object of scalar keys, with
//! command-line `key=value` overrides applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use perfusion_core::diffusion::{DiffusionConfig, DiffusionTrainConfig, ScheduleConfig, Trainable, UNetConfig};
use perfusion_core::groupdpo::{DpoConfig, DpoTrainConfig, Objective};
use perfusion_core::numerics::AdamWConfig;
use perfusion_core::reward::{RewardConfig, RmTrainConfig, TowerConfig, Wiring};
use perfusion_core::synthdata::WorldConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// Which loss `train-diffusion` optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Sft,
    PairwiseDpo,
    GroupDpo,
}

/// Parameter subset a diffusion command trains. `Auto` picks the branch
/// when personalization is on and the model was loaded from a checkpoint,
/// the backbone when personalization is off, and everything otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableChoice {
    Auto,
    Backbone,
    Branch,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,

    // world
    pub n_users: usize,
    pub cardinalities: Vec<usize>,
    pub item_dim: usize,
    pub cond_dim: usize,
    pub style_dim: usize,
    pub n_prompts: usize,
    pub group_size: usize,
    pub positives: usize,
    pub n_records: usize,
    pub n_pretrain_records: usize,
    pub min_records_per_user: usize,
    pub oracle_noise: f64,
    pub style_only: bool,
    pub consistency_weight: f64,
    pub style_weight: f64,
    pub render_scale: f64,
    pub item_noise: f64,

    // shared user-feature crossing
    pub embed_dim: usize,
    pub cross_layers: usize,

    // reward model
    pub rm_width: usize,
    pub rm_layers: usize,
    pub rm_heads: usize,
    pub rm_ffn_hidden: usize,
    pub rm_out_dim: usize,
    pub rm_item_tokens: usize,
    pub rm_cond_bins: usize,
    /// `duplicated`, `shared`, `vision_only`, `text_only` or `none`.
    pub wiring: String,
    pub rm_lr: f64,
    pub rm_warmup: usize,
    pub rm_weight_decay: f64,
    pub rm_batch_size: usize,
    pub pretrain_epochs: usize,
    pub rm_epochs: usize,

    // denoiser
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub time_dim: usize,
    pub emb_dim: usize,
    pub unet_widths: [usize; 3],
    pub unet_mid: usize,

    // diffusion training
    pub mode: TrainMode,
    pub personalization: bool,
    pub trainable: TrainableChoice,
    pub sft_steps: usize,
    pub branch_sft_steps: usize,
    pub sft_batch_size: usize,
    pub sft_lr: f64,
    pub sft_warmup: usize,
    /// Learning rate of preference optimisation. Production-scale runs of
    /// the same procedure use 1e-8; a 100-step toy model needs far more.
    pub dpo_lr: f64,
    pub dpo_warmup: usize,
    pub dpo_steps: usize,
    pub dpo_batch_size: usize,
    pub beta: f64,
    /// Full model only: pairwise preference optimisation of the backbone
    /// before the branch is trained.
    pub two_phase: bool,
    pub weight_decay: f64,

    // sampling and evaluation
    pub n_eval_pairs: usize,

    // artifact locations (relative paths resolve against the working directory)
    pub data_dir: Option<PathBuf>,
    pub backbone_ckpt: Option<PathBuf>,
    pub rm_ckpt: Option<PathBuf>,
    pub init_ckpt: Option<PathBuf>,
    pub reference_ckpt: Option<PathBuf>,
    pub diffusion_ckpt: Option<PathBuf>,
    /// `name=path` pairs of sample files for `eval-gen`.
    pub eval_variants: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let w = WorldConfig::default();
        let t = TowerConfig::default();
        let u = UNetConfig::default();
        let s = ScheduleConfig::default();
        let r = RewardConfig::default();
        ExperimentConfig {
            seed: 0,
            n_users: w.n_users,
            cardinalities: w.cardinalities,
            item_dim: w.item_dim,
            cond_dim: w.cond_dim,
            style_dim: w.style_dim,
            n_prompts: w.n_prompts,
            group_size: w.group_size,
            positives: w.positives,
            n_records: w.n_records,
            n_pretrain_records: w.n_pretrain_records,
            min_records_per_user: w.min_records_per_user,
            oracle_noise: w.noise,
            style_only: w.style_only,
            consistency_weight: w.consistency_weight,
            style_weight: w.style_weight,
            render_scale: w.render_scale,
            item_noise: w.item_noise,
            embed_dim: r.embed_dim,
            cross_layers: r.cross_layers,
            rm_width: t.width,
            rm_layers: t.layers,
            rm_heads: t.heads,
            rm_ffn_hidden: t.ffn_hidden,
            rm_out_dim: t.out_dim,
            rm_item_tokens: r.item_tokens,
            rm_cond_bins: r.cond_bins,
            wiring: "duplicated".into(),
            rm_lr: 1e-3,
            rm_warmup: 500,
            rm_weight_decay: 1e-2,
            rm_batch_size: 16,
            pretrain_epochs: 2,
            rm_epochs: 6,
            diffusion_steps: s.steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            time_dim: u.time_dim,
            emb_dim: u.emb_dim,
            unet_widths: u.widths,
            unet_mid: u.mid,
            mode: TrainMode::Sft,
            personalization: false,
            trainable: TrainableChoice::Auto,
            sft_steps: 1500,
            branch_sft_steps: 1000,
            sft_batch_size: 32,
            sft_lr: 1e-3,
            sft_warmup: 100,
            dpo_lr: 1e-4,
            dpo_warmup: 50,
            dpo_steps: 1000,
            dpo_batch_size: 16,
            beta: DpoConfig::default().beta,
            two_phase: false,
            weight_decay: 1e-2,
            n_eval_pairs: 200,
            data_dir: None,
            backbone_ckpt: None,
            rm_ckpt: None,
            init_ckpt: None,
            reference_ckpt: None,
            diffusion_ckpt: None,
            eval_variants: Vec::new(),
        }
    }
}

/// Parses `value` as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl ExperimentConfig {
    /// Defaults, then the file (if any), then `key=value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut map = match serde_json::to_value(ExperimentConfig::default()) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config serializes to an object"),
        };
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|_| CliError::MissingArtifact(path.to_path_buf()))?;
            let doc: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let Value::Object(obj) = doc else {
                return Err(CliError::Config(format!(
                    "{}: expected a flat JSON object",
                    path.display()
                )));
            };
            merge(&mut map, obj)?;
        }
        let mut flags = Map::new();
        for kv in overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {kv:?} is not key=value")))?;
            flags.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        merge(&mut map, flags)?;
        let cfg: ExperimentConfig =
            serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.world().validate()?;
        self.wiring()?;
        self.reward().tower.validate()?;
        self.diffusion().unet.validate()?;
        DpoConfig { beta: self.beta }.validate()?;
        if self.embed_dim == 0 || self.rm_cond_bins == 0 || self.rm_item_tokens == 0 {
            return Err(CliError::Config(
                "embed_dim, rm_cond_bins and rm_item_tokens must be positive".into(),
            ));
        }
        if !self.item_dim.is_multiple_of(self.rm_item_tokens) {
            return Err(CliError::Config(format!(
                "item_dim {} must be divisible by rm_item_tokens {}",
                self.item_dim, self.rm_item_tokens
            )));
        }
        if self.rm_batch_size == 0 || self.sft_batch_size == 0 || self.dpo_batch_size == 0 {
            return Err(CliError::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            n_users: self.n_users,
            cardinalities: self.cardinalities.clone(),
            item_dim: self.item_dim,
            cond_dim: self.cond_dim,
            style_dim: self.style_dim,
            n_prompts: self.n_prompts,
            group_size: self.group_size,
            positives: self.positives,
            n_records: self.n_records,
            n_pretrain_records: self.n_pretrain_records,
            min_records_per_user: self.min_records_per_user,
            noise: self.oracle_noise,
            style_only: self.style_only,
            consistency_weight: self.consistency_weight,
            style_weight: self.style_weight,
            render_scale: self.render_scale,
            item_noise: self.item_noise,
            seed: self.seed,
        }
    }

    /// `None` for a plug-in-free backbone.
    pub fn wiring(&self) -> CliResult<Option<Wiring>> {
        if self.wiring == "none" {
            return Ok(None);
        }
        Ok(Some(self.wiring.parse()?))
    }

    pub fn reward(&self) -> RewardConfig {
        RewardConfig {
            tower: TowerConfig {
                width: self.rm_width,
                layers: self.rm_layers,
                heads: self.rm_heads,
                ffn_hidden: self.rm_ffn_hidden,
                out_dim: self.rm_out_dim,
            },
            item_dim: self.item_dim,
            item_tokens: self.rm_item_tokens,
            cond_dim: self.cond_dim,
            cond_bins: self.rm_cond_bins,
            cardinalities: self.cardinalities.clone(),
            embed_dim: self.embed_dim,
            cross_layers: self.cross_layers,
            wiring: None,
        }
    }

    pub fn rm_train(&self, epochs: usize) -> RmTrainConfig {
        RmTrainConfig {
            epochs,
            batch_size: self.rm_batch_size,
            optimizer: AdamWConfig {
                learning_rate: self.rm_lr,
                weight_decay: self.rm_weight_decay,
                warmup_steps: self.rm_warmup,
                ..AdamWConfig::default()
            },
            seed: self.seed,
        }
    }

    pub fn diffusion(&self) -> DiffusionConfig {
        DiffusionConfig {
            unet: UNetConfig {
                item_dim: self.item_dim,
                cond_dim: self.cond_dim,
                time_dim: self.time_dim,
                emb_dim: self.emb_dim,
                widths: self.unet_widths,
                mid: self.unet_mid,
            },
            schedule: ScheduleConfig {
                steps: self.diffusion_steps,
                beta_start: self.beta_start,
                beta_end: self.beta_end,
            },
            cardinalities: self.cardinalities.clone(),
            embed_dim: self.embed_dim,
            cross_layers: self.cross_layers,
        }
    }

    pub fn sft_train(&self, steps: usize, trainable: Trainable, stage: u64) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            steps,
            batch_size: self.sft_batch_size,
            optimizer: AdamWConfig {
                learning_rate: self.sft_lr,
                weight_decay: self.weight_decay,
                warmup_steps: self.sft_warmup,
                ..AdamWConfig::default()
            },
            trainable,
            seed: perfusion_core::rng::derive_seed(self.seed, "sft-stage", stage),
        }
    }

    pub fn dpo_train(&self, objective: Objective, trainable: Trainable, stage: u64) -> DpoTrainConfig {
        DpoTrainConfig {
            steps: self.dpo_steps,
            batch_size: self.dpo_batch_size,
            dpo: DpoConfig { beta: self.beta },
            objective,
            optimizer: AdamWConfig {
                learning_rate: self.dpo_lr,
                weight_decay: self.weight_decay,
                warmup_steps: self.dpo_warmup,
                ..AdamWConfig::default()
            },
            trainable,
            seed: perfusion_core::rng::derive_seed(self.seed, "dpo-stage", stage),
        }
    }

    pub fn data_dir(&self) -> CliResult<&Path> {
        self.data_dir
            .as_deref()
            .ok_or_else(|| CliError::Config("data_dir is not set".into()))
    }
}

fn merge(into: &mut Map<String, Value>, from: Map<String, Value>) -> CliResult<()> {
    for (k, v) in from {
        if !into.contains_key(&k) {
            return Err(CliError::Config(format!("unknown config key {k:?}")));
        }
        if v.is_object() {
            return Err(CliError::Config(format!(
                "config key {k:?} must not be a nested object"
            )));
        }
        into.insert(k, v);
    }
    Ok(())
}
