//! Backbone pretraining and plug-in fine-tuning.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::group_loss;
use super::model::{GroupInput, RewardModel};
use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, Graph, Parameterized};
use crate::personalization::UserProfile;
use crate::rng;
use crate::synthdata::GroupRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        RmTrainConfig {
            epochs: 4,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch's mini-batches.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

fn run_epochs(model: &mut RewardModel, records: &[GroupRecord], cfg: &RmTrainConfig, tag: &str) -> Result<TrainReport> {
    if records.is_empty() {
        return Err(Error::Degenerate("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let profiles: Vec<UserProfile> = records.iter().map(|r| r.profile()).collect();
    let mut opt = AdamW::new(cfg.optimizer);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..records.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream_at(cfg.seed, tag, epoch as u64));
        let (mut total, mut batches) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<GroupInput<'_>> = batch
                .iter()
                .map(|&i| GroupInput {
                    condition: &records[i].condition,
                    items: &records[i].items,
                    profile: &profiles[i],
                })
                .collect();
            let labels: Vec<Vec<u8>> = batch.iter().map(|&i| records[i].labels.clone()).collect();
            let g = Graph::new();
            let scores = model.score_batch(&g, &inputs)?;
            let loss = group_loss(&g, scores, &labels)?;
            total += g.scalar(loss);
            batches += 1;
            let grads = g.backward(loss)?;
            grads.apply(model);
            opt.step(model)?;
        }
        report.epoch_losses.push(total / batches as f64);
    }
    report.steps = opt.step_count();
    Ok(report)
}

/// Trains both towers without plug-ins on prompt-consistency records, then
/// freezes them. Existing plug-ins are kept aside and reattached untouched.
pub fn pretrain_backbone(model: &mut RewardModel, records: &[GroupRecord], cfg: &RmTrainConfig) -> Result<TrainReport> {
    let plugins = model.plugins.take();
    model.set_backbone_trainable(true);
    let report = run_epochs(model, records, cfg, "reward/pretrain");
    model.set_backbone_trainable(false);
    model.plugins = plugins;
    report
}

/// Fine-tunes only the plug-ins (cross networks and adaptive networks); the
/// backbone stays frozen.
pub fn train_rm(model: &mut RewardModel, records: &[GroupRecord], cfg: &RmTrainConfig) -> Result<TrainReport> {
    let Some(plugins) = model.plugins.as_mut() else {
        return Err(Error::Contract("reward model has no plug-ins to train".into()));
    };
    plugins.set_trainable(true);
    model.set_backbone_trainable(false);
    run_epochs(model, records, cfg, "reward/finetune")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Checkpoint;
    use crate::reward::{RewardConfig, TowerConfig, Wiring};
    use crate::synthdata::{generate_world, WorldConfig};

    fn setup() -> (RewardModel, Vec<GroupRecord>) {
        let world = generate_world(&WorldConfig {
            n_users: 6,
            cardinalities: vec![3, 4],
            item_dim: 6,
            cond_dim: 3,
            style_dim: 3,
            n_prompts: 5,
            n_records: 24,
            n_pretrain_records: 24,
            min_records_per_user: 2,
            ..WorldConfig::default()
        })
        .unwrap();
        let cfg = RewardConfig {
            tower: TowerConfig {
                width: 8,
                layers: 1,
                heads: 2,
                ffn_hidden: 8,
                out_dim: 4,
            },
            item_dim: 6,
            item_tokens: 3,
            cond_dim: 3,
            cond_bins: 4,
            cardinalities: vec![3, 4],
            embed_dim: 2,
            cross_layers: 1,
            wiring: None,
        };
        (RewardModel::new(cfg, 3).unwrap(), world.emit_dataset().unwrap().train)
    }

    fn bytes(params: Vec<(String, &crate::numerics::Tensor)>) -> Vec<u64> {
        params
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    fn cfg(epochs: usize) -> RmTrainConfig {
        RmTrainConfig {
            epochs,
            batch_size: 8,
            optimizer: AdamWConfig {
                learning_rate: 1e-2,
                warmup_steps: 0,
                ..AdamWConfig::default()
            },
            seed: 1,
        }
    }

    #[test]
    fn finetuning_moves_only_plugins() {
        let (mut m, recs) = setup();
        m.attach_plugins(Wiring::Duplicated, 4).unwrap();
        let backbone = bytes(m.backbone_params());
        let plugins = bytes(m.plugins.as_ref().unwrap().params());
        let report = train_rm(&mut m, &recs, &cfg(2)).unwrap();
        assert_eq!(report.epoch_losses.len(), 2);
        assert_eq!(report.steps, 2 * recs.len().div_ceil(8) as u64);
        assert_eq!(bytes(m.backbone_params()), backbone);
        assert_ne!(bytes(m.plugins.as_ref().unwrap().params()), plugins);
        assert!(!m.plugins.as_ref().unwrap().is_fresh());
    }

    #[test]
    fn pretraining_moves_the_backbone_and_sets_plugins_aside() {
        let (mut m, recs) = setup();
        m.attach_plugins(Wiring::Shared, 4).unwrap();
        let before = Checkpoint::from_model(m.plugins.as_ref().unwrap()).to_bytes();
        let backbone = bytes(m.backbone_params());
        pretrain_backbone(&mut m, &recs, &cfg(1)).unwrap();
        assert_ne!(bytes(m.backbone_params()), backbone);
        assert_eq!(Checkpoint::from_model(m.plugins.as_ref().unwrap()).to_bytes(), before);
        assert!(m.backbone_params().iter().all(|(_, t)| !t.requires_grad()));
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let (mut m, recs) = setup();
        m.attach_plugins(Wiring::TextOnly, 4).unwrap();
        let before = Checkpoint::from_model(&m).to_bytes();
        let report = train_rm(&mut m, &recs, &cfg(0)).unwrap();
        assert!(report.epoch_losses.is_empty());
        assert_eq!(Checkpoint::from_model(&m).to_bytes(), before);
    }

    #[test]
    fn finetuning_needs_plugins_and_data() {
        let (mut m, recs) = setup();
        assert!(matches!(train_rm(&mut m, &recs, &cfg(1)), Err(Error::Contract(_))));
        m.attach_plugins(Wiring::VisionOnly, 4).unwrap();
        assert!(matches!(train_rm(&mut m, &[], &cfg(1)), Err(Error::Degenerate(_))));
    }
}
