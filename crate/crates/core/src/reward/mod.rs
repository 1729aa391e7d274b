//! Personalized two-tower reward model.
//!
//! A text tower encodes the prompt condition and an item tower encodes the
//! candidate item; the score is the cosine similarity of the two pooled
//! vectors. Both towers are small pre-norm transformers. Personalized
//! plug-ins derive a user representation from profile features and add
//! per-layer offsets to every token's hidden state before attention and before
//! the feed-forward block. The backbone is trained first on prompt
//! consistency, then frozen while only the plug-ins learn.

pub mod loss;
pub mod metrics;
pub mod model;
pub mod plugin;
pub mod tower;
pub mod train;

pub use loss::{group_loss, ideal_distribution, predicted_distribution, rm_group_loss};
pub use metrics::{average_precision, group_auc, MetricSummary};
pub use model::{tokenize_condition, GroupInput, RewardConfig, RewardModel};
pub use plugin::{PluginSet, TowerPlugin, Wiring};
pub use tower::{Tower, TowerConfig, TowerInput};
pub use train::{pretrain_backbone, train_rm, RmTrainConfig, TrainReport};
