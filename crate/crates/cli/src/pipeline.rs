//! Training and evaluation steps shared by the commands, the ablation sweeps
//! and the acceptance experiments.

use std::path::Path;

use perfusion_core::diffusion::{sample, train_sft, Denoiser, NoiseSchedule, SampleRequest, SftSample, Trainable};
use perfusion_core::groupdpo::{reference_copy, train_dpo, DpoStepLog, Objective, PreferenceGroup};
use perfusion_core::numerics::Checkpoint;
use perfusion_core::personalization::UserProfile;
use perfusion_core::reward::{pretrain_backbone, train_rm, MetricSummary, RewardModel, Wiring};
use perfusion_core::rng::derive_seed;
use perfusion_core::synthdata::{generate_world, read_jsonl, GroupRecord, World};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const BRANCH_PREFIX: &str = "diffusion/branch/";

pub fn read_records(path: &Path) -> CliResult<Vec<GroupRecord>> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(path.to_path_buf()));
    }
    Ok(read_jsonl(path)?)
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(path.to_path_buf()));
    }
    Ok(Checkpoint::load(path)?)
}

/// Positives of every record as denoising examples.
pub fn sft_samples(records: &[GroupRecord], personalized: bool) -> Vec<SftSample> {
    records
        .iter()
        .flat_map(|r| {
            r.positives().map(move |i| SftSample {
                item: r.items[i].clone(),
                condition: r.condition.clone(),
                profile: personalized.then(|| r.profile()),
            })
        })
        .collect()
}

pub fn preference_groups(records: &[GroupRecord], personalized: bool) -> CliResult<Vec<PreferenceGroup>> {
    Ok(records
        .iter()
        .map(|r| PreferenceGroup::from_record(r, personalized))
        .collect::<perfusion_core::Result<_>>()?)
}

pub fn has_branch(ckpt: &Checkpoint) -> bool {
    ckpt.names().any(|n| n.starts_with(BRANCH_PREFIX))
}

/// Denoiser with the checkpoint's parameters; a branch is attached when the
/// checkpoint holds one.
pub fn denoiser_from(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> CliResult<Denoiser> {
    let mut m = Denoiser::new(cfg.diffusion(), cfg.seed)?;
    if has_branch(ckpt) {
        m.attach_branch(cfg.seed)?;
    }
    ckpt.restore_into(&mut m)?;
    Ok(m)
}

/// Plug-in wiring recorded implicitly by a reward checkpoint's entry names.
pub fn wiring_of(ckpt: &Checkpoint) -> Option<Wiring> {
    let has = |p: &str| ckpt.names().any(|n| n.starts_with(&format!("reward/plugin/{p}/")));
    match (has("text"), has("item"), has("shared")) {
        (_, _, true) => Some(Wiring::Shared),
        (true, true, _) => Some(Wiring::Duplicated),
        (true, false, _) => Some(Wiring::TextOnly),
        (false, true, _) => Some(Wiring::VisionOnly),
        _ => None,
    }
}

pub fn reward_from(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> CliResult<RewardModel> {
    let mut rc = cfg.reward();
    rc.wiring = wiring_of(ckpt);
    let mut m = RewardModel::new(rc, cfg.seed)?;
    ckpt.restore_into(&mut m)?;
    m.set_backbone_trainable(false);
    Ok(m)
}

/// Backbone-only reward model pretrained on consistency records.
pub fn pretrained_backbone(cfg: &ExperimentConfig, pretrain: &[GroupRecord]) -> CliResult<(RewardModel, Vec<f64>)> {
    let mut m = RewardModel::new(cfg.reward(), cfg.seed)?;
    let report = pretrain_backbone(&mut m, pretrain, &cfg.rm_train(cfg.pretrain_epochs))?;
    Ok((m, report.epoch_losses))
}

/// Copy of `backbone` with fresh plug-ins of `wiring`, fine-tuned on `train`.
pub fn finetuned_rm(
    cfg: &ExperimentConfig,
    backbone: &RewardModel,
    wiring: Wiring,
    train: &[GroupRecord],
) -> CliResult<(RewardModel, Vec<f64>)> {
    let mut m = backbone.clone();
    m.attach_plugins(wiring, cfg.seed)?;
    let report = train_rm(&mut m, train, &cfg.rm_train(cfg.rm_epochs))?;
    Ok((m, report.epoch_losses))
}

pub fn evaluate_rm(model: &RewardModel, records: &[GroupRecord]) -> CliResult<MetricSummary> {
    let scores = model.score_records(records)?;
    let m = MetricSummary::from_scores(records, &scores);
    if !(m.map.is_finite() && m.gauc.is_finite()) {
        return Err(CliError::Numerical("reward metrics are not finite".into()));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmAblation {
    pub seed: u64,
    /// Frozen pretrained backbone without plug-ins.
    pub baseline: MetricSummary,
    pub wirings: Vec<(Wiring, MetricSummary)>,
}

/// Generates the world of `cfg`, pretrains one backbone, and fine-tunes each
/// wiring on top of it. Metrics are on the test split.
pub fn run_rm_ablation(cfg: &ExperimentConfig, wirings: &[Wiring]) -> CliResult<(RmAblation, Vec<RewardModel>)> {
    let world = generate_world(&cfg.world())?;
    let data = world.emit_dataset()?;
    let pretrain = world.emit_pretrain()?;
    let (backbone, _) = pretrained_backbone(cfg, &pretrain)?;
    let baseline = evaluate_rm(&backbone, &data.test)?;
    let mut results = Vec::new();
    let mut models = Vec::new();
    for &w in wirings {
        let (m, _) = finetuned_rm(cfg, &backbone, w, &data.train)?;
        results.push((w, evaluate_rm(&m, &data.test)?));
        models.push(m);
    }
    Ok((
        RmAblation {
            seed: cfg.seed,
            baseline,
            wirings: results,
        },
        models,
    ))
}

/// Names of the four generation variants, best expected first.
pub const PF_VARIANTS: [&str; 4] = ["full", "wo_pan", "wo_gobj", "wo_both"];

#[derive(Debug, Clone)]
pub struct PfModels {
    /// Backbone denoising-trained on positives, no user input.
    pub wo_both: Denoiser,
    /// `wo_both` plus a branch denoising-trained on positives with the user.
    pub wo_gobj: Denoiser,
    /// `wo_both` with its whole backbone trained by group preference
    /// optimisation; no branch.
    pub wo_pan: Denoiser,
    /// `wo_gobj` with its branch trained by group preference optimisation.
    pub full: Denoiser,
    pub wo_pan_log: Vec<DpoStepLog>,
    pub full_log: Vec<DpoStepLog>,
}

impl PfModels {
    /// (name, model, uses the user profile) for every variant.
    pub fn variants(&self) -> [(&'static str, &Denoiser, bool); 4] {
        [
            ("full", &self.full, true),
            ("wo_pan", &self.wo_pan, false),
            ("wo_gobj", &self.wo_gobj, true),
            ("wo_both", &self.wo_both, false),
        ]
    }
}

/// Stage indices keep each training stage on its own random stream.
mod stage {
    pub const BASE_SFT: u64 = 0;
    pub const BRANCH_SFT: u64 = 1;
    pub const BACKBONE_DPO: u64 = 2;
    pub const BRANCH_DPO: u64 = 3;
    pub const PHASE_ONE: u64 = 4;
}

pub fn branch_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.seed, "branch-init", 0)
}

/// Trains the four ablation variants on `train`. With `two_phase`, the full
/// model's backbone first goes through pairwise preference optimisation
/// before its branch is trained.
pub fn train_pf_models(cfg: &ExperimentConfig, train: &[GroupRecord]) -> CliResult<PfModels> {
    let sched = NoiseSchedule::linear(&cfg.diffusion().schedule)?;
    let plain = sft_samples(train, false);
    let personal = sft_samples(train, true);

    let mut wo_both = Denoiser::new(cfg.diffusion(), cfg.seed)?;
    train_sft(
        &mut wo_both,
        &plain,
        &sched,
        &cfg.sft_train(cfg.sft_steps, Trainable::Backbone, stage::BASE_SFT),
    )?;

    let with_branch = |base: &Denoiser| -> CliResult<Denoiser> {
        let mut m = base.clone();
        m.attach_branch(branch_seed(cfg))?;
        let sft = cfg.sft_train(cfg.branch_sft_steps, Trainable::Branch, stage::BRANCH_SFT);
        train_sft(&mut m, &personal, &sched, &sft)?;
        Ok(m)
    };
    let wo_gobj = with_branch(&wo_both)?;

    let plain_groups = preference_groups(train, false)?;
    let mut wo_pan = wo_both.clone();
    let reference = reference_copy(&wo_both);
    let dpo = cfg.dpo_train(Objective::Group, Trainable::Backbone, stage::BACKBONE_DPO);
    let wo_pan_log = train_dpo(&mut wo_pan, &reference, &plain_groups, &sched, &dpo)?;

    let mut full = if cfg.two_phase {
        let mut backbone = wo_both.clone();
        let p1 = cfg.dpo_train(Objective::Pairwise, Trainable::Backbone, stage::PHASE_ONE);
        train_dpo(&mut backbone, &reference, &plain_groups, &sched, &p1)?;
        with_branch(&backbone)?
    } else {
        wo_gobj.clone()
    };
    let groups = preference_groups(train, true)?;
    let reference = reference_copy(&full);
    let dpo = cfg.dpo_train(Objective::Group, Trainable::Branch, stage::BRANCH_DPO);
    let full_log = train_dpo(&mut full, &reference, &groups, &sched, &dpo)?;

    for (name, log) in [("wo_pan", &wo_pan_log), ("full", &full_log)] {
        if log.iter().any(|l| !l.mean_loss.is_finite()) {
            return Err(CliError::Numerical(format!("{name} preference loss diverged")));
        }
    }
    Ok(PfModels {
        wo_both,
        wo_gobj,
        wo_pan,
        full,
        wo_pan_log,
        full_log,
    })
}

/// A (user, prompt) pair to generate for, with its sampling seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub user_id: usize,
    pub features: Vec<usize>,
    pub prompt_id: usize,
    pub condition: Vec<f64>,
    pub seed: u64,
}

impl EvalPair {
    pub fn profile(&self) -> UserProfile {
        UserProfile::new(self.features.clone())
    }
}

/// The (user, prompt) pairs of the first `n` records, each with a seed
/// derived from `seed` and its position.
pub fn eval_pairs(records: &[GroupRecord], n: usize, seed: u64) -> Vec<EvalPair> {
    records
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, r)| EvalPair {
            user_id: r.user_id,
            features: r.features.clone(),
            prompt_id: r.prompt_id,
            condition: r.condition.clone(),
            seed: derive_seed(seed, "eval/sample", i as u64),
        })
        .collect()
}

pub fn generate(
    cfg: &ExperimentConfig,
    model: &Denoiser,
    pairs: &[EvalPair],
    personalized: bool,
) -> CliResult<Vec<Vec<f64>>> {
    let sched = NoiseSchedule::linear(&cfg.diffusion().schedule)?;
    let requests: Vec<SampleRequest> = pairs
        .iter()
        .map(|p| SampleRequest {
            condition: p.condition.clone(),
            profile: personalized.then(|| p.profile()),
            seed: p.seed,
        })
        .collect();
    let items = sample(model, &sched, &requests)?;
    if items.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CliError::Numerical("sampled items are not finite".into()));
    }
    Ok(items)
}

pub fn oracle_scores(world: &World, pairs: &[EvalPair], items: &[Vec<f64>]) -> CliResult<Vec<f64>> {
    Ok(pairs
        .iter()
        .zip(items)
        .map(|(p, x)| world.oracle.score(x, &p.condition, &p.profile()))
        .collect::<perfusion_core::Result<_>>()?)
}

/// Reward-model score of each item alone for its pair's prompt and user.
pub fn rm_scores(rm: &RewardModel, pairs: &[EvalPair], items: &[Vec<f64>]) -> CliResult<Vec<f64>> {
    pairs
        .iter()
        .zip(items)
        .map(|(p, x)| Ok(rm.score_group(&p.condition, std::slice::from_ref(x), &p.profile())?[0]))
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfAblation {
    pub seed: u64,
    /// Per variant, the oracle score of every evaluation pair.
    pub oracle: Vec<(String, Vec<f64>)>,
}

impl PfAblation {
    pub fn mean_of(&self, name: &str) -> f64 {
        self.oracle
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| mean(v))
            .unwrap_or(f64::NAN)
    }
}

/// Generates the world of `cfg`, trains all variants and scores their
/// samples for the first `n_eval_pairs` test pairs with the oracle.
pub fn run_pf_ablation(cfg: &ExperimentConfig) -> CliResult<(PfAblation, PfModels, Vec<EvalPair>, World)> {
    let world = generate_world(&cfg.world())?;
    let data = world.emit_dataset()?;
    let models = train_pf_models(cfg, &data.train)?;
    let pairs = eval_pairs(&data.test, cfg.n_eval_pairs, cfg.seed);
    let mut oracle = Vec::new();
    for (name, m, personalized) in models.variants() {
        let items = generate(cfg, m, &pairs, personalized)?;
        oracle.push((name.to_string(), oracle_scores(&world, &pairs, &items)?));
    }
    Ok((PfAblation { seed: cfg.seed, oracle }, models, pairs, world))
}

/// (wins, losses, ties) of `a` against `b` over paired scores.
pub fn paired_record(a: &[f64], b: &[f64]) -> (usize, usize, usize) {
    a.iter().zip(b).fold((0, 0, 0), |(w, l, t), (x, y)| {
        if x > y {
            (w + 1, l, t)
        } else if x < y {
            (w, l + 1, t)
        } else {
            (w, l, t + 1)
        }
    })
}
