//! Group-level preference optimisation for the denoiser.
//!
//! A group splits its candidates into positives `P` and negatives `N`. Under a
//! Plackett–Luce model with item strengths `exp(r)`, the probability that a
//! given positive is ranked above every negative (summed over positives,
//! treating them independently) is `Σ_p 1 / (1 + Σ_n exp(r_n − r_p))`. With
//! the implicit reward written through denoising errors, the training loss is
//!
//! `L = −Σ_p log σ(−log Σ_n exp(β·s_p − β·s_n))`,
//!
//! where `s = ‖ε − ε_θ(z_t)‖² − ‖ε − ε_ref(z_t)‖²` for each candidate. One
//! timestep is shared by the whole group and every candidate gets its own
//! noise draw. With one positive and one negative this is exactly the
//! pairwise DPO loss `−log σ(β·s_n − β·s_p)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, NoiseSchedule, Trainable};
use crate::error::{Error, Result};
use crate::numerics::scalar::{log_sigmoid, logsumexp, sigmoid};
use crate::numerics::{AdamW, AdamWConfig, Graph, Parameterized, Var};
use crate::personalization::UserProfile;
use crate::rng::{self, normal_vec};
use crate::synthdata::GroupRecord;

/// Largest negative set the permutation oracle will enumerate.
pub const ORACLE_MAX_NEGATIVES: usize = 6;

fn check_sets(p: &[f64], n: &[f64]) -> Result<()> {
    if p.is_empty() || n.is_empty() {
        return Err(Error::Degenerate(
            "positive and negative sets must both be non-empty".into(),
        ));
    }
    if p.iter().chain(n).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("preference rewards"));
    }
    Ok(())
}

/// `Σ_p 1 / (1 + Σ_n exp(r_n − r_p))`, evaluated as `Σ_p σ(−LSE_n(r_n − r_p))`.
pub fn pl_probability_closed(rewards_p: &[f64], rewards_n: &[f64]) -> Result<f64> {
    check_sets(rewards_p, rewards_n)?;
    Ok(rewards_p
        .iter()
        .map(|rp| {
            let d: Vec<f64> = rewards_n.iter().map(|rn| rn - rp).collect();
            sigmoid(-logsumexp(&d))
        })
        .sum())
}

fn for_each_permutation(items: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        f(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        for_each_permutation(items, k + 1, f);
        items.swap(k, i);
    }
}

/// For each positive, sums the Plackett–Luce probability of every ranking of
/// `{p} ∪ N` that puts `p` first (all `|N|!` orders of the negatives behind
/// it), then sums over positives.
pub fn pl_probability_oracle(rewards_p: &[f64], rewards_n: &[f64]) -> Result<f64> {
    check_sets(rewards_p, rewards_n)?;
    if rewards_n.len() > ORACLE_MAX_NEGATIVES {
        return Err(Error::Contract(format!(
            "oracle enumerates at most {ORACLE_MAX_NEGATIVES} negatives, got {}",
            rewards_n.len()
        )));
    }
    let mut total = 0.0;
    for &rp in rewards_p {
        // strengths relative to the largest reward in play
        let m = rewards_n.iter().copied().fold(rp, f64::max);
        let theta_p = (rp - m).exp();
        let theta_n: Vec<f64> = rewards_n.iter().map(|r| (r - m).exp()).collect();
        let mut order: Vec<usize> = (0..theta_n.len()).collect();
        let mut acc = 0.0;
        for_each_permutation(&mut order, 0, &mut |perm| {
            let mut prob = theta_p / (theta_p + theta_n.iter().sum::<f64>());
            for (k, &j) in perm.iter().enumerate() {
                let rest: f64 = perm[k..].iter().map(|&i| theta_n[i]).sum();
                // a tail of underflowed strengths is uniformly ordered
                prob *= if rest > 0.0 {
                    theta_n[j] / rest
                } else {
                    1.0 / (perm.len() - k) as f64
                };
            }
            acc += prob;
        });
        total += acc;
    }
    Ok(total)
}

/// Loss of one group from its per-candidate scores.
pub fn group_loss_from_scores(s_p: &[f64], s_n: &[f64], beta: f64) -> Result<f64> {
    check_sets(s_p, s_n)?;
    Ok(-s_p
        .iter()
        .map(|sp| {
            let d: Vec<f64> = s_n.iter().map(|sn| beta * sp - beta * sn).collect();
            log_sigmoid(-logsumexp(&d))
        })
        .sum::<f64>())
}

/// `−log σ(β·s_n − β·s_p)`.
pub fn pairwise_loss_from_scores(s_p: f64, s_n: f64, beta: f64) -> f64 {
    -log_sigmoid(beta * s_n - beta * s_p)
}

/// `|P| · (−log σ(−ln |N|))`: the loss when the model equals the reference.
pub fn reference_point_loss(n_pos: usize, n_neg: usize) -> f64 {
    -(n_pos as f64) * log_sigmoid(-(n_neg as f64).ln())
}

/// Candidates of one group split by label.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceGroup {
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub condition: Vec<f64>,
    pub profile: Option<UserProfile>,
}

impl PreferenceGroup {
    pub fn from_record(r: &GroupRecord, personalized: bool) -> Result<Self> {
        let positives: Vec<Vec<f64>> = r.positives().map(|i| r.items[i].clone()).collect();
        let negatives: Vec<Vec<f64>> = r.negatives().map(|i| r.items[i].clone()).collect();
        let g = PreferenceGroup {
            positives,
            negatives,
            condition: r.condition.clone(),
            profile: personalized.then(|| r.profile()),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positives.is_empty() || self.negatives.is_empty() {
            return Err(Error::Degenerate(
                "group needs at least one positive and one negative".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positives first, then negatives.
    pub fn candidates(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.positives.iter().chain(&self.negatives)
    }
}

/// One shared timestep and one noise vector per candidate (positives first).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDraws {
    pub t: usize,
    pub eps: Vec<Vec<f64>>,
}

impl GroupDraws {
    pub fn sample<R: Rng + ?Sized>(group: &PreferenceGroup, dim: usize, steps: usize, rng: &mut R) -> Self {
        let t = rng.random_range(1..=steps);
        let eps = (0..group.len()).map(|_| normal_vec(rng, dim)).collect();
        GroupDraws { t, eps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig { beta: 2000.0 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Per-candidate squared errors `‖ε − ε̂‖²` of `model` on every candidate of
/// `groups`, as a `(Σ|group|) × 1` column in group-major order.
fn squared_errors(
    g: &Graph,
    model: &Denoiser,
    sched: &NoiseSchedule,
    groups: &[&PreferenceGroup],
    draws: &[GroupDraws],
) -> Result<Var> {
    let d = model.item_dim();
    let cd = model.config.unet.cond_dim;
    let rows: usize = groups.iter().map(|gr| gr.len()).sum();
    let (mut z, mut eps, mut cond, mut ts) = (
        Vec::with_capacity(rows * d),
        Vec::with_capacity(rows * d),
        Vec::new(),
        Vec::new(),
    );
    let mut profiles: Vec<Option<&UserProfile>> = Vec::with_capacity(rows);
    for (gr, dr) in groups.iter().zip(draws) {
        if dr.eps.len() != gr.len() {
            return Err(Error::dim("per_sample_score", "one noise draw per candidate required"));
        }
        for (x, e) in gr.candidates().zip(&dr.eps) {
            if x.len() != d || e.len() != d {
                return Err(Error::dim(
                    "per_sample_score",
                    format!("item length {} vs {d}", x.len()),
                ));
            }
            z.extend(sched.forward_diffuse(x, dr.t, e)?);
            eps.extend_from_slice(e);
            cond.extend_from_slice(&gr.condition);
            ts.push(dr.t);
            profiles.push(gr.profile.as_ref());
        }
    }
    if cond.len() != rows * cd {
        return Err(Error::dim("per_sample_score", "condition length mismatch"));
    }
    let zv = g.constant(rows, d, z)?;
    let cv = g.constant(rows, cd, cond)?;
    let profiles: Option<Vec<&UserProfile>> = profiles.into_iter().collect();
    let pred = model.predict(g, zv, &ts, cv, profiles.as_deref())?;
    let ev = g.constant(rows, d, eps)?;
    let diff = g.sub(ev, pred)?;
    let sq = g.square(diff)?;
    g.sum_axis(sq, 1)
}

/// `s = ‖ε − ε_θ‖² − ‖ε − ε_ref‖²` for every candidate; the reference term
/// is computed in a separate graph and enters as a constant.
pub fn per_sample_scores(
    g: &Graph,
    theta: &Denoiser,
    reference: &Denoiser,
    sched: &NoiseSchedule,
    groups: &[&PreferenceGroup],
    draws: &[GroupDraws],
) -> Result<Var> {
    if groups.is_empty() || groups.len() != draws.len() {
        return Err(Error::Degenerate("no groups, or draws do not match groups".into()));
    }
    let rg = Graph::new();
    let ref_err = rg.value(squared_errors(&rg, reference, sched, groups, draws)?);
    let err = squared_errors(g, theta, sched, groups, draws)?;
    let rv = g.constant(ref_err.len(), 1, ref_err)?;
    g.sub(err, rv)
}

/// Mean over groups of `−Σ_p log σ(−LSE_n(β s_p − β s_n))`.
pub fn group_dpo_loss(g: &Graph, scores: Var, groups: &[&PreferenceGroup], beta: f64) -> Result<Var> {
    let mut offset = 0;
    let mut terms = Vec::new();
    for gr in groups {
        gr.validate()?;
        let (np, nn) = (gr.positives.len(), gr.negatives.len());
        for p in 0..np {
            let ip = vec![offset + p; nn];
            let ineg: Vec<usize> = (0..nn).map(|n| offset + np + n).collect();
            let sp = g.gather_rows(scores, &ip)?;
            let sn = g.gather_rows(scores, &ineg)?;
            let d = g.sub(sp, sn)?;
            let d = g.scale(d, beta)?;
            let lse = g.logsumexp(d, 0)?;
            let neg = g.neg(lse)?;
            terms.push(g.log_sigmoid(neg)?);
        }
        offset += np + nn;
    }
    let all = g.concat_cols(&terms)?;
    let total = g.sum(all)?;
    g.scale(total, -1.0 / groups.len() as f64)
}

/// Mean over pairs of `−log σ(β s_n − β s_p)`; `scores` holds `[s_p, s_n]`
/// for each pair consecutively.
pub fn pairwise_dpo_loss(g: &Graph, scores: Var, pairs: usize, beta: f64) -> Result<Var> {
    let (rows, _) = g.shape(scores);
    if rows != 2 * pairs || pairs == 0 {
        return Err(Error::dim(
            "pairwise_dpo_loss",
            format!("{rows} scores for {pairs} pairs"),
        ));
    }
    let sp = g.gather_rows(scores, &(0..pairs).map(|i| 2 * i).collect::<Vec<_>>())?;
    let sn = g.gather_rows(scores, &(0..pairs).map(|i| 2 * i + 1).collect::<Vec<_>>())?;
    let m = g.sub(sn, sp)?;
    let m = g.scale(m, beta)?;
    let l = g.log_sigmoid(m)?;
    let total = g.sum(l)?;
    g.scale(total, -1.0 / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Group,
    Pairwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub dpo: DpoConfig,
    pub objective: Objective,
    pub optimizer: AdamWConfig,
    pub trainable: Trainable,
    pub seed: u64,
}

impl Default for DpoTrainConfig {
    fn default() -> Self {
        DpoTrainConfig {
            steps: 500,
            batch_size: 16,
            dpo: DpoConfig::default(),
            objective: Objective::Group,
            optimizer: AdamWConfig {
                learning_rate: 1e-4,
                weight_decay: 1e-2,
                warmup_steps: 50,
                ..AdamWConfig::default()
            },
            trainable: Trainable::Branch,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoStepLog {
    pub step: usize,
    pub mean_loss: f64,
    pub mean_s_pos: f64,
    pub mean_s_neg: f64,
}

/// A frozen copy of `model` to serve as the reference.
pub fn reference_copy(model: &Denoiser) -> Denoiser {
    let mut r = model.clone();
    r.set_trainable(Trainable::All);
    for (_, t) in r.params_mut() {
        t.set_requires_grad(false);
    }
    r
}

/// The groups and draws of one training step. Batch membership and the
/// timestep/noise draws come from one stream; the pair picked out of each
/// group for the pairwise objective comes from another, so 1-vs-1 groups see
/// identical draws under both objectives.
fn step_inputs<'a>(
    data: &'a [PreferenceGroup],
    cfg: &DpoTrainConfig,
    dim: usize,
    steps: usize,
    step: usize,
) -> (Vec<PreferenceGroup>, Vec<GroupDraws>) {
    let mut r = rng::stream_at(cfg.seed, "groupdpo/batch", step as u64);
    let mut pick = rng::stream_at(cfg.seed, "groupdpo/pair", step as u64);
    let mut groups = Vec::with_capacity(cfg.batch_size);
    let mut draws = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let gr: &'a PreferenceGroup = &data[r.random_range(0..data.len())];
        let dr = GroupDraws::sample(gr, dim, steps, &mut r);
        match cfg.objective {
            Objective::Group => {
                groups.push(gr.clone());
                draws.push(dr);
            }
            Objective::Pairwise => {
                let p = pick.random_range(0..gr.positives.len());
                let n = pick.random_range(0..gr.negatives.len());
                let np = gr.positives.len();
                groups.push(PreferenceGroup {
                    positives: vec![gr.positives[p].clone()],
                    negatives: vec![gr.negatives[n].clone()],
                    condition: gr.condition.clone(),
                    profile: gr.profile.clone(),
                });
                draws.push(GroupDraws {
                    t: dr.t,
                    eps: vec![dr.eps[p].clone(), dr.eps[np + n].clone()],
                });
            }
        }
    }
    (groups, draws)
}

/// Sequential AdamW optimisation of the chosen objective against a frozen
/// reference. Returns one log row per step.
pub fn train_dpo(
    theta: &mut Denoiser,
    reference: &Denoiser,
    data: &[PreferenceGroup],
    sched: &NoiseSchedule,
    cfg: &DpoTrainConfig,
) -> Result<Vec<DpoStepLog>> {
    if data.is_empty() {
        return Err(Error::Degenerate("empty preference dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    cfg.dpo.validate()?;
    for gr in data {
        gr.validate()?;
    }
    theta.set_trainable(cfg.trainable);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (groups, draws) = step_inputs(data, cfg, theta.item_dim(), sched.steps(), step);
        let refs: Vec<&PreferenceGroup> = groups.iter().collect();
        let g = Graph::new();
        let s = per_sample_scores(&g, theta, reference, sched, &refs, &draws)?;
        let loss = match cfg.objective {
            Objective::Group => group_dpo_loss(&g, s, &refs, cfg.dpo.beta)?,
            Objective::Pairwise => pairwise_dpo_loss(&g, s, refs.len(), cfg.dpo.beta)?,
        };
        let sv = g.value(s);
        let (mut sp, mut np, mut sn, mut nn) = (0.0, 0usize, 0.0, 0usize);
        let mut off = 0;
        for gr in &refs {
            for i in 0..gr.positives.len() {
                sp += sv[off + i];
                np += 1;
            }
            for i in 0..gr.negatives.len() {
                sn += sv[off + gr.positives.len() + i];
                nn += 1;
            }
            off += gr.len();
        }
        log.push(DpoStepLog {
            step,
            mean_loss: g.scalar(loss),
            mean_s_pos: sp / np as f64,
            mean_s_neg: sn / nn as f64,
        });
        let grads = g.backward(loss)?;
        grads.apply(theta);
        opt.step(theta)?;
    }
    Ok(log)
}
