//! Synthetic multi-user preference world.
//!
//! Each user owns categorical profile features. A hidden style map turns the
//! features into a style vector, so a user's taste is a learnable function of
//! what the models can observe. Prompts are unit condition vectors; the
//! renderer maps a condition to its canonical item and a style to an item
//! offset. Group records present `group_size` candidates and mark the
//! `positives` highest-scoring ones under the oracle.
//!
//! The oracle parameters are regenerated from the seed on demand and are
//! never written to disk.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::scalar::{cosine_similarity, dot, norm};
use crate::personalization::UserProfile;
use crate::rng::{self, normal_vec, standard_normal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
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
    /// Standard deviation of Gaussian noise added to oracle scores when labelling.
    pub noise: f64,
    /// All candidates of a group are equally consistent with the prompt, so
    /// labels depend on user style alone.
    pub style_only: bool,
    pub consistency_weight: f64,
    pub style_weight: f64,
    /// Per-coordinate scale of rendered items and style offsets.
    pub render_scale: f64,
    pub item_noise: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_users: 200,
            cardinalities: vec![8; 4],
            item_dim: 32,
            cond_dim: 8,
            style_dim: 8,
            n_prompts: 50,
            group_size: 5,
            positives: 2,
            n_records: 4000,
            n_pretrain_records: 4000,
            min_records_per_user: 10,
            noise: 0.0,
            style_only: false,
            consistency_weight: 1.0,
            style_weight: 1.0,
            render_scale: 0.7,
            item_noise: 0.3,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.positives == 0 || self.positives >= self.group_size {
            return bad(format!(
                "positives K must satisfy 0 < K < group_size N (got K={}, N={})",
                self.positives, self.group_size
            ));
        }
        if self.cardinalities.is_empty() || self.cardinalities.contains(&0) {
            return bad(format!(
                "feature cardinalities must be positive, got {:?}",
                self.cardinalities
            ));
        }
        if self.n_users < 2 {
            return bad("at least two users are needed for distractor styles".into());
        }
        for (name, v) in [
            ("item_dim", self.item_dim),
            ("cond_dim", self.cond_dim),
            ("style_dim", self.style_dim),
            ("n_prompts", self.n_prompts),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.n_users * self.min_records_per_user > self.n_records {
            return bad(format!(
                "{} users x {} records each exceeds n_records {}",
                self.n_users, self.min_records_per_user, self.n_records
            ));
        }
        if !(self.noise >= 0.0 && self.item_noise >= 0.0 && self.render_scale > 0.0) {
            return bad("noise levels must be non-negative and render_scale positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub id: usize,
    pub profile: UserProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: usize,
    pub condition: Vec<f64>,
}

/// Hidden parameters of the preference oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    /// `field_styles[f][id]` is a style-space vector; centred per field.
    field_styles: Vec<Vec<Vec<f64>>>,
    /// `item_dim × cond_dim`, row-major.
    render: Vec<f64>,
    /// `item_dim × style_dim`, row-major.
    style_render: Vec<f64>,
    item_dim: usize,
    pub consistency_weight: f64,
    pub style_weight: f64,
}

fn mat_vec(m: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows).map(|i| dot(&m[i * cols..(i + 1) * cols], x)).collect()
}

impl Oracle {
    pub fn style(&self, profile: &UserProfile) -> Vec<f64> {
        let dim = self.field_styles[0][0].len();
        let mut s = vec![0.0; dim];
        for (table, &id) in self.field_styles.iter().zip(&profile.feature_ids) {
            s.iter_mut().zip(&table[id]).for_each(|(a, b)| *a += b);
        }
        s
    }

    /// Item-space offset a user's style asks for.
    pub fn style_offset(&self, profile: &UserProfile) -> Vec<f64> {
        mat_vec(&self.style_render, self.item_dim, &self.style(profile))
    }

    /// Canonical item for a prompt condition.
    pub fn render(&self, condition: &[f64]) -> Vec<f64> {
        mat_vec(&self.render, self.item_dim, condition)
    }

    /// `wc·cos(item, render(c)) + ws·cos(item − render(c), style_offset(user))`.
    /// A zero residual contributes no style term.
    pub fn score(&self, item: &[f64], condition: &[f64], profile: &UserProfile) -> Result<f64> {
        if item.len() != self.item_dim {
            return Err(Error::dim(
                "oracle_score",
                format!("item has {} coordinates, world has {}", item.len(), self.item_dim),
            ));
        }
        let r = self.render(condition);
        let mut total = self.consistency_weight * cosine_similarity(item, &r)?;
        if self.style_weight != 0.0 {
            let resid: Vec<f64> = item.iter().zip(&r).map(|(a, b)| a - b).collect();
            if norm(&resid) > 0.0 {
                let off = self.style_offset(profile);
                total += self.style_weight * cosine_similarity(&resid, &off)?;
            }
        }
        Ok(total)
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub users: Vec<User>,
    pub prompts: Vec<Prompt>,
    pub oracle: Oracle,
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, "world/oracle");
    let n_fields = cfg.cardinalities.len();
    let field_scale = 1.0 / (n_fields as f64).sqrt();
    let field_styles = cfg
        .cardinalities
        .iter()
        .map(|&card| {
            let mut rows: Vec<Vec<f64>> = (0..card)
                .map(|_| {
                    normal_vec(&mut r, cfg.style_dim)
                        .into_iter()
                        .map(|v| v * field_scale)
                        .collect()
                })
                .collect();
            if card > 1 {
                for d in 0..cfg.style_dim {
                    let mean = rows.iter().map(|row| row[d]).sum::<f64>() / card as f64;
                    rows.iter_mut().for_each(|row| row[d] -= mean);
                }
            }
            rows
        })
        .collect();
    let gen_matrix = |r: &mut rng::Rng64, cols: usize| -> Vec<f64> {
        let s = cfg.render_scale / (cols as f64).sqrt();
        normal_vec(r, cfg.item_dim * cols).into_iter().map(|v| v * s).collect()
    };
    let render = gen_matrix(&mut r, cfg.cond_dim);
    let style_render = gen_matrix(&mut r, cfg.style_dim);
    let oracle = Oracle {
        field_styles,
        render,
        style_render,
        item_dim: cfg.item_dim,
        consistency_weight: cfg.consistency_weight,
        style_weight: cfg.style_weight,
    };

    let mut ru = rng::stream(cfg.seed, "world/users");
    let users = (0..cfg.n_users)
        .map(|id| User {
            id,
            profile: UserProfile::new(cfg.cardinalities.iter().map(|&c| ru.random_range(0..c)).collect()),
        })
        .collect();

    let mut rp = rng::stream(cfg.seed, "world/prompts");
    let prompts = (0..cfg.n_prompts)
        .map(|id| {
            let v = normal_vec(&mut rp, cfg.cond_dim);
            let n = norm(&v);
            Prompt {
                id,
                condition: v.into_iter().map(|x| x / n).collect(),
            }
        })
        .collect();

    Ok(World {
        config: cfg.clone(),
        users,
        prompts,
        oracle,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// One group-level interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub user_id: usize,
    pub features: Vec<usize>,
    pub prompt_id: usize,
    pub condition: Vec<f64>,
    pub items: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl GroupRecord {
    pub fn profile(&self) -> UserProfile {
        UserProfile::new(self.features.clone())
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &y)| y == 1).map(|(i, _)| i)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &y)| y == 0).map(|(i, _)| i)
    }
}

/// Marks the `k` largest scores with 1; equal scores go to the lower index.
pub fn top_k_labels(scores: &[f64], k: usize) -> Vec<u8> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut labels = vec![0u8; scores.len()];
    for &i in order.iter().take(k) {
        labels[i] = 1;
    }
    labels
}

impl World {
    pub fn user(&self, id: usize) -> Result<&User> {
        self.users.get(id).ok_or(Error::Index {
            what: "user",
            index: id,
            size: self.users.len(),
        })
    }

    pub fn prompt(&self, id: usize) -> Result<&Prompt> {
        self.prompts.get(id).ok_or(Error::Index {
            what: "prompt",
            index: id,
            size: self.prompts.len(),
        })
    }

    fn distractor<R: Rng + ?Sized>(&self, user: usize, r: &mut R) -> usize {
        let d = r.random_range(0..self.users.len() - 1);
        if d >= user {
            d + 1
        } else {
            d
        }
    }

    /// Style-bearing part of a candidate: `a·offset(user) + b·offset(other) + noise`.
    fn style_mixture<R: Rng + ?Sized>(&self, user: &User, r: &mut R) -> Vec<f64> {
        let cfg = &self.config;
        let own = self.oracle.style_offset(&user.profile);
        let other = self
            .oracle
            .style_offset(&self.users[self.distractor(user.id, r)].profile);
        let a: f64 = r.random();
        let b: f64 = r.random();
        (0..cfg.item_dim)
            .map(|j| a * own[j] + b * other[j] + cfg.item_noise * standard_normal(r))
            .collect()
    }

    fn labelled(
        &self,
        user: &User,
        prompt: &Prompt,
        items: Vec<Vec<f64>>,
        label_by: impl Fn(&[f64]) -> Result<f64>,
        r: &mut rng::Rng64,
    ) -> Result<GroupRecord> {
        let mut scores = items.iter().map(|x| label_by(x)).collect::<Result<Vec<_>>>()?;
        if self.config.noise > 0.0 {
            scores
                .iter_mut()
                .for_each(|s| *s += self.config.noise * standard_normal(r));
        }
        Ok(GroupRecord {
            user_id: user.id,
            features: user.profile.feature_ids.clone(),
            prompt_id: prompt.id,
            condition: prompt.condition.clone(),
            labels: top_k_labels(&scores, self.config.positives),
            items,
            split: Split::Train,
        })
    }

    /// Candidates `render(c) + mixture`, labelled by the full oracle. In
    /// style-only worlds the mixture is made orthogonal to `render(c)` and
    /// rescaled to a fixed norm, so every candidate is equally consistent.
    pub fn make_group(&self, user: &User, prompt: &Prompt, r: &mut rng::Rng64) -> Result<GroupRecord> {
        let cfg = &self.config;
        let base = self.oracle.render(&prompt.condition);
        let base_sq = dot(&base, &base);
        let fixed_norm = cfg.render_scale * (cfg.item_dim as f64).sqrt();
        let items = (0..cfg.group_size)
            .map(|_| {
                let mut delta = self.style_mixture(user, r);
                if cfg.style_only {
                    let along = dot(&delta, &base) / base_sq;
                    delta.iter_mut().zip(&base).for_each(|(d, b)| *d -= along * b);
                    let n = norm(&delta);
                    delta.iter_mut().for_each(|d| *d *= fixed_norm / n);
                }
                base.iter().zip(&delta).map(|(b, d)| b + d).collect::<Vec<f64>>()
            })
            .collect();
        self.labelled(
            user,
            prompt,
            items,
            |x| self.oracle.score(x, &prompt.condition, &user.profile),
            r,
        )
    }

    /// Candidates blend the prompt's rendering with another prompt's, plus a
    /// style mixture; labels come from prompt consistency alone.
    pub fn make_consistency_group(&self, user: &User, prompt: &Prompt, r: &mut rng::Rng64) -> Result<GroupRecord> {
        let cfg = &self.config;
        let base = self.oracle.render(&prompt.condition);
        let items = (0..cfg.group_size)
            .map(|_| {
                let other = &self.prompts[r.random_range(0..self.prompts.len())];
                let alt = self.oracle.render(&other.condition);
                let lam: f64 = r.random();
                let delta = self.style_mixture(user, r);
                (0..cfg.item_dim)
                    .map(|j| lam * base[j] + (1.0 - lam) * alt[j] + delta[j])
                    .collect::<Vec<f64>>()
            })
            .collect();
        let render = base.clone();
        self.labelled(user, prompt, items, move |x| cosine_similarity(x, &render), r)
    }

    /// User index of every record: `min_records_per_user` for each user,
    /// the remainder drawn uniformly, then shuffled.
    fn record_users(&self, r: &mut rng::Rng64, n: usize, min_each: usize) -> Vec<usize> {
        let n_users = self.users.len();
        let mut owners: Vec<usize> = (0..n_users).flat_map(|u| std::iter::repeat_n(u, min_each)).collect();
        while owners.len() < n {
            owners.push(r.random_range(0..n_users));
        }
        owners.shuffle(r);
        owners
    }

    /// All group records, shuffled and split 8:1:1 with every user present in
    /// the training split.
    pub fn emit_dataset(&self) -> Result<Dataset> {
        let cfg = &self.config;
        let mut r = rng::stream(cfg.seed, "dataset/records");
        let owners = self.record_users(&mut r, cfg.n_records, cfg.min_records_per_user);
        let mut records = owners
            .iter()
            .map(|&u| {
                let p = r.random_range(0..self.prompts.len());
                self.make_group(&self.users[u], &self.prompts[p], &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rs = rng::stream(cfg.seed, "dataset/split");
        records.shuffle(&mut rs);
        Ok(Dataset::split(records, self.users.len()))
    }

    /// Consistency-labelled records used to train the reward backbone.
    pub fn emit_pretrain(&self) -> Result<Vec<GroupRecord>> {
        let cfg = &self.config;
        let mut r = rng::stream(cfg.seed, "dataset/pretrain");
        let owners = self.record_users(&mut r, cfg.n_pretrain_records, 0);
        owners
            .iter()
            .map(|&u| {
                let p = r.random_range(0..self.prompts.len());
                self.make_consistency_group(&self.users[u], &self.prompts[p], &mut r)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<GroupRecord>,
    pub valid: Vec<GroupRecord>,
    pub test: Vec<GroupRecord>,
}

impl Dataset {
    /// 8:1:1 split of already-shuffled records. A user missing from the
    /// training part swaps one of their records with a training record of a
    /// user who has more than one there.
    pub fn split(mut records: Vec<GroupRecord>, n_users: usize) -> Dataset {
        let n = records.len();
        let n_train = n * 8 / 10;
        let n_valid = n / 10;
        let mut train_count = vec![0usize; n_users];
        for rec in &records[..n_train] {
            train_count[rec.user_id] += 1;
        }
        for i in n_train..n {
            let u = records[i].user_id;
            if train_count[u] > 0 {
                continue;
            }
            if let Some(j) = (0..n_train).find(|&j| train_count[records[j].user_id] > 1) {
                train_count[records[j].user_id] -= 1;
                train_count[u] += 1;
                records.swap(i, j);
            }
        }
        let mut test = records.split_off(n_train + n_valid);
        let mut valid = records.split_off(n_train);
        let mut train = records;
        for (part, tag) in [
            (&mut train, Split::Train),
            (&mut valid, Split::Valid),
            (&mut test, Split::Test),
        ] {
            part.iter_mut().for_each(|r| r.split = tag);
        }
        Dataset { train, valid, test }
    }
}

pub fn write_jsonl(path: &Path, records: &[GroupRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| Error::Parse {
            path: path.into(),
            detail: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<GroupRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GroupRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            detail: format!("line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(style_only: bool) -> WorldConfig {
        WorldConfig {
            n_users: 20,
            n_records: 300,
            n_pretrain_records: 50,
            min_records_per_user: 10,
            style_only,
            seed: 11,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn invalid_k_names_the_constraint() {
        let cfg = WorldConfig {
            positives: 5,
            ..WorldConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("0 < K < group_size"), "{msg}");
        let cfg = WorldConfig {
            cardinalities: vec![3, 0],
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn world_is_deterministic_and_style_is_a_function_of_features() {
        let a = generate_world(&small(false)).unwrap();
        let b = generate_world(&small(false)).unwrap();
        assert_eq!(a.oracle, b.oracle);
        assert_eq!(a.users, b.users);
        let p = UserProfile::new(vec![1, 2, 3, 4]);
        assert_eq!(a.oracle.style(&p), a.oracle.style(&p.clone()));
        let styles: Vec<Vec<f64>> = a.users.iter().map(|u| a.oracle.style(&u.profile)).collect();
        assert!(styles.iter().any(|s| s != &styles[0]));
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k_labels(&[0.5, 0.9, 0.5, 0.5], 2), vec![1, 1, 0, 0]);
        assert_eq!(top_k_labels(&[1.0, 1.0, 1.0], 1), vec![1, 0, 0]);
    }

    #[test]
    fn styled_candidate_beats_weaker_alignment() {
        let w = generate_world(&small(false)).unwrap();
        let u = &w.users[0];
        let c = &w.prompts[0].condition;
        let base = w.oracle.render(c);
        let off = w.oracle.style_offset(&u.profile);
        let full: Vec<f64> = base.iter().zip(&off).map(|(b, o)| b + o).collect();
        let other = w.oracle.style_offset(&w.users[1].profile);
        let mixed: Vec<f64> = (0..base.len()).map(|j| base[j] + 0.3 * off[j] + other[j]).collect();
        let sf = w.oracle.score(&full, c, &u.profile).unwrap();
        let sm = w.oracle.score(&mixed, c, &u.profile).unwrap();
        assert!(sf > sm);
    }

    #[test]
    fn hand_built_two_candidate_case() {
        // D=2, style offset along e2, render along e1.
        let oracle = Oracle {
            field_styles: vec![vec![vec![1.0]]],
            render: vec![1.0, 0.0],
            style_render: vec![0.0, 1.0],
            item_dim: 2,
            consistency_weight: 1.0,
            style_weight: 1.0,
        };
        let p = UserProfile::new(vec![0]);
        let c = [1.0];
        // [1,1]: cos with [1,0] = 1/√2, residual [0,1] → style cos 1.
        let s1 = oracle.score(&[1.0, 1.0], &c, &p).unwrap();
        // [1,-1]: same consistency, residual [0,-1] → style cos −1.
        let s2 = oracle.score(&[1.0, -1.0], &c, &p).unwrap();
        assert!((s1 - (std::f64::consts::FRAC_1_SQRT_2 + 1.0)).abs() < 1e-12);
        assert!((s2 - (std::f64::consts::FRAC_1_SQRT_2 - 1.0)).abs() < 1e-12);
        let zero_style = Oracle {
            style_weight: 0.0,
            ..oracle.clone()
        };
        let q = UserProfile::new(vec![0]);
        assert_eq!(
            zero_style.score(&[0.3, 2.0], &c, &p).unwrap(),
            zero_style.score(&[0.3, 2.0], &c, &q).unwrap()
        );
    }

    #[test]
    fn records_are_self_consistent_with_exactly_k_positives() {
        for style_only in [false, true] {
            let w = generate_world(&small(style_only)).unwrap();
            let ds = w.emit_dataset().unwrap();
            for rec in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
                assert_eq!(rec.labels.iter().filter(|&&y| y == 1).count(), 2);
                let scores: Vec<f64> = rec
                    .items
                    .iter()
                    .map(|x| w.oracle.score(x, &rec.condition, &rec.profile()).unwrap())
                    .collect();
                assert_eq!(top_k_labels(&scores, 2), rec.labels);
            }
        }
    }

    #[test]
    fn style_only_candidates_are_equally_consistent() {
        let w = generate_world(&small(true)).unwrap();
        let ds = w.emit_dataset().unwrap();
        for rec in ds.train.iter().take(30) {
            let r = w.oracle.render(&rec.condition);
            let cs: Vec<f64> = rec.items.iter().map(|x| cosine_similarity(x, &r).unwrap()).collect();
            assert!(cs.iter().all(|c| (c - cs[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn style_only_labels_differ_between_users_for_same_candidates() {
        let w = generate_world(&small(true)).unwrap();
        let mut r = rng::stream(3, "t");
        let mut differing = 0;
        for i in 0..20 {
            let rec = w.make_group(&w.users[i % 20], &w.prompts[0], &mut r).unwrap();
            let other = &w.users[(i + 7) % 20];
            let scores: Vec<f64> = rec
                .items
                .iter()
                .map(|x| w.oracle.score(x, &rec.condition, &other.profile).unwrap())
                .collect();
            if top_k_labels(&scores, 2) != rec.labels {
                differing += 1;
            }
        }
        assert!(differing > 5, "only {differing} of 20 groups changed labels");
    }

    #[test]
    fn split_is_8_1_1_and_covers_users() {
        let cfg = WorldConfig {
            n_users: 100,
            n_records: 1000,
            n_pretrain_records: 10,
            ..small(false)
        };
        let w = generate_world(&cfg).unwrap();
        let ds = w.emit_dataset().unwrap();
        assert_eq!((ds.train.len(), ds.valid.len(), ds.test.len()), (800, 100, 100));
        let mut seen = [false; 100];
        ds.train.iter().for_each(|r| seen[r.user_id] = true);
        assert!(seen.iter().all(|&s| s));
        let mut per_user = vec![0; 100];
        for r in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
            per_user[r.user_id] += 1;
        }
        assert!(per_user.iter().all(|&c| c >= 10));
        assert!(ds.train.iter().all(|r| r.split == Split::Train));
        assert!(ds.test.iter().all(|r| r.split == Split::Test));
    }

    #[test]
    fn split_moves_a_missing_user_into_train() {
        let mk = |user_id| GroupRecord {
            user_id,
            features: vec![0],
            prompt_id: 0,
            condition: vec![1.0],
            items: vec![vec![0.0]],
            labels: vec![1],
            split: Split::Train,
        };
        let mut recs: Vec<GroupRecord> = (0..10).map(|_| mk(0)).collect();
        recs[9] = mk(1);
        let ds = Dataset::split(recs, 2);
        assert!(ds.train.iter().any(|r| r.user_id == 1));
        assert_eq!(ds.train.len(), 8);
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let w = generate_world(&small(false)).unwrap();
        let ds = w.emit_dataset().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_jsonl(&path, &ds.train).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, ds.train);
        let line = fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        for key in [
            "user_id",
            "features",
            "prompt_id",
            "condition",
            "items",
            "labels",
            "split",
        ] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert_eq!(first["split"], "train");
    }

    #[test]
    fn pretrain_labels_follow_prompt_consistency() {
        let w = generate_world(&small(false)).unwrap();
        for rec in w.emit_pretrain().unwrap() {
            let r = w.oracle.render(&rec.condition);
            let cs: Vec<f64> = rec.items.iter().map(|x| cosine_similarity(x, &r).unwrap()).collect();
            assert_eq!(top_k_labels(&cs, 2), rec.labels);
        }
    }
}
