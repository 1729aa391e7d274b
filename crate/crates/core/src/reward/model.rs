//! The two towers, their plug-ins, and batched group scoring.

use serde::{Deserialize, Serialize};

use super::plugin::{repeat_injections, side_injections, PluginSet, Side, Wiring};
use super::tower::{Tower, TowerConfig};
use crate::error::{Error, Result};
use crate::numerics::{prefixed, Graph, Parameterized, Tensor, Var};
use crate::personalization::{CrossConfig, UserProfile};
use crate::rng;
use crate::synthdata::GroupRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub tower: TowerConfig,
    pub item_dim: usize,
    /// Contiguous chunks an item is cut into (item tower sequence length).
    pub item_tokens: usize,
    pub cond_dim: usize,
    /// Value bins per condition coordinate; vocabulary = cond_dim · bins.
    pub cond_bins: usize,
    pub cardinalities: Vec<usize>,
    pub embed_dim: usize,
    pub cross_layers: usize,
    /// `None` builds a backbone without plug-ins.
    pub wiring: Option<Wiring>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            tower: TowerConfig::default(),
            item_dim: 32,
            item_tokens: 8,
            cond_dim: 8,
            cond_bins: 8,
            cardinalities: vec![8; 4],
            embed_dim: 8,
            cross_layers: 2,
            wiring: Some(Wiring::Duplicated),
        }
    }
}

impl RewardConfig {
    pub fn cross(&self) -> CrossConfig {
        CrossConfig {
            cardinalities: self.cardinalities.clone(),
            embed_dim: self.embed_dim,
            cross_layers: self.cross_layers,
        }
    }

    pub fn vocab(&self) -> usize {
        self.cond_dim * self.cond_bins
    }
}

/// Token `j·bins + bin(c_j)` per coordinate, with `[-1, 1]` cut into `bins`
/// equal bins (values outside clamp to the end bins).
pub fn tokenize_condition(c: &[f64], bins: usize) -> Vec<usize> {
    c.iter()
        .enumerate()
        .map(|(j, &v)| {
            let b = ((v + 1.0) / 2.0 * bins as f64).floor();
            j * bins + (b.max(0.0) as usize).min(bins - 1)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RewardModel {
    pub config: RewardConfig,
    pub text: Tower,
    pub item: Tower,
    pub plugins: Option<PluginSet>,
}

/// Inputs of one scored group.
pub struct GroupInput<'a> {
    pub condition: &'a [f64],
    pub items: &'a [Vec<f64>],
    pub profile: &'a UserProfile,
}

impl RewardModel {
    /// Backbone from `seed`; plug-ins from a separate stream so that the same
    /// backbone can be paired with any wiring.
    pub fn new(config: RewardConfig, seed: u64) -> Result<Self> {
        if config.cond_bins == 0 {
            return Err(Error::Config("cond_bins must be positive".into()));
        }
        let mut rb = rng::stream(seed, "reward/backbone");
        let text = Tower::text(config.tower, config.vocab(), config.cond_dim, &mut rb)?;
        let item = Tower::item(config.tower, config.item_dim, config.item_tokens, &mut rb)?;
        let mut model = RewardModel {
            config,
            text,
            item,
            plugins: None,
        };
        if let Some(w) = model.config.wiring {
            model.attach_plugins(w, seed)?;
        }
        Ok(model)
    }

    /// Replaces the plug-ins with fresh zero-output ones.
    pub fn attach_plugins(&mut self, wiring: Wiring, seed: u64) -> Result<()> {
        let mut rp = rng::stream(seed, &format!("reward/plugin/{}", wiring.name()));
        let cfg = &self.config;
        self.plugins = Some(PluginSet::new(
            wiring,
            &cfg.cross(),
            cfg.tower.layers,
            cfg.tower.width,
            &mut rp,
        )?);
        self.config.wiring = Some(wiring);
        Ok(())
    }

    pub fn detach_plugins(&mut self) {
        self.plugins = None;
        self.config.wiring = None;
    }

    pub fn set_backbone_trainable(&mut self, on: bool) {
        self.text.set_trainable(on);
        self.item.set_trainable(on);
    }

    pub fn backbone_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("reward/backbone/text", self.text.params());
        v.extend(prefixed("reward/backbone/item", self.item.params()));
        v
    }

    /// `groups × N` cosine scores. Every group must have the same size.
    pub fn score_batch(&self, g: &Graph, groups: &[GroupInput<'_>]) -> Result<Var> {
        let Some(first) = groups.first() else {
            return Err(Error::Degenerate("no groups to score".into()));
        };
        let n = first.items.len();
        if n == 0 || groups.iter().any(|gr| gr.items.len() != n) {
            return Err(Error::dim("score", "groups must share a non-zero size"));
        }
        let bins = self.config.cond_bins;
        let profiles: Vec<&UserProfile> = groups.iter().map(|gr| gr.profile).collect();
        let tokens: Vec<Vec<usize>> = groups.iter().map(|gr| tokenize_condition(gr.condition, bins)).collect();

        let plugins = self.plugins.as_ref();
        let text_inj = side_injections(plugins, Side::Text, g, &profiles)?;
        let tx = self.text.embed_tokens(g, &tokens)?;
        let text_vec = self.text.encode(g, tx, text_inj.as_ref())?.pooled;

        let mut flat = Vec::with_capacity(groups.len() * n * self.config.item_dim);
        for gr in groups {
            for it in gr.items {
                if it.len() != self.config.item_dim {
                    return Err(Error::dim(
                        "score",
                        format!("item length {} vs {}", it.len(), self.config.item_dim),
                    ));
                }
                flat.extend_from_slice(it);
            }
        }
        let items = g.constant(groups.len() * n, self.config.item_dim, flat)?;
        let item_inj = match side_injections(plugins, Side::Item, g, &profiles)? {
            Some(inj) => Some(repeat_injections(g, &inj, n)?),
            None => None,
        };
        let ix = self.item.embed_chunks(g, items)?;
        let item_vec = self.item.encode(g, ix, item_inj.as_ref())?.pooled;

        let text_rep = g.repeat_rows(text_vec, n)?;
        let s = g.cosine_rows(text_rep, item_vec)?;
        g.reshape(s, groups.len(), n)
    }

    /// Scores of a single group, evaluated without keeping a graph.
    pub fn score_group(&self, condition: &[f64], items: &[Vec<f64>], profile: &UserProfile) -> Result<Vec<f64>> {
        let g = Graph::new();
        let s = self.score_batch(
            &g,
            &[GroupInput {
                condition,
                items,
                profile,
            }],
        )?;
        Ok(g.value(s))
    }

    /// Scores for many records, in chunks to bound graph size.
    pub fn score_records(&self, records: &[GroupRecord]) -> Result<Vec<Vec<f64>>> {
        let profiles: Vec<UserProfile> = records.iter().map(|r| r.profile()).collect();
        let mut out = Vec::with_capacity(records.len());
        for (chunk, profs) in records.chunks(64).zip(profiles.chunks(64)) {
            let inputs: Vec<GroupInput<'_>> = chunk
                .iter()
                .zip(profs)
                .map(|(r, p)| GroupInput {
                    condition: &r.condition,
                    items: &r.items,
                    profile: p,
                })
                .collect();
            let g = Graph::new();
            let s = self.score_batch(&g, &inputs)?;
            let n = chunk[0].items.len();
            out.extend(g.value(s).chunks(n).map(|c| c.to_vec()));
        }
        Ok(out)
    }
}

impl Parameterized for RewardModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.backbone_params();
        if let Some(p) = &self.plugins {
            v.extend(prefixed("reward/plugin", p.params()));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("reward/backbone/text", self.text.params_mut());
        v.extend(prefixed("reward/backbone/item", self.item.params_mut()));
        if let Some(p) = &mut self.plugins {
            v.extend(prefixed("reward/plugin", p.params_mut()));
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::perturb;
    use crate::rng::{normal_vec, stream};

    pub(crate) fn tiny(wiring: Option<Wiring>) -> RewardConfig {
        RewardConfig {
            tower: TowerConfig {
                width: 8,
                layers: 2,
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
            wiring,
        }
    }

    fn inputs(seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut r = stream(seed, "inputs");
        (normal_vec(&mut r, 3), (0..4).map(|_| normal_vec(&mut r, 6)).collect())
    }

    #[test]
    fn tokenizer_bins_and_clamps() {
        assert_eq!(
            tokenize_condition(&[-1.0, 0.0, 0.99, 5.0, -7.0], 4),
            vec![0, 6, 11, 15, 16]
        );
    }

    #[test]
    fn fresh_plugins_leave_scores_bitwise_unchanged() {
        let bare = RewardModel::new(tiny(None), 1).unwrap();
        let u = UserProfile::new(vec![2, 1]);
        for w in Wiring::ALL {
            let mut m = bare.clone();
            m.attach_plugins(w, 5).unwrap();
            for seed in 0..5 {
                let (c, items) = inputs(seed);
                let a = bare.score_group(&c, &items, &u).unwrap();
                let b = m.score_group(&c, &items, &u).unwrap();
                assert_eq!(
                    a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }

    #[test]
    fn trained_plugins_make_scores_user_dependent() {
        let (c, items) = inputs(9);
        let (u, v) = (UserProfile::new(vec![0, 0]), UserProfile::new(vec![2, 3]));
        let bare = RewardModel::new(tiny(None), 1).unwrap();
        assert_eq!(
            bare.score_group(&c, &items, &u).unwrap(),
            bare.score_group(&c, &items, &v).unwrap()
        );
        for w in Wiring::ALL {
            let mut m = bare.clone();
            m.attach_plugins(w, 5).unwrap();
            perturb(m.plugins.as_mut().unwrap(), 2);
            let su = m.score_group(&c, &items, &u).unwrap();
            assert_ne!(su, m.score_group(&c, &items, &v).unwrap(), "{w:?}");
            assert!(su.iter().all(|s| s.abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn wiring_decides_which_towers_get_plugins() {
        let m = |w| RewardModel::new(tiny(Some(w)), 1).unwrap();
        let count = |w| m(w).plugins.unwrap().params().len();
        assert_eq!(count(Wiring::Duplicated), 2 * count(Wiring::Shared));
        assert_eq!(count(Wiring::TextOnly), count(Wiring::Shared));
        for w in Wiring::ALL {
            let model = m(w);
            let p = model.plugins.as_ref().unwrap();
            let has = |s| p.for_side(s).is_some();
            assert_eq!(has(Side::Text), w != Wiring::VisionOnly, "{w:?}");
            assert_eq!(has(Side::Item), w != Wiring::TextOnly, "{w:?}");
        }
        let shared = m(Wiring::Shared);
        let p = shared.plugins.as_ref().unwrap();
        assert!(std::ptr::eq(
            p.for_side(Side::Text).unwrap(),
            p.for_side(Side::Item).unwrap()
        ));
        let dup = m(Wiring::Duplicated);
        let p = dup.plugins.as_ref().unwrap();
        assert!(!std::ptr::eq(
            p.for_side(Side::Text).unwrap(),
            p.for_side(Side::Item).unwrap()
        ));
    }

    #[test]
    fn mismatched_groups_are_rejected() {
        let m = RewardModel::new(tiny(None), 1).unwrap();
        let u = UserProfile::new(vec![0, 0]);
        let (c, items) = inputs(1);
        let g = Graph::new();
        let a = GroupInput {
            condition: &c,
            items: &items,
            profile: &u,
        };
        let b = GroupInput {
            condition: &c,
            items: &items[..2],
            profile: &u,
        };
        assert!(m.score_batch(&g, &[a, b]).is_err());
        assert!(m.score_group(&c, &[vec![0.0; 5]], &u).is_err());
    }
}
