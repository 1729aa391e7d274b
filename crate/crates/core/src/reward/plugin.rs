//! Personalized plug-ins and how they are wired onto the two towers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tower::Injections;
use crate::error::Result;
use crate::numerics::{prefixed, Graph, Parameterized, Tensor, Var};
use crate::personalization::{AdaptiveNetwork, CrossConfig, CrossNetwork, UserProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    /// Independent plug-ins for the text and item towers.
    Duplicated,
    /// One plug-in feeding both towers.
    Shared,
    /// Plug-in on the item tower only.
    VisionOnly,
    /// Plug-in on the text tower only.
    TextOnly,
}

impl Wiring {
    pub const ALL: [Wiring; 4] = [Wiring::Duplicated, Wiring::Shared, Wiring::VisionOnly, Wiring::TextOnly];

    pub fn name(self) -> &'static str {
        match self {
            Wiring::Duplicated => "duplicated",
            Wiring::Shared => "shared",
            Wiring::VisionOnly => "vision_only",
            Wiring::TextOnly => "text_only",
        }
    }
}

impl std::str::FromStr for Wiring {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Wiring::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown wiring mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Text,
    Item,
}

/// Cross network plus per-layer attention and FFN adaptive networks.
#[derive(Debug, Clone)]
pub struct TowerPlugin {
    pub cross: CrossNetwork,
    pub attn: Vec<AdaptiveNetwork>,
    pub ffn: Vec<AdaptiveNetwork>,
}

impl TowerPlugin {
    pub fn new<R: Rng + ?Sized>(cross: &CrossConfig, layers: usize, width: usize, rng: &mut R) -> Result<Self> {
        let cross = CrossNetwork::new(cross, rng)?;
        let u = cross.output_dim();
        let attn = (0..layers).map(|_| AdaptiveNetwork::new(u, width, rng)).collect();
        let ffn = (0..layers).map(|_| AdaptiveNetwork::new(u, width, rng)).collect();
        Ok(TowerPlugin { cross, attn, ffn })
    }

    /// Per-layer offsets for a batch of users, `batch × width` each.
    pub fn injections(&self, g: &Graph, profiles: &[&UserProfile]) -> Result<Injections> {
        let u = self.cross.forward(g, profiles)?;
        let attn = self
            .attn
            .iter()
            .map(|a| a.forward(g, u).map(Some))
            .collect::<Result<_>>()?;
        let ffn = self
            .ffn
            .iter()
            .map(|a| a.forward(g, u).map(Some))
            .collect::<Result<_>>()?;
        Ok(Injections { attn, ffn })
    }

    /// True while every adaptive network still outputs exactly zero.
    pub fn is_fresh(&self) -> bool {
        self.attn.iter().chain(&self.ffn).all(|a| a.layer1.is_zero())
    }
}

impl Parameterized for TowerPlugin {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("personalization", self.cross.params());
        for (site, nets) in [("attn", &self.attn), ("ffn", &self.ffn)] {
            for (l, a) in nets.iter().enumerate() {
                v.extend(prefixed(&format!("personalization/ada/{site}/{l}"), a.params()));
            }
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("personalization", self.cross.params_mut());
        for (site, nets) in [("attn", &mut self.attn), ("ffn", &mut self.ffn)] {
            for (l, a) in nets.iter_mut().enumerate() {
                v.extend(prefixed(&format!("personalization/ada/{site}/{l}"), a.params_mut()));
            }
        }
        v
    }
}

/// The plug-ins of one reward model. In shared mode both towers read
/// `primary`; otherwise `secondary` (duplicated mode only) serves the item tower.
#[derive(Debug, Clone)]
pub struct PluginSet {
    pub wiring: Wiring,
    primary: TowerPlugin,
    secondary: Option<TowerPlugin>,
}

impl PluginSet {
    pub fn new<R: Rng + ?Sized>(
        wiring: Wiring,
        cross: &CrossConfig,
        layers: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let primary = TowerPlugin::new(cross, layers, width, rng)?;
        let secondary = match wiring {
            Wiring::Duplicated => Some(TowerPlugin::new(cross, layers, width, rng)?),
            _ => None,
        };
        Ok(PluginSet {
            wiring,
            primary,
            secondary,
        })
    }

    pub fn for_side(&self, side: Side) -> Option<&TowerPlugin> {
        match (self.wiring, side) {
            (Wiring::Duplicated, Side::Text) | (Wiring::Shared, _) => Some(&self.primary),
            (Wiring::Duplicated, Side::Item) => self.secondary.as_ref(),
            (Wiring::TextOnly, Side::Text) | (Wiring::VisionOnly, Side::Item) => Some(&self.primary),
            _ => None,
        }
    }

    pub fn is_fresh(&self) -> bool {
        self.primary.is_fresh() && self.secondary.as_ref().is_none_or(|p| p.is_fresh())
    }

    fn primary_prefix(&self) -> &'static str {
        match self.wiring {
            Wiring::Duplicated | Wiring::TextOnly => "text",
            Wiring::VisionOnly => "item",
            Wiring::Shared => "shared",
        }
    }
}

impl Parameterized for PluginSet {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed(self.primary_prefix(), self.primary.params());
        if let Some(s) = &self.secondary {
            v.extend(prefixed("item", s.params()));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let prefix = self.primary_prefix();
        let mut v = prefixed(prefix, self.primary.params_mut());
        if let Some(s) = &mut self.secondary {
            v.extend(prefixed("item", s.params_mut()));
        }
        v
    }
}

/// Injection offsets for a batch, or `None` when the side has no plug-in.
pub(crate) fn side_injections(
    set: Option<&PluginSet>,
    side: Side,
    g: &Graph,
    profiles: &[&UserProfile],
) -> Result<Option<Injections>> {
    match set.and_then(|s| s.for_side(side)) {
        Some(p) => p.injections(g, profiles).map(Some),
        None => Ok(None),
    }
}

/// Repeats every injection row `times` times (one user row per candidate).
pub(crate) fn repeat_injections(g: &Graph, inj: &Injections, times: usize) -> Result<Injections> {
    let rep = |list: &[Option<Var>]| -> Result<Vec<Option<Var>>> {
        list.iter()
            .map(|o| o.map(|v| g.repeat_rows(v, times)).transpose())
            .collect()
    };
    Ok(Injections {
        attn: rep(&inj.attn)?,
        ffn: rep(&inj.ffn)?,
    })
}
