//! Toy DDPM over item vectors with a ControlNet-style personalized branch.
//!
//! The denoiser is a small MLP U-Net: three encoder blocks, a middle block
//! and three decoder blocks that each take the matching encoder output as a
//! skip input. Every block adds a projection of the shared time/condition
//! embedding before its GeLU.
//!
//! The personalized branch fuses a projection of the user representation into
//! `z_t` through a zero-initialised layer, runs trainable copies of the
//! embedding, encoder and middle blocks, and adds each copy's output back into
//! the frozen backbone's decoder skip inputs (and middle output) through
//! zero-initialised bridges. A fresh branch therefore changes nothing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::Affine;
use crate::numerics::{prefixed, AdamW, AdamWConfig, Graph, Parameterized, Tensor, Var};
use crate::personalization::{CrossConfig, CrossNetwork, UserProfile};
use crate::rng::{self, normal_vec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear β schedule; timesteps are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        if cfg.steps == 0 || !(0.0 < cfg.beta_start && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "schedule needs steps > 0 and 0 < beta_start <= beta_end < 1, got {cfg:?}"
            )));
        }
        let betas: Vec<f64> = if cfg.steps == 1 {
            vec![cfg.beta_start]
        } else {
            (0..cfg.steps)
                .map(|i| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (cfg.steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index {
                what: "timestep",
                index: t,
                size: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(t)?])
    }

    /// Posterior variance of `z_{t-1}` given `z_t` and `z_0`; `β_1` at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        let i = self.check(t)?;
        if i == 0 {
            return Ok(self.betas[0]);
        }
        Ok(self.betas[i] * (1.0 - self.alpha_bars[i - 1]) / (1.0 - self.alpha_bars[i]))
    }

    /// `z_t = √ᾱ_t · z0 + √(1−ᾱ_t) · ε`.
    pub fn forward_diffuse(&self, z0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        if z0.len() != eps.len() {
            return Err(Error::dim("forward_diffuse", format!("{} vs {}", z0.len(), eps.len())));
        }
        let ab = self.alpha_bar(t)?;
        Ok(diffuse_with(ab, z0, eps))
    }
}

fn diffuse_with(alpha_bar: f64, z0: &[f64], eps: &[f64]) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub item_dim: usize,
    pub cond_dim: usize,
    /// Length of the sinusoidal timestep features.
    pub time_dim: usize,
    pub emb_dim: usize,
    /// Encoder widths E1, E2, E3; decoder widths mirror them.
    pub widths: [usize; 3],
    pub mid: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            item_dim: 32,
            cond_dim: 8,
            time_dim: 16,
            emb_dim: 32,
            widths: [64, 32, 16],
            mid: 16,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.item_dim,
            self.cond_dim,
            self.emb_dim,
            self.mid,
            self.widths[0],
            self.widths[1],
            self.widths[2],
        ];
        if dims.contains(&0) || self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "denoiser sizes must be positive (time_dim even): {self:?}"
            )));
        }
        Ok(())
    }
}

/// `[sin(t·f_k), cos(t·f_k)]`, `f_k = 10000^(−k/half)`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let f = (-(10000f64).ln() * k as f64 / half as f64).exp();
        out.push((t as f64 * f).sin());
    }
    for k in 0..half {
        let f = (-(10000f64).ln() * k as f64 / half as f64).exp();
        out.push((t as f64 * f).cos());
    }
    out
}

#[derive(Debug, Clone)]
struct Embedding {
    time: Affine,
    cond: Affine,
}

impl Embedding {
    fn new<R: Rng + ?Sized>(cfg: &UNetConfig, rng: &mut R) -> Self {
        Embedding {
            time: Affine::new(cfg.time_dim, cfg.emb_dim, rng),
            cond: Affine::new(cfg.cond_dim, cfg.emb_dim, rng),
        }
    }

    fn forward(&self, g: &Graph, tfeat: Var, c: Var) -> Result<Var> {
        let a = self.time.forward(g, tfeat)?;
        let b = self.cond.forward(g, c)?;
        let s = g.add(a, b)?;
        g.gelu(s)
    }
}

impl Parameterized for Embedding {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("time", self.time.params());
        v.extend(prefixed("cond", self.cond.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("time", self.time.params_mut());
        v.extend(prefixed("cond", self.cond.params_mut()));
        v
    }
}

/// `gelu(lin(x) + emb(e))`.
#[derive(Debug, Clone)]
struct Block {
    lin: Affine,
    emb: Affine,
}

impl Block {
    fn new<R: Rng + ?Sized>(input: usize, output: usize, emb: usize, rng: &mut R) -> Self {
        Block {
            lin: Affine::new(input, output, rng),
            emb: Affine::new(emb, output, rng),
        }
    }

    fn forward(&self, g: &Graph, x: Var, e: Var) -> Result<Var> {
        let a = self.lin.forward(g, x)?;
        let b = self.emb.forward(g, e)?;
        let s = g.add(a, b)?;
        g.gelu(s)
    }
}

impl Parameterized for Block {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("lin", self.lin.params());
        v.extend(prefixed("emb", self.emb.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("lin", self.lin.params_mut());
        v.extend(prefixed("emb", self.emb.params_mut()));
        v
    }
}

/// Encoder outputs E1..E3 and the middle output.
struct Encoded {
    skips: [Var; 3],
    mid: Var,
}

/// Encoder and middle outputs, plus the time/condition embedding.
fn run_encoder(
    g: &Graph,
    embed: &Embedding,
    enc: &[Block],
    mid: &Block,
    z: Var,
    tfeat: Var,
    c: Var,
) -> Result<(Encoded, Var)> {
    let e = embed.forward(g, tfeat, c)?;
    let h1 = enc[0].forward(g, z, e)?;
    let h2 = enc[1].forward(g, h1, e)?;
    let h3 = enc[2].forward(g, h2, e)?;
    let m = mid.forward(g, h3, e)?;
    Ok((
        Encoded {
            skips: [h1, h2, h3],
            mid: m,
        },
        e,
    ))
}

#[derive(Debug, Clone)]
pub struct ToyUNet {
    pub config: UNetConfig,
    embed: Embedding,
    enc: Vec<Block>,
    mid: Block,
    /// D3, D2, D1.
    dec: Vec<Block>,
    head: Affine,
}

impl ToyUNet {
    pub fn new<R: Rng + ?Sized>(cfg: UNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let [w1, w2, w3] = cfg.widths;
        let e = cfg.emb_dim;
        Ok(ToyUNet {
            config: cfg,
            embed: Embedding::new(&cfg, rng),
            enc: vec![
                Block::new(cfg.item_dim, w1, e, rng),
                Block::new(w1, w2, e, rng),
                Block::new(w2, w3, e, rng),
            ],
            mid: Block::new(w3, cfg.mid, e, rng),
            dec: vec![
                Block::new(cfg.mid + w3, w2, e, rng),
                Block::new(w2 + w2, w1, e, rng),
                Block::new(w1 + w1, w1, e, rng),
            ],
            head: Affine::new(w1, cfg.item_dim, rng),
        })
    }

    fn encode(&self, g: &Graph, z: Var, tfeat: Var, c: Var) -> Result<(Encoded, Var)> {
        run_encoder(g, &self.embed, &self.enc, &self.mid, z, tfeat, c)
    }

    /// Decoder with optional additions to the three skip inputs and the
    /// middle output.
    fn decode(&self, g: &Graph, enc: &Encoded, e: Var, extra: Option<&Encoded>) -> Result<Var> {
        let plus = |a: Var, b: Option<Var>| -> Result<Var> {
            match b {
                Some(b) => g.add(a, b),
                None => Ok(a),
            }
        };
        let m = plus(enc.mid, extra.map(|x| x.mid))?;
        let s: Vec<Var> = (0..3)
            .map(|k| plus(enc.skips[k], extra.map(|x| x.skips[k])))
            .collect::<Result<_>>()?;
        let x = g.concat_cols(&[m, s[2]])?;
        let d3 = self.dec[0].forward(g, x, e)?;
        let x = g.concat_cols(&[d3, s[1]])?;
        let d2 = self.dec[1].forward(g, x, e)?;
        let x = g.concat_cols(&[d2, s[0]])?;
        let d1 = self.dec[2].forward(g, x, e)?;
        self.head.forward(g, d1)
    }
}

impl Parameterized for ToyUNet {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("embed", self.embed.params());
        for (k, b) in self.enc.iter().enumerate() {
            v.extend(prefixed(&format!("enc/{}", k + 1), b.params()));
        }
        v.extend(prefixed("mid", self.mid.params()));
        for (k, b) in self.dec.iter().enumerate() {
            v.extend(prefixed(&format!("dec/{}", 3 - k), b.params()));
        }
        v.extend(prefixed("head", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("embed", self.embed.params_mut());
        for (k, b) in self.enc.iter_mut().enumerate() {
            v.extend(prefixed(&format!("enc/{}", k + 1), b.params_mut()));
        }
        v.extend(prefixed("mid", self.mid.params_mut()));
        for (k, b) in self.dec.iter_mut().enumerate() {
            v.extend(prefixed(&format!("dec/{}", 3 - k), b.params_mut()));
        }
        v.extend(prefixed("head", self.head.params_mut()));
        v
    }
}

#[derive(Debug, Clone)]
pub struct PersonalizedBranch {
    pub cross: CrossNetwork,
    project: Affine,
    fusion: Affine,
    embed: Embedding,
    enc: Vec<Block>,
    mid: Block,
    /// Zero bridges for the E1..E3 copies, then the middle copy.
    bridges: Vec<Affine>,
}

impl PersonalizedBranch {
    /// Copies the backbone's embedding, encoder and middle blocks.
    pub fn new<R: Rng + ?Sized>(backbone: &ToyUNet, cross: &CrossConfig, rng: &mut R) -> Result<Self> {
        let cfg = backbone.config;
        let cross = CrossNetwork::new(cross, rng)?;
        let project = Affine::new(cross.output_dim(), cfg.item_dim, rng);
        let [w1, w2, w3] = cfg.widths;
        let mut branch = PersonalizedBranch {
            cross,
            project,
            fusion: Affine::zeros(cfg.item_dim, cfg.item_dim),
            embed: backbone.embed.clone(),
            enc: backbone.enc.clone(),
            mid: backbone.mid.clone(),
            bridges: vec![
                Affine::zeros(w1, w1),
                Affine::zeros(w2, w2),
                Affine::zeros(w3, w3),
                Affine::zeros(cfg.mid, cfg.mid),
            ],
        };
        branch.set_trainable(true);
        Ok(branch)
    }

    /// True while the fusion layer and every bridge are exactly zero.
    pub fn is_fresh(&self) -> bool {
        self.fusion.is_zero() && self.bridges.iter().all(|b| b.is_zero())
    }

    fn forward(&self, g: &Graph, z: Var, tfeat: Var, c: Var, profiles: &[&UserProfile]) -> Result<Encoded> {
        let u = self.cross.forward(g, profiles)?;
        let pu = self.project.forward(g, u)?;
        let fused = self.fusion.forward(g, pu)?;
        let z2 = g.add(z, fused)?;
        let (copy, _) = run_encoder(g, &self.embed, &self.enc, &self.mid, z2, tfeat, c)?;
        let bridged = |k: usize, v: Var| self.bridges[k].forward(g, v);
        Ok(Encoded {
            skips: [
                bridged(0, copy.skips[0])?,
                bridged(1, copy.skips[1])?,
                bridged(2, copy.skips[2])?,
            ],
            mid: bridged(3, copy.mid)?,
        })
    }
}

impl Parameterized for PersonalizedBranch {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("personalization", self.cross.params());
        v.extend(prefixed("project", self.project.params()));
        v.extend(prefixed("fusion", self.fusion.params()));
        v.extend(prefixed("embed", self.embed.params()));
        for (k, b) in self.enc.iter().enumerate() {
            v.extend(prefixed(&format!("enc/{}", k + 1), b.params()));
        }
        v.extend(prefixed("mid", self.mid.params()));
        for (k, b) in self.bridges.iter().enumerate() {
            let name = if k < 3 {
                format!("bridge/{}", k + 1)
            } else {
                "bridge/mid".into()
            };
            v.extend(prefixed(&name, b.params()));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("personalization", self.cross.params_mut());
        v.extend(prefixed("project", self.project.params_mut()));
        v.extend(prefixed("fusion", self.fusion.params_mut()));
        v.extend(prefixed("embed", self.embed.params_mut()));
        for (k, b) in self.enc.iter_mut().enumerate() {
            v.extend(prefixed(&format!("enc/{}", k + 1), b.params_mut()));
        }
        v.extend(prefixed("mid", self.mid.params_mut()));
        for (k, b) in self.bridges.iter_mut().enumerate() {
            let name = if k < 3 {
                format!("bridge/{}", k + 1)
            } else {
                "bridge/mid".into()
            };
            v.extend(prefixed(&name, b.params_mut()));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub cardinalities: Vec<usize>,
    pub embed_dim: usize,
    pub cross_layers: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            cardinalities: vec![8; 4],
            embed_dim: 8,
            cross_layers: 2,
        }
    }
}

impl DiffusionConfig {
    pub fn cross(&self) -> CrossConfig {
        CrossConfig {
            cardinalities: self.cardinalities.clone(),
            embed_dim: self.embed_dim,
            cross_layers: self.cross_layers,
        }
    }
}

/// Which parameters of a [`Denoiser`] an optimiser may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    Backbone,
    Branch,
    All,
}

/// Backbone ε-predictor plus an optional personalized branch.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DiffusionConfig,
    pub backbone: ToyUNet,
    pub branch: Option<PersonalizedBranch>,
}

impl Denoiser {
    pub fn new(config: DiffusionConfig, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "diffusion/backbone");
        let mut backbone = ToyUNet::new(config.unet, &mut r)?;
        backbone.set_trainable(true);
        Ok(Denoiser {
            config,
            backbone,
            branch: None,
        })
    }

    /// Adds a fresh branch copied from the current backbone.
    pub fn attach_branch(&mut self, seed: u64) -> Result<()> {
        let mut r = rng::stream(seed, "diffusion/branch");
        self.branch = Some(PersonalizedBranch::new(&self.backbone, &self.config.cross(), &mut r)?);
        Ok(())
    }

    pub fn item_dim(&self) -> usize {
        self.config.unet.item_dim
    }

    pub fn set_trainable(&mut self, which: Trainable) {
        let (bb, br) = match which {
            Trainable::Backbone => (true, false),
            Trainable::Branch => (false, true),
            Trainable::All => (true, true),
        };
        self.backbone.set_trainable(bb);
        if let Some(b) = &mut self.branch {
            b.set_trainable(br);
        }
    }

    /// ε-prediction for a batch: `z` is `B × D`, `cond` is `B × cond_dim`,
    /// `t` holds one timestep per row. The branch runs only when both it and
    /// the user profiles are present.
    pub fn predict(&self, g: &Graph, z: Var, t: &[usize], cond: Var, profiles: Option<&[&UserProfile]>) -> Result<Var> {
        let (b, d) = g.shape(z);
        let cfg = &self.config.unet;
        if d != cfg.item_dim || t.len() != b || g.shape(cond) != (b, cfg.cond_dim) {
            return Err(Error::dim(
                "predict_noise",
                format!("z {b}x{d}, {} timesteps, condition {:?}", t.len(), g.shape(cond)),
            ));
        }
        if let Some(p) = profiles {
            if p.len() != b {
                return Err(Error::dim(
                    "predict_noise",
                    format!("{} profiles for {b} rows", p.len()),
                ));
            }
        }
        let tf: Vec<f64> = t.iter().flat_map(|&s| timestep_features(s, cfg.time_dim)).collect();
        let tfeat = g.constant(b, cfg.time_dim, tf)?;
        let (enc, e) = self.backbone.encode(g, z, tfeat, cond)?;
        let extra = match (&self.branch, profiles) {
            (Some(br), Some(p)) => Some(br.forward(g, z, tfeat, cond, p)?),
            _ => None,
        };
        self.backbone.decode(g, &enc, e, extra.as_ref())
    }

    /// Single-row ε-prediction without gradients.
    pub fn predict_noise(&self, z_t: &[f64], t: usize, c: &[f64], u: Option<&UserProfile>) -> Result<Vec<f64>> {
        let g = Graph::new();
        let z = g.constant(1, z_t.len(), z_t.to_vec())?;
        let cv = g.constant(1, c.len(), c.to_vec())?;
        let profiles: Option<Vec<&UserProfile>> = u.map(|p| vec![p]);
        let out = self.predict(&g, z, &[t], cv, profiles.as_deref())?;
        Ok(g.value(out))
    }
}

impl Parameterized for Denoiser {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("diffusion/backbone", self.backbone.params());
        if let Some(b) = &self.branch {
            v.extend(prefixed("diffusion/branch", b.params()));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("diffusion/backbone", self.backbone.params_mut());
        if let Some(b) = &mut self.branch {
            v.extend(prefixed("diffusion/branch", b.params_mut()));
        }
        v
    }
}

/// One training example for the denoising objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SftSample {
    pub item: Vec<f64>,
    pub condition: Vec<f64>,
    pub profile: Option<UserProfile>,
}

/// Fixed random draws for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    pub t: Vec<usize>,
    pub eps: Vec<Vec<f64>>,
}

impl Draws {
    /// `t` uniform in `[1, T]` and standard normal `ε`, one per sample.
    pub fn sample<R: Rng + ?Sized>(n: usize, dim: usize, steps: usize, rng: &mut R) -> Self {
        let mut t = Vec::with_capacity(n);
        let mut eps = Vec::with_capacity(n);
        for _ in 0..n {
            t.push(rng.random_range(1..=steps));
            eps.push(normal_vec(rng, dim));
        }
        Draws { t, eps }
    }
}

fn stack(rows: &[&[f64]]) -> Vec<f64> {
    rows.iter().flat_map(|r| r.iter().copied()).collect()
}

/// Mean squared error between the drawn noise and the model's prediction,
/// averaged over batch and coordinates.
pub fn sft_loss(
    g: &Graph,
    model: &Denoiser,
    sched: &NoiseSchedule,
    batch: &[&SftSample],
    draws: &Draws,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let d = model.item_dim();
    if draws.t.len() != batch.len() || draws.eps.len() != batch.len() {
        return Err(Error::dim("sft_loss", "draws do not match batch"));
    }
    let mut zt = Vec::with_capacity(batch.len() * d);
    for (s, (&t, e)) in batch.iter().zip(draws.t.iter().zip(&draws.eps)) {
        zt.extend(sched.forward_diffuse(&s.item, t, e)?);
    }
    let z = g.constant(batch.len(), d, zt)?;
    let conds: Vec<&[f64]> = batch.iter().map(|s| s.condition.as_slice()).collect();
    let cond = g.constant(batch.len(), model.config.unet.cond_dim, stack(&conds))?;
    let profiles: Option<Vec<&UserProfile>> = batch.iter().map(|s| s.profile.as_ref()).collect();
    let pred = model.predict(g, z, &draws.t, cond, profiles.as_deref())?;
    let eps_rows: Vec<&[f64]> = draws.eps.iter().map(|e| e.as_slice()).collect();
    let eps = g.constant(batch.len(), d, stack(&eps_rows))?;
    let diff = g.sub(eps, pred)?;
    let sq = g.square(diff)?;
    g.mean(sq)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub trainable: Trainable,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            steps: 1000,
            batch_size: 32,
            optimizer: AdamWConfig {
                learning_rate: 1e-3,
                weight_decay: 1e-2,
                warmup_steps: 100,
                ..AdamWConfig::default()
            },
            trainable: Trainable::Backbone,
            seed: 0,
        }
    }
}

/// Minimises the denoising loss with AdamW; returns the loss of every step.
pub fn train_sft(
    model: &mut Denoiser,
    data: &[SftSample],
    sched: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Degenerate("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    model.set_trainable(cfg.trainable);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut r = rng::stream_at(cfg.seed, "diffusion/sft", step as u64);
        let batch: Vec<&SftSample> = (0..cfg.batch_size)
            .map(|_| &data[r.random_range(0..data.len())])
            .collect();
        let draws = Draws::sample(batch.len(), model.item_dim(), sched.steps(), &mut r);
        let g = Graph::new();
        let loss = sft_loss(&g, model, sched, &batch, &draws)?;
        losses.push(g.scalar(loss));
        let grads = g.backward(loss)?;
        grads.apply(model);
        opt.step(model)?;
    }
    Ok(losses)
}

/// One generation request.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub condition: Vec<f64>,
    pub profile: Option<UserProfile>,
    pub seed: u64,
}

/// DDPM ancestral sampling from `z_T ~ N(0, I)` with the posterior variance,
/// for a batch of requests. Each request draws from its own seeded stream.
pub fn sample(model: &Denoiser, sched: &NoiseSchedule, requests: &[SampleRequest]) -> Result<Vec<Vec<f64>>> {
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let d = model.item_dim();
    let n = requests.len();
    let mut streams: Vec<rng::Rng64> = requests
        .iter()
        .map(|r| rng::stream(r.seed, "diffusion/sample"))
        .collect();
    let mut z: Vec<Vec<f64>> = streams.iter_mut().map(|s| normal_vec(s, d)).collect();
    let conds: Vec<&[f64]> = requests.iter().map(|r| r.condition.as_slice()).collect();
    let cond_flat = stack(&conds);
    let profiles: Option<Vec<&UserProfile>> = requests.iter().map(|r| r.profile.as_ref()).collect();
    for t in (1..=sched.steps()).rev() {
        let g = Graph::new();
        let rows: Vec<&[f64]> = z.iter().map(|r| r.as_slice()).collect();
        let zv = g.constant(n, d, stack(&rows))?;
        let cv = g.constant(n, model.config.unet.cond_dim, cond_flat.clone())?;
        let eps = g.value(model.predict(&g, zv, &vec![t; n], cv, profiles.as_deref())?);
        let (alpha, beta, ab) = (sched.alpha(t)?, sched.beta(t)?, sched.alpha_bar(t)?);
        let coef = beta / (1.0 - ab).sqrt();
        let sigma = sched.posterior_variance(t)?.sqrt();
        for (i, (row, s)) in z.iter_mut().zip(streams.iter_mut()).enumerate() {
            for j in 0..d {
                row[j] = (row[j] - coef * eps[i * d + j]) / alpha.sqrt();
            }
            if t > 1 {
                for v in row.iter_mut() {
                    *v += sigma * rng::standard_normal(s);
                }
            }
        }
    }
    Ok(z)
}
