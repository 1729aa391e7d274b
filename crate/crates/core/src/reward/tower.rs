//! Pre-norm transformer tower with optional per-layer injections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{Affine, LayerNorm};
use crate::numerics::{prefixed, Graph, Parameterized, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TowerConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub out_dim: usize,
}

impl Default for TowerConfig {
    fn default() -> Self {
        TowerConfig {
            width: 32,
            layers: 2,
            heads: 2,
            ffn_hidden: 64,
            out_dim: 32,
        }
    }
}

impl TowerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.layers == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "tower width {} must be positive and divisible by heads {}, with at least one layer",
                self.width, self.heads
            )));
        }
        if self.ffn_hidden == 0 || self.out_dim == 0 {
            return Err(Error::Config("tower ffn_hidden and out_dim must be positive".into()));
        }
        Ok(())
    }
}

/// How a tower turns its raw input into token states.
#[derive(Debug, Clone)]
pub enum TowerInput {
    /// Token ids looked up in a `vocab × width` table.
    Tokens { table: Tensor },
    /// Real vector cut into `seq` contiguous chunks, each mapped by an affine layer.
    Chunks { proj: Affine },
}

#[derive(Debug, Clone)]
struct Block {
    ln_attn: LayerNorm,
    qkv: Affine,
    out: Affine,
    ln_ffn: LayerNorm,
    ff1: Affine,
    ff2: Affine,
}

impl Block {
    fn new<R: Rng + ?Sized>(cfg: &TowerConfig, rng: &mut R) -> Self {
        Block {
            ln_attn: LayerNorm::new(cfg.width),
            qkv: Affine::new(cfg.width, 3 * cfg.width, rng),
            out: Affine::new(cfg.width, cfg.width, rng),
            ln_ffn: LayerNorm::new(cfg.width),
            ff1: Affine::new(cfg.width, cfg.ffn_hidden, rng),
            ff2: Affine::new(cfg.ffn_hidden, cfg.width, rng),
        }
    }
}

impl Parameterized for Block {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("ln_attn", self.ln_attn.params());
        v.extend(prefixed("qkv", self.qkv.params()));
        v.extend(prefixed("out", self.out.params()));
        v.extend(prefixed("ln_ffn", self.ln_ffn.params()));
        v.extend(prefixed("ff1", self.ff1.params()));
        v.extend(prefixed("ff2", self.ff2.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("ln_attn", self.ln_attn.params_mut());
        v.extend(prefixed("qkv", self.qkv.params_mut()));
        v.extend(prefixed("out", self.out.params_mut()));
        v.extend(prefixed("ln_ffn", self.ln_ffn.params_mut()));
        v.extend(prefixed("ff1", self.ff1.params_mut()));
        v.extend(prefixed("ff2", self.ff2.params_mut()));
        v
    }
}

/// Per-layer offsets added to every token of a sequence, `batch × width`
/// each. `None` entries skip the addition.
#[derive(Debug, Clone, Default)]
pub struct Injections {
    pub attn: Vec<Option<Var>>,
    pub ffn: Vec<Option<Var>>,
}

/// Forward result. `pre_attn[l]` holds the token states entering layer `l`'s
/// attention normalisation, after any injection.
#[derive(Debug, Clone)]
pub struct TowerOutput {
    pub pooled: Var,
    pub pre_attn: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Tower {
    pub config: TowerConfig,
    pub seq: usize,
    input: TowerInput,
    positions: Tensor,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    proj: Affine,
}

impl Tower {
    pub fn text<R: Rng + ?Sized>(cfg: TowerConfig, vocab: usize, seq: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if vocab == 0 || seq == 0 {
            return Err(Error::Config(
                "text tower needs a vocabulary and a sequence length".into(),
            ));
        }
        let table = Tensor::normal(&[vocab, cfg.width], 0.5, rng).trainable();
        Ok(Self::assemble(cfg, seq, TowerInput::Tokens { table }, rng))
    }

    /// Item tower over vectors of length `item_dim`, cut into `seq` chunks.
    pub fn item<R: Rng + ?Sized>(cfg: TowerConfig, item_dim: usize, seq: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if seq == 0 || item_dim == 0 || !item_dim.is_multiple_of(seq) {
            return Err(Error::Config(format!(
                "item dimension {item_dim} must split evenly into {seq} chunks"
            )));
        }
        let proj = Affine::new(item_dim / seq, cfg.width, rng);
        Ok(Self::assemble(cfg, seq, TowerInput::Chunks { proj }, rng))
    }

    fn assemble<R: Rng + ?Sized>(cfg: TowerConfig, seq: usize, input: TowerInput, rng: &mut R) -> Self {
        let positions = Tensor::normal(&[seq, cfg.width], 0.1, rng).trainable();
        let blocks = (0..cfg.layers).map(|_| Block::new(&cfg, rng)).collect();
        Tower {
            config: cfg,
            seq,
            input,
            positions,
            blocks,
            final_norm: LayerNorm::new(cfg.width),
            proj: Affine::new(cfg.width, cfg.out_dim, rng),
        }
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    /// Token states `(batch·seq) × width` for a batch of token sequences.
    pub fn embed_tokens(&self, g: &Graph, tokens: &[Vec<usize>]) -> Result<Var> {
        let TowerInput::Tokens { table } = &self.input else {
            return Err(Error::Contract("token input given to an item tower".into()));
        };
        if tokens.is_empty() {
            return Err(Error::Degenerate("empty token batch".into()));
        }
        let mut flat = Vec::with_capacity(tokens.len() * self.seq);
        for t in tokens {
            if t.len() != self.seq {
                return Err(if t.is_empty() {
                    Error::Degenerate("sequence of length 0".into())
                } else {
                    Error::dim("tower_forward", format!("sequence length {} vs {}", t.len(), self.seq))
                });
            }
            flat.extend_from_slice(t);
        }
        let tv = g.param(table)?;
        let x = g.gather_rows(tv, &flat)?;
        self.add_positions(g, x, tokens.len())
    }

    /// Token states for a batch of real vectors given as `batch × item_dim`.
    pub fn embed_chunks(&self, g: &Graph, items: Var) -> Result<Var> {
        let TowerInput::Chunks { proj } = &self.input else {
            return Err(Error::Contract("item input given to a text tower".into()));
        };
        let (b, d) = g.shape(items);
        if d != proj.fan_in() * self.seq {
            return Err(Error::dim(
                "tower_forward",
                format!("item length {d}, tower expects {}", proj.fan_in() * self.seq),
            ));
        }
        let chunks = g.reshape(items, b * self.seq, proj.fan_in())?;
        let x = proj.forward(g, chunks)?;
        self.add_positions(g, x, b)
    }

    fn add_positions(&self, g: &Graph, x: Var, batch: usize) -> Result<Var> {
        let pos = g.param(&self.positions)?;
        let idx: Vec<usize> = (0..batch).flat_map(|_| 0..self.seq).collect();
        let p = g.gather_rows(pos, &idx)?;
        g.add(x, p)
    }

    fn inject(&self, g: &Graph, h: Var, offset: Option<Var>) -> Result<Var> {
        match offset {
            None => Ok(h),
            Some(o) => {
                let rep = g.repeat_rows(o, self.seq)?;
                g.add(h, rep)
            }
        }
    }

    /// Runs the transformer stack on token states `(batch·seq) × width`.
    pub fn encode(&self, g: &Graph, x: Var, inj: Option<&Injections>) -> Result<TowerOutput> {
        let (rows, width) = g.shape(x);
        if rows % self.seq != 0 || width != self.width() {
            return Err(Error::dim("tower_forward", format!("{rows}x{width} token states")));
        }
        let offset = |list: fn(&Injections) -> &Vec<Option<Var>>, l: usize| -> Option<Var> {
            inj.and_then(|i| list(i).get(l).copied().flatten())
        };
        let w = self.width();
        let mut h = x;
        let mut pre_attn = Vec::with_capacity(self.blocks.len());
        for (l, blk) in self.blocks.iter().enumerate() {
            let xa = self.inject(g, h, offset(|i| &i.attn, l))?;
            pre_attn.push(xa);
            let a = blk.ln_attn.forward(g, xa)?;
            let qkv = blk.qkv.forward(g, a)?;
            let q = g.slice_cols(qkv, 0, w)?;
            let k = g.slice_cols(qkv, w, 2 * w)?;
            let v = g.slice_cols(qkv, 2 * w, 3 * w)?;
            let att = g.attention(q, k, v, self.seq, self.config.heads)?;
            let o = blk.out.forward(g, att)?;
            let h1 = g.add(xa, o)?;

            let y = self.inject(g, h1, offset(|i| &i.ffn, l))?;
            let f = blk.ln_ffn.forward(g, y)?;
            let f = blk.ff1.forward(g, f)?;
            let f = g.gelu(f)?;
            let f = blk.ff2.forward(g, f)?;
            h = g.add(y, f)?;
        }
        let h = self.final_norm.forward(g, h)?;
        let pooled = g.mean_pool(h, self.seq)?;
        let pooled = self.proj.forward(g, pooled)?;
        Ok(TowerOutput { pooled, pre_attn })
    }
}

impl Parameterized for Tower {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = match &self.input {
            TowerInput::Tokens { table } => vec![("tokens".to_string(), table)],
            TowerInput::Chunks { proj } => prefixed("chunks", proj.params()),
        };
        v.push(("positions".into(), &self.positions));
        for (l, b) in self.blocks.iter().enumerate() {
            v.extend(prefixed(&format!("layer/{l}"), b.params()));
        }
        v.extend(prefixed("final_norm", self.final_norm.params()));
        v.extend(prefixed("proj", self.proj.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = match &mut self.input {
            TowerInput::Tokens { table } => vec![("tokens".to_string(), table)],
            TowerInput::Chunks { proj } => prefixed("chunks", proj.params_mut()),
        };
        v.push(("positions".into(), &mut self.positions));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            v.extend(prefixed(&format!("layer/{l}"), b.params_mut()));
        }
        v.extend(prefixed("final_norm", self.final_norm.params_mut()));
        v.extend(prefixed("proj", self.proj.params_mut()));
        v
    }
}
