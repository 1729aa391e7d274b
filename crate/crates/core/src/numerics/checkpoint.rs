//! Checkpoint fragments: a plain-text manifest followed by raw little-endian
//! `f64` payload.
//!
//! ```text
//! perfusion-checkpoint v1
//! <name> <d0>x<d1>... <byte offset into payload>
//! ...
//! end
//! <payload>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::graph::Parameterized;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "perfusion-checkpoint v1";

/// Named tensors loaded from (or about to be written to) a checkpoint.
#[derive(Debug, Default, Clone)]
pub struct Checkpoint {
    entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model<M: Parameterized + ?Sized>(model: &M) -> Self {
        let mut c = Checkpoint::default();
        c.extend(model);
        c
    }

    pub fn extend<M: Parameterized + ?Sized>(&mut self, model: &M) {
        for (name, t) in model.params() {
            let mut t = t.clone();
            t.set_requires_grad(false);
            self.entries.insert(name, t);
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copies stored values into every parameter of `model`. All of the
    /// model's names must be present with matching shapes.
    pub fn restore_into<M: Parameterized + ?Sized>(&self, model: &mut M) -> Result<()> {
        for (name, t) in model.params_mut() {
            let src = self
                .entries
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: stored {:?}, model {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::from(MAGIC);
        header.push('\n');
        let mut offset = 0usize;
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("{name} {} {offset}\n", dims.join("x")));
            offset += t.len() * 8;
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for t in self.entries.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))?;
            *pos += nl + 1;
            Ok(line.to_string())
        };
        if next_line(&mut pos)? != MAGIC {
            return Err(bad("bad magic line"));
        }
        let mut manifest = Vec::new();
        loop {
            let line = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            let mut parts = line.split(' ');
            let (Some(name), Some(dims), Some(off), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad(&format!("malformed manifest line {line:?}")));
            };
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(&format!("bad shape {dims:?}")))?;
            let off: usize = off.parse().map_err(|_| bad(&format!("bad offset {off:?}")))?;
            manifest.push((name.to_string(), shape, off));
        }
        let payload = &bytes[pos..];
        let mut entries = BTreeMap::new();
        for (name, shape, off) in manifest {
            let n: usize = shape.iter().product();
            let end = off + n * 8;
            if end > payload.len() {
                return Err(bad(&format!("entry {name} runs past payload end")));
            }
            let data = payload[off..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
