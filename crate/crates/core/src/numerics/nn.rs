//! Small parameterised layers shared by the model modules.

use rand::Rng;

use super::graph::{Graph, Parameterized, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// `y = x·W + b` with `W: in × out`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    /// Uniform(-1/√fan_in, 1/√fan_in) weights and bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Affine {
            weight: Tensor::uniform(&[fan_in, fan_out], bound, rng).trainable(),
            bias: Tensor::uniform(&[fan_out], bound, rng).trainable(),
        }
    }

    /// Weight and bias exactly zero.
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Affine {
            weight: Tensor::zeros(&[fan_in, fan_out]).trainable(),
            bias: Tensor::zeros(&[fan_out]).trainable(),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn is_zero(&self) -> bool {
        self.weight.data().iter().chain(self.bias.data()).all(|v| *v == 0.0)
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }

    /// Plain evaluation of one input row, no graph.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (fi, fo) = (self.fan_in(), self.fan_out());
        let w = self.weight.data();
        let mut out = self.bias.data().to_vec();
        for i in 0..fi {
            for j in 0..fo {
                out[j] += x[i] * w[i * fo + j];
            }
        }
        out
    }
}

impl Parameterized for Affine {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("w".into(), &self.weight), ("b".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("w".into(), &mut self.weight), ("b".into(), &mut self.bias)]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(width: usize) -> Self {
        LayerNorm {
            gamma: Tensor::new(vec![width], vec![1.0; width])
                .expect("width > 0")
                .trainable(),
            beta: Tensor::zeros(&[width]).trainable(),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma)?;
        let beta = g.param(&self.beta)?;
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

impl Parameterized for LayerNorm {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }
}
