//! AdamW with decoupled weight decay and linear warmup.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::Parameterized;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    /// lr 1e-3, 500 warmup steps, weight decay 1e-2.
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            warmup_steps: 500,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: moment accumulators keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// `min(1, step / warmup_steps)`; no warmup when `warmup_steps == 0`.
    pub fn warmup_factor(&self, step: u64) -> f64 {
        if self.config.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.config.warmup_steps as f64).min(1.0)
        }
    }

    /// Applies one update to every trainable parameter, then zeroes gradients.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        let t = self.step + 1;
        let cfg = self.config;
        let lr = cfg.learning_rate * self.warmup_factor(t);
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);

        for (name, p) in model.params_mut() {
            if !p.requires_grad() {
                continue;
            }
            let n = p.len();
            let grad = p
                .grad()
                .ok_or_else(|| Error::Contract(format!("parameter {name} has no gradient")))?
                .to_vec();
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("adamw gradient"));
            }
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if mo.m.len() != n {
                return Err(Error::dim("adamw", format!("moment shape changed for {name}")));
            }
            let data = p.data_mut();
            for i in 0..n {
                let g = grad[i];
                mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g;
                mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = mo.m[i] / bc1;
                let vhat = mo.v[i] / bc2;
                data[i] -= lr * cfg.weight_decay * data[i];
                data[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
            p.zero_grad();
        }
        self.step = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    struct One(Tensor);
    impl Parameterized for One {
        fn params(&self) -> Vec<(String, &Tensor)> {
            vec![("p".into(), &self.0)]
        }
        fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            vec![("p".into(), &mut self.0)]
        }
    }

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            learning_rate: lr,
            weight_decay: wd,
            warmup_steps: 0,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut m = One(Tensor::vector(vec![1.5, -2.0]).unwrap().trainable());
        let mut opt = AdamW::new(cfg(0.1, 0.0));
        opt.step(&mut m).unwrap();
        assert_eq!(m.0.data(), &[1.5, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_execution() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δθ = -lr / (1 + eps).
        let mut m = One(Tensor::scalar(0.7).trainable());
        m.0.grad_mut().unwrap()[0] = 1.0;
        let mut opt = AdamW::new(cfg(0.1, 0.0));
        opt.step(&mut m).unwrap();
        let expected = 0.7 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((m.0.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_wd_theta() {
        let mut m = One(Tensor::scalar(2.0).trainable());
        let mut opt = AdamW::new(cfg(0.1, 0.01));
        opt.step(&mut m).unwrap();
        assert!((m.0.data()[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn warmup_is_linear() {
        let opt = AdamW::new(AdamWConfig::default());
        assert_eq!(opt.warmup_factor(1), 1.0 / 500.0);
        assert_eq!(opt.warmup_factor(250), 0.5);
        assert_eq!(opt.warmup_factor(5000), 1.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut m = One(Tensor::scalar(1.0).trainable());
        m.0.grad_mut().unwrap()[0] = f64::NAN;
        let mut opt = AdamW::new(cfg(0.1, 0.0));
        assert!(matches!(opt.step(&mut m), Err(Error::NonFinite(_))));
        assert_eq!(m.0.data(), &[1.0]);
    }
}
