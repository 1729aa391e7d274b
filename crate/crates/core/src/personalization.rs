//! User representation from categorical profile features.
//!
//! Each feature field has an embedding table. The concatenated embeddings
//! `u_0` go through a residual feature-crossing stack
//! `u_{l+1} = u_0 · ⟨u_l, w_l⟩ + b_l + u_l`, and the result `u` is injected
//! elsewhere through [`AdaptiveNetwork`]s whose last layer starts at zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::Affine;
use crate::numerics::{prefixed, Graph, Parameterized, Tensor, Var};

/// Categorical features of one user, one index per field.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UserProfile {
    pub feature_ids: Vec<usize>,
}

impl UserProfile {
    pub fn new(feature_ids: Vec<usize>) -> Self {
        UserProfile { feature_ids }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossConfig {
    pub cardinalities: Vec<usize>,
    pub embed_dim: usize,
    pub cross_layers: usize,
}

impl CrossConfig {
    pub fn new(cardinalities: Vec<usize>) -> Self {
        CrossConfig {
            cardinalities,
            embed_dim: 8,
            cross_layers: 2,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.cardinalities.len() * self.embed_dim
    }
}

/// Embedding tables plus the residual crossing layers.
#[derive(Debug, Clone)]
pub struct CrossNetwork {
    pub embeddings: Vec<Tensor>,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    embed_dim: usize,
}

impl CrossNetwork {
    pub fn new<R: Rng + ?Sized>(cfg: &CrossConfig, rng: &mut R) -> Result<Self> {
        if cfg.cardinalities.is_empty() || cfg.cardinalities.contains(&0) || cfg.embed_dim == 0 {
            return Err(Error::Config(format!(
                "cross network needs positive cardinalities and embed_dim, got {:?} / {}",
                cfg.cardinalities, cfg.embed_dim
            )));
        }
        let width = cfg.output_dim();
        let embeddings = cfg
            .cardinalities
            .iter()
            .map(|&card| Tensor::normal(&[card, cfg.embed_dim], 0.5, rng).trainable())
            .collect();
        let bound = 1.0 / (width as f64).sqrt();
        let weights = (0..cfg.cross_layers)
            .map(|_| Tensor::uniform(&[width], bound, rng).trainable())
            .collect();
        let biases = (0..cfg.cross_layers)
            .map(|_| Tensor::zeros(&[width]).trainable())
            .collect();
        Ok(CrossNetwork {
            embeddings,
            weights,
            biases,
            embed_dim: cfg.embed_dim,
        })
    }

    pub fn num_fields(&self) -> usize {
        self.embeddings.len()
    }

    pub fn output_dim(&self) -> usize {
        self.num_fields() * self.embed_dim
    }

    fn check_profile(&self, p: &UserProfile) -> Result<()> {
        if p.feature_ids.len() != self.num_fields() {
            return Err(Error::dim(
                "embed",
                format!(
                    "profile has {} features, network has {} fields",
                    p.feature_ids.len(),
                    self.num_fields()
                ),
            ));
        }
        for (&id, table) in p.feature_ids.iter().zip(&self.embeddings) {
            let card = table.shape()[0];
            if id >= card {
                return Err(Error::Index {
                    what: "user feature",
                    index: id,
                    size: card,
                });
            }
        }
        Ok(())
    }

    /// `u_0 = v_1 ⊕ … ⊕ v_F` for a batch of profiles, `batch × F·d`.
    pub fn embed(&self, g: &Graph, profiles: &[&UserProfile]) -> Result<Var> {
        if profiles.is_empty() {
            return Err(Error::Degenerate("no profiles to embed".into()));
        }
        for p in profiles {
            self.check_profile(p)?;
        }
        let parts = self
            .embeddings
            .iter()
            .enumerate()
            .map(|(f, table)| {
                let ids: Vec<usize> = profiles.iter().map(|p| p.feature_ids[f]).collect();
                let t = g.param(table)?;
                g.gather_rows(t, &ids)
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat_cols(&parts)
    }

    /// Residual crossing stack applied row-wise to `u0` (`batch × F·d`).
    pub fn cross(&self, g: &Graph, u0: Var) -> Result<Var> {
        let (_, width) = g.shape(u0);
        if width != self.output_dim() {
            return Err(Error::dim(
                "cross_forward",
                format!("input width {width}, expected {}", self.output_dim()),
            ));
        }
        let mut u = u0;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let wv = g.param(w)?;
            let wcol = g.transpose(wv)?;
            let s = g.matmul(u, wcol)?;
            let crossed = g.row_scale(u0, s)?;
            let bv = g.param(b)?;
            let with_bias = g.add_row(crossed, bv)?;
            u = g.add(with_bias, u)?;
        }
        Ok(u)
    }

    pub fn forward(&self, g: &Graph, profiles: &[&UserProfile]) -> Result<Var> {
        let u0 = self.embed(g, profiles)?;
        self.cross(g, u0)
    }

    /// User representation of a single profile, evaluated without gradients.
    pub fn represent(&self, profile: &UserProfile) -> Result<Vec<f64>> {
        let g = Graph::new();
        let u = self.forward(&g, &[profile])?;
        Ok(g.value(u))
    }
}

impl Parameterized for CrossNetwork {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .embeddings
            .iter()
            .enumerate()
            .map(|(f, t)| (format!("embed/{f}"), t))
            .collect();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("cross/{l}/w"), w));
            out.push((format!("cross/{l}/b"), b));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .embeddings
            .iter_mut()
            .enumerate()
            .map(|(f, t)| (format!("embed/{f}"), t))
            .collect();
        for (l, (w, b)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            out.push((format!("cross/{l}/w"), w));
            out.push((format!("cross/{l}/b"), b));
        }
        out
    }
}

/// Two affine layers with GeLU between; the second layer starts at zero so
/// the network initially outputs exactly zero for every input.
#[derive(Debug, Clone)]
pub struct AdaptiveNetwork {
    pub layer0: Affine,
    pub layer1: Affine,
}

impl AdaptiveNetwork {
    /// Hidden width is `max(input, output)`.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let hidden = input.max(output);
        AdaptiveNetwork {
            layer0: Affine::new(input, hidden, rng),
            layer1: Affine::zeros(hidden, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer0.fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layer1.fan_out()
    }

    pub fn forward(&self, g: &Graph, u: Var) -> Result<Var> {
        let (_, w) = g.shape(u);
        if w != self.input_dim() {
            return Err(Error::dim(
                "adapt",
                format!("input width {w}, expected {}", self.input_dim()),
            ));
        }
        let h = self.layer0.forward(g, u)?;
        let h = g.gelu(h)?;
        self.layer1.forward(g, h)
    }

    pub fn adapt(&self, u: &[f64]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let uv = g.constant(1, u.len(), u.to_vec())?;
        let out = self.forward(&g, uv)?;
        Ok(g.value(out))
    }
}

impl Parameterized for AdaptiveNetwork {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("layer0", self.layer0.params());
        v.extend(prefixed("layer1", self.layer1.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("layer0", self.layer0.params_mut());
        v.extend(prefixed("layer1", self.layer1.params_mut()));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn net(cards: Vec<usize>, d: usize, layers: usize) -> CrossNetwork {
        let cfg = CrossConfig {
            cardinalities: cards,
            embed_dim: d,
            cross_layers: layers,
        };
        CrossNetwork::new(&cfg, &mut rng::stream(3, "test")).unwrap()
    }

    #[test]
    fn embed_concatenates_selected_rows() {
        let mut n = net(vec![2, 3], 2, 0);
        n.embeddings[0].data_mut().copy_from_slice(&[9.0, 9.0, 1.0, 2.0]);
        n.embeddings[1]
            .data_mut()
            .copy_from_slice(&[3.0, 4.0, 0.0, 0.0, 7.0, 7.0]);
        let g = Graph::new();
        let p = UserProfile::new(vec![1, 0]);
        let u0 = n.embed(&g, &[&p]).unwrap();
        assert_eq!(g.value(u0), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(n.represent(&p).unwrap(), n.represent(&p).unwrap());
    }

    #[test]
    fn embed_gradient_touches_only_selected_rows() {
        let n = net(vec![3, 2], 2, 1);
        let g = Graph::new();
        let u = n.forward(&g, &[&UserProfile::new(vec![2, 1])]).unwrap();
        let loss = g.sum(u).unwrap();
        let grads = g.backward(loss).unwrap();
        let ge = grads.for_param(n.embeddings[0].id()).unwrap();
        assert!(ge[..4].iter().all(|v| *v == 0.0));
        assert!(ge[4..].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn bad_profiles_are_rejected() {
        let n = net(vec![3, 2], 2, 1);
        let g = Graph::new();
        assert!(matches!(
            n.embed(&g, &[&UserProfile::new(vec![3, 0])]),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            n.embed(&g, &[&UserProfile::new(vec![0])]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn cross_hand_example() {
        // u0 = [1,2], w = [1,0], b = 0: ⟨u0,w⟩ = 1 so u1 = [1,2]·1 + [1,2] = [2,4].
        let mut n = net(vec![1], 2, 1);
        n.weights[0].data_mut().copy_from_slice(&[1.0, 0.0]);
        let g = Graph::new();
        let u0 = g.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let u = n.cross(&g, u0).unwrap();
        assert_eq!(g.value(u), vec![2.0, 4.0]);
    }

    #[test]
    fn cross_with_zero_parameters_is_identity() {
        let mut n = net(vec![4, 4], 3, 3);
        for w in n.weights.iter_mut().chain(n.biases.iter_mut()) {
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g = Graph::new();
        let data: Vec<f64> = (0..6).map(|i| i as f64 * 0.37 - 1.1).collect();
        let u0 = g.constant(1, 6, data.clone()).unwrap();
        let u = n.cross(&g, u0).unwrap();
        let out = g.value(u);
        assert!(out.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn cross_term_is_linear_in_w() {
        let mut n = net(vec![3], 4, 1);
        let u0v = vec![0.3, -0.2, 0.9, 0.1];
        let run = |n: &CrossNetwork| {
            let g = Graph::new();
            let u0 = g.constant(1, 4, u0v.clone()).unwrap();
            let u = n.cross(&g, u0).unwrap();
            g.value(u)
        };
        let base = run(&n);
        n.weights[0].data_mut().iter_mut().for_each(|v| *v *= 3.0);
        let scaled = run(&n);
        // non-residual term is base - u0 - b (b = 0)
        for i in 0..4 {
            let t1 = base[i] - u0v[i];
            let t3 = scaled[i] - u0v[i];
            assert!((t3 - 3.0 * t1).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_adaptive_network_outputs_exact_zero() {
        let mut r = rng::stream(5, "ada");
        let ada = AdaptiveNetwork::new(6, 4, &mut r);
        assert_eq!(ada.layer0.fan_out(), 6);
        for k in 0..20 {
            let u: Vec<f64> = (0..6).map(|i| ((i + k) as f64).sin() * 10.0).collect();
            let out = ada.adapt(&u).unwrap();
            assert!(out.iter().all(|v| v.to_bits() == 0));
        }
    }

    #[test]
    fn perturbed_adaptive_network_is_nonzero() {
        let mut r = rng::stream(5, "ada");
        let mut ada = AdaptiveNetwork::new(3, 3, &mut r);
        ada.layer1.weight.data_mut()[0] = 0.5;
        let out = ada.adapt(&[1.0, -1.0, 0.5]).unwrap();
        assert!(out.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn adaptive_final_layer_gradient_matches_finite_difference_at_zero_init() {
        let mut r = rng::stream(11, "ada");
        let mut ada = AdaptiveNetwork::new(3, 2, &mut r);
        let u = vec![0.4, -0.7, 1.3];
        let target = [0.3, -0.5];
        let loss_of = |ada: &AdaptiveNetwork| -> f64 {
            let out = ada.adapt(&u).unwrap();
            out.iter().zip(&target).map(|(o, t)| (o - t) * (o - t)).sum()
        };
        let g = Graph::new();
        let uv = g.constant(1, 3, u.clone()).unwrap();
        let out = ada.forward(&g, uv).unwrap();
        let t = g.constant(1, 2, target.to_vec()).unwrap();
        let d = g.sub(out, t).unwrap();
        let sq = g.square(d).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic = grads.for_param(ada.layer1.weight.id()).unwrap().to_vec();
        assert!(analytic.iter().any(|v| v.abs() > 1e-6));
        let h = 1e-5;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = ada.layer1.weight.data()[i];
            ada.layer1.weight.data_mut()[i] = orig + h;
            let lp = loss_of(&ada);
            ada.layer1.weight.data_mut()[i] = orig - h;
            let lm = loss_of(&ada);
            ada.layer1.weight.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - a).abs() <= 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {a}");
        }
    }
}
