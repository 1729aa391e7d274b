//! Central finite-difference checks of analytic parameter gradients.

use crate::numerics::{Graph, Parameterized, Var};
use crate::rng::{standard_normal, stream};

/// Step used by the checks.
pub const STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator so near-zero gradients
/// are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Adds `0.1·N(0,1)` to every parameter. Zero-initialised layers otherwise
/// block the gradient of everything upstream of them.
pub fn perturb<M: Parameterized>(model: &mut M, seed: u64) {
    let mut r = stream(seed, "gradcheck/perturb");
    for (_, t) in model.params_mut() {
        for v in t.data_mut() {
            *v += 0.1 * standard_normal(&mut r);
        }
    }
}

/// Largest relative error between the backward pass and central differences
/// of `loss`, over every coordinate of every parameter of `model`.
/// Parameters the loss does not reach count as having zero gradient.
pub fn max_param_error<M: Parameterized>(model: &mut M, loss: impl Fn(&M, &Graph) -> Var) -> f64 {
    let g = Graph::new();
    let l = loss(model, &g);
    let grads = g.backward(l).expect("scalar loss");
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|(_, t)| {
            grads
                .for_param(t.id())
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    let value = |m: &M| {
        let g = Graph::new();
        let l = loss(m, &g);
        g.scalar(l)
    };
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        for (i, &ai) in a.iter().enumerate() {
            let orig = model.params()[k].1.data()[i];
            model.params_mut()[k].1.data_mut()[i] = orig + STEP;
            let lp = value(model);
            model.params_mut()[k].1.data_mut()[i] = orig - STEP;
            let lm = value(model);
            model.params_mut()[k].1.data_mut()[i] = orig;
            worst = worst.max(rel_err(ai, (lp - lm) / (2.0 * STEP)));
        }
    }
    worst
}
