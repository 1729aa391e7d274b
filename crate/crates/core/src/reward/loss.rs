//! Group-wise reward objective: ideal distribution from labels, softmax
//! distribution from scores, and a Bernoulli cross-entropy between them.

use crate::error::{Error, Result};
use crate::numerics::scalar::softmax;
use crate::numerics::{Graph, Var};

/// Clamp applied to predicted probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// `p_i = y_i / Σ y_j`.
pub fn ideal_distribution(labels: &[u8]) -> Result<Vec<f64>> {
    let pos = labels.iter().filter(|&&y| y != 0).count();
    if pos == 0 {
        return Err(Error::Degenerate("group has no positive label".into()));
    }
    Ok(labels
        .iter()
        .map(|&y| if y != 0 { 1.0 / pos as f64 } else { 0.0 })
        .collect())
}

/// Softmax over the group's scores.
pub fn predicted_distribution(scores: &[f64]) -> Vec<f64> {
    softmax(scores)
}

/// `−Σ [p log p̂ + (1−p) log(1−p̂)]` with `p̂` clamped to `[1e-12, 1−1e-12]`.
pub fn rm_group_loss(p: &[f64], p_hat: &[f64]) -> Result<f64> {
    if p.len() != p_hat.len() {
        return Err(Error::dim(
            "rm_group_loss",
            format!("{} vs {} entries", p.len(), p_hat.len()),
        ));
    }
    Ok(-p
        .iter()
        .zip(p_hat)
        .map(|(&pi, &qi)| {
            let q = qi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            pi * q.ln() + (1.0 - pi) * (1.0 - q).ln()
        })
        .sum::<f64>())
}

/// Mean group loss for a `groups × N` score matrix.
pub fn group_loss(g: &Graph, scores: Var, labels: &[Vec<u8>]) -> Result<Var> {
    let (rows, n) = g.shape(scores);
    if rows != labels.len() || labels.iter().any(|l| l.len() != n) {
        return Err(Error::dim(
            "rm_group_loss",
            format!("{rows}x{n} scores for {} label rows", labels.len()),
        ));
    }
    let mut p = Vec::with_capacity(rows * n);
    for l in labels {
        p.extend(ideal_distribution(l)?);
    }
    let q = g.softmax(scores, 1)?;
    let log_q = g.ln_clamped(q, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let one_minus_q = g.affine(q, -1.0, 1.0)?;
    let log_1mq = g.ln_clamped(one_minus_q, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let pc = g.constant(rows, n, p.clone())?;
    let qc = g.constant(rows, n, p.iter().map(|v| 1.0 - v).collect())?;
    let a = g.mul(pc, log_q)?;
    let b = g.mul(qc, log_1mq)?;
    let total = g.add(a, b)?;
    let s = g.sum(total)?;
    g.scale(s, -1.0 / rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ideal_distribution_examples() {
        assert_eq!(
            ideal_distribution(&[1, 1, 0, 0, 0]).unwrap(),
            vec![0.5, 0.5, 0.0, 0.0, 0.0]
        );
        assert_eq!(ideal_distribution(&[1, 0, 0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(ideal_distribution(&[1, 1, 1]).unwrap(), vec![1.0 / 3.0; 3]);
        assert!(matches!(ideal_distribution(&[0, 0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn predicted_distribution_closed_form() {
        let q = predicted_distribution(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        for (a, b) in q.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(predicted_distribution(&[0.3; 5])
            .iter()
            .all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn loss_hand_anchor_and_perfect_match() {
        let v = rm_group_loss(&[0.5, 0.5, 0.0], &[1.0 / 3.0; 3]).unwrap();
        // −2·[0.5 ln(1/3) + 0.5 ln(2/3)] − ln(2/3)
        let oracle = -(0.5 * (1.0f64 / 3.0).ln() + 0.5 * (2.0f64 / 3.0).ln()) * 2.0 - (2.0f64 / 3.0).ln();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 1.909_542_504_884_438_8).abs() < 1e-9);
        let z = rm_group_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(z.abs() < 1e-11);
        assert!(rm_group_loss(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn graph_loss_matches_scalar_loss() {
        let scores = [0.3, -0.2, 0.9, 0.1, 0.0];
        let labels = vec![vec![1, 0, 1, 0, 0]];
        let g = Graph::new();
        let s = g.constant(1, 5, scores.to_vec()).unwrap();
        let l = group_loss(&g, s, &labels).unwrap();
        let p = ideal_distribution(&labels[0]).unwrap();
        let direct = rm_group_loss(&p, &predicted_distribution(&scores)).unwrap();
        assert!((g.scalar(l) - direct).abs() < 1e-14);
    }
}
