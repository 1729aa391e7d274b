//! Ranking metrics over group records: MAP and group-wise AUC.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::synthdata::GroupRecord;

/// Average precision of one group; `None` without positives. Candidates are
/// ranked by descending score, equal scores by ascending index.
pub fn average_precision(labels: &[u8], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y != 0).count();
    if pos == 0 || labels.len() != scores.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / pos as f64)
}

/// Fraction of correctly ordered positive/negative pairs, ties counting one
/// half; `None` unless the group has both classes.
pub fn group_auc(labels: &[u8], scores: &[f64]) -> Option<f64> {
    if labels.len() != scores.len() {
        return None;
    }
    let pos: Vec<f64> = labels
        .iter()
        .zip(scores)
        .filter(|(y, _)| **y != 0)
        .map(|(_, s)| *s)
        .collect();
    let neg: Vec<f64> = labels
        .iter()
        .zip(scores)
        .filter(|(y, _)| **y == 0)
        .map(|(_, s)| *s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut good = 0.0;
    for p in &pos {
        for n in &neg {
            if p > n {
                good += 1.0;
            } else if p == n {
                good += 0.5;
            }
        }
    }
    Some(good / (pos.len() * neg.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub map: f64,
    pub gauc: f64,
    /// Groups contributing to GAUC.
    pub n_groups: usize,
    /// Groups skipped for lacking a positive or a negative.
    pub n_skipped: usize,
}

impl MetricSummary {
    /// Scores every record and averages AP and AUC over usable groups.
    pub fn evaluate<F>(records: &[GroupRecord], mut scorer: F) -> Result<Self>
    where
        F: FnMut(&GroupRecord) -> Result<Vec<f64>>,
    {
        let mut scores = Vec::with_capacity(records.len());
        for r in records {
            scores.push(scorer(r)?);
        }
        Ok(Self::from_scores(records, &scores))
    }

    pub fn from_scores(records: &[GroupRecord], scores: &[Vec<f64>]) -> Self {
        let (mut ap_sum, mut ap_n) = (0.0, 0usize);
        let (mut auc_sum, mut auc_n, mut skipped) = (0.0, 0usize, 0usize);
        for (r, s) in records.iter().zip(scores) {
            if let Some(ap) = average_precision(&r.labels, s) {
                ap_sum += ap;
                ap_n += 1;
            }
            match group_auc(&r.labels, s) {
                Some(a) => {
                    auc_sum += a;
                    auc_n += 1;
                }
                None => skipped += 1,
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
        MetricSummary {
            map: mean(ap_sum, ap_n),
            gauc: mean(auc_sum, auc_n),
            n_groups: auc_n,
            n_skipped: skipped,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_ranked_example() {
        let y = [1, 0, 1, 0];
        let s = [0.9, 0.8, 0.7, 0.1];
        assert!((average_precision(&y, &s).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((group_auc(&y, &s).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_tied_rankings() {
        assert_eq!(average_precision(&[1, 1, 0], &[3.0, 2.0, 1.0]), Some(1.0));
        assert_eq!(group_auc(&[1, 1, 0], &[3.0, 2.0, 1.0]), Some(1.0));
        assert_eq!(group_auc(&[1, 0, 0, 1], &[0.4; 4]), Some(0.5));
        // ties broken by index: positive at index 0 ranks first
        assert_eq!(average_precision(&[1, 0], &[0.5, 0.5]), Some(1.0));
        assert_eq!(average_precision(&[0, 1], &[0.5, 0.5]), Some(0.5));
    }

    #[test]
    fn degenerate_groups_are_skipped() {
        assert_eq!(average_precision(&[0, 0], &[1.0, 2.0]), None);
        assert_eq!(group_auc(&[1, 1], &[1.0, 2.0]), None);
    }

    proptest::proptest! {
        #[test]
        fn metrics_bounded_and_invariant_under_increasing_maps(
            pairs in proptest::collection::vec((0u8..2, -10.0f64..10.0), 2..9),
        ) {
            let (y, s): (Vec<u8>, Vec<f64>) = pairs.into_iter().unzip();
            let t: Vec<f64> = s.iter().map(|v| (0.7 * v).exp() + v.powi(3)).collect();
            if let Some(ap) = average_precision(&y, &s) {
                proptest::prop_assert!(ap > 0.0 && ap <= 1.0);
                proptest::prop_assert_eq!(Some(ap), average_precision(&y, &t));
            }
            if let Some(auc) = group_auc(&y, &s) {
                proptest::prop_assert!((0.0..=1.0).contains(&auc));
                proptest::prop_assert_eq!(Some(auc), group_auc(&y, &t));
                let flipped: Vec<f64> = s.iter().map(|v| -v).collect();
                let ties = s.iter().enumerate().any(|(i, a)| s[i + 1..].contains(a));
                if !ties {
                    proptest::prop_assert!((group_auc(&y, &flipped).unwrap() - (1.0 - auc)).abs() < 1e-12);
                }
            }
        }
    }
}
