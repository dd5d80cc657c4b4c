//! Exact AUC-ROC (Mann-Whitney statistic, ties credited one half) and head
//! evaluation.

use crate::error::{arg_err, Error, Result};
use crate::head::{image_logits, LinearHead};
use crate::store::PatchFeatureSet;

/// Scores paired with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLabels {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return arg_err(format!("{} scores but {} labels", scores.len(), labels.len()));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Validation(format!("label {l} is not binary")));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Validation("scores contain NaN".into()));
        }
        Ok(ScoredLabels { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// `P(score_pos > score_neg) + 0.5 * P(tie)` over all positive/negative pairs.
///
/// Sort-based, `O(n log n)`. Pair counts are accumulated as integers and
/// divided once, so the result is exact up to that final division.
pub fn auc_roc(sl: &ScoredLabels) -> Result<f64> {
    let n_pos = sl.labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = sl.labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return arg_err("AUC-ROC needs at least one positive and one negative");
    }
    let mut idx: Vec<usize> = (0..sl.scores.len()).collect();
    idx.sort_by(|&a, &b| sl.scores[a].total_cmp(&sl.scores[b]));

    // twice the Mann-Whitney U: 2 per win, 1 per tie
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        // -0.0 and 0.0 compare equal as scores
        while j < idx.len() && sl.scores[idx[j]] == sl.scores[idx[i]] {
            if sl.labels[idx[j]] == 1 { pos += 1 } else { neg += 1 }
            j += 1;
        }
        twice_u += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Convenience wrapper over slices.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    auc_roc(&ScoredLabels::new(scores.to_vec(), labels.to_vec())?)
}

/// Image-level AUC-ROC of `head` on globally pooled grids.
///
/// Scores are the head's logits, which rank images identically to the
/// sigmoid outputs but never saturate into ties.
pub fn evaluate_head(head: &LinearHead, ds: &PatchFeatureSet) -> Result<f64> {
    auc(&image_logits(head, ds)?, &ds.labels())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut wins, mut ties, mut pairs) = (0u64, 0u64, 0u64);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1;
                    if si > sj {
                        wins += 1;
                    } else if si == sj {
                        ties += 1;
                    }
                }
            }
        }
        (2 * wins + ties) as f64 / (2 * pairs) as f64
    }

    #[test]
    fn hand_example() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn all_ties_and_perfect() {
        assert_eq!(auc(&[2.0; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.2, 0.9, 1.5], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 1.5, 0.1, 0.2], &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn single_class_and_bad_input() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::Argument(_))));
        assert!(matches!(auc(&[0.1], &[1, 0]), Err(Error::Argument(_))));
        assert!(matches!(auc(&[0.1, f64::NAN], &[1, 0]), Err(Error::Validation(_))));
        assert!(matches!(auc(&[0.1, 0.3], &[2, 0]), Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn matches_pairwise_and_complements(
            data in prop::collection::vec((0u8..4, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 * 0.25).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| *l as u8).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let a = auc(&scores, &labels).unwrap();
            prop_assert_eq!(a, pairwise(&scores, &labels));
            let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            prop_assert!((a + auc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-15);
        }

        #[test]
        fn invariant_under_monotone_transform(
            data in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| *l as u8).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let warped: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() + 3.0).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&warped, &labels).unwrap());
        }
    }
}
