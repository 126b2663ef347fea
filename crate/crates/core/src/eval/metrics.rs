//! Ranking and threshold metrics over video-level scores.

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dims("scores vs labels", labels.len(), scores.len()));
    }
    if scores.is_empty() {
        return Err(Error::Empty("no scores".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score".into()));
    }
    Ok(())
}

/// Indices sorted by descending score, grouped into runs of equal scores.
fn tie_groups_desc(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve as the normalized Mann–Whitney statistic with
/// midranks for ties: `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid("ROC-AUC needs both positive and negative labels".into()));
    }
    // ascending ranks: walk the descending groups from the back
    let groups = tie_groups_desc(scores);
    let mut next_rank = 1.0;
    let mut pos_rank_sum = 0.0;
    for g in groups.iter().rev() {
        let midrank = next_rank + (g.len() as f64 - 1.0) / 2.0;
        pos_rank_sum += midrank * g.iter().filter(|&&i| labels[i]).count() as f64;
        next_rank += g.len() as f64;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Non-interpolated average precision `Σ (R_k − R_{k−1})·P_k` over the
/// descending-score cut points; tied scores enter together.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::Invalid("average precision needs at least one positive".into()));
    }
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    for g in tie_groups_desc(scores) {
        let new_tp = g.iter().filter(|&&i| labels[i]).count();
        tp += new_tp;
        seen += g.len();
        if new_tp > 0 {
            ap += (new_tp as f64 / n_pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// Fraction of items where `(score ≥ threshold) == label`.
pub fn accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_inputs(scores, labels)?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == l)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// ROC points `(fpr, tpr)` from (0,0) to (1,1), one per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::Invalid("ROC curve needs both positive and negative labels".into()));
    }
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for g in tie_groups_desc(scores) {
        for i in g {
            if labels[i] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        points.push((fp / n_neg, tp / n_pos));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc_auc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]).unwrap(), 0.25);
        assert!(average_precision(&[0.9], &[false]).is_err());
        // ties enter together: both at the top, one positive → P = 1/2
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.9, 0.1], &[true, false], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.2, 0.1, 0.0], &[true, true, false], 0.0).unwrap(), 2.0 / 3.0);
        assert_eq!(accuracy(&[0.5], &[true], 0.5).unwrap(), 1.0);
        assert!(accuracy(&[], &[], 0.5).is_err());
    }

    #[test]
    fn roc_curve_endpoints() {
        let pts = roc_curve(&[0.9, 0.4, 0.4, 0.1], &[true, false, true, false]).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
        assert_eq!(pts.len(), 4);
    }

    proptest! {
        #[test]
        fn auc_complement_without_ties(scores in proptest::collection::hash_set(-1000i32..1000, 2..20), seed in any::<u64>()) {
            let scores: Vec<f64> = scores.into_iter().map(|s| s as f64).collect();
            let labels: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&neg, &labels).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(scores in proptest::collection::vec(-5i32..5, 2..20), seed in any::<u64>()) {
            let scores: Vec<f64> = scores.into_iter().map(|s| s as f64).collect();
            let labels: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let t: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() + 2.0).collect();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&t, &labels).unwrap());
        }

        #[test]
        fn predicted_positives_shrink_with_threshold(scores in proptest::collection::vec(0.0f64..1.0, 1..20), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let all_pos = vec![true; scores.len()];
            // with all labels positive, accuracy counts predicted positives
            prop_assert!(accuracy(&scores, &all_pos, hi).unwrap() <= accuracy(&scores, &all_pos, lo).unwrap());
        }
    }
}
