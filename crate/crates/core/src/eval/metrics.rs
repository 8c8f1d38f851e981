//! Detection and classification metrics. OOD (tail) is the positive class
//! and larger scores mean more OOD.

use crate::error::{Error, Result};

fn split_scores(scores: &[f64], is_ood: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != is_ood.len() {
        return Err(Error::invalid(
            "scores",
            format!("{} scores for {} labels", scores.len(), is_ood.len()),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores", "non-finite score"));
    }
    let pos: Vec<f64> = scores.iter().zip(is_ood).filter(|(_, &o)| o).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(is_ood).filter(|(_, &o)| !o).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("labels", "both OOD and ID samples are required"));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUROC with ties counted one half.
pub fn auroc(scores: &[f64], is_ood: &[bool]) -> Result<f64> {
    let (pos, mut neg) = split_scores(scores, is_ood)?;
    neg.sort_by(f64::total_cmp);
    // 2 * wins + ties, as an integer.
    let mut twice_u: u128 = 0;
    for p in &pos {
        let below = neg.partition_point(|n| n < p);
        let not_above = neg.partition_point(|n| n <= p);
        twice_u += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(twice_u as f64 / (2.0 * pos.len() as f64 * neg.len() as f64))
}

/// Score threshold reaching `tpr_target` on the OOD samples, using `score >= t`.
pub fn threshold_at_tpr(scores: &[f64], is_ood: &[bool], tpr_target: f64) -> Result<f64> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::invalid("tpr target", format!("{tpr_target} outside (0, 1]")));
    }
    let (mut pos, _) = split_scores(scores, is_ood)?;
    pos.sort_by(|a, b| b.total_cmp(a));
    let n = pos.len();
    // Smallest k with k / n >= target; the k-th largest OOD score is the largest
    // threshold admitting at least k positives.
    let mut k = ((tpr_target * n as f64).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / n as f64 >= tpr_target {
        k -= 1;
    }
    while k < n && (k as f64 / n as f64) < tpr_target {
        k += 1;
    }
    Ok(pos[k - 1])
}

/// False positive rate on ID samples at the threshold reaching `tpr_target`.
pub fn fpr_at_tpr(scores: &[f64], is_ood: &[bool], tpr_target: f64) -> Result<f64> {
    let t = threshold_at_tpr(scores, is_ood, tpr_target)?;
    let (_, neg) = split_scores(scores, is_ood)?;
    let fp = neg.iter().filter(|&&s| s >= t).count();
    Ok(fp as f64 / neg.len() as f64)
}

/// Mean per-class recall over `class_subset`.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize], class_subset: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(
            "predictions",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    if class_subset.is_empty() {
        return Err(Error::invalid("class subset", "empty"));
    }
    let mut total = 0.0;
    for &c in class_subset {
        let mut n = 0usize;
        let mut hit = 0usize;
        for (&p, &l) in predictions.iter().zip(labels) {
            if l == c {
                n += 1;
                hit += usize::from(p == c);
            }
        }
        if n == 0 {
            return Err(Error::invalid("labels", format!("class {c} has no samples")));
        }
        total += hit as f64 / n as f64;
    }
    Ok(total / class_subset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[3.0, 4.0, 1.0, 2.0], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.8, 0.3], &[true, false, true]).unwrap(), 0.5);
        assert!(auroc(&[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn fpr_examples() {
        let lab = [true, true, true, true, false, false];
        assert_eq!(fpr_at_tpr(&[4.0, 3.0, 2.0, 1.0, 0.5, 0.4], &lab, 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &lab, 0.95).unwrap(), 1.0);
        // Threshold 1 keeps all OOD samples; only the ID score 2.5 lies above it.
        assert_eq!(fpr_at_tpr(&[4.0, 3.0, 2.0, 1.0, 2.5, 0.5], &lab, 0.95).unwrap(), 0.5);
        assert_eq!(threshold_at_tpr(&[4.0, 3.0, 2.0, 1.0, 2.5, 0.5], &lab, 0.95).unwrap(), 1.0);
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[0, 1, 2], &[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0, 0], &[0, 1], &[0, 1]).unwrap(), 0.5);
        let mut pred = Vec::new();
        let mut lab = Vec::new();
        for (c, hits) in [(0usize, 9usize), (1, 6), (2, 3)] {
            for i in 0..10 {
                lab.push(c);
                pred.push(if i < hits { c } else { (c + 1) % 3 });
            }
        }
        assert!((balanced_accuracy(&pred, &lab, &[0, 1, 2]).unwrap() - 0.6).abs() < 1e-12);
        assert!(balanced_accuracy(&pred, &lab, &[5]).is_err());
    }
}
