use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How often an independently trained classifier recognizes the intended
/// class of each synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAudit {
    pub n_images: usize,
    /// Fraction of images predicted as their intended class.
    pub accuracy: f64,
    pub per_class: BTreeMap<usize, f64>,
    /// `confusion[intended][predicted]` over all classes.
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy and confusion counts from oracle predictions of synthetic
/// images against the classes they were generated for.
pub fn oracle_audit(predicted: &[usize], intended: &[usize], n_classes: usize) -> Result<OracleAudit> {
    if predicted.is_empty() {
        return Err(Error::invalid("oracle audit", "empty synthetic set"));
    }
    if predicted.len() != intended.len() {
        return Err(Error::invalid("oracle audit", "prediction and label counts differ"));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in predicted.iter().zip(intended) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::invalid("oracle audit", format!("class id outside 0..{n_classes}")));
        }
        confusion[t][p] += 1;
    }
    let mut per_class = BTreeMap::new();
    let mut hits = 0;
    for (t, row) in confusion.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total > 0 {
            per_class.insert(t, row[t] as f64 / total as f64);
            hits += row[t];
        }
    }
    Ok(OracleAudit {
        n_images: predicted.len(),
        accuracy: hits as f64 / predicted.len() as f64,
        per_class,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_rates() {
        let a = oracle_audit(&[2, 2, 0, 3], &[2, 2, 3, 3], 4).unwrap();
        assert_eq!(a.accuracy, 0.75);
        assert_eq!(a.per_class[&2], 1.0);
        assert_eq!(a.per_class[&3], 0.5);
        assert_eq!(a.confusion[3][0], 1);
        assert!(oracle_audit(&[], &[], 4).is_err());
    }
}
