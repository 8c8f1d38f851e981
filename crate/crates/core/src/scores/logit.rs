//! Logit-based scores. Every score is oriented so that larger means more OOD.

use serde::{Deserialize, Serialize};

use crate::classifier::losses::softmax;
use crate::corpus::ClassTaxonomy;
use crate::error::{Error, Result};

/// Which class subset a score is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Low confidence on the head classes signals OOD.
    Head,
    /// High confidence on the tail classes signals OOD.
    Tail,
}

impl Side {
    fn sign(self) -> f64 {
        match self {
            Side::Head => -1.0,
            Side::Tail => 1.0,
        }
    }
}

fn check_subset(logits: &[f64], subset: &[usize]) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::invalid("class subset", "empty"));
    }
    if let Some(&c) = subset.iter().find(|&&c| c >= logits.len()) {
        return Err(Error::invalid("class subset", format!("class {c} outside {} logits", logits.len())));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("logits", "non-finite value"));
    }
    Ok(())
}

/// Softmax over all classes, max over the subset: `-max` for head, `+max` for tail.
pub fn msp_score(logits: &[f64], subset: &[usize], side: Side) -> Result<f64> {
    check_subset(logits, subset)?;
    let p = softmax(logits);
    let m = subset.iter().map(|&c| p[c]).fold(f64::NEG_INFINITY, f64::max);
    Ok(side.sign() * m)
}

pub fn p_tail_score(logits: &[f64], taxonomy: &ClassTaxonomy) -> Result<f64> {
    if logits.len() != taxonomy.n_classes() {
        return Err(Error::invalid(
            "logits",
            format!("{} logits for {} classes", logits.len(), taxonomy.n_classes()),
        ));
    }
    check_subset(logits, &taxonomy.tail())?;
    let p = softmax(logits);
    Ok(taxonomy.tail_ids.iter().map(|&c| p[c]).sum())
}

/// Free energy `-T * logsumexp(z / T)` restricted to the subset.
pub fn free_energy(logits: &[f64], subset: &[usize], temperature: f64) -> Result<f64> {
    check_subset(logits, subset)?;
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature", format!("{temperature} must be > 0")));
    }
    let scaled: Vec<f64> = subset.iter().map(|&c| logits[c] / temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scaled.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(-temperature * lse)
}

/// `+energy` over the head classes, `-energy` over the tail classes.
pub fn energy_score(logits: &[f64], subset: &[usize], temperature: f64, side: Side) -> Result<f64> {
    Ok(-side.sign() * free_energy(logits, subset, temperature)?)
}

/// `-max` logit over the head classes, `+max` over the tail classes.
pub fn maxlogit_score(logits: &[f64], subset: &[usize], side: Side) -> Result<f64> {
    check_subset(logits, subset)?;
    let m = subset.iter().map(|&c| logits[c]).fold(f64::NEG_INFINITY, f64::max);
    Ok(side.sign() * m)
}
