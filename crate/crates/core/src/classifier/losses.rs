//! Long-tail losses and class weights.
//!
//! Scalar functions work on plain slices and are the reference definitions;
//! the `*_per_sample` tensor versions are what training differentiates.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::corpus::ClassTaxonomy;
use crate::error::{Error, Result};

/// Floor applied to probabilities inside every logarithm.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Focal,
    Ldam,
    Hod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::ldam_max_margin")]
    pub ldam_max_margin: f64,
    #[serde(default = "defaults::ldam_scale")]
    pub ldam_scale: f64,
    #[serde(default = "defaults::hod_lambda")]
    pub hod_lambda: f64,
}

mod defaults {
    pub fn gamma() -> f64 {
        2.0
    }
    pub fn ldam_max_margin() -> f64 {
        0.5
    }
    pub fn ldam_scale() -> f64 {
        30.0
    }
    pub fn hod_lambda() -> f64 {
        0.1
    }
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            gamma: defaults::gamma(),
            ldam_max_margin: defaults::ldam_max_margin(),
            ldam_scale: defaults::ldam_scale(),
            hod_lambda: defaults::hod_lambda(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid("loss spec", "gamma must be >= 0"));
        }
        if !(self.ldam_max_margin > 0.0) || !(self.ldam_scale > 0.0) {
            return Err(Error::invalid("loss spec", "LDAM margin and scale must be > 0"));
        }
        if !(self.hod_lambda >= 0.0) {
            return Err(Error::invalid("loss spec", "hod_lambda must be >= 0"));
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid("label", format!("{label} out of range {}", logits.len())));
    }
    Ok(-log_softmax(logits)[label])
}

/// Mean of `(1 - p)^gamma * -ln p` over per-sample true-class probabilities.
pub fn focal_loss(probs_target: &[f64], gamma: f64) -> Result<f64> {
    if probs_target.is_empty() {
        return Err(Error::invalid("focal loss", "empty batch"));
    }
    if !(gamma >= 0.0) {
        return Err(Error::invalid("focal loss", "gamma must be >= 0"));
    }
    let mut total = 0.0;
    for &p in probs_target {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid("focal loss", format!("probability {p} outside [0, 1]")));
        }
        let w = if gamma == 0.0 { 1.0 } else { (1.0 - p).powf(gamma) };
        total += w * -p.max(PROB_EPS).ln();
    }
    Ok(total / probs_target.len() as f64)
}

/// Margins proportional to `n^(-1/4)`, scaled so the rarest class gets `max_margin`.
pub fn ldam_margins(class_counts: &[usize], max_margin: f64) -> Result<Vec<f64>> {
    if class_counts.is_empty() || class_counts.contains(&0) {
        return Err(Error::invalid("class counts", "every class needs at least one sample"));
    }
    if !(max_margin > 0.0) {
        return Err(Error::invalid("ldam max margin", "must be > 0"));
    }
    let raw: Vec<f64> = class_counts.iter().map(|&n| (n as f64).powf(-0.25)).collect();
    let top = raw.iter().copied().fold(0.0, f64::max);
    Ok(raw.into_iter().map(|m| m * max_margin / top).collect())
}

/// Class-balanced weights `(1 - beta) / (1 - beta^n)`, normalized to mean 1.
pub fn cb_weights(class_counts: &[usize], beta: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid("beta", format!("{beta} outside [0, 1)")));
    }
    if class_counts.is_empty() || class_counts.contains(&0) {
        return Err(Error::invalid("class counts", "every class needs at least one sample"));
    }
    let raw = cb_weights_unnormalized(class_counts, beta);
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

pub(crate) fn cb_weights_unnormalized(class_counts: &[usize], beta: f64) -> Vec<f64> {
    class_counts
        .iter()
        .map(|&n| (1.0 - beta) / (1.0 - beta.powi(n as i32)))
        .collect()
}

/// Head and tail probability mass of a softmax vector.
pub fn coarse_probs(probs: &[f64], taxonomy: &ClassTaxonomy) -> Result<(f64, f64)> {
    if probs.len() != taxonomy.n_classes() {
        return Err(Error::invalid(
            "probabilities",
            format!("{} entries for {} classes", probs.len(), taxonomy.n_classes()),
        ));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid("probabilities", format!("sum to {total}, not 1")));
    }
    let tail: f64 = taxonomy.tail_ids.iter().map(|&i| probs[i]).sum();
    let head: f64 = taxonomy.head_ids.iter().map(|&i| probs[i]).sum();
    Ok((head, tail))
}

/// Fine cross-entropy plus `lambda` times the head-vs-tail cross-entropy.
pub fn hod_loss(logits: &[f64], label: usize, taxonomy: &ClassTaxonomy, lambda: f64) -> Result<f64> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("logits", "non-finite value"));
    }
    let fine = cross_entropy(logits, label)?;
    if lambda == 0.0 {
        return Ok(fine);
    }
    let (head, tail) = coarse_probs(&softmax(logits), taxonomy)?;
    let group = if taxonomy.is_tail(label) { tail } else { head };
    Ok(fine + lambda * -group.max(PROB_EPS).ln())
}

fn label_tensor(labels: &[usize], device: &candle_core::Device) -> Result<Tensor> {
    let v: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    Ok(Tensor::from_vec(v, labels.len(), device)?)
}

fn one_hot(labels: &[usize], n_classes: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut v = vec![0f64; labels.len() * n_classes];
    for (i, &l) in labels.iter().enumerate() {
        v[i * n_classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), n_classes), device)?.to_dtype(dtype)?)
}

fn gather_rows(t: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let idx = label_tensor(labels, t.device())?.unsqueeze(1)?;
    Ok(t.gather(&idx, 1)?.squeeze(1)?)
}

pub fn ce_per_sample(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let lsm = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok(gather_rows(&lsm, labels)?.neg()?)
}

pub fn focal_per_sample(logits: &Tensor, labels: &[usize], gamma: f64) -> Result<Tensor> {
    let logp = gather_rows(&candle_nn::ops::log_softmax(logits, D::Minus1)?, labels)?;
    let logp = logp.maximum(PROB_EPS.ln())?;
    let nll = logp.neg()?;
    if gamma == 0.0 {
        return Ok(nll);
    }
    let one_minus = (1.0 - logp.exp()?)?.clamp(0.0, 1.0)?;
    Ok((one_minus.powf(gamma)? * nll)?)
}

/// Cross-entropy of `scale * (z - margin_y * onehot_y)`.
pub fn ldam_per_sample(z: &Tensor, labels: &[usize], margins: &[f64], scale: f64) -> Result<Tensor> {
    let (_, c) = z.dims2()?;
    let margin_rows: Vec<f64> = labels.iter().map(|&l| margins[l]).collect();
    let m = Tensor::from_vec(margin_rows, (labels.len(), 1), z.device())?.to_dtype(z.dtype())?;
    let shifted = (z - one_hot(labels, c, z.dtype(), z.device())?.broadcast_mul(&m)?)?;
    ce_per_sample(&(shifted * scale)?, labels)
}

pub fn hod_per_sample(logits: &Tensor, labels: &[usize], tail_mask: &[bool], lambda: f64) -> Result<Tensor> {
    let fine = ce_per_sample(logits, labels)?;
    if lambda == 0.0 {
        return Ok(fine);
    }
    let probs = candle_nn::ops::softmax(logits, D::Minus1)?;
    let c = tail_mask.len();
    let mask: Vec<f64> = tail_mask.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, (1, c), logits.device())?.to_dtype(logits.dtype())?;
    let p_tail = probs.broadcast_mul(&mask)?.sum(1)?;
    let p_head = probs.broadcast_mul(&(1.0 - &mask)?)?.sum(1)?;
    let is_tail: Vec<u8> = labels.iter().map(|&l| u8::from(tail_mask[l])).collect();
    let is_tail = Tensor::from_vec(is_tail, labels.len(), logits.device())?;
    let group = is_tail.where_cond(&p_tail, &p_head)?;
    let coarse = group.maximum(PROB_EPS)?.log()?.neg()?;
    Ok((fine + (coarse * lambda)?)?)
}

/// Batch loss for a [`LossSpec`], optionally weighted per class.
///
/// `margins` is required for LDAM and `tail_mask` for HOD. With weights the
/// result is `mean_i(w[y_i] * l_i)`.
pub fn batch_loss(
    spec: &LossSpec,
    z: &Tensor,
    labels: &[usize],
    class_weights: Option<&[f64]>,
    margins: Option<&[f64]>,
    tail_mask: &[bool],
) -> Result<Tensor> {
    let per = match spec.kind {
        LossKind::CrossEntropy => ce_per_sample(z, labels)?,
        LossKind::Focal => focal_per_sample(z, labels, spec.gamma)?,
        LossKind::Ldam => {
            let m = margins.ok_or_else(|| Error::invalid("ldam loss", "margins missing"))?;
            ldam_per_sample(z, labels, m, spec.ldam_scale)?
        }
        LossKind::Hod => hod_per_sample(z, labels, tail_mask, spec.hod_lambda)?,
    };
    let per = match class_weights {
        Some(w) => {
            let rows: Vec<f64> = labels.iter().map(|&l| w[l]).collect();
            let w = Tensor::from_vec(rows, labels.len(), z.device())?.to_dtype(z.dtype())?;
            (per * w)?
        }
        None => per,
    };
    Ok(per.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn tax(n_head: usize, n_tail: usize) -> ClassTaxonomy {
        let n = n_head + n_tail;
        ClassTaxonomy::new(
            (0..n).map(|i| format!("c{i}")).collect(),
            (0..n_head).collect(),
            (n_head..n).collect(),
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn focal_examples() {
        assert_eq!(focal_loss(&[1.0], 3.0).unwrap(), 0.0);
        let ln2 = std::f64::consts::LN_2;
        assert!((focal_loss(&[0.5], 0.0).unwrap() - ln2).abs() < 1e-15);
        // (1 - 0.5)^2 * ln 2
        assert!((focal_loss(&[0.5], 2.0).unwrap() - 0.25 * ln2).abs() < 1e-15);
        assert!((focal_loss(&[0.5], 2.0).unwrap() - 0.1733).abs() < 1e-4);
        assert!(focal_loss(&[0.0], 2.0).unwrap().is_finite());
    }

    #[test]
    fn ldam_margin_examples() {
        let m = ldam_margins(&[1, 16], 0.5).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-15 && (m[1] - 0.25).abs() < 1e-15);
        let m = ldam_margins(&[1, 81], 0.3).unwrap();
        assert!((m[0] - 0.3).abs() < 1e-15 && (m[1] - 0.1).abs() < 1e-15);
        assert_eq!(ldam_margins(&[7, 7, 7], 0.5).unwrap(), vec![0.5; 3]);
        assert!(ldam_margins(&[3, 0], 0.5).is_err());
    }

    #[test]
    fn cb_weight_examples() {
        assert_eq!(cb_weights(&[1000, 10, 3], 0.0).unwrap(), vec![1.0; 3]);
        let eq = cb_weights(&[50, 50], 0.999).unwrap();
        assert!(eq.iter().all(|w| (w - 1.0).abs() < 1e-15));
        let raw = cb_weights_unnormalized(&[1000, 10], 0.99);
        let expect0 = 0.01 / (1.0 - 0.99f64.powi(1000));
        let expect1 = 0.01 / (1.0 - 0.99f64.powi(10));
        assert!((raw[0] - expect0).abs() < 1e-15 && (raw[1] - expect1).abs() < 1e-15);
        assert!((raw[0] - 0.01000).abs() < 1e-5 && (raw[1] - 0.10458).abs() < 1e-5);
        assert!(cb_weights(&[3, 4], 1.0).is_err());
    }

    #[test]
    fn coarse_prob_examples() {
        let t = tax(4, 12);
        let (h, tail) = coarse_probs(&[1.0 / 16.0; 16], &t).unwrap();
        assert!((tail - 0.75).abs() < 1e-12 && (h + tail - 1.0).abs() < 1e-12);
        let mut one = vec![0.0; 16];
        one[2] = 1.0;
        assert_eq!(coarse_probs(&one, &t).unwrap(), (1.0, 0.0));
        let (_, tail) = coarse_probs(&[0.5, 0.3, 0.1, 0.1], &tax(2, 2)).unwrap();
        assert!((tail - 0.2).abs() < 1e-12);
        assert!(coarse_probs(&[0.5, 0.3, 0.1, 0.2], &tax(2, 2)).is_err());
    }

    #[test]
    fn hod_examples() {
        let t = tax(4, 12);
        let z = vec![0.0; 16];
        let got = hod_loss(&z, 1, &t, 1.0).unwrap();
        let expect = 16f64.ln() + 4f64.ln();
        assert!((got - expect).abs() < 1e-12);
        assert_eq!(hod_loss(&z, 1, &t, 0.0).unwrap(), cross_entropy(&z, 1).unwrap());
        let mut peaked = vec![-1e3; 16];
        peaked[5] = 1e3;
        assert!(hod_loss(&peaked, 5, &t, 2.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn tensor_losses_match_scalar_definitions() {
        let dev = Device::Cpu;
        let t = tax(2, 2);
        let rows = [[0.3, -1.2, 2.0, 0.1], [1.5, 0.2, -0.7, 0.4]];
        let labels = [2usize, 0];
        let z = Tensor::new(&rows, &dev).unwrap();
        let hod: Vec<f64> = hod_per_sample(&z, &labels, &t.tail_mask(), 0.7).unwrap().to_vec1().unwrap();
        let focal: Vec<f64> = focal_per_sample(&z, &labels, 2.0).unwrap().to_vec1().unwrap();
        for i in 0..2 {
            let h = hod_loss(&rows[i], labels[i], &t, 0.7).unwrap();
            assert!((hod[i] - h).abs() < 1e-12);
            let p = softmax(&rows[i])[labels[i]];
            let f = focal_loss(&[p], 2.0).unwrap();
            assert!((focal[i] - f).abs() < 1e-12);
        }
        let margins = [0.5, 0.4, 0.3, 0.2];
        let ldam: Vec<f64> = ldam_per_sample(&z, &labels, &margins, 2.0).unwrap().to_vec1().unwrap();
        let mut shifted = rows[0];
        shifted[2] -= 0.3;
        let expect = cross_entropy(&shifted.map(|v| 2.0 * v), 2).unwrap();
        assert!((ldam[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn weighted_batch_loss() {
        let dev = Device::Cpu;
        let z = Var::new(&[[0.0f64, 1.0], [2.0, 0.0]], &dev).unwrap();
        let spec = LossSpec::new(LossKind::CrossEntropy);
        let w = [2.0, 0.5];
        let l: f64 = batch_loss(&spec, &z, &[0, 1], Some(&w), None, &[false, true])
            .unwrap()
            .to_scalar()
            .unwrap();
        let expect = (2.0 * cross_entropy(&[0.0, 1.0], 0).unwrap()
            + 0.5 * cross_entropy(&[2.0, 0.0], 1).unwrap())
            / 2.0;
        assert!((l - expect).abs() < 1e-12);
    }
}
