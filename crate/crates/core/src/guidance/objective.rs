use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::classifier::losses::{log_softmax, softmax};
use crate::classifier::ResNet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `-ln p(target | x)`.
    TargetConfidence,
    /// Shannon entropy of the softmax.
    Entropy,
}

/// Classifier differentiated through during guidance.
pub trait GuidanceClassifier {
    /// Logits `(B, K)` for images `(B, 3, S, S)`.
    fn logits(&self, images: &Tensor) -> Result<Tensor>;

    fn image_size(&self) -> Option<usize> {
        None
    }
}

impl GuidanceClassifier for ResNet {
    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        ResNet::logits(self, images)
    }
}

pub fn objective_from_logits(logits: &[f64], objective: Objective, target: Option<usize>) -> Result<f64> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("logits", "non-finite value"));
    }
    match objective {
        Objective::TargetConfidence => {
            let t = target.ok_or_else(|| Error::invalid("guidance", "target_class_id is required"))?;
            if t >= logits.len() {
                return Err(Error::invalid("guidance", format!("target {t} outside {} classes", logits.len())));
            }
            Ok(-log_softmax(logits)[t])
        }
        Objective::Entropy => {
            let lp = log_softmax(logits);
            Ok(-softmax(logits).iter().zip(&lp).map(|(p, l)| if *p > 0.0 { p * l } else { 0.0 }).sum::<f64>())
        }
    }
}

/// Per-sample objective values `(B,)` for a logit batch.
pub fn objective_tensor(logits: &Tensor, objective: Objective, target: Option<usize>) -> Result<Tensor> {
    let lsm = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    match objective {
        Objective::TargetConfidence => {
            let t = target.ok_or_else(|| Error::invalid("guidance", "target_class_id is required"))?;
            Ok(lsm.narrow(1, t, 1)?.squeeze(1)?.neg()?)
        }
        Objective::Entropy => Ok((lsm.exp()? * &lsm)?.sum(1)?.neg()?),
    }
}

/// Objective of the classifier on `image`, one value per batch entry.
pub fn guidance_objective(
    image: &Tensor,
    classifier: &dyn GuidanceClassifier,
    objective: Objective,
    target: Option<usize>,
) -> Result<Tensor> {
    objective_tensor(&classifier.logits(image)?, objective, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_examples() {
        let mut sure = vec![-800.0; 5];
        sure[2] = 800.0;
        assert_eq!(objective_from_logits(&sure, Objective::TargetConfidence, Some(2)).unwrap(), 0.0);
        assert_eq!(objective_from_logits(&sure, Objective::Entropy, None).unwrap(), 0.0);
        let uni = vec![0.3; 6];
        assert!((objective_from_logits(&uni, Objective::Entropy, None).unwrap() - 6f64.ln()).abs() < 1e-12);
        // p = 0.4 for the target: logits ln 0.4 and ln 0.6.
        let z = [0.4f64.ln(), 0.6f64.ln()];
        let l = objective_from_logits(&z, Objective::TargetConfidence, Some(0)).unwrap();
        assert!((l + 0.4f64.ln()).abs() < 1e-12 && (l - 0.9163).abs() < 1e-4);
        assert!(objective_from_logits(&z, Objective::TargetConfidence, None).is_err());
    }
}
