use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class means with a shared covariance, plus a single global Gaussian, all
/// fitted on one class subset.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub class_means: BTreeMap<usize, DVector<f64>>,
    /// Shared covariance before regularization.
    pub covariance: DMatrix<f64>,
    pub global_mean: DVector<f64>,
    pub global_covariance: DMatrix<f64>,
    pub epsilon: f64,
    shared: Cholesky<f64, Dyn>,
    global: Cholesky<f64, Dyn>,
}

fn regularized(cov: &DMatrix<f64>, epsilon: f64) -> Result<Cholesky<f64, Dyn>> {
    let d = cov.nrows();
    let m = cov + DMatrix::identity(d, d) * epsilon;
    Cholesky::new(m).ok_or(Error::NotPositiveDefinite { epsilon })
}

/// Fits class means and the shared covariance (mean of the per-class centered
/// second moments) over the samples whose label lies in `class_subset`.
///
/// With `epsilon = None` the ridge is `1e-6 * trace / d`, or `1e-6` when the
/// covariance vanishes.
pub fn fit_gaussian_stats(
    features: &[Vec<f64>],
    labels: &[usize],
    class_subset: &[usize],
    epsilon: Option<f64>,
) -> Result<GaussianStats> {
    if features.len() != labels.len() {
        return Err(Error::invalid("features", "features and labels differ in length"));
    }
    let d = features.first().map(Vec::len).unwrap_or(0);
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("features", "inconsistent or empty feature dimension"));
    }
    let mut groups: BTreeMap<usize, Vec<DVector<f64>>> = BTreeMap::new();
    for (f, &l) in features.iter().zip(labels) {
        if class_subset.contains(&l) {
            groups.entry(l).or_default().push(DVector::from_column_slice(f));
        }
    }
    let n: usize = groups.values().map(Vec::len).sum();
    if n < 2 {
        return Err(Error::invalid("features", "at least two samples in the subset are required"));
    }
    if let Some(&c) = class_subset.iter().find(|c| !groups.contains_key(c)) {
        return Err(Error::invalid("features", format!("class {c} has no samples")));
    }
    let mut cov = DMatrix::zeros(d, d);
    let mut class_means = BTreeMap::new();
    let mut global_mean = DVector::zeros(d);
    for (&c, xs) in &groups {
        let mean = xs.iter().fold(DVector::zeros(d), |acc, x| acc + x) / xs.len() as f64;
        for x in xs {
            let r = x - &mean;
            cov += &r * r.transpose();
            global_mean += x;
        }
        class_means.insert(c, mean);
    }
    cov /= n as f64;
    global_mean /= n as f64;
    let mut global_covariance = DMatrix::zeros(d, d);
    for xs in groups.values() {
        for x in xs {
            let r = x - &global_mean;
            global_covariance += &r * r.transpose();
        }
    }
    global_covariance /= n as f64;
    let epsilon = match epsilon {
        Some(e) if e < 0.0 || !e.is_finite() => return Err(Error::invalid("epsilon", "must be finite and >= 0")),
        Some(e) => e,
        None => {
            let e = 1e-6 * cov.trace() / d as f64;
            if e > 0.0 { e } else { 1e-6 }
        }
    };
    let shared = regularized(&cov, epsilon)?;
    let global = regularized(&global_covariance, epsilon)?;
    Ok(GaussianStats {
        class_means,
        covariance: cov,
        global_mean,
        global_covariance,
        epsilon,
        shared,
        global,
    })
}

fn squared_distance(chol: &Cholesky<f64, Dyn>, x: &DVector<f64>, mean: &DVector<f64>) -> f64 {
    let r = x - mean;
    let y = chol.l_dirty().solve_lower_triangular(&r).expect("positive definite factor");
    y.norm_squared()
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.global_mean.len()
    }

    /// Squared Mahalanobis distance to every class mean under the shared covariance.
    pub fn class_distances(&self, x: &DVector<f64>) -> Vec<f64> {
        self.class_means.values().map(|m| squared_distance(&self.shared, x, m)).collect()
    }

    pub fn min_distance(&self, x: &DVector<f64>) -> f64 {
        self.class_distances(x).into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn global_distance(&self, x: &DVector<f64>) -> f64 {
        squared_distance(&self.global, x, &self.global_mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MahalanobisVariant {
    /// `+ min` distance to the head classes.
    ToHead,
    /// `- min` distance to the tail classes.
    ToTail,
    /// Head distance minus tail distance.
    TailMinusHead,
    /// `+ min` over head classes of class distance minus global distance.
    RelativeHead,
}

/// Stats for the head subset and, for tail-aware variants, the tail subset.
#[derive(Debug, Clone)]
pub struct MahalanobisModel {
    pub head: Option<GaussianStats>,
    pub tail: Option<GaussianStats>,
}

pub fn mahalanobis_score(feature: &[f64], model: &MahalanobisModel, variant: MahalanobisVariant) -> Result<f64> {
    let need = |s: Option<&'_ GaussianStats>, which: &str| -> Result<()> {
        let s = s.ok_or_else(|| Error::invalid("mahalanobis", format!("{variant:?} needs {which} statistics")))?;
        if s.dim() != feature.len() {
            return Err(Error::invalid(
                "feature",
                format!("dimension {} but statistics have {}", feature.len(), s.dim()),
            ));
        }
        Ok(())
    };
    let (head, tail) = (model.head.as_ref(), model.tail.as_ref());
    match variant {
        MahalanobisVariant::ToHead | MahalanobisVariant::RelativeHead => need(head, "head")?,
        MahalanobisVariant::ToTail => need(tail, "tail")?,
        MahalanobisVariant::TailMinusHead => {
            need(head, "head")?;
            need(tail, "tail")?;
        }
    }
    let x = DVector::from_column_slice(feature);
    Ok(match variant {
        MahalanobisVariant::ToHead => head.expect("checked").min_distance(&x),
        MahalanobisVariant::ToTail => -tail.expect("checked").min_distance(&x),
        MahalanobisVariant::TailMinusHead => {
            head.expect("checked").min_distance(&x) - tail.expect("checked").min_distance(&x)
        }
        MahalanobisVariant::RelativeHead => {
            let h = head.expect("checked");
            let g = h.global_distance(&x);
            h.class_distances(&x).into_iter().map(|d| d - g).fold(f64::INFINITY, f64::min)
        }
    })
}
