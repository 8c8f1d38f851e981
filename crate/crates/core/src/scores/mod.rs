//! OOD scores on logits and penultimate features.
//!
//! Orientation is uniform: a larger score means the sample looks more like
//! a tail (OOD) sample. Head variants negate confidence-style quantities;
//! tail variants keep them.

mod logit;
mod mahalanobis;
mod table;

pub use logit::{energy_score, free_energy, maxlogit_score, msp_score, p_tail_score, Side};
pub use mahalanobis::{fit_gaussian_stats, mahalanobis_score, GaussianStats, MahalanobisModel, MahalanobisVariant};
pub use table::{score_zoo, ScoreTable, ZOO};
