//! Rare-class detection with adapted, classifier-guided diffusion.
//!
//! The crate covers the whole workflow: a procedural long-tailed corpus,
//! classifiers trained with long-tail losses, a small conditional denoiser
//! with a deterministic differentiable sampler and low-rank adapters,
//! latent optimization against an auxiliary classifier, OOD scores, metrics,
//! and a cached stage runner that ties them together.

pub mod classifier;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scores;

pub use error::{Error, Result};
