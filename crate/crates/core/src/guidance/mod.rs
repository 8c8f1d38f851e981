//! Latent optimization through the full sampler against an auxiliary
//! classifier, and batch generation of tail-class images.

mod generate;
mod objective;
mod optimize;

pub use generate::{generate_tail_set, run_seed, FailedRun, GeneratedSet};
pub use objective::{guidance_objective, objective_from_logits, objective_tensor, GuidanceClassifier, Objective};
pub use optimize::{
    initial_latent, optimize_latent, optimize_latents, GradientMemory, GuidanceConfig, GuidanceTrace, LatentOptimizer,
    TraceRecord,
};
