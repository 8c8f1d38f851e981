use std::path::{Path, PathBuf};

use super::objective::GuidanceClassifier;
use super::optimize::{optimize_latents, GuidanceConfig};
use crate::corpus::synthetic::write_metadata;
use crate::corpus::{save_tensor_png, ClassTaxonomy, SyntheticRecord};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// A run that raised an error instead of producing an image.
#[derive(Debug, Clone, PartialEq)]
pub struct FailedRun {
    pub class_id: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct GeneratedSet {
    pub records: Vec<SyntheticRecord>,
    pub failures: Vec<FailedRun>,
}

impl GeneratedSet {
    pub fn threshold_met_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let met = self
            .records
            .iter()
            .filter(|r| r.termination == crate::corpus::Termination::ThresholdMet)
            .count();
        met as f64 / self.records.len() as f64
    }
}

/// Seed of run `index` for `class_id`, distinct across classes and runs.
pub fn run_seed(base: u64, class_id: usize, index: usize) -> u64 {
    SplitMix64::labelled(base, &format!("generate/{class_id}/{index}")).next()
}

/// Guided generation of `per_class_n` images for every tail class into
/// `out_dir`, with `metadata.csv` alongside. Images that miss the confidence
/// threshold are kept and flagged.
pub fn generate_tail_set(
    denoiser: &Denoiser,
    classifier: &dyn GuidanceClassifier,
    taxonomy: &ClassTaxonomy,
    per_class_n: usize,
    template: &GuidanceConfig,
    out_dir: &Path,
) -> Result<GeneratedSet> {
    if per_class_n == 0 {
        return Err(Error::invalid("per_class_n", "must be >= 1"));
    }
    let (unet, cond) = denoiser.network(false)?;
    let size = unet.image_size();
    let mut out = GeneratedSet::default();
    for class_id in taxonomy.tail() {
        let mut config = template.clone();
        config.target_class_id = Some(class_id);
        let seeds: Vec<u64> = (0..per_class_n).map(|i| run_seed(template.seed, class_id, i)).collect();
        let tokens = cond.tokens(&[Some(class_id)])?;
        let runs = optimize_latents(&unet, &tokens, classifier, &config, &denoiser.schedule, size, &seeds)?;
        let name = taxonomy.name(class_id).to_string();
        for (i, (seed, run)) in seeds.iter().zip(runs).enumerate() {
            match run {
                Ok(trace) => {
                    let rel = PathBuf::from(&name).join(format!("{i:04}.png"));
                    save_tensor_png(&trace.final_image, &out_dir.join(&rel))?;
                    out.records.push(SyntheticRecord {
                        class_id,
                        seed: *seed,
                        final_confidence: trace.final_confidence(),
                        termination: trace.termination,
                        steps_used: trace.steps_used,
                        path: rel,
                    });
                }
                Err(e) => {
                    log::warn!("class {class_id} seed {seed}: {e}");
                    out.failures.push(FailedRun {
                        class_id,
                        seed: *seed,
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    write_metadata(out_dir, &out.records)?;
    Ok(out)
}
