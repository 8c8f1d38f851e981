use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::losses::{LossKind, LossSpec};
use crate::classifier::{ClassifierConfig, ReweightMode, ReweightSpec};
use crate::corpus::{CorpusSpec, IngestSpec, InclusionPolicy};
use crate::diffusion::{DiffusionTrainConfig, LoraConfig, ScheduleKind, UNetConfig};
use crate::error::{Error, IoContext, Result};
use crate::guidance::{GuidanceConfig, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ce,
    CeRw,
    CeHod,
    CeCrt,
    Focal,
    FocalRw,
    Ldam,
    LdamRw,
    LdamRwDrw,
    FgEntropy,
    LogexLoraOnly,
    Logex,
    /// Listed in reports only.
    DreamOod,
}

pub const ALL_METHODS: [Method; 12] = [
    Method::Ce,
    Method::CeRw,
    Method::CeHod,
    Method::CeCrt,
    Method::Focal,
    Method::FocalRw,
    Method::Ldam,
    Method::LdamRw,
    Method::LdamRwDrw,
    Method::FgEntropy,
    Method::LogexLoraOnly,
    Method::Logex,
];

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ce => "ce",
            Method::CeRw => "ce_rw",
            Method::CeHod => "ce_hod",
            Method::CeCrt => "ce_crt",
            Method::Focal => "focal",
            Method::FocalRw => "focal_rw",
            Method::Ldam => "ldam",
            Method::LdamRw => "ldam_rw",
            Method::LdamRwDrw => "ldam_rw_drw",
            Method::FgEntropy => "fg_entropy",
            Method::LogexLoraOnly => "logex_lora_only",
            Method::Logex => "logex",
            Method::DreamOod => "dream_ood",
        }
    }

    pub fn uses_synthetic(self) -> bool {
        matches!(self, Method::FgEntropy | Method::LogexLoraOnly | Method::Logex)
    }

    pub fn is_implemented(self) -> bool {
        self != Method::DreamOod
    }

    /// Which generated images enter the training set.
    pub fn inclusion(self) -> InclusionPolicy {
        match self {
            Method::FgEntropy => InclusionPolicy::All,
            _ => InclusionPolicy::ThresholdMetOnly,
        }
    }

    /// Guidance settings for the generation stage, from the shared template.
    pub fn guidance(self, template: &GuidanceConfig) -> Option<GuidanceConfig> {
        let mut g = template.clone();
        match self {
            Method::Logex => {}
            Method::LogexLoraOnly => g.max_outer_steps = 0,
            Method::FgEntropy => g.objective = Objective::Entropy,
            _ => return None,
        }
        Some(g)
    }

    /// Training configuration for this method's final classifier.
    pub fn classifier(self, template: &ClassifierConfig) -> ClassifierConfig {
        let mut c = template.clone();
        let (loss, mode) = match self {
            Method::Ce | Method::FgEntropy | Method::LogexLoraOnly | Method::Logex | Method::DreamOod => {
                (LossKind::CrossEntropy, ReweightMode::None)
            }
            Method::CeRw => (LossKind::CrossEntropy, ReweightMode::CbReweight),
            Method::CeHod => (LossKind::Hod, ReweightMode::None),
            Method::CeCrt => (LossKind::CrossEntropy, ReweightMode::Crt),
            Method::Focal => (LossKind::Focal, ReweightMode::None),
            Method::FocalRw => (LossKind::Focal, ReweightMode::CbReweight),
            Method::Ldam => (LossKind::Ldam, ReweightMode::None),
            Method::LdamRw => (LossKind::Ldam, ReweightMode::CbReweight),
            Method::LdamRwDrw => (LossKind::Ldam, ReweightMode::Drw),
        };
        c.loss_spec = LossSpec {
            kind: loss,
            ..template.loss_spec.clone()
        };
        c.reweight_spec = ReweightSpec {
            mode,
            drw_start_epoch: if mode == ReweightMode::Drw {
                template.reweight_spec.drw_start_epoch.max(template.epochs * 2 / 3)
            } else {
                template.reweight_spec.drw_start_epoch
            },
            ..template.reweight_spec.clone()
        };
        c
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ALL_METHODS
            .iter()
            .chain(std::iter::once(&Method::DreamOod))
            .find(|m| m.as_str() == s)
            .copied()
            .ok_or_else(|| Error::invalid("method", format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CorpusSource {
    Toy(CorpusSpec),
    Folder(IngestSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionStageConfig {
    pub unet: UNetConfig,
    pub t_max: usize,
    pub schedule: ScheduleKind,
    pub train: DiffusionTrainConfig,
}

/// Classifier trained on a balanced rendering of the toy corpus and used
/// only to audit synthetic images after the fact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub per_class: usize,
    pub classifier: ClassifierConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub corpus: CorpusSource,
    /// Template for every classifier; loss and reweighting come from the method.
    pub classifier: ClassifierConfig,
    pub diffusion: DiffusionStageConfig,
    pub lora: LoraConfig,
    /// Template for guided generation; target class is set per run.
    pub guidance: GuidanceConfig,
    pub synthetic_per_class: usize,
    /// Images generated per tail class; defaults to `synthetic_per_class`.
    #[serde(default)]
    pub generated_per_class: Option<usize>,
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Extra synthetic counts evaluated for the logex method.
    #[serde(default)]
    pub sweep_per_class: Vec<usize>,
    /// One auxiliary classifier and one generated set serve all seeds.
    #[serde(default)]
    pub share_generation_across_seeds: bool,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
}

impl ExperimentConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::invalid("experiment config", "name must be a plain directory name"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("experiment config", "method list is empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("experiment config", "seed list is empty"));
        }
        self.classifier.validate()?;
        self.diffusion.unet.validate()?;
        self.diffusion.train.validate()?;
        self.lora.validate()?;
        self.guidance.validate()?;
        if self.generated_per_class() == 0 {
            return Err(Error::invalid("experiment config", "generated_per_class must be >= 1"));
        }
        if let CorpusSource::Toy(spec) = &self.corpus {
            spec.validate()?;
            if spec.image_size != self.classifier.image_size || spec.image_size != self.diffusion.unet.image_size {
                return Err(Error::invalid(
                    "experiment config",
                    "corpus, classifier and denoiser image sizes differ",
                ));
            }
        }
        Ok(())
    }

    pub fn generated_per_class(&self) -> usize {
        let need = self.sweep_per_class.iter().copied().chain([self.synthetic_per_class]).max().unwrap_or(0);
        self.generated_per_class.unwrap_or(need)
    }

    /// Resolved classifier settings for `method` and `seed`.
    pub fn classifier_for(&self, method: Method, seed: u64, n_classes: usize) -> ClassifierConfig {
        let mut c = method.classifier(&self.classifier);
        c.seed = seed;
        c.n_classes = n_classes;
        c
    }

    /// Seed of the auxiliary classifier and generated set serving `seed`.
    pub fn generation_seed(&self, seed: u64) -> u64 {
        if self.share_generation_across_seeds {
            self.seeds[0]
        } else {
            seed
        }
    }

    /// Toy-corpus experiment at desk scale with every method.
    pub fn desk(name: &str) -> Self {
        let spec = CorpusSpec {
            image_size: 16,
            ..CorpusSpec::default()
        };
        let n = spec.n_classes;
        let size = spec.image_size;
        Self {
            name: name.into(),
            classifier: ClassifierConfig::desk(n, size, 0),
            diffusion: DiffusionStageConfig {
                unet: UNetConfig::desk(size),
                t_max: 1000,
                schedule: ScheduleKind::Cosine,
                train: DiffusionTrainConfig::desk(0),
            },
            lora: LoraConfig::desk(0),
            guidance: GuidanceConfig::target_confidence(0, 0),
            synthetic_per_class: 25,
            generated_per_class: None,
            methods: ALL_METHODS.to_vec(),
            seeds: default_seeds(),
            sweep_per_class: vec![],
            share_generation_across_seeds: false,
            oracle: None,
            corpus: CorpusSource::Toy(spec),
        }
    }
}

/// `<root>/<experiment>`, with the root taken from `LOGEX_ROOT` when set.
pub fn experiment_dir(root: Option<&Path>, name: &str) -> PathBuf {
    let root = root
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("experiments"));
    root.join(name)
}

pub const ROOT_ENV: &str = "LOGEX_ROOT";
