use serde::{Deserialize, Serialize};

use super::losses::{LossKind, LossSpec};
use super::model::{ArchSpec, HeadKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReweightMode {
    None,
    CbReweight,
    Crt,
    Drw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReweightSpec {
    pub mode: ReweightMode,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub drw_start_epoch: usize,
    /// Epochs of classifier re-training in CRT mode.
    #[serde(default = "default_crt_epochs")]
    pub crt_epochs: usize,
}

fn default_beta() -> f64 {
    0.999
}

fn default_crt_epochs() -> usize {
    5
}

impl ReweightSpec {
    pub fn new(mode: ReweightMode) -> Self {
        Self {
            mode,
            beta: default_beta(),
            drw_start_epoch: 0,
            crt_epochs: default_crt_epochs(),
        }
    }
}

impl Default for ReweightSpec {
    fn default() -> Self {
        Self::new(ReweightMode::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub architecture_id: String,
    /// Overrides the preset's widths and depths when set.
    #[serde(default)]
    pub architecture: Option<ArchSpec>,
    pub n_classes: usize,
    pub epochs: usize,
    pub base_learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub loss_spec: LossSpec,
    #[serde(default)]
    pub reweight_spec: ReweightSpec,
    pub seed: u64,
    /// Epochs between validation checkpoints; the last epoch always gets one.
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    pub image_size: usize,
    #[serde(default = "default_flip")]
    pub augment_flip: bool,
    #[serde(default = "default_tpr")]
    pub tpr_target: f64,
}

fn default_weight_decay() -> f64 {
    5e-4
}
fn default_schedule() -> Schedule {
    Schedule::Cosine
}
fn default_batch_size() -> usize {
    64
}
fn default_eval_interval() -> usize {
    5
}
fn default_flip() -> bool {
    true
}
fn default_tpr() -> f64 {
    0.95
}

impl ClassifierConfig {
    /// Desk-scale defaults with plain cross-entropy.
    pub fn desk(n_classes: usize, image_size: usize, seed: u64) -> Self {
        Self {
            architecture_id: "desk".into(),
            architecture: None,
            n_classes,
            epochs: 30,
            base_learning_rate: 1e-3,
            weight_decay: default_weight_decay(),
            schedule: Schedule::Cosine,
            batch_size: default_batch_size(),
            loss_spec: LossSpec::new(LossKind::CrossEntropy),
            reweight_spec: ReweightSpec::default(),
            seed,
            eval_interval: default_eval_interval(),
            image_size,
            augment_flip: true,
            tpr_target: default_tpr(),
        }
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        match &self.architecture {
            Some(a) => Ok(a.clone()),
            None => ArchSpec::preset(&self.architecture_id),
        }
    }

    pub fn head_kind(&self) -> HeadKind {
        if self.loss_spec.kind == LossKind::Ldam {
            HeadKind::Cosine
        } else {
            HeadKind::Linear
        }
    }

    /// Multiplier from raw head outputs to logits.
    pub fn output_scale(&self) -> f64 {
        if self.loss_spec.kind == LossKind::Ldam {
            self.loss_spec.ldam_scale
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch()?.validate()?;
        self.loss_spec.validate()?;
        if self.n_classes < 2 {
            return Err(Error::invalid("classifier config", "n_classes must be >= 2"));
        }
        if self.epochs == 0 || !(self.base_learning_rate > 0.0) {
            return Err(Error::invalid("classifier config", "epochs and base_learning_rate must be > 0"));
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.image_size < 4 {
            return Err(Error::invalid("classifier config", "batch_size, eval_interval and image_size must be positive"));
        }
        let rw = &self.reweight_spec;
        if !(0.0..1.0).contains(&rw.beta) {
            return Err(Error::invalid("reweight spec", "beta must lie in [0, 1)"));
        }
        if rw.mode == ReweightMode::Drw && rw.drw_start_epoch >= self.epochs {
            return Err(Error::invalid("reweight spec", "drw_start_epoch must be < epochs"));
        }
        if rw.mode == ReweightMode::Crt && rw.crt_epochs == 0 {
            return Err(Error::invalid("reweight spec", "crt_epochs must be > 0"));
        }
        if !(self.tpr_target > 0.0 && self.tpr_target <= 1.0) {
            return Err(Error::invalid("classifier config", "tpr_target must lie in (0, 1]"));
        }
        Ok(())
    }
}
