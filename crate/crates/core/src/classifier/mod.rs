//! Auxiliary, baseline and final classifiers: long-tail losses, reweighting,
//! residual conv nets and checkpoint selection.

mod config;
pub mod losses;
mod model;
mod train;

pub use config::{ClassifierConfig, ReweightMode, ReweightSpec, Schedule};
pub use losses::{cb_weights, coarse_probs, focal_loss, hod_loss, ldam_margins, LossKind, LossSpec};
pub use model::{init_resnet, ArchSpec, HeadKind, Predictions, ResNet};
pub use train::{
    classification_metrics, metric_log_csv, p_tail_of, predict, select_best, train_classifier, train_classifier_on,
    Checkpoint, LogRow, TrainOutcome, ValMetrics,
};
