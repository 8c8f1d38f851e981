//! Stage orchestration with a hash-keyed run ledger, method suites and
//! report emission.

mod config;
mod ledger;
mod runner;

pub use config::{
    experiment_dir, CorpusSource, DiffusionStageConfig, ExperimentConfig, Method, OracleConfig, ALL_METHODS, ROOT_ENV,
};
pub use ledger::{
    config_diff, config_hash, file_sha256, sha256_hex, Artifact, EntryStatus, LedgerEntry, RunLedger, Stage, LEDGER_FILE,
    STAGES,
};
pub use runner::{
    emit_report, run_method_suite, stage_plan, sweep_csv, CellFailure, GenerationSummary, ReportFormat, Runner,
    StageOutput, SuiteOutcome, SweepPoint, ZooMetrics,
};
