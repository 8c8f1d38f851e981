//! Detection and classification metrics, seed aggregation and reports.

mod audit;
mod metrics;
mod report;

pub use audit::{oracle_audit, OracleAudit};
pub use metrics::{auroc, balanced_accuracy, fpr_at_tpr, threshold_at_tpr};
pub use report::{aggregate_seeds, confusion_csv, EvalReport, MeanStd, ReportRow, SeedMetrics, REPORT_METRICS};
