//! Datasets, metrics and strategy comparison.

mod dataset;
mod metrics;
mod report;
pub mod synth;

use thiserror::Error;

pub use dataset::{
    ingest_csv, ingest_csv_reader, merge_tables, vertical_split, write_csv, write_party_csv, Dataset, LocalRow, PartyTable, SampleId,
};
pub use metrics::{auc, ks};
pub use report::{
    compare_strategies, linear_fit, max_abs_diff, reports_csv, reports_json, run_strategy, subset_sweep, sweep_csv,
    trace_log, write_text, InferenceReport, LatencyReport, LinearFit, ModelMeta, Strategy, SweepPoint, SWEEP_PERCENTS,
};
pub use synth::SyntheticCredit;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("i/o: {0}")]
    Io(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("dataset has no rows")]
    Empty,
    #[error("label column `{0}` not found in header")]
    MissingLabelColumn(String),
    #[error("row {row}, column `{column}`: {reason}")]
    BadCell { row: usize, column: String, reason: String },
    #[error("row {row}: label must be 0 or 1")]
    BadLabel { row: usize },
    #[error("metrics need both classes present")]
    SingleClass,
    #[error("shape: {0}")]
    Shape(String),
}
