//! Crowd aggregation of uploaded recordings.
//!
//! Recordings are grouped per app. Before any metric is computed, names seen
//! in only one recording of an app are discarded, so a single accidental
//! upload cannot expose personal domains.

mod analysis;
pub mod api;
mod store;

use std::path::PathBuf;

use thiserror::Error;

use crate::cooccurrence::CoOccurrenceError;
use crate::minimizer::SchemaViolation;

pub use analysis::{
    app_report, candidate_names, cohort_deltas, comparison_table, detect_tracker_candidates, domain_listing,
    prune_unique_domains, report_from_view, summarize, AppReport, DomainRow, Metric, MetricDelta, MetricSummary,
    PrunedRecording, PrunedView, TrackerCandidate,
};
pub use store::{AppDetail, Aggregator, CohortDiff, Group, GroupMembers, GroupReport};

pub const DEFAULT_MIN_APPS: usize = 5;

#[derive(Debug, Error)]
pub enum AggError {
    #[error(transparent)]
    Schema(#[from] SchemaViolation),
    #[error("payload exceeds {0} bytes")]
    PayloadTooLarge(usize),
    #[error("unknown app {0}")]
    UnknownApp(String),
    #[error("unknown sort key {0:?}")]
    UnknownSortKey(String),
    #[error("group has no members with recordings")]
    EmptyGroup,
    #[error("unknown group {0}")]
    UnknownGroup(String),
    #[error("no recordings tagged {0:?}")]
    MissingCohort(String),
    #[error("unknown recording {0}")]
    UnknownRecording(String),
    #[error("{0}")]
    InvalidParam(String),
    #[error(transparent)]
    CoOccurrence(#[from] CoOccurrenceError),
    #[error("corrupt store file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AggError {
    /// Stable machine-readable error name.
    pub fn kind(&self) -> &'static str {
        match self {
            AggError::Schema(_) => "schema_violation",
            AggError::PayloadTooLarge(_) => "payload_too_large",
            AggError::UnknownApp(_) => "unknown_app",
            AggError::UnknownSortKey(_) => "unknown_sort_key",
            AggError::EmptyGroup => "empty_group",
            AggError::UnknownGroup(_) => "unknown_group",
            AggError::MissingCohort(_) => "missing_cohort",
            AggError::UnknownRecording(_) => "unknown_recording",
            AggError::InvalidParam(_) => "invalid_parameter",
            AggError::CoOccurrence(CoOccurrenceError::TargetNotFound(_)) => "target_not_found",
            AggError::CoOccurrence(_) => "invalid_parameter",
            AggError::Corrupt { .. } | AggError::Io(_) => "internal",
        }
    }
}
