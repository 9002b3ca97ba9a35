//! Config-driven experiment runs and their reports.

mod config;
mod report;
mod runner;

pub use config::{
    Architecture, CalibrationConfig, DatasetConfig, ExperimentConfig, GeometryOptions, MetricKind,
    ModelRef, StatsConfig, TaskConfig,
};
pub use report::{version_string, MetricReport, MetricRow, Provenance, CSV_COLUMNS, FULL};
pub use runner::{
    calibrate_for, conditions, derive_seed, pairs_for, run_experiment, synthetic_keypoints,
    Condition, RunOutput, CACHE_ENV,
};
