//! Benchmark harness: configuration, scenario construction, parallel runs
//! and reporting.

pub mod config;
pub mod report;
pub mod run;
pub mod scenario;

pub use config::{DatasetConfig, ExperimentConfig, MechanismSection, OutputConfig, Sizes, SCHEMA_VERSION};
pub use report::{report, summarize, Baseline, ReportOutput, SummaryRow};
pub use run::{
    read_records, resolve_output_dir, resolve_workers, run_experiment, scenario_id, Environment, ResultRecord,
    RunOutput,
};
pub use scenario::{build_rep, RepData, Splits, TargetArm};
