//! Experiment harness: JSON configs, run directories, diagnostics, reports
//! and the self-verification suite behind the `safe` binary.

pub mod config;
pub mod diagnose;
pub mod error;
pub mod problems;
pub mod report;
pub mod run;
pub mod verify;

pub use config::{apply_override, DataSpec, DenseConfig, Diagnostics, ExperimentConfig, MethodConfig};
pub use error::{HarnessError, Result};
pub use problems::TestProblemSpec;
pub use report::{export_report, magnitude_histogram, ReportOutcome};
pub use run::{run_experiment, AggregateSummary, RunOutcome, SeedSummary};
pub use verify::{verify_suite, Scope, VerifyOptions, VerifyReport};
