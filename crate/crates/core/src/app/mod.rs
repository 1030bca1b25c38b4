//! Experiment harness: data loading, configuration, sweeps and reports.

pub mod config;
pub mod data;
pub mod report;
pub mod sweep;

pub use config::{ExperimentConfig, PhiChoice, BUNDLED_IRIS};
pub use data::load_csv;
pub use report::{emit_report, load_report, parse_results};
pub use sweep::{prepare, run_alpha_sweep, run_functional_sweep, Prepared, SweepKind, SweepReport, SweepRow};
