//! Config-driven experiment pipeline: stages, report tables and the run manifest.

pub mod config;
pub mod report;
pub mod stages;

pub use config::{derive_seed, ExperimentConfig};
pub use report::{emit_report, fmt_sig, Cell, Table};
pub use stages::{run_stage, Context, Stage};
