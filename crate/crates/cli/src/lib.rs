//! Batch runner for EP-ABC experiments: JSON configs in, posterior
//! summaries and plot-ready CSV out.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure
//! during inference, 4 file or data error.

// `!(x > 0.0)` guards are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compare;
pub mod config;
pub mod error;
pub mod problem;
pub mod run;

pub use config::{load_config, parse_config, ExperimentConfig, LoadedConfig};
pub use error::{CliError, CliResult};
pub use run::{run, RunOptions, RunSummary};
