//! Front end for the `delayshoot` solver: config parsing, runs and CSV
//! artifacts. The binary is a thin wrapper over this crate.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod run;

pub use config::{parse_config, ConfigError, ProblemPreset, RunConfig};
pub use run::{run_gramian, run_solve, run_sweep, CliError, RunOutcome};
