//! Library side of the `optperf-sim` binary: configuration ingestion,
//! command implementations, and report emission.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{cmd_gns_check, cmd_run, cmd_solve, exit_code};
pub use config::RunConfig;
