//! Config parsing, synthetic workloads and the subcommands behind the CLI.

pub mod commands;
pub mod config;
pub mod workload;

pub use commands::{run, Command};
pub use config::{HarnessConfig, WorkloadMode, PRESETS};
pub use workload::WorkloadGenerator;
