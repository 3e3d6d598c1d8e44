//! Orchestration behind the `crlsc` binary: run configuration, run
//! directories with JSON-lines metrics, and one function per subcommand.

pub mod commands;
pub mod config;
pub mod run;

pub use commands::{CliError, SkbSource};
pub use config::{ConfigError, RunConfig};
pub use run::{run_id, MetricsRecord, Run};
