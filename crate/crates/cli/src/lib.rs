//! Library side of the `aqetuner` binary: config loading, commands and
//! reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use commands::{cmd_correlate, cmd_report, cmd_tune, cmd_warmstart, Overrides};
pub use config::SessionConfig;
pub use error::{CliError, ExitKind};
