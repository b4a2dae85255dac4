//! Command-line orchestration: a JSON run config, one cached stage per
//! pipeline step, and the `engage` subcommands that drive them.

pub mod cli;
pub mod config;
pub mod report;
pub mod run;
pub mod stages;

pub use cli::{execute, Cli, Command};
pub use config::RunConfig;
pub use run::{Stage, Status, Workspace};
