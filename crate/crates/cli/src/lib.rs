//! Config parsing and subcommands behind the `enscontrol` binary.

pub mod commands;
pub mod config;

pub use commands::{run, Command, RunOptions};
pub use config::{Instance, RunConfig};
