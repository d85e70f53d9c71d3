//! Scenario files, run artifacts and the subcommands of the `mmflow` binary.

pub mod commands;
pub mod config;
pub mod io;
