//! Library side of the `mtcb` binary: run configuration and subcommands.

pub mod commands;
pub mod config;
