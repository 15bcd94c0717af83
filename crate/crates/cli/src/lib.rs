//! Library surface of the command-line front end: run configuration
//! parsing and the subcommand implementations, kept callable so the
//! integration suite can drive them directly.

pub mod commands;
pub mod config;
