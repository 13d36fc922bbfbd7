//! Experiment harness behind the `sortblock` binary.

mod commands;
mod config;
pub mod csvio;

pub use commands::*;
pub use config::*;
