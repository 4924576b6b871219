//! Experiment harness behind the `kslab` binary.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod reconstruct;
