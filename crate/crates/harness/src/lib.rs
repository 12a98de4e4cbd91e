//! Experiment runner for the entropy-rate likelihood bounds.
//!
//! Reads a TOML experiment file, runs one command and writes CSV, JSON and
//! SVG artifacts tagged with a hash of the fully materialised config.

pub mod commands;
pub mod config;
pub mod outcome;
pub mod svg;
pub mod sweep;

pub use config::{ExperimentConfig, Format, Overrides, Stage};
pub use outcome::{Failure, Outcome};
