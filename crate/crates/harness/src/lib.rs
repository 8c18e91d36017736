//! Reproducibility shell around `hybrid-core`: run configs, metrics
//! records, the command implementations behind `hybridctl`, and ablations.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod metrics;
pub mod pipeline;
