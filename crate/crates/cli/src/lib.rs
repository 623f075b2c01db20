//! Experiment driver for the two-stage vessel segmentation pipeline:
//! phantoms, pseudo-labels, network training, evaluation, pseudo-label
//! comparison and ablations. Each subcommand of the `dbfseg` binary is a
//! thin wrapper over [`pipeline`].

pub mod config;
pub mod pipeline;

pub use config::ExperimentConfig;
