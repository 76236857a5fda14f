//! Configuration and subcommand implementations behind the `molrl` binary.

pub mod commands;
pub mod config;

pub use commands::{
    calibrate, evaluate, finetune, prepare, pretrain, sample, synth_toy, CalibrationSummary,
    Dataset,
};
pub use config::{RunConfig, SCHEMA_VERSION};
