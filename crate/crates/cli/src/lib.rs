//! Command-line driver for the uap-sentinel pipeline.
//!
//! Stages: `synth`, `train-classifier`, `gen-uaps`, `train-detector`,
//! `calibrate`, `train-baseline`, `eval`, and `pipeline` which chains them.
//! Every stage reads its prerequisites from, and writes its artifacts to,
//! the output directory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod model_file;
pub mod stages;

pub use commands::{run, CliError, Command, Options};
pub use config::RunConfig;
