//! File formats, experiment orchestration and the command-line front end
//! for the lesion synthesis toolkit.

pub use lesion_synth_core as core;

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod figures;
pub mod lvol;
pub mod manifest;
pub mod run;
pub mod synth;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
