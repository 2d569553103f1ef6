//! Experiment harness behind the `mkge` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::DataError;
use crate::eval::EvalError;
use crate::model::ModelError;
use crate::train::TrainError;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use commands::{cmd_ablate, cmd_eval, cmd_sweep, cmd_synth, cmd_train, EvalOptions, RunSummary, TrainOptions};
pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("digest mismatch: {0}")]
    DigestMismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
