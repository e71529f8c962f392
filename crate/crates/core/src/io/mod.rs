//! Files, datasets, scenario scripts, synthetic data and run outputs.

pub mod dataset;
pub mod formats;
pub mod run;
pub mod synth;

use std::path::Path;

use thiserror::Error;

use crate::config::ConfigError;
use crate::eval::EvalError;
use crate::fusion::FusionError;
use crate::pipeline::PipelineError;

pub use dataset::{apply_scenario, load_dataset, Dataset, DatasetManifest, ScenarioAction, ScenarioScript};
pub use formats::{read_clouds, read_trajectory, write_clouds, write_trajectory};
pub use run::{run_dataset, write_run_outputs, RunResult};
pub use synth::{generate_synthetic, write_synthetic, SynthSpec, SyntheticData};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{path}: stamp regression at line {line} ({prev} then {got})")]
    StampRegression { path: String, line: usize, prev: f64, got: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error("synthetic world is degenerate: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: &Path, line: usize, message: impl Into<String>) -> Self {
        Self::Parse {
            path: path.display().to_string(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.display().to_string(),
            message: message.into(),
        }
    }

    /// Bad inputs (files, configs, scripts) as opposed to failures while
    /// running.
    pub fn is_validation(&self) -> bool {
        !matches!(self, IoError::Pipeline(_) | IoError::Io { .. })
    }
}
