//! The complete run configuration: one TOML document with a section per
//! module. Unknown keys are rejected and every value is validated on load.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalConfig;
use crate::fusion::FusionConfig;
use crate::mapping::MappingConfig;
use crate::pipeline::PipelineSettings;
use crate::preprocess::PreprocessConfig;
use crate::registration::GicpConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid {section} settings: {message}")]
    Invalid { section: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub preprocess: PreprocessConfig,
    pub fusion: FusionConfig,
    pub registration: GicpConfig,
    pub mapping: MappingConfig,
    pub pipeline: PipelineSettings,
    pub eval: EvalConfig,
}

fn invalid(section: &'static str, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        section,
        message: e.to_string(),
    }
}

impl Config {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: single_line(&e.to_string()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.preprocess.validate().map_err(|e| invalid("preprocess", e))?;
        self.fusion.validate().map_err(|e| invalid("fusion", e))?;
        self.registration.validate().map_err(|e| invalid("registration", e))?;
        self.mapping.validate().map_err(|e| invalid("mapping", e))?;
        let p = &self.pipeline;
        if !(p.fga_window > 0.0 && p.fga_angle_tol > 0.0) {
            return Err(invalid("pipeline", "fga_window and fga_angle_tol must be positive"));
        }
        if !(p.gap_timeout > 0.0 && p.gap_emit_period > 0.0) {
            return Err(invalid("pipeline", "gap_timeout and gap_emit_period must be positive"));
        }
        let e = &self.eval;
        if !(e.assoc_tol >= 0.0 && e.map_icp_max_dist > 0.0 && e.map_icp_iterations >= 1 && e.map_icp_epsilon > 0.0) {
            return Err(invalid("eval", "tolerances must be positive"));
        }
        Ok(())
    }
}

/// Collapses a multi-line diagnostic into one line.
pub fn single_line(s: &str) -> String {
    s.split('\n')
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.chars().all(|c| c == '|' || c == '^' || c == ' '))
        .collect::<Vec<_>>()
        .join(" ")
}
