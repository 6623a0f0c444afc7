use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CameraRig, PipelineError};
use crate::exec::Exec;
use crate::filters::{Aabb, FilterParams};
use crate::geometry::{ClassSet, CLASS_BACKGROUND};
use crate::transport::TransportConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Everything the per-frame pipeline and the streamer need.
///
/// Loaded from TOML; every key is optional and falls back to its default.
/// An empty `rig` means "take the rig from the input archive or scene".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Frames per second the streamer will not exceed.
    pub target_rate: f64,
    pub keep_classes: ClassSet,
    pub exec: Exec,
    pub crop: Aabb,
    pub filter: FilterParams,
    pub transport: TransportConfig,
    pub rig: CameraRig,
}

/// Workspace box around the default tabletop, in the robot base frame.
pub const DEFAULT_CROP: Aabb = Aabb {
    min: [0.15, -0.5, 0.003],
    max: [0.95, 0.5, 0.5],
};

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            target_rate: 10.0,
            keep_classes: [CLASS_BACKGROUND].into_iter().collect(),
            exec: Exec::default(),
            crop: DEFAULT_CROP,
            filter: FilterParams::default(),
            transport: TransportConfig::default(),
            rig: CameraRig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        toml::from_str(s).map_err(|e| ConfigError::Parse {
            path: "<string>".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config always serializes")
    }

    /// Checks everything except the rig, which may still be pending.
    pub fn validate_settings(&self) -> Result<(), ConfigError> {
        if !(self.target_rate > 0.0 && self.target_rate.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "target_rate must be positive, got {}",
                self.target_rate
            )));
        }
        if self.keep_classes.is_empty() {
            return Err(ConfigError::Invalid("keep_classes is empty".into()));
        }
        self.filter
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.transport
            .validate(self.filter.point_budget)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_settings()?;
        if self.rig.static_cameras().is_empty() {
            return Err(ConfigError::Invalid("rig has no static cameras".into()));
        }
        self.rig
            .validate()
            .map_err(|e: PipelineError| ConfigError::Invalid(e.to_string()))
    }

    /// Interval between frames at `target_rate`.
    pub fn frame_interval_us(&self) -> u64 {
        (1e6 / self.target_rate).round() as u64
    }
}
