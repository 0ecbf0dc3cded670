//! Run configuration, read from and snapshotted to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::PyramidOptions;
use crate::error::{Error, Result};
use crate::imu::NoiseProfile;
use crate::map::{DeformationConfig, MapConfig};
use crate::par::Execution;
use crate::tracker::{ImuMode, TrackerConfig};

/// Ground-truth-assisted loop detection used with synthetic sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopClosureConfig {
    /// Revisit radius on true camera positions (m).
    pub radius: f64,
    /// Maximum true viewing-direction difference (rad).
    pub max_angle: f64,
    /// Frames to wait after a closure before looking for another.
    pub cooldown: usize,
    /// Pixel stride of matched surface samples in the current frame.
    pub sample_stride: usize,
    /// At most this many pins on the inactive map.
    pub max_pins: usize,
}

impl Default for LoopClosureConfig {
    fn default() -> Self {
        LoopClosureConfig {
            radius: 0.3,
            max_angle: 0.35,
            cooldown: 60,
            sample_stride: 8,
            max_pins: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub imu: ImuMode,
    pub slam: bool,
    pub profile: NoiseProfile,
    pub seed: u64,
    pub execution: Execution,
    /// Accelerometer samples averaged for the initial gravity direction.
    pub gravity_init_samples: usize,
    /// External loop-closure constraints.
    pub constraints: Option<PathBuf>,
    pub pyramid: PyramidOptions,
    pub tracker: TrackerConfig,
    pub map: MapConfig,
    pub deformation: DeformationConfig,
    pub loop_closure: LoopClosureConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            imu: ImuMode::Full,
            slam: false,
            profile: NoiseProfile::Synthetic,
            seed: 0,
            execution: Execution::default(),
            gravity_init_samples: 20,
            constraints: None,
            pyramid: PyramidOptions {
                bilateral: Some((1.5, 0.1)),
            },
            tracker: TrackerConfig::default(),
            map: MapConfig::default(),
            deformation: DeformationConfig::default(),
            loop_closure: LoopClosureConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Tracker settings with the run-level mode and execution applied.
    pub fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            imu_mode: self.imu,
            execution: self.execution,
            ..self.tracker
        }
    }

    pub fn map_config(&self) -> MapConfig {
        MapConfig {
            execution: self.execution,
            ..self.map
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gravity_init_samples == 0 && self.imu.uses_imu() {
            return Err(Error::Config(
                "gravity_init_samples must be positive".into(),
            ));
        }
        if self.tracker.iterations.iter().all(|&n| n == 0) {
            return Err(Error::Config("tracker needs at least one iteration".into()));
        }
        if let Some(p) = &self.constraints {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "constraints file {} does not exist",
                    p.display()
                )));
            }
        }
        if self.deformation.k == 0 || !(self.deformation.spacing > 0.0) {
            return Err(Error::Config(
                "deformation graph needs k > 0 and positive spacing".into(),
            ));
        }
        Ok(())
    }
}
