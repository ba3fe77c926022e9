//! Experiment configuration, read from TOML.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys and invalid values are reported with the dotted path of the
//! offending field.
//!
//! ```toml
//! [scenario]
//! kind = "circle-twice"      # circle-twice | line-out-and-back | random-walk
//! model = "nonlinear-2d"     # linear | nonlinear-2d
//! seed = 1                   # ground-truth seed
//!
//! [geometry]                 # scenario shape
//! steps = 100
//! radius = 5.0
//!
//! [noise]
//! observation_sigma = [0.05, 0.05]
//! seed = 7                   # master seed of the per-run noise seeds
//!
//! [pipeline]
//! estimator = "rise"         # rise | optimal | perfect-map
//! backend = "inline"         # inline | threaded
//! feedback_delay = 5
//!
//! [pipeline.window]
//! window_poses = 10
//! max_tracks_per_step = 40
//! max_track_length = 20
//! loop_gap = 30
//!
//! [run]
//! n_runs = 1
//! oracle_check = false
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::SessionConfig;
use crate::simulator::{MeasurementModel, NoiseModel, ScenarioKind, ScenarioParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub model: MeasurementModel,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig { kind: ScenarioKind::CircleTwice, model: MeasurementModel::Nonlinear2d, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n_runs: usize,
    /// Check structural invariants after every step and compare against
    /// the dense oracle where it applies; any violation fails the run.
    pub oracle_check: bool,
    /// Evaluate current-pose covariances (needed for NEES).
    pub covariances: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { n_runs: 1, oracle_check: false, covariances: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub geometry: ScenarioParams,
    pub noise: NoiseModel,
    pub pipeline: SessionConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config { path: String::new(), message: e.to_string() })?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.into_inner().message().trim().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let at = |path: &str| {
            let path = path.to_string();
            move |e: Error| Error::Config { path: path.clone(), message: e.to_string() }
        };
        self.geometry.validate().map_err(at("geometry"))?;
        self.noise.validate().map_err(at("noise"))?;
        self.pipeline.window.validate().map_err(at("pipeline.window"))?;
        if self.pipeline.feedback_delay == 0 {
            return Err(Error::Config { path: "pipeline.feedback_delay".into(), message: "must be at least 1".into() });
        }
        if self.run.n_runs == 0 {
            return Err(Error::Config { path: "run.n_runs".into(), message: "must be at least 1".into() });
        }
        Ok(())
    }
}
