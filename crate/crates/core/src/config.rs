//! Campaign configuration, read from TOML.
//!
//! Every section is optional and falls back to its defaults; unknown keys are
//! rejected. Validation reports the first bad field by its dotted path, such
//! as `thresholds.adi_mm`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{sample_cylinder_model, GeometryError, ObjectModel, DEFAULT_MODEL_POINTS, MIN_MODEL_POINTS};
use crate::metrics::VerificationThresholds;
use crate::proposer::ErrorModel;
use crate::sim::{BinGeometry, DisturbanceModel, InHandObservationModel, SensorModel};
use crate::solver::SolverParams;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Syntax(String),
    #[error("invalid value for `{0}`")]
    Invalid(String),
}

impl ConfigError {
    /// Dotted path of the offending field, when known.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid(f) => Some(f),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectSpec {
    pub radius_mm: f64,
    pub height_mm: f64,
    pub n_points: usize,
    pub model_seed: u64,
}

impl Default for ObjectSpec {
    fn default() -> Self {
        Self { radius_mm: 5.0, height_mm: 61.0, n_points: DEFAULT_MODEL_POINTS, model_seed: 1 }
    }
}

impl ObjectSpec {
    pub fn invalid_field(&self) -> Option<&'static str> {
        if !(self.radius_mm.is_finite() && self.radius_mm > 0.0) {
            Some("radius_mm")
        } else if !(self.height_mm.is_finite() && self.height_mm > 0.0) {
            Some("height_mm")
        } else if self.n_points < MIN_MODEL_POINTS {
            Some("n_points")
        } else {
            None
        }
    }

    pub fn build(&self) -> Result<ObjectModel, GeometryError> {
        sample_cylinder_model(self.radius_mm, self.height_mm, self.n_points, self.model_seed)
    }
}

/// Collection protocol: bin fill levels, transfers between swaps, grasp
/// feasibility, and the insertion gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkcellParams {
    pub initial_source: usize,
    pub initial_destination: usize,
    pub transfers_per_swap: usize,
    pub p_feasible: f64,
    pub grasp_miss_mm: f64,
    pub insertion_tolerance_mm: f64,
    pub insertion_tolerance_deg: f64,
    /// Episode cap as a multiple of `targets.train + targets.test`.
    pub max_episode_factor: usize,
}

impl Default for WorkcellParams {
    fn default() -> Self {
        Self {
            initial_source: 30,
            initial_destination: 10,
            transfers_per_swap: 20,
            p_feasible: 0.9,
            grasp_miss_mm: 10.0,
            insertion_tolerance_mm: 2.0,
            insertion_tolerance_deg: 15.0,
            max_episode_factor: 50,
        }
    }
}

impl WorkcellParams {
    pub fn invalid_field(&self) -> Option<&'static str> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if self.initial_source == 0 {
            Some("initial_source")
        } else if self.transfers_per_swap == 0 {
            Some("transfers_per_swap")
        } else if !(0.0..=1.0).contains(&self.p_feasible) {
            Some("p_feasible")
        } else if !nonneg(self.grasp_miss_mm) {
            Some("grasp_miss_mm")
        } else if !nonneg(self.insertion_tolerance_mm) {
            Some("insertion_tolerance_mm")
        } else if !nonneg(self.insertion_tolerance_deg) {
            Some("insertion_tolerance_deg")
        } else if self.max_episode_factor == 0 {
            Some("max_episode_factor")
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Targets {
    pub train: usize,
    pub test: usize,
}

impl Default for Targets {
    fn default() -> Self {
        Self { train: 1000, test: 200 }
    }
}

impl Targets {
    pub fn total(&self) -> usize {
        self.train + self.test
    }

    /// Interleaves test samples evenly among the accepted ones: sample `j`
    /// (0-based, in acceptance order) is a test sample iff
    /// `⌊(j+1)·test/total⌋ > ⌊j·test/total⌋`.
    pub fn is_test(&self, j: usize) -> bool {
        let total = self.total();
        total > 0 && (j + 1) * self.test / total > j * self.test / total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputParams {
    pub dir: String,
    pub write_clouds: bool,
}

impl Default for OutputParams {
    fn default() -> Self {
        Self { dir: "campaign".into(), write_clouds: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignConfig {
    pub version: u32,
    pub seed: u64,
    pub batch_k: usize,
    /// Written into the task record.
    pub network_type: String,
    pub object: ObjectSpec,
    pub error_model: ErrorModel,
    pub disturbance: DisturbanceModel,
    pub observation: InHandObservationModel,
    pub sensor: SensorModel,
    pub bin: BinGeometry,
    pub workcell: WorkcellParams,
    pub solver: SolverParams,
    pub thresholds: VerificationThresholds,
    pub targets: Targets,
    pub output: OutputParams,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            batch_k: 48,
            network_type: "oracle".into(),
            object: ObjectSpec::default(),
            error_model: ErrorModel::default(),
            disturbance: DisturbanceModel::default(),
            observation: InHandObservationModel::default(),
            sensor: SensorModel::default(),
            bin: BinGeometry::default(),
            workcell: WorkcellParams::default(),
            solver: SolverParams::default(),
            thresholds: VerificationThresholds::default(),
            targets: Targets::default(),
            output: OutputParams::default(),
        }
    }
}

impl CampaignConfig {
    /// Every noise source and disturbance off; the proposer is exact.
    pub fn zero_noise() -> Self {
        Self {
            error_model: ErrorModel::zero(),
            disturbance: DisturbanceModel::zero(),
            observation: InHandObservationModel::zero(),
            sensor: SensorModel::zero(),
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |section: &str, field: &str| Err(ConfigError::Invalid(format!("{section}.{field}")));
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Invalid("version".into()));
        }
        if self.batch_k == 0 {
            return Err(ConfigError::Invalid("batch_k".into()));
        }
        if self.network_type.is_empty() || self.network_type.chars().any(char::is_whitespace) {
            return Err(ConfigError::Invalid("network_type".into()));
        }
        if let Some(f) = self.object.invalid_field() {
            return bad("object", f);
        }
        if let Some(f) = self.error_model.invalid_field() {
            return bad("error_model", f);
        }
        if let Some(f) = self.disturbance.invalid_field() {
            return bad("disturbance", f);
        }
        if let Some(f) = self.observation.invalid_field() {
            return bad("observation", f);
        }
        if let Some(f) = self.sensor.invalid_field() {
            return bad("sensor", f);
        }
        if let Some(f) = self.bin.invalid_field() {
            return bad("bin", f);
        }
        if let Some(f) = self.workcell.invalid_field() {
            return bad("workcell", f);
        }
        if let Some(f) = self.solver.invalid_field() {
            return bad("solver", f);
        }
        if let Some(f) = self.thresholds.invalid_field() {
            return bad("thresholds", f);
        }
        if self.targets.total() == 0 {
            return bad("targets", "train");
        }
        if self.output.dir.is_empty() {
            return bad("output", "dir");
        }
        Ok(())
    }

    pub fn max_episodes(&self) -> usize {
        self.workcell.max_episode_factor * self.targets.total()
    }
}
