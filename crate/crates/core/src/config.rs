//! Experiment configuration file (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{CompensationMode, DetectorParams};
use crate::error::{Error, Result};
use crate::scene::ScenarioConfig;
use crate::sensors::{LidarParams, RadarParams};
use crate::timebase::{compute_ratio, secs_to_ns, FusionPolicy, SweepSchedule};

fn d_lidar_hz() -> f64 {
    20.0
}
fn d_radar_hz() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    #[serde(default = "d_lidar_hz")]
    pub lidar_hz: f64,
    #[serde(default = "d_radar_hz")]
    pub radar_hz: f64,
    /// Completion time of Lidar sweep 0, seconds.
    #[serde(default)]
    pub lidar_phase: f64,
    #[serde(default)]
    pub radar_phase: f64,
    #[serde(default)]
    pub lidar: LidarParams,
    #[serde(default)]
    pub radar: RadarParams,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            lidar_hz: d_lidar_hz(),
            radar_hz: d_radar_hz(),
            lidar_phase: 0.0,
            radar_phase: 0.0,
            lidar: LidarParams::default(),
            radar: RadarParams::default(),
        }
    }
}

impl SensorConfig {
    pub fn lidar_schedule(&self) -> Result<SweepSchedule> {
        SweepSchedule::from_frequency(self.lidar_hz, self.lidar_phase)
    }

    pub fn radar_schedule(&self) -> Result<SweepSchedule> {
        SweepSchedule::from_frequency(self.radar_hz, self.radar_phase)
    }

    pub fn ratio(&self) -> Result<u32> {
        compute_ratio(self.lidar_hz, self.radar_hz)
    }

    pub fn noiseless(&self) -> Self {
        Self {
            lidar: LidarParams {
                range_noise_sigma: 0.0,
                ..self.lidar.clone()
            },
            radar: self.radar.noiseless(),
            ..self.clone()
        }
    }
}

fn d_grid_w() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}
fn d_grid_r() -> Vec<f64> {
    vec![0.25, 0.5, 0.75, 1.0, 1.5, 2.0]
}
fn d_grid_s() -> Vec<f64> {
    vec![1.0, 0.75, 1.25, 0.5, 0.0]
}

/// Calibration search space. Scales are tried in the listed order, which
/// breaks ties after radar weight and radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationGrid {
    #[serde(default = "d_grid_w")]
    pub radar_weights: Vec<f64>,
    #[serde(default = "d_grid_r")]
    pub search_radii: Vec<f64>,
    #[serde(default = "d_grid_s")]
    pub displacement_scales: Vec<f64>,
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        Self {
            radar_weights: d_grid_w(),
            search_radii: d_grid_r(),
            displacement_scales: d_grid_s(),
        }
    }
}

impl CalibrationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.radar_weights.is_empty() || self.search_radii.is_empty() || self.displacement_scales.is_empty() {
            return Err(Error::Parameter("calibration grid axes must be non-empty".into()));
        }
        if self.radar_weights.iter().any(|w| !(0.0..=1.0).contains(w))
            || self.search_radii.iter().any(|r| !(*r >= 0.0 && r.is_finite()))
            || self.displacement_scales.iter().any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return Err(Error::Parameter("calibration grid values out of range".into()));
        }
        Ok(())
    }
}

fn d_scenarios() -> u32 {
    50
}
fn d_seed_base() -> u64 {
    1000
}
fn d_train_scenarios() -> u32 {
    20
}
fn d_train_seed_base() -> u64 {
    500_000
}
fn d_min_visible() -> usize {
    5
}
fn d_variants() -> Vec<CompensationMode> {
    vec![CompensationMode::None, CompensationMode::PerOffset, CompensationMode::Mixed]
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Evaluation scenarios, seeded `seed_base, seed_base + 1, ...`.
    #[serde(default = "d_scenarios")]
    pub scenarios: u32,
    #[serde(default = "d_seed_base")]
    pub seed_base: u64,
    /// Calibration scenarios, seeded from `train_seed_base`.
    #[serde(default = "d_train_scenarios")]
    pub train_scenarios: u32,
    #[serde(default = "d_train_seed_base")]
    pub train_seed_base: u64,
    /// Simulation horizon in seconds; defaults to the scenario duration.
    #[serde(default)]
    pub horizon: Option<f64>,
    /// Ground-truth vehicles need this many reference-sweep points inside.
    #[serde(default = "d_min_visible")]
    pub min_visible_points: usize,
    #[serde(default = "d_variants")]
    pub variants: Vec<CompensationMode>,
    /// Also score every per_offset branch on every offset.
    #[serde(default = "d_true")]
    pub cross_branches: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            scenarios: d_scenarios(),
            seed_base: d_seed_base(),
            train_scenarios: d_train_scenarios(),
            train_seed_base: d_train_seed_base(),
            horizon: None,
            min_visible_points: d_min_visible(),
            variants: d_variants(),
            cross_branches: true,
        }
    }
}

fn d_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub sensors: SensorConfig,
    #[serde(default)]
    pub policy: FusionPolicy,
    #[serde(default)]
    pub detector: DetectorParams,
    #[serde(default)]
    pub calibration: CalibrationGrid,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default = "d_out")]
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            sensors: SensorConfig::default(),
            policy: FusionPolicy::default(),
            detector: DetectorParams::default(),
            calibration: CalibrationGrid::default(),
            experiment: ExperimentSection::default(),
            out_dir: d_out(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        let ratio = self.sensors.ratio()?;
        self.sensors.lidar_schedule()?;
        self.sensors.radar_schedule()?;
        self.policy.validate(ratio)?;
        self.detector.validate()?;
        self.calibration.validate()?;
        if self.horizon() > self.scenario.duration {
            return Err(Error::Parameter(format!(
                "horizon {} exceeds scenario duration {}",
                self.horizon(),
                self.scenario.duration
            )));
        }
        if self.experiment.scenarios == 0 {
            return Err(Error::Parameter("experiment.scenarios must be >= 1".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.experiment.horizon.unwrap_or(self.scenario.duration)
    }

    pub fn horizon_ns(&self) -> i64 {
        secs_to_ns(self.horizon())
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        (0..self.experiment.scenarios as u64).map(|i| self.experiment.seed_base + i).collect()
    }

    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.experiment.train_scenarios as u64)
            .map(|i| self.experiment.train_seed_base + i)
            .collect()
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse and validate; also returns the SHA-256 of the file bytes.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes.clone()).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok((Self::from_toml_str(&text, path)?, sha256_hex(&bytes)))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stable digest of a seed list.
pub fn seed_set_hash(seeds: &[u64]) -> String {
    let mut h = Sha256::new();
    for s in seeds {
        h.update(s.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("", Path::new("x.toml")).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.eval_seeds().len(), 50);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = ExperimentConfig::from_toml_str("[policy]\nalpah = 2\n", Path::new("x.toml")).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert!(err.is_validation());
    }

    #[test]
    fn alpha_above_ratio_rejected() {
        let err = ExperimentConfig::from_toml_str("[policy]\nalpha = 6\n", Path::new("x.toml")).unwrap_err();
        assert!(matches!(err, Error::Policy(_)));
    }

    #[test]
    fn seed_hash_is_order_sensitive() {
        assert_ne!(seed_set_hash(&[1, 2]), seed_set_hash(&[2, 1]));
        assert_eq!(seed_set_hash(&[1, 2]).len(), 16);
    }
}
