//! Run configuration: one JSON document covering every stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corrector::{CorrectorConfig, DiffTrainConfig, EdmParams};
use crate::error::{Error, Result};
use crate::predictor::{PredictorConfig, TrainConfig};
use crate::registry::StrategyConfig;
use crate::sampler::SampleConfig;
use crate::synthetic::SynthConfig;
use crate::verify::FssSpec;

/// Environment variable naming the compute device.
pub const DEVICE_ENV: &str = "MESOCAST_DEVICE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    /// Fractional spectral drop that defines the cutoff wavenumber.
    pub p: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { p: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    /// Number of test-split cases to forecast; 0 means all.
    pub cases: usize,
    /// Spacing between consecutive cases, in steps.
    pub stride: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig { cases: 0, stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every component seed is derived from it.
    pub seed: u64,
    pub synth: SynthConfig,
    pub predictor: PredictorConfig,
    pub predictor_train: TrainConfig,
    pub corrector: CorrectorConfig,
    pub edm: EdmParams,
    pub corrector_train: DiffTrainConfig,
    pub calibration: CalibrationConfig,
    pub sample: SampleConfig,
    pub forecast: ForecastConfig,
    pub fss: FssSpec,
    pub strategies: StrategyConfig,
    pub single_threaded: bool,
    pub device: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// The desk-scale experiment: a 64 x 96 three-channel synthetic run sized
    /// for a single CPU.
    pub fn desk() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            synth: SynthConfig::default(),
            predictor: PredictorConfig::default(),
            predictor_train: TrainConfig {
                epochs: 10,
                batch: 8,
                lr: 5e-4,
                weight_decay: 3e-6,
                seed: 0,
            },
            // a slimmer network keeps 16-member sampling affordable on one core
            corrector: CorrectorConfig {
                base_embed: 16,
                channel_mult: vec![1, 2, 2],
                res_blocks: 1,
                ..CorrectorConfig::default()
            },
            // fields are z-scored, so the data standard deviation is 1
            edm: EdmParams {
                sigma_data: 1.0,
                ..EdmParams::default()
            },
            corrector_train: DiffTrainConfig {
                epochs: 160,
                batch: 8,
                lr: 2e-3,
                crop: Some([16, 24]),
                ..DiffTrainConfig::default()
            },
            calibration: CalibrationConfig::default(),
            sample: SampleConfig::default(),
            forecast: ForecastConfig { cases: 4, stride: 7 },
            fss: FssSpec::default(),
            strategies: StrategyConfig::default(),
            single_threaded: true,
            device: "cpu".into(),
        };
        cfg.apply_seed(0);
        cfg
    }

    /// Sets the master seed and re-derives every component seed.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.predictor_train.seed = seed.wrapping_add(1);
        self.corrector_train.seed = seed.wrapping_add(2);
        self.sample.base_seed = seed.wrapping_mul(1_000_003).wrapping_add(3);
    }

    pub fn channel_count(&self) -> usize {
        self.synth.channels.len() + usize::from(self.synth.precip.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.predictor.validate()?;
        self.predictor.check_dims(self.synth.grid[0], self.synth.grid[1])?;
        self.predictor_train.validate()?;
        self.corrector.validate()?;
        self.edm.validate()?;
        self.corrector_train.validate()?;
        self.sample.validate()?;
        crate::registry::samplers().get(&self.sample.sampler)?;
        self.fss.validate()?;
        self.strategies.validate()?;
        let c = self.channel_count();
        if self.predictor.in_channels != c || self.corrector.in_channels != c {
            return Err(Error::InvalidConfig(format!(
                "synthetic data has {c} channels; predictor expects {}, corrector {}",
                self.predictor.in_channels, self.corrector.in_channels
            )));
        }
        let g = self.corrector.granularity();
        let [cy, cx] = self.corrector_train.crop.unwrap_or(self.synth.grid);
        if self.synth.grid[0] % g != 0 || self.synth.grid[1] % g != 0 || cy % g != 0 || cx % g != 0 {
            return Err(Error::InvalidConfig(format!(
                "corrector grid and crop sizes must be multiples of {g}"
            )));
        }
        if !(self.calibration.p > 0.0 && self.calibration.p < 1.0) {
            return Err(Error::InvalidConfig(format!("calibration p must lie in (0, 1), got {}", self.calibration.p)));
        }
        if self.forecast.stride == 0 {
            return Err(Error::InvalidConfig("forecast stride must be >= 1".into()));
        }
        if self.device != "cpu" {
            return Err(Error::InvalidConfig(format!("device '{}' is not supported; use 'cpu'", self.device)));
        }
        Ok(())
    }

    /// Parses and validates a JSON document; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::InvalidConfig(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    /// Applies the device environment override.
    pub fn with_env_device(mut self) -> Self {
        if let Ok(d) = std::env::var(DEVICE_ENV) {
            self.device = d.to_lowercase();
        }
        self
    }
}
