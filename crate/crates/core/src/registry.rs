//! Name-keyed registries of interchangeable strategies: forecasters,
//! denoisers and samplers, selected at runtime from configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::corrector::{Denoiser, GaussianDenoiser, NetworkDenoiser};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::predictor::{Forecaster, IdealLowPass, Persistence, SwinForecaster};
use crate::sampler::{Euler, Heun, Sampler};

pub struct Registry<F> {
    kind: &'static str,
    entries: BTreeMap<&'static str, F>,
}

impl<F> Registry<F> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(mut self, name: &'static str, factory: F) -> Self {
        self.entries.insert(name, factory);
        self
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&F> {
        self.entries.get(name).ok_or_else(|| Error::UnknownStrategy {
            kind: self.kind,
            name: name.to_string(),
            available: self.names().join(", "),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub forecaster: String,
    pub denoiser: String,
    /// Cutoff wavenumber of the `ideal-lowpass` forecaster.
    pub lowpass_cutoff: usize,
    /// Data variance assumed by the `analytic-gaussian` denoiser.
    pub gaussian_variance: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            forecaster: "swin-unet".into(),
            denoiser: "network".into(),
            lowpass_cutoff: 12,
            gaussian_variance: 1.0,
        }
    }
}

impl StrategyConfig {
    /// Whether the chosen strategies need trained checkpoints.
    pub fn needs_predictor_checkpoint(&self) -> bool {
        self.forecaster == "swin-unet"
    }

    pub fn needs_corrector_checkpoint(&self) -> bool {
        self.denoiser == "network"
    }

    pub fn validate(&self) -> Result<()> {
        forecasters().get(&self.forecaster)?;
        denoisers().get(&self.denoiser)?;
        Ok(())
    }
}

/// Everything a factory may need to build its strategy.
pub struct StrategyContext<'a> {
    pub config: &'a StrategyConfig,
    pub predictor_checkpoint: PathBuf,
    pub corrector_checkpoint: PathBuf,
    pub device: Device,
}

pub type ForecasterFactory = fn(&StrategyContext<'_>) -> Result<Box<dyn Forecaster>>;
pub type DenoiserFactory = fn(&StrategyContext<'_>) -> Result<Box<dyn Denoiser>>;
pub type SamplerFactory = fn() -> Box<dyn Sampler>;

pub fn forecasters() -> Registry<ForecasterFactory> {
    Registry::<ForecasterFactory>::new("forecaster")
        .register("swin-unet", |ctx| {
            let ckpt = Checkpoint::load(&ctx.predictor_checkpoint, &ctx.device)?;
            Ok(Box::new(SwinForecaster::from_checkpoint(&ckpt, &ctx.device)?))
        })
        .register("persistence", |_| Ok(Box::new(Persistence)))
        .register("ideal-lowpass", |ctx| {
            Ok(Box::new(IdealLowPass {
                cutoff: ctx.config.lowpass_cutoff,
            }))
        })
}

pub fn denoisers() -> Registry<DenoiserFactory> {
    Registry::<DenoiserFactory>::new("denoiser")
        .register("network", |ctx| {
            let ckpt = Checkpoint::load(&ctx.corrector_checkpoint, &ctx.device)?;
            Ok(Box::new(NetworkDenoiser::from_checkpoint(&ckpt, &ctx.device)?))
        })
        .register("analytic-gaussian", |ctx| {
            Ok(Box::new(GaussianDenoiser {
                variance: ctx.config.gaussian_variance,
            }))
        })
}

pub fn samplers() -> Registry<SamplerFactory> {
    Registry::<SamplerFactory>::new("sampler")
        .register("heun", || Box::new(Heun))
        .register("euler", || Box::new(Euler))
}
