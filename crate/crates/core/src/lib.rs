//! Predictor-corrector forecasting of gridded fields: a deterministic
//! transformer forecaster whose smoothed output is sharpened by a diffusion
//! denoiser, with spectral noise calibration and neighbourhood verification.

pub mod config;
pub mod corrector;
pub mod error;
pub mod fft;
pub mod grids;
pub mod gset;
pub mod nn;
pub mod pipeline;
pub mod plots;
pub mod predictor;
pub mod registry;
pub mod rng;
pub mod sampler;
pub mod spectral;
pub mod synthetic;
pub mod verify;

pub use error::{Error, Result};
