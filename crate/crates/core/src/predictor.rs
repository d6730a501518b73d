//! Deterministic one-step forecasters.

use std::io::Write;
use std::time::Instant;

use candle_core::{Device, Module, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::filter_real;
use crate::grids::FieldSet;
use crate::nn::checkpoint::Checkpoint;
use crate::nn::optim::{Adam, AdamParams, WeightDecay};
use crate::nn::swin::{SwinUnet, SwinUnetConfig};
use crate::nn::{stack_arrays, tensor_to_array3, ParamStore};
use crate::rng;

pub type PredictorConfig = SwinUnetConfig;

pub const CHECKPOINT_KIND: &str = "predictor/swin-unet";

/// Maps the normalized state at `t` to the state at `t + dt`.
pub trait Forecaster: Send + Sync {
    fn name(&self) -> &str;
    fn predict(&self, state: &FieldSet) -> Result<FieldSet>;
}

fn advance(state: &FieldSet, values: ndarray::Array3<f32>) -> Result<FieldSet> {
    let mut out = state.with_values(values)?;
    out.time_index += 1;
    Ok(out)
}

pub struct Persistence;

impl Forecaster for Persistence {
    fn name(&self) -> &str {
        "persistence"
    }

    fn predict(&self, state: &FieldSet) -> Result<FieldSet> {
        advance(state, state.values.clone())
    }
}

/// Removes every x-wavenumber above `cutoff`; a predictor with a known effective resolution.
pub struct IdealLowPass {
    pub cutoff: usize,
}

impl IdealLowPass {
    pub fn filter(&self, field: ndarray::ArrayView2<'_, f32>) -> ndarray::Array2<f32> {
        let f = field.mapv(f64::from);
        let kc = self.cutoff as i64;
        filter_real(&f, |_, kx| if kx.abs() <= kc { 1.0 } else { 0.0 }).mapv(|v| v as f32)
    }
}

impl Forecaster for IdealLowPass {
    fn name(&self) -> &str {
        "ideal-lowpass"
    }

    fn predict(&self, state: &FieldSet) -> Result<FieldSet> {
        let mut values = state.values.clone();
        for c in 0..state.channels() {
            let filtered = self.filter(state.channel(c));
            values.index_axis_mut(ndarray::Axis(0), c).assign(&filtered);
        }
        advance(state, values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            batch: 16,
            lr: 5e-4,
            weight_decay: 3e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(format!(
                "predictor training needs lr > 0, weight_decay >= 0, batch >= 1, epochs >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointConfig {
    model: PredictorConfig,
    grid: (usize, usize),
    variables: Vec<String>,
}

pub struct SwinForecaster {
    ps: ParamStore,
    net: SwinUnet,
    variables: Vec<String>,
}

impl SwinForecaster {
    pub fn new(cfg: &PredictorConfig, grid: (usize, usize), variables: Vec<String>, seed: u64, device: &Device) -> Result<Self> {
        if variables.len() != cfg.in_channels {
            return Err(Error::InvalidConfig(format!(
                "predictor has {} input channels but {} variables were given",
                cfg.in_channels,
                variables.len()
            )));
        }
        let mut ps = ParamStore::new(seed, device);
        let net = SwinUnet::new(&mut ps, cfg, grid)?;
        log::info!("predictor: {} parameters", ps.param_count());
        Ok(SwinForecaster { ps, net, variables })
    }

    pub fn param_count(&self) -> usize {
        self.ps.param_count()
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let cfg = CheckpointConfig {
            model: self.net.config().clone(),
            grid: self.net.grid(),
            variables: self.variables.clone(),
        };
        Checkpoint::from_params(CHECKPOINT_KIND, serde_json::to_value(cfg)?, &self.ps)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, device: &Device) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let cfg: CheckpointConfig = serde_json::from_value(ckpt.header.config.clone())
            .map_err(|e| Error::corrupt("<checkpoint>", format!("predictor config: {e}")))?;
        let f = SwinForecaster::new(&cfg.model, cfg.grid, cfg.variables, 0, device)?;
        f.ps.load(&ckpt.tensors)?;
        Ok(f)
    }

    fn check_input(&self, state: &FieldSet) -> Result<()> {
        let names: Vec<&str> = state.specs.iter().map(|s| s.name.as_str()).collect();
        if names != self.variables.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::ShapeMismatch(format!(
                "state variables {names:?} do not match the predictor's {:?}",
                self.variables
            )));
        }
        let (_, h, w) = state.dims();
        if (h, w) != self.net.grid() {
            return Err(Error::ShapeMismatch(format!(
                "state grid {h}x{w} does not match the predictor's {}x{}",
                self.net.grid().0,
                self.net.grid().1
            )));
        }
        Ok(())
    }

    fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward(x)?)
    }
}

impl Forecaster for SwinForecaster {
    fn name(&self) -> &str {
        "swin-unet"
    }

    fn predict(&self, state: &FieldSet) -> Result<FieldSet> {
        self.check_input(state)?;
        let x = stack_arrays([&state.values], self.ps.device())?;
        let y = tensor_to_array3(&self.forward_batch(&x)?.detach())?;
        let out = advance(state, y)?;
        out.check_finite().map_err(|e| Error::Numerical(format!("predictor output: {e}")))?;
        Ok(out)
    }
}

/// `(input, target)` index pairs of consecutive states.
fn consecutive_pairs(seq: &[FieldSet]) -> Vec<usize> {
    (0..seq.len().saturating_sub(1))
        .filter(|&i| seq[i + 1].time_index == seq[i].time_index + 1)
        .collect()
}

fn batch_mse(model: &SwinForecaster, seq: &[FieldSet], idx: &[usize]) -> Result<Tensor> {
    let dev = model.ps.device();
    let x = stack_arrays(idx.iter().map(|&i| &seq[i].values), dev)?;
    let y = stack_arrays(idx.iter().map(|&i| &seq[i + 1].values), dev)?;
    Ok((model.forward_batch(&x)? - y)?.sqr()?.mean_all()?)
}

/// Mean squared error over all consecutive pairs of `seq`.
pub fn evaluate_mse(model: &SwinForecaster, seq: &[FieldSet], batch: usize) -> Result<f64> {
    let pairs = consecutive_pairs(seq);
    let mut total = 0.0;
    for chunk in pairs.chunks(batch.max(1)) {
        let l = batch_mse(model, seq, chunk)?.detach().to_scalar::<f32>()? as f64;
        total += l * chunk.len() as f64;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Trains on consecutive pairs of `train`, logging one JSON line per epoch to `log`.
pub fn train_predictor(
    train: &[FieldSet],
    val: &[FieldSet],
    pcfg: &PredictorConfig,
    tcfg: &TrainConfig,
    device: &Device,
    mut log: Option<&mut dyn Write>,
) -> Result<(SwinForecaster, Vec<EpochRecord>)> {
    tcfg.validate()?;
    let pairs = consecutive_pairs(train);
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("predictor training needs at least 2 consecutive states".into()));
    }
    let (_, h, w) = train[0].dims();
    let variables = train[0].specs.iter().map(|s| s.name.clone()).collect();
    let model = SwinForecaster::new(pcfg, (h, w), variables, tcfg.seed, device)?;
    let mut opt = Adam::new(
        model.ps.vars(),
        AdamParams {
            lr: tcfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: WeightDecay::Coupled(tcfg.weight_decay),
        },
    )?;
    let start = Instant::now();
    let mut history = Vec::new();
    for epoch in 1..=tcfg.epochs {
        let mut order = pairs.clone();
        order.shuffle(&mut rng::stream(tcfg.seed, rng::stream_id(1, epoch as u64)));
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(tcfg.batch).enumerate() {
            let loss = batch_mse(&model, train, chunk)?;
            let l = loss.to_scalar::<f32>()? as f64;
            if !l.is_finite() {
                return Err(Error::Numerical(format!("predictor loss is {l} at epoch {epoch}, batch {b}")));
            }
            opt.step(&loss.backward()?)?;
            sum += l * chunk.len() as f64;
        }
        let val_mse = if consecutive_pairs(val).is_empty() {
            f64::NAN
        } else {
            evaluate_mse(&model, val, tcfg.batch)?
        };
        let rec = EpochRecord {
            epoch,
            train_mse: sum / pairs.len() as f64,
            val_mse,
            wall_s: start.elapsed().as_secs_f64(),
        };
        log::info!("predictor epoch {epoch}: train {:.5} val {:.5}", rec.train_mse, rec.val_mse);
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        history.push(rec);
    }
    Ok((model, history))
}
