//! Diffusion corrector: preconditioned denoisers and their training loop.

use std::io::Write;
use std::time::Instant;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::FieldSet;
use crate::nn::checkpoint::Checkpoint;
use crate::nn::optim::{Adam, AdamParams, WeightDecay};
use crate::nn::unet::{Unet, UnetConfig};
use crate::nn::{stack_arrays, tensor_to_array3, ParamStore};
use crate::rng;

pub type CorrectorConfig = UnetConfig;

pub const CHECKPOINT_KIND: &str = "corrector/unet";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdmParams {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for EdmParams {
    fn default() -> Self {
        EdmParams {
            sigma_data: 0.5,
            p_mean: -1.2,
            p_std: 1.2,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
        }
    }
}

impl EdmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.sigma_data > 0.0) || !(self.p_std > 0.0) || !(self.rho > 0.0) {
            return Err(Error::InvalidConfig("sigma_data, p_std and rho must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

/// `D(x; sigma) = c_skip x + c_out F(c_in x, c_noise)`
pub fn preconditioning(sigma: f64, sigma_data: f64) -> Precond {
    let s2 = sigma * sigma + sigma_data * sigma_data;
    Precond {
        c_skip: sigma_data * sigma_data / s2,
        c_out: sigma * sigma_data / s2.sqrt(),
        c_in: 1.0 / s2.sqrt(),
        c_noise: sigma.ln() / 4.0,
    }
}

pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// Estimates the clean field from a noisy one, on `[B, C, H, W]` tensors in normalized units.
pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor>;
    /// Variables the denoiser was trained on, when it cares.
    fn variables(&self) -> Option<&[String]> {
        None
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!("noise level must be finite and >= 0, got {sigma}")));
    }
    Ok(())
}

/// Denoises a single field set.
pub fn denoise_field(den: &dyn Denoiser, x: &FieldSet, sigma: f64) -> Result<FieldSet> {
    check_sigma(sigma)?;
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let t = stack_arrays([&x.values], &Device::Cpu)?;
    x.with_values(tensor_to_array3(&den.denoise(&t, sigma)?)?)
}

/// Optimal denoiser for zero-mean data distributed as `N(0, variance I)`.
pub struct GaussianDenoiser {
    pub variance: f64,
}

impl Denoiser for GaussianDenoiser {
    fn name(&self) -> &str {
        "analytic-gaussian"
    }

    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        check_sigma(sigma)?;
        if sigma == 0.0 {
            return Ok(x.clone());
        }
        Ok((x * (self.variance / (self.variance + sigma * sigma)))?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointConfig {
    model: CorrectorConfig,
    edm: EdmParams,
    variables: Vec<String>,
}

pub struct NetworkDenoiser {
    ps: ParamStore,
    net: Unet,
    edm: EdmParams,
    variables: Vec<String>,
}

impl NetworkDenoiser {
    pub fn new(cfg: &CorrectorConfig, edm: EdmParams, variables: Vec<String>, seed: u64, device: &Device) -> Result<Self> {
        edm.validate()?;
        if variables.len() != cfg.in_channels {
            return Err(Error::InvalidConfig(format!(
                "corrector has {} input channels but {} variables were given",
                cfg.in_channels,
                variables.len()
            )));
        }
        let mut ps = ParamStore::new(seed, device);
        let net = Unet::new(&mut ps, cfg)?;
        log::info!("corrector: {} parameters", ps.param_count());
        Ok(NetworkDenoiser { ps, net, edm, variables })
    }

    pub fn edm(&self) -> &EdmParams {
        &self.edm
    }

    pub fn param_count(&self) -> usize {
        self.ps.param_count()
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let cfg = CheckpointConfig {
            model: self.net.config().clone(),
            edm: self.edm,
            variables: self.variables.clone(),
        };
        Checkpoint::from_params(CHECKPOINT_KIND, serde_json::to_value(cfg)?, &self.ps)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, device: &Device) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let cfg: CheckpointConfig = serde_json::from_value(ckpt.header.config.clone())
            .map_err(|e| Error::corrupt("<checkpoint>", format!("corrector config: {e}")))?;
        let d = NetworkDenoiser::new(&cfg.model, cfg.edm, cfg.variables, 0, device)?;
        d.ps.load(&ckpt.tensors)?;
        Ok(d)
    }

    /// Preconditioned forward pass with per-sample noise levels `sigmas` (all > 0).
    fn forward(&self, x: &Tensor, sigmas: &[f64]) -> Result<Tensor> {
        let b = sigmas.len();
        let dev = self.ps.device();
        let coef = |f: &dyn Fn(&Precond) -> f64| -> Result<Tensor> {
            let v: Vec<f32> = sigmas
                .iter()
                .map(|&s| f(&preconditioning(s, self.edm.sigma_data)) as f32)
                .collect();
            Ok(Tensor::from_vec(v, (b, 1, 1, 1), dev)?)
        };
        let c_noise = Tensor::from_vec(
            sigmas.iter().map(|&s| preconditioning(s, self.edm.sigma_data).c_noise as f32).collect::<Vec<_>>(),
            b,
            dev,
        )?;
        let f = self.net.forward(&x.broadcast_mul(&coef(&|p| p.c_in)?)?, &c_noise)?;
        Ok((x.broadcast_mul(&coef(&|p| p.c_skip)?)? + f.broadcast_mul(&coef(&|p| p.c_out)?)?)?)
    }
}

impl Denoiser for NetworkDenoiser {
    fn name(&self) -> &str {
        "network"
    }

    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        check_sigma(sigma)?;
        let c = x.dim(1)?;
        if c != self.variables.len() {
            return Err(Error::ShapeMismatch(format!(
                "input has {c} channels, corrector expects {}",
                self.variables.len()
            )));
        }
        if sigma == 0.0 {
            return Ok(x.clone());
        }
        let b = x.dim(0)?;
        Ok(self.forward(x, &vec![sigma; b])?.detach())
    }

    fn variables(&self) -> Option<&[String]> {
        Some(&self.variables)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Train on random `[y, x]` crops instead of full fields.
    pub crop: Option<[usize; 2]>,
    pub seed: u64,
}

impl Default for DiffTrainConfig {
    fn default() -> Self {
        DiffTrainConfig {
            epochs: 400,
            batch: 16,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.01,
            crop: None,
            seed: 0,
        }
    }
}

impl DiffTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || self.epochs == 0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "corrector training needs lr > 0, batch >= 1, epochs >= 1, weight_decay >= 0 (got {self:?})"
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("AdamW betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffEpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub wall_s: f64,
}

fn crop_batch(
    data: &[FieldSet],
    idx: &[usize],
    crop: Option<[usize; 2]>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<ndarray::Array3<f32>>> {
    idx.iter()
        .map(|&i| {
            let v = &data[i].values;
            let (_, h, w) = v.dim();
            match crop {
                None => Ok(v.clone()),
                Some([ch, cw]) => {
                    if ch > h || cw > w {
                        return Err(Error::InvalidConfig(format!("crop {ch}x{cw} exceeds the {h}x{w} grid")));
                    }
                    let y0 = rng.random_range(0..=h - ch);
                    let x0 = rng.random_range(0..=w - cw);
                    Ok(v.slice(ndarray::s![.., y0..y0 + ch, x0..x0 + cw]).to_owned())
                }
            }
        })
        .collect()
}

/// Trains a denoiser on unpaired states with log-normal noise levels and
/// EDM loss weighting, logging one JSON line per epoch.
pub fn train_corrector(
    data: &[FieldSet],
    ccfg: &CorrectorConfig,
    edm: &EdmParams,
    tcfg: &DiffTrainConfig,
    device: &Device,
    mut log: Option<&mut dyn Write>,
) -> Result<(NetworkDenoiser, Vec<DiffEpochRecord>)> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("corrector training set is empty".into()));
    }
    let variables = data[0].specs.iter().map(|s| s.name.clone()).collect();
    let model = NetworkDenoiser::new(ccfg, *edm, variables, tcfg.seed, device)?;
    let mut opt = Adam::new(
        model.ps.vars(),
        AdamParams {
            lr: tcfg.lr,
            beta1: tcfg.beta1,
            beta2: tcfg.beta2,
            eps: 1e-8,
            weight_decay: WeightDecay::Decoupled(tcfg.weight_decay),
        },
    )?;
    let start = Instant::now();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=tcfg.epochs {
        let mut r = rng::stream(tcfg.seed, rng::stream_id(2, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut r);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(tcfg.batch).enumerate() {
            let clean = crop_batch(data, chunk, tcfg.crop, &mut r)?;
            let x = stack_arrays(clean.iter(), device)?;
            let sigmas: Vec<f64> = (0..chunk.len())
                .map(|_| (edm.p_mean + edm.p_std * rng::normal_f64(&mut r)).exp())
                .collect();
            let noise = Tensor::from_vec(rng::normal_vec(&mut r, x.elem_count()), x.dims(), device)?;
            let sig = Tensor::from_vec(sigmas.iter().map(|&s| s as f32).collect::<Vec<_>>(), (chunk.len(), 1, 1, 1), device)?;
            let noisy = (&x + noise.broadcast_mul(&sig)?)?;
            let weights: Vec<f32> = sigmas.iter().map(|&s| loss_weight(s, edm.sigma_data) as f32).collect();
            let weights = Tensor::from_vec(weights, (chunk.len(), 1, 1, 1), device)?;
            let d = model.forward(&noisy, &sigmas)?;
            let loss = (d - &x)?.sqr()?.broadcast_mul(&weights)?.mean_all()?;
            let l = loss.to_scalar::<f32>()? as f64;
            if !l.is_finite() {
                return Err(Error::Numerical(format!(
                    "corrector loss is {l} at epoch {epoch}, batch {b} (sigmas {sigmas:?})"
                )));
            }
            opt.step(&loss.backward()?)?;
            sum += l * chunk.len() as f64;
        }
        let rec = DiffEpochRecord {
            epoch,
            loss: sum / data.len() as f64,
            wall_s: start.elapsed().as_secs_f64(),
        };
        log::info!("corrector epoch {epoch}: loss {:.5}", rec.loss);
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        history.push(rec);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::VariableSpec;
    use rand::Rng;

    #[test]
    fn textbook_coefficients() {
        let p = preconditioning(0.5, 0.5);
        assert!((p.c_skip - 0.5).abs() < 1e-15);
        assert!((p.c_in - 2f64.sqrt()).abs() < 1e-15);
        assert!((p.c_out - 0.5 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn coefficients_match_reference_arithmetic() {
        let mut r = rng::stream(11, 0);
        for _ in 0..100 {
            let s: f64 = r.random_range(1e-3..80.0);
            let sd: f64 = r.random_range(0.1..2.0);
            let p = preconditioning(s, sd);
            let denom = s * s + sd * sd;
            assert!((p.c_skip - sd * sd / denom).abs() < 1e-12);
            assert!((p.c_out - s * sd / denom.sqrt()).abs() < 1e-12);
            assert!((p.c_in - 1.0 / denom.sqrt()).abs() < 1e-12);
            assert!((p.c_noise - 0.25 * s.ln()).abs() < 1e-12);
            // the loss weight exactly cancels c_out^2, giving F a unit-weight target
            assert!((loss_weight(s, sd) * p.c_out.powi(2) - 1.0).abs() < 1e-12);
        }
    }

    fn toy(n: usize) -> Vec<FieldSet> {
        (0..n)
            .map(|i| {
                let v = ndarray::Array3::from_shape_fn((1, 16, 16), |(_, y, x)| ((y as f32 * 0.4 + i as f32).sin() + (x as f32 * 0.3).cos()) * 0.5);
                FieldSet::new(v, vec![VariableSpec::new("a", "1")], i as i64, 6.0).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let dev = Device::Cpu;
        let cfg = CorrectorConfig { in_channels: 1, base_embed: 8, channel_mult: vec![1, 2], res_blocks: 1 };
        let d = NetworkDenoiser::new(&cfg, EdmParams::default(), vec!["a".into()], 0, &dev).unwrap();
        let x = &toy(1)[0];
        assert_eq!(denoise_field(&d, x, 0.0).unwrap().values, x.values);
        assert!(denoise_field(&d, x, -1.0).is_err());
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let dev = Device::Cpu;
        let cfg = CorrectorConfig { in_channels: 1, base_embed: 8, channel_mult: vec![1, 2], res_blocks: 1 };
        let tcfg = DiffTrainConfig { epochs: 10, batch: 8, lr: 2e-3, seed: 3, ..Default::default() };
        let data = toy(64);
        let (_, h1) = train_corrector(&data, &cfg, &EdmParams::default(), &tcfg, &dev, None).unwrap();
        let (_, h2) = train_corrector(&data, &cfg, &EdmParams::default(), &tcfg, &dev, None).unwrap();
        assert_eq!(h1.iter().map(|r| r.loss).collect::<Vec<_>>(), h2.iter().map(|r| r.loss).collect::<Vec<_>>());
        assert!(h1[9].loss < h1[0].loss, "{h1:?}");
    }
}
