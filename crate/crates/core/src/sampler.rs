//! Noise injection, partial reverse diffusion and ensemble assembly.

use candle_core::{Device, Tensor};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::corrector::Denoiser;
use crate::error::{Error, Result};
use crate::grids::{denormalize, FieldSet};
use crate::nn::{stack_arrays, tensor_to_array3};
use crate::predictor::Forecaster;
use crate::rng;
use crate::verify::pmm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub members: usize,
    pub steps: usize,
    pub rho: f64,
    /// Overrides the calibrated noise level when set.
    pub sigma_start: Option<f64>,
    pub sampler: String,
    pub base_seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            members: 16,
            steps: 20,
            rho: 7.0,
            sigma_start: None,
            sampler: "heun".into(),
            base_seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 || self.steps == 0 || !(self.rho > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sampling needs members >= 1, steps >= 1, rho > 0 (got {}, {}, {})",
                self.members, self.steps, self.rho
            )));
        }
        if let Some(s) = self.sigma_start {
            if !(s >= 0.0) {
                return Err(Error::InvalidConfig(format!("sigma_start must be >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// `pred + sigma * eps` with one standard-normal draw per cell and channel.
pub fn inject_noise(pred: &FieldSet, sigma: f64, seed: u64) -> Result<FieldSet> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise level must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(pred.clone());
    }
    let mut r = rng::stream(seed, rng::stream_id(3, 0));
    let eps = rng::normal_vec(&mut r, pred.values.len());
    let mut values = pred.values.clone();
    for (v, e) in values.iter_mut().zip(eps) {
        *v = (*v as f64 + sigma * e as f64) as f32;
    }
    pred.with_values(values)
}

/// Karras noise levels from `sigma_start` down to `sigma_min`, then a terminal 0.
/// Returns `steps + 1` values; `sigma_start = 0` gives the empty schedule `[0]`.
pub fn karras_schedule(sigma_start: f64, sigma_min: f64, steps: usize, rho: f64) -> Result<Vec<f64>> {
    if sigma_start == 0.0 {
        return Ok(vec![0.0]);
    }
    if steps == 0 || !(sigma_start >= sigma_min) || !(sigma_min > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "schedule needs steps >= 1 and sigma_start >= sigma_min > 0 (got {steps}, {sigma_start}, {sigma_min})"
        )));
    }
    let (hi, lo) = (sigma_start.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
    let mut s: Vec<f64> = (0..steps)
        .map(|i| {
            let t = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            (hi + t * (lo - hi)).powf(rho)
        })
        .collect();
    s[0] = sigma_start;
    s.push(0.0);
    Ok(s)
}

/// Integrates the probability-flow ODE along a decreasing noise schedule.
pub trait Sampler: Send + Sync {
    fn name(&self) -> &str;
    fn sample(&self, den: &dyn Denoiser, x: &Tensor, sigmas: &[f64]) -> Result<Tensor>;
}

fn slope(den: &dyn Denoiser, x: &Tensor, sigma: f64) -> Result<Tensor> {
    Ok(((x - den.denoise(x, sigma)?)? / sigma)?)
}

pub struct Euler;

impl Sampler for Euler {
    fn name(&self) -> &str {
        "euler"
    }

    fn sample(&self, den: &dyn Denoiser, x: &Tensor, sigmas: &[f64]) -> Result<Tensor> {
        let mut x = x.clone();
        for w in sigmas.windows(2) {
            x = (&x + (slope(den, &x, w[0])? * (w[1] - w[0]))?)?;
        }
        Ok(x)
    }
}

/// Second-order Heun steps; the final step into `sigma = 0` is a plain Euler step.
pub struct Heun;

impl Sampler for Heun {
    fn name(&self) -> &str {
        "heun"
    }

    fn sample(&self, den: &dyn Denoiser, x: &Tensor, sigmas: &[f64]) -> Result<Tensor> {
        let mut x = x.clone();
        for w in sigmas.windows(2) {
            let (s0, s1) = (w[0], w[1]);
            let d0 = slope(den, &x, s0)?;
            let euler = (&x + (&d0 * (s1 - s0))?)?;
            x = if s1 > 0.0 {
                let d1 = slope(den, &euler, s1)?;
                (&x + (((d0 + d1)? * 0.5)? * (s1 - s0))?)?
            } else {
                euler
            };
        }
        Ok(x)
    }
}

fn check_variables(den: &dyn Denoiser, fs: &FieldSet) -> Result<()> {
    if let Some(vars) = den.variables() {
        let names: Vec<&str> = fs.specs.iter().map(|s| s.name.as_str()).collect();
        if names != vars.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::ShapeMismatch(format!(
                "field variables {names:?} do not match the corrector's {vars:?}"
            )));
        }
    }
    Ok(())
}

/// Runs the sampler from `sigma_start` to 0; `sigma_start = 0` returns the input unchanged.
pub fn reverse_diffuse(
    den: &dyn Denoiser,
    sampler: &dyn Sampler,
    x_noisy: &FieldSet,
    sigma_start: f64,
    sigma_min: f64,
    steps: usize,
    rho: f64,
) -> Result<FieldSet> {
    check_variables(den, x_noisy)?;
    let sigmas = karras_schedule(sigma_start, sigma_min, steps, rho)?;
    if sigmas.len() == 1 {
        return Ok(x_noisy.clone());
    }
    let x = stack_arrays([&x_noisy.values], &Device::Cpu)?;
    let out = x_noisy.with_values(tensor_to_array3(&sampler.sample(den, &x, &sigmas)?)?)?;
    out.check_finite().map_err(|e| Error::Numerical(format!("reverse diffusion output: {e}")))?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EnsembleForecast {
    pub predictor_output: FieldSet,
    pub members: Vec<FieldSet>,
    pub seeds: Vec<u64>,
    pub sigma: f64,
}

impl EnsembleForecast {
    pub fn ensemble_mean(&self) -> Result<FieldSet> {
        let mut acc: Array3<f64> = Array3::zeros(self.predictor_output.values.dim());
        for m in &self.members {
            acc.zip_mut_with(&m.values, |a, &v| *a += v as f64);
        }
        let n = self.members.len() as f64;
        self.predictor_output.with_values(acc.mapv(|a| (a / n) as f32))
    }

    /// Probability matched mean of channel `c` over the members.
    pub fn pmm(&self, c: usize) -> Array2<f64> {
        let fields: Vec<Array2<f64>> = self
            .members
            .iter()
            .map(|m| m.values.index_axis(Axis(0), c).mapv(f64::from))
            .collect();
        pmm(&fields)
    }

    /// The same forecast in physical units.
    pub fn denormalized(&self) -> Result<EnsembleForecast> {
        Ok(EnsembleForecast {
            predictor_output: denormalize(&self.predictor_output)?,
            members: self.members.iter().map(denormalize).collect::<Result<_>>()?,
            seeds: self.seeds.clone(),
            sigma: self.sigma,
        })
    }
}

/// Member `m` uses seed `base_seed + m`; each member is computed independently of the others.
pub fn ensemble_forecast(
    forecaster: &dyn Forecaster,
    den: &dyn Denoiser,
    sampler: &dyn Sampler,
    sigma: f64,
    sigma_min: f64,
    state: &FieldSet,
    cfg: &SampleConfig,
) -> Result<EnsembleForecast> {
    cfg.validate()?;
    let sigma = cfg.sigma_start.unwrap_or(sigma);
    let pred = forecaster.predict(state)?;
    let seeds: Vec<u64> = (0..cfg.members as u64).map(|m| cfg.base_seed.wrapping_add(m)).collect();
    let members = seeds
        .iter()
        .map(|&seed| {
            let noisy = inject_noise(&pred, sigma, seed)?;
            reverse_diffuse(den, sampler, &noisy, sigma, sigma_min, cfg.steps, cfg.rho)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleForecast {
        predictor_output: pred,
        members,
        seeds,
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrector::GaussianDenoiser;
    use crate::grids::VariableSpec;
    use crate::predictor::Persistence;

    fn fs(c: usize, h: usize, w: usize, f: impl Fn((usize, usize, usize)) -> f32) -> FieldSet {
        let specs = (0..c).map(|i| VariableSpec::new(format!("v{i}"), "1")).collect();
        FieldSet::new(Array3::from_shape_fn((c, h, w), f), specs, 0, 6.0).unwrap()
    }

    #[test]
    fn zero_noise_is_identity() {
        let x = fs(2, 16, 16, |(c, y, x)| (c + y * x) as f32);
        assert_eq!(inject_noise(&x, 0.0, 5).unwrap().values, x.values);
        assert!(inject_noise(&x, -0.1, 5).is_err());
    }

    #[test]
    fn injected_variance_matches_sigma() {
        let x = fs(3, 256, 256, |_| 0.0);
        let sigma = 1.7;
        let out = inject_noise(&x, sigma, 42).unwrap();
        let n = out.values.len() as f64;
        let mean = out.values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = out.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn member_seeds_give_distinct_noise() {
        let x = fs(1, 32, 32, |_| 0.0);
        let a = inject_noise(&x, 1.0, 0).unwrap();
        let b = inject_noise(&x, 1.0, 1).unwrap();
        let differ = a.values.iter().zip(b.values.iter()).filter(|(p, q)| p != q).count();
        assert!(differ as f64 > 0.99 * a.values.len() as f64);
    }

    #[test]
    fn schedule_shape() {
        let s = karras_schedule(2.0, 0.002, 20, 7.0).unwrap();
        assert_eq!(s.len(), 21);
        assert_eq!(s[0], 2.0);
        assert!((s[19] - 0.002).abs() < 1e-12);
        assert_eq!(s[20], 0.0);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(karras_schedule(0.0, 0.002, 20, 7.0).unwrap(), vec![0.0]);
        assert_eq!(karras_schedule(1.5, 0.002, 1, 7.0).unwrap(), vec![1.5, 0.0]);
    }

    #[test]
    fn zero_start_is_identity_and_one_step_is_denoise() {
        let den = GaussianDenoiser { variance: 1.0 };
        let x = fs(1, 16, 16, |(_, y, x)| (y as f32 - x as f32) * 0.1);
        assert_eq!(reverse_diffuse(&den, &Heun, &x, 0.0, 0.002, 20, 7.0).unwrap().values, x.values);
        let one = reverse_diffuse(&den, &Heun, &x, 0.8, 0.002, 1, 7.0).unwrap();
        let d = crate::corrector::denoise_field(&den, &x, 0.8).unwrap();
        for (a, b) in one.values.iter().zip(d.values.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_flow_contracts_to_data_variance() {
        // for N(0, s2) data the ODE maps N(0, s2 + sigma^2) exactly onto N(0, s2)
        let s2 = 0.64;
        let sigma = 1.5;
        let den = GaussianDenoiser { variance: s2 };
        let noisy = inject_noise(&fs(1, 128, 128, |_| 0.0), (s2 + sigma * sigma).sqrt(), 9).unwrap();
        let out = reverse_diffuse(&den, &Heun, &noisy, sigma, 0.002, 20, 7.0).unwrap();
        let n = out.values.len() as f64;
        let var = out.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n;
        assert!((var / s2 - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn single_member_without_noise_equals_predictor() {
        let den = GaussianDenoiser { variance: 1.0 };
        let x = fs(2, 16, 16, |(c, y, x)| (c * y + x) as f32 * 0.01);
        let cfg = SampleConfig { members: 1, ..Default::default() };
        let e = ensemble_forecast(&Persistence, &den, &Heun, 0.0, 0.002, &x, &cfg).unwrap();
        assert_eq!(e.members[0].values, e.predictor_output.values);
    }

    #[test]
    fn members_are_distinct_and_order_independent() {
        let den = GaussianDenoiser { variance: 1.0 };
        let x = fs(1, 16, 16, |_| 0.0);
        let cfg = SampleConfig { members: 16, steps: 4, base_seed: 100, ..Default::default() };
        let e = ensemble_forecast(&Persistence, &den, &Heun, 0.7, 0.002, &x, &cfg).unwrap();
        for i in 0..16 {
            for j in 0..i {
                assert_ne!(e.members[i].values, e.members[j].values);
            }
        }
        // member 5 alone, computed in isolation
        let solo = SampleConfig { members: 1, base_seed: 105, ..cfg.clone() };
        let s = ensemble_forecast(&Persistence, &den, &Heun, 0.7, 0.002, &x, &solo).unwrap();
        assert_eq!(s.members[0].values, e.members[5].values);
    }
}
