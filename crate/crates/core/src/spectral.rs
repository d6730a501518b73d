//! x-direction power spectra and the noise-level calibration built on them.
//!
//! Convention: for a row of length `N` with unnormalized DFT `X(k)`,
//! `PSD(k) = <|X(k)|^2> / N^2`, averaged over rows and samples. Under this
//! convention white noise of variance `s^2` has `PSD(k) = s^2 / N`, so the
//! injected noise level `sigma^2 = N * PSD(k*)` is exactly the white noise
//! whose spectral density matches the signal at the cutoff `k*`.

use ndarray::ArrayView2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::FieldSet;
use crate::predictor::Forecaster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumProfile {
    pub variable: String,
    /// Grid size along x.
    pub n: usize,
    /// Number of rows averaged (rows per sample times samples).
    pub rows: usize,
    /// One-sided profile, index = integer wavenumber `0..=n/2`.
    pub psd: Vec<f64>,
}

impl SpectrumProfile {
    pub fn wavenumbers(&self) -> std::ops::RangeInclusive<usize> {
        0..=self.n / 2
    }

    /// Sum over the full two-sided spectrum; equals the mean square of the rows.
    pub fn two_sided_total(&self) -> f64 {
        let n = self.n;
        (0..n)
            .map(|i| {
                let k = if i <= n / 2 { i } else { n - i };
                self.psd[k]
            })
            .sum()
    }

    /// Physical wavelength of bin `k` for grid spacing `dx`.
    pub fn wavelength(&self, k: usize, dx: f64) -> f64 {
        self.n as f64 * dx / k as f64
    }
}

/// Accumulates row spectra; the building block for [`psd_x`].
pub struct PsdAccumulator {
    n: usize,
    rows: usize,
    sum: Vec<f64>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    buf: Vec<Complex64>,
}

impl PsdAccumulator {
    pub fn new(n: usize) -> Self {
        let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
        PsdAccumulator {
            n,
            rows: 0,
            sum: vec![0.0; n / 2 + 1],
            fft,
            buf: vec![Complex64::default(); n],
        }
    }

    pub fn add_field(&mut self, field: ArrayView2<'_, f32>) -> Result<()> {
        if field.dim().1 != self.n {
            return Err(Error::ShapeMismatch(format!("row length {} != {}", field.dim().1, self.n)));
        }
        for row in field.rows() {
            for (b, v) in self.buf.iter_mut().zip(row.iter()) {
                if !v.is_finite() {
                    return Err(Error::NonFinite { channel: 0 });
                }
                *b = Complex64::new(*v as f64, 0.0);
            }
            self.fft.process(&mut self.buf);
            for (s, b) in self.sum.iter_mut().zip(&self.buf) {
                *s += b.norm_sqr();
            }
            self.rows += 1;
        }
        Ok(())
    }

    pub fn finish(self, variable: impl Into<String>) -> Result<SpectrumProfile> {
        if self.rows == 0 {
            return Err(Error::InvalidConfig("power spectrum of zero samples".into()));
        }
        let norm = (self.n * self.n) as f64 * self.rows as f64;
        Ok(SpectrumProfile {
            variable: variable.into(),
            n: self.n,
            rows: self.rows,
            psd: self.sum.iter().map(|s| s / norm).collect(),
        })
    }
}

/// PSD of a sequence of 2-D fields.
pub fn psd_fields<'a>(
    variable: &str,
    fields: impl IntoIterator<Item = ArrayView2<'a, f32>>,
) -> Result<SpectrumProfile> {
    let mut acc: Option<PsdAccumulator> = None;
    for f in fields {
        let a = acc.get_or_insert_with(|| PsdAccumulator::new(f.dim().1));
        a.add_field(f)?;
    }
    acc.ok_or_else(|| Error::InvalidConfig("power spectrum of zero samples".into()))?
        .finish(variable)
}

/// PSD of one variable over a sequence of (normalized) field sets.
pub fn psd_x(seq: &[FieldSet], variable: &str) -> Result<SpectrumProfile> {
    let first = seq
        .first()
        .ok_or_else(|| Error::InvalidConfig("power spectrum of zero samples".into()))?;
    let c = first
        .channel_index(variable)
        .ok_or_else(|| Error::ShapeMismatch(format!("no variable '{variable}'")))?;
    psd_fields(variable, seq.iter().map(|fs| fs.channel(c))).map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFinite { channel: c },
        e => e,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cutoff {
    Found(usize),
    /// The predictor never drops below `(1 - p)` of the truth.
    NoDrop,
}

/// Smallest `k >= 1` with `PSD_pred(k) < (1 - p) * PSD_true(k)`.
pub fn cutoff_wavenumber(pred: &SpectrumProfile, truth: &SpectrumProfile, p: f64) -> Result<Cutoff> {
    if pred.n != truth.n {
        return Err(Error::ShapeMismatch(format!("spectra with N = {} and {}", pred.n, truth.n)));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidConfig(format!("proportion p = {p} outside (0, 1)")));
    }
    Ok((1..=pred.n / 2)
        .find(|&k| pred.psd[k] < (1.0 - p) * truth.psd[k])
        .map_or(Cutoff::NoDrop, Cutoff::Found))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableNoise {
    pub name: String,
    pub k_star: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    pub p: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub per_variable: Vec<VariableNoise>,
    pub sigma_global: f64,
}

impl NoiseCalibration {
    pub fn k_star(&self, name: &str) -> Option<usize> {
        self.per_variable.iter().find(|v| v.name == name).map(|v| v.k_star)
    }
}

/// `sigma = sqrt(N * PSD(k))`.
pub fn noise_level(profile: &SpectrumProfile, k: usize) -> f64 {
    (profile.n as f64 * profile.psd[k]).sqrt()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Calibration from per-variable (predictor, truth) spectrum pairs.
pub fn calibrate_from_spectra(pairs: &[(SpectrumProfile, SpectrumProfile)], p: f64) -> Result<NoiseCalibration> {
    let n = pairs
        .first()
        .ok_or_else(|| Error::Calibration("no variables to calibrate".into()))?
        .1
        .n;
    let mut per_variable = Vec::with_capacity(pairs.len());
    let mut any_drop = false;
    for (pred, truth) in pairs {
        let k = match cutoff_wavenumber(pred, truth, p)? {
            Cutoff::Found(k) => {
                any_drop = true;
                k
            }
            Cutoff::NoDrop => {
                log::warn!(
                    "variable '{}': predictor spectrum never drops by {p}; falling back to k = N/2",
                    truth.variable
                );
                truth.n / 2
            }
        };
        per_variable.push(VariableNoise {
            name: truth.variable.clone(),
            k_star: k,
            sigma: noise_level(truth, k),
        });
    }
    if !any_drop {
        return Err(Error::Calibration(
            "no variable shows a spectral drop: the predictor does not smooth, a corrector is unnecessary".into(),
        ));
    }
    let sigmas: Vec<f64> = per_variable.iter().map(|v| v.sigma).collect();
    Ok(NoiseCalibration {
        p,
        n,
        per_variable,
        sigma_global: median(&sigmas).expect("non-empty"),
    })
}

/// Runs the forecaster over consecutive validation pairs and calibrates each variable.
///
/// `val` must be normalized and consecutive in time.
pub fn calibrate(val: &[FieldSet], forecaster: &dyn Forecaster, p: f64) -> Result<NoiseCalibration> {
    if val.len() < 2 {
        return Err(Error::Calibration(format!(
            "validation set needs at least 2 consecutive states, got {}",
            val.len()
        )));
    }
    let preds = val[..val.len() - 1]
        .iter()
        .map(|s| forecaster.predict(s))
        .collect::<Result<Vec<_>>>()?;
    let truth = &val[1..];
    let pairs = truth[0]
        .specs
        .iter()
        .map(|s| Ok((psd_x(&preds, &s.name)?, psd_x(truth, &s.name)?)))
        .collect::<Result<Vec<_>>>()?;
    calibrate_from_spectra(&pairs, p)
}

/// Least-squares slope of `ln PSD` against `ln k` over `k_lo..=k_hi`.
pub fn log_log_slope(profile: &SpectrumProfile, k_lo: usize, k_hi: usize) -> f64 {
    let pts: Vec<(f64, f64)> = (k_lo..=k_hi.min(profile.n / 2))
        .filter(|&k| profile.psd[k] > 0.0)
        .map(|k| ((k as f64).ln(), profile.psd[k].ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Mean of `|ln(a/b)|` over `ks`, skipping bins where either side is zero.
pub fn mean_abs_log_ratio(a: &SpectrumProfile, b: &SpectrumProfile, ks: impl Iterator<Item = usize>) -> f64 {
    let v: Vec<f64> = ks
        .filter(|&k| a.psd[k] > 0.0 && b.psd[k] > 0.0)
        .map(|k| (a.psd[k] / b.psd[k]).ln().abs())
        .collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Mean of `ln(a/b)` over `ks` (signed).
pub fn mean_log_ratio(a: &SpectrumProfile, b: &SpectrumProfile, ks: impl Iterator<Item = usize>) -> f64 {
    let v: Vec<f64> = ks
        .filter(|&k| a.psd[k] > 0.0 && b.psd[k] > 0.0)
        .map(|k| (a.psd[k] / b.psd[k]).ln())
        .collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
