//! Synthetic mesoscale-like field sequences.
//!
//! Prognostic channels are Gaussian random fields with a power-law x spectrum,
//! advected semi-Lagrangian by a smooth divergence-free flow. Scales above a
//! cutoff wavenumber are damped and re-forced every step with fresh noise, so
//! they are irreducibly random while large scales stay predictable. A
//! diagnostic precipitation-like channel is derived from the convergence of
//! two prognostic channels.

use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2, filter_real, signed_k, to_complex};
use crate::grids::{channel_stats, FieldSet, Transform, VariableSpec};
use crate::gset::write_gridset;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub name: String,
    pub spectral_slope: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub units: String,
}

/// Uniform drift plus a cellular streamfunction whose strength oscillates in time.
/// Velocities are in grid cells per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub mean_u: f64,
    pub mean_v: f64,
    pub cell_amplitude: f64,
    pub cells_x: usize,
    pub cells_y: usize,
    pub modulation: f64,
    pub period_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecipConfig {
    pub name: String,
    /// Indices of the (u-like, v-like) prognostic channels.
    pub sources: [usize; 2],
    pub threshold: f64,
    pub scale: f64,
    /// Odd box-filter width applied to the convergence before thresholding.
    pub smoothing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// `[y, x]`
    pub grid: [usize; 2],
    pub channels: Vec<ChannelConfig>,
    pub flow: FlowConfig,
    pub precip: Option<PrecipConfig>,
    /// Forcing std as a fraction of each channel amplitude.
    pub forcing_amplitude: f64,
    pub forcing_cutoff_wavenumber: usize,
    /// Per-step retention of scales above the forcing cutoff.
    pub damping: f64,
    pub dt_hours: f64,
    pub seed: u64,
    pub n_steps: usize,
    pub spinup_steps: usize,
    /// train / val / test fractions
    pub splits: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        let damping: f64 = 0.5;
        SynthConfig {
            grid: [64, 96],
            channels: vec![
                ChannelConfig {
                    name: "u10".into(),
                    spectral_slope: 3.0,
                    amplitude: 4.0,
                    units: "m s-1".into(),
                },
                ChannelConfig {
                    name: "v10".into(),
                    spectral_slope: 3.0,
                    amplitude: 4.0,
                    units: "m s-1".into(),
                },
            ],
            flow: FlowConfig {
                mean_u: 1.0,
                mean_v: 0.0,
                cell_amplitude: 0.35,
                cells_x: 2,
                cells_y: 1,
                modulation: 0.2,
                period_steps: 40.0,
            },
            precip: Some(PrecipConfig {
                name: "precip".into(),
                sources: [0, 1],
                threshold: 0.4,
                scale: 10.0,
                smoothing: 3,
            }),
            // stationary small-scale variance matches the large scales when f^2 = 1 - d^2
            forcing_amplitude: (1.0 - damping * damping).sqrt(),
            forcing_cutoff_wavenumber: 8,
            damping,
            dt_hours: 6.0,
            seed: 0,
            n_steps: 200,
            spinup_steps: 30,
            splits: [0.7, 0.15, 0.15],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("synth: {m}")));
        if self.grid[0] < 16 || self.grid[1] < 16 {
            return bad(format!("grid {:?} below 16x16", self.grid));
        }
        if self.channels.is_empty() {
            return bad("no channels".into());
        }
        for c in &self.channels {
            if !(c.spectral_slope >= 0.0 && c.amplitude > 0.0) {
                return bad(format!("channel '{}' needs slope >= 0 and amplitude > 0", c.name));
            }
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad(format!("damping {} outside (0, 1]", self.damping));
        }
        if !(self.forcing_amplitude >= 0.0) {
            return bad("forcing_amplitude must be >= 0".into());
        }
        if let Some(p) = &self.precip {
            if p.sources.iter().any(|&s| s >= self.channels.len()) || p.smoothing % 2 == 0 {
                return bad("precip sources out of range or even smoothing width".into());
            }
            if self.channels.iter().any(|c| c.name == p.name) {
                return bad(format!("duplicate variable '{}'", p.name));
            }
        }
        if self.n_steps < 20 {
            return bad(format!("n_steps = {} < 20", self.n_steps));
        }
        let total: f64 = self.splits.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.splits.iter().any(|f| *f <= 0.0) {
            return bad(format!("split fractions {:?} must be positive and sum to 1", self.splits));
        }
        let sizes = self.split_sizes();
        if sizes.iter().any(|&s| s < 2) {
            return bad(format!("degenerate split sizes {sizes:?}, each split needs >= 2 steps"));
        }
        Ok(())
    }

    /// Contiguous split sizes, rounding train and val and giving test the remainder.
    pub fn split_sizes(&self) -> [usize; 3] {
        let n = self.n_steps as f64;
        let train = (n * self.splits[0]).round() as usize;
        let val = ((n * self.splits[1]).round() as usize).min(self.n_steps.saturating_sub(train));
        [train, val, self.n_steps - train - val]
    }

    pub fn variable_specs(&self) -> Vec<VariableSpec> {
        let mut specs: Vec<_> = self
            .channels
            .iter()
            .map(|c| VariableSpec::new(&c.name, &c.units))
            .collect();
        if let Some(p) = &self.precip {
            specs.push(VariableSpec::new(&p.name, "kg m-2 h-1").with_transform(Transform::Log1p));
        }
        specs
    }
}

/// Separable power-law weight `max(|k|, 1)^-slope`.
fn axis_weight(k: i64, slope: f64) -> f64 {
    (k.unsigned_abs().max(1) as f64).powf(-slope)
}

/// Power assigned to 2-D mode `(ky, kx)`; zero mean.
fn mode_power(ky: i64, kx: i64, slope: f64) -> f64 {
    if ky == 0 && kx == 0 {
        0.0
    } else {
        axis_weight(ky, slope) * axis_weight(kx, slope)
    }
}

fn above_cutoff(ky: i64, kx: i64, cutoff: usize) -> bool {
    ky.unsigned_abs().max(kx.unsigned_abs()) as usize > cutoff
}

/// Zero-mean Gaussian random field with expected x-direction PSD proportional
/// to `k^-slope` and expected variance `amplitude^2`. Only modes with
/// `max(|kx|, |ky|) > min_k` are kept when `min_k` is given (the amplitude
/// still refers to the unfiltered field).
pub fn make_grf_band(
    shape: (usize, usize),
    slope: f64,
    amplitude: f64,
    min_k: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let (ny, nx) = shape;
    let white = Array2::from_shape_vec(shape, (0..ny * nx).map(|_| rng::normal_f64(rng)).collect())
        .expect("shape");
    let mut total = 0.0;
    for iy in 0..ny {
        for ix in 0..nx {
            total += mode_power(signed_k(iy, ny), signed_k(ix, nx), slope);
        }
    }
    // white noise has E|W(k)|^2 = ny*nx, so var(out) = sum(P) / (ny*nx) before scaling
    let scale = amplitude / (total / (ny * nx) as f64).sqrt();
    let mut spec = to_complex(&white);
    fft2(&mut spec, false);
    for ((iy, ix), v) in spec.indexed_iter_mut() {
        let (ky, kx) = (signed_k(iy, ny), signed_k(ix, nx));
        let keep = min_k.is_none_or(|c| above_cutoff(ky, kx, c));
        *v *= if keep { scale * mode_power(ky, kx, slope).sqrt() } else { 0.0 };
    }
    fft2(&mut spec, true);
    spec.mapv(|v| v.re)
}

pub fn make_grf(shape: (usize, usize), slope: f64, amplitude: f64, seed: u64) -> Array2<f64> {
    make_grf_band(shape, slope, amplitude, None, &mut rng::stream(seed, 0))
}

/// Expected variance of the stochastic forcing added to channel `c` each step.
pub fn forcing_variance(cfg: &SynthConfig, c: usize) -> f64 {
    let (ny, nx) = (cfg.grid[0], cfg.grid[1]);
    let slope = cfg.channels[c].spectral_slope;
    let (mut total, mut band) = (0.0, 0.0);
    for iy in 0..ny {
        for ix in 0..nx {
            let (ky, kx) = (signed_k(iy, ny), signed_k(ix, nx));
            let p = mode_power(ky, kx, slope);
            total += p;
            if above_cutoff(ky, kx, cfg.forcing_cutoff_wavenumber) {
                band += p;
            }
        }
    }
    (cfg.forcing_amplitude * cfg.channels[c].amplitude).powi(2) * band / total
}

/// Velocity `(u, v)` in cells per step at fractional position `(y, x)` and step `t`.
pub fn flow_velocity(flow: &FlowConfig, grid: [usize; 2], t: f64, y: f64, x: f64) -> (f64, f64) {
    use std::f64::consts::TAU;
    let (ny, nx) = (grid[0] as f64, grid[1] as f64);
    let phase = if flow.period_steps > 0.0 { TAU * t / flow.period_steps } else { 0.0 };
    let a = flow.cell_amplitude * (1.0 + flow.modulation * phase.sin());
    let (ax, ay) = (TAU * flow.cells_x as f64 / nx, TAU * flow.cells_y as f64 / ny);
    // psi = a * sin(ax x) * sin(ay y);  u = d psi/dy,  v = -d psi/dx
    let u = flow.mean_u + a * ay * (ax * x).sin() * (ay * y).cos();
    let v = flow.mean_v - a * ax * (ax * x).cos() * (ay * y).sin();
    (u, v)
}

fn catmull_rom(p: [f64; 4], t: f64) -> f64 {
    let [p0, p1, p2, p3] = p;
    0.5 * (2.0 * p1
        + (-p0 + p2) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t * t * t)
}

/// Periodic bicubic (Catmull-Rom) sample of `f` at `(y, x)`.
fn sample_periodic(f: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (ny, nx) = f.dim();
    let (fy, fx) = (y.floor(), x.floor());
    let (ty, tx) = (y - fy, x - fx);
    let wrap = |i: i64, n: usize| i.rem_euclid(n as i64) as usize;
    let mut rows = [0.0; 4];
    for (j, r) in rows.iter_mut().enumerate() {
        let iy = wrap(fy as i64 + j as i64 - 1, ny);
        let mut p = [0.0; 4];
        for (i, v) in p.iter_mut().enumerate() {
            *v = f[[iy, wrap(fx as i64 + i as i64 - 1, nx)]];
        }
        *r = if tx == 0.0 { p[1] } else { catmull_rom(p, tx) };
    }
    if ty == 0.0 {
        rows[1]
    } else {
        catmull_rom(rows, ty)
    }
}

/// Departure points of a two-iteration midpoint semi-Lagrangian scheme.
fn departure_points(cfg: &SynthConfig, t: f64) -> Vec<(f64, f64)> {
    let (ny, nx) = (cfg.grid[0], cfg.grid[1]);
    let mut out = Vec::with_capacity(ny * nx);
    for y in 0..ny {
        for x in 0..nx {
            let (y, x) = (y as f64, x as f64);
            let (u0, v0) = flow_velocity(&cfg.flow, cfg.grid, t, y, x);
            let (u, v) = flow_velocity(&cfg.flow, cfg.grid, t + 0.5, y - 0.5 * v0, x - 0.5 * u0);
            out.push((y - v, x - u));
        }
    }
    out
}

fn advect(f: &Array2<f64>, departures: &[(f64, f64)]) -> Array2<f64> {
    let (ny, nx) = f.dim();
    Array2::from_shape_vec(
        (ny, nx),
        departures.iter().map(|&(y, x)| sample_periodic(f, y, x)).collect(),
    )
    .expect("shape")
}

/// Rectified, thresholded convergence of the two source channels.
pub fn precipitation(u: &Array2<f64>, v: &Array2<f64>, p: &PrecipConfig) -> Array2<f64> {
    let (ny, nx) = u.dim();
    let at = |a: &Array2<f64>, y: i64, x: i64| a[[y.rem_euclid(ny as i64) as usize, x.rem_euclid(nx as i64) as usize]];
    let conv = Array2::from_shape_fn((ny, nx), |(y, x)| {
        let (y, x) = (y as i64, x as i64);
        -0.5 * ((at(u, y, x + 1) - at(u, y, x - 1)) + (at(v, y + 1, x) - at(v, y - 1, x)))
    });
    let h = (p.smoothing / 2) as i64;
    let norm = (p.smoothing * p.smoothing) as f64;
    Array2::from_shape_fn((ny, nx), |(y, x)| {
        let mut s = 0.0;
        for dy in -h..=h {
            for dx in -h..=h {
                s += at(&conv, y as i64 + dy, x as i64 + dx);
            }
        }
        p.scale * (s / norm - p.threshold).max(0.0)
    })
}

fn assemble(cfg: &SynthConfig, prognostic: Vec<Array2<f64>>, time_index: i64) -> Result<FieldSet> {
    let (ny, nx) = (cfg.grid[0], cfg.grid[1]);
    // precip is derived from the stored (f32) prognostic values
    let mut planes: Vec<Array2<f64>> = prognostic.into_iter().map(|a| a.mapv(|v| v as f32 as f64)).collect();
    if let Some(p) = &cfg.precip {
        let pr = precipitation(&planes[p.sources[0]], &planes[p.sources[1]], p);
        planes.push(pr);
    }
    let mut values = Array3::<f32>::zeros((planes.len(), ny, nx));
    for (mut dst, src) in values.outer_iter_mut().zip(&planes) {
        dst.zip_mut_with(src, |d, s| *d = *s as f32);
    }
    FieldSet::new(values, cfg.variable_specs(), time_index, cfg.dt_hours)
}

/// Initial state: independent random fields per prognostic channel.
pub fn initial_state(cfg: &SynthConfig) -> Result<FieldSet> {
    cfg.validate()?;
    let shape = (cfg.grid[0], cfg.grid[1]);
    let planes = cfg
        .channels
        .iter()
        .enumerate()
        .map(|(c, ch)| {
            let mut r = rng::stream(cfg.seed, rng::stream_id(1, c as u64));
            make_grf_band(shape, ch.spectral_slope, ch.amplitude, None, &mut r)
        })
        .collect();
    assemble(cfg, planes, 0)
}

/// Advances `state` (physical units) by one step. Randomness is keyed by
/// `(cfg.seed, state.time_index)`.
pub fn step(state: &FieldSet, cfg: &SynthConfig) -> Result<FieldSet> {
    let (ny, nx) = (cfg.grid[0], cfg.grid[1]);
    if state.dims() != (cfg.variable_specs().len(), ny, nx) {
        return Err(Error::ShapeMismatch(format!(
            "state {:?} was not generated under this config",
            state.dims()
        )));
    }
    let t = state.time_index;
    let deps = departure_points(cfg, t as f64);
    let cutoff = cfg.forcing_cutoff_wavenumber;
    let mut planes = Vec::with_capacity(cfg.channels.len());
    for (c, ch) in cfg.channels.iter().enumerate() {
        let cur = state.channel(c).mapv(|v| v as f64);
        let adv = advect(&cur, &deps);
        let mut next = if cfg.damping == 1.0 {
            adv
        } else {
            let d = cfg.damping;
            filter_real(&adv, |ky, kx| if above_cutoff(ky, kx, cutoff) { d } else { 1.0 })
        };
        if cfg.forcing_amplitude > 0.0 {
            let mut r = rng::stream(cfg.seed, rng::stream_id(2, ((t as u64) << 8) | c as u64));
            let f = make_grf_band((ny, nx), ch.spectral_slope, cfg.forcing_amplitude * ch.amplitude, Some(cutoff), &mut r);
            next += &f;
        }
        planes.push(next);
    }
    assemble(cfg, planes, t + 1)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<FieldSet>,
    pub val: Vec<FieldSet>,
    pub test: Vec<FieldSet>,
}

impl Dataset {
    pub fn splits(&self) -> [(&'static str, &[FieldSet]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }

    pub fn write(&self, dir: impl AsRef<Path>, seed: u64) -> Result<()> {
        for (name, seq) in self.splits() {
            write_gridset(seq, seed, dir.as_ref().join(format!("{name}.gset")))?;
        }
        Ok(())
    }
}

/// Runs spin-up plus `n_steps` steps and splits contiguously in time.
/// Normalization statistics come from the train split only.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut state = initial_state(cfg)?;
    for _ in 0..cfg.spinup_steps {
        state = step(&state, cfg)?;
    }
    let offset = state.time_index;
    let mut all = Vec::with_capacity(cfg.n_steps);
    for _ in 0..cfg.n_steps {
        let mut s = state.clone();
        s.time_index -= offset;
        all.push(s);
        state = step(&state, cfg)?;
    }
    let [n_train, n_val, _] = cfg.split_sizes();
    let stats = channel_stats(&all[..n_train])?;
    for fs in &mut all {
        for (spec, &(m, s)) in fs.specs.iter_mut().zip(&stats) {
            spec.norm_mean = m;
            spec.norm_std = s;
        }
    }
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    Ok(Dataset { train: all, val, test })
}

/// Stacks the rows of `fields` into one `f32` array, for pooled spectra.
pub fn rows_of(fields: &[Array2<f64>]) -> Array2<f32> {
    let views: Vec<_> = fields.iter().map(|f| f.mapv(|v| v as f32)).collect();
    ndarray::concatenate(Axis(0), &views.iter().map(|v| v.view()).collect::<Vec<_>>()).expect("same width")
}
