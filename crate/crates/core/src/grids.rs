//! Gridded multi-variable fields and their normalization.
//!
//! A [`FieldSet`] is one time slice of a `[channel, y, x]` grid together with
//! the per-variable metadata needed to move between physical and normalized
//! units. All model code works in normalized units; verification converts back.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pointwise transform applied before z-scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    None,
    /// `ln(1 + v)`, for non-negative heavy-tailed variables such as precipitation.
    Log1p,
}

impl Transform {
    pub fn forward(self, v: f64) -> f64 {
        match self {
            Transform::None => v,
            Transform::Log1p => v.ln_1p(),
        }
    }

    /// Inverse transform. `Log1p` clamps at zero since its domain is non-negative.
    pub fn inverse(self, t: f64) -> f64 {
        match self {
            Transform::None => t,
            Transform::Log1p => t.exp_m1().max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    /// "surface" or a pressure level in hPa.
    pub level: String,
    pub units: String,
    pub norm_mean: f64,
    pub norm_std: f64,
    #[serde(default)]
    pub transform: Transform,
}

impl VariableSpec {
    pub fn new(name: impl Into<String>, units: impl Into<String>) -> Self {
        VariableSpec {
            name: name.into(),
            level: "surface".into(),
            units: units.into(),
            norm_mean: 0.0,
            norm_std: 1.0,
            transform: Transform::None,
        }
    }

    pub fn with_transform(mut self, transform: Transform) -> Self {
        self.transform = transform;
        self
    }

    pub fn with_stats(mut self, mean: f64, std: f64) -> Self {
        self.norm_mean = mean;
        self.norm_std = std;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.norm_std.is_finite() && self.norm_std > 0.0) || !self.norm_mean.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "variable '{}': normalization needs finite mean and std > 0 (got {}, {})",
                self.name, self.norm_mean, self.norm_std
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn normalize_value(&self, v: f64) -> f64 {
        (self.transform.forward(v) - self.norm_mean) / self.norm_std
    }

    #[inline]
    pub fn denormalize_value(&self, z: f64) -> f64 {
        self.transform.inverse(z * self.norm_std + self.norm_mean)
    }
}

/// One time slice of a multi-channel grid, indexed `[channel, y, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSet {
    pub values: Array3<f32>,
    pub specs: Vec<VariableSpec>,
    pub time_index: i64,
    pub dt_hours: f64,
}

/// Smallest grid edge accepted by [`FieldSet::validate`].
pub const MIN_GRID: usize = 16;

impl FieldSet {
    pub fn new(values: Array3<f32>, specs: Vec<VariableSpec>, time_index: i64, dt_hours: f64) -> Result<Self> {
        if values.dim().0 != specs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} channels but {} variable specs",
                values.dim().0,
                specs.len()
            )));
        }
        for (i, a) in specs.iter().enumerate() {
            if specs[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::InvalidConfig(format!("duplicate variable name '{}'", a.name)));
            }
        }
        Ok(FieldSet {
            values,
            specs,
            time_index,
            dt_hours,
        })
    }

    /// `(channels, y, x)`
    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f32> {
        self.values.index_axis(Axis(0), c)
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Same data with different values, e.g. a model output for this input.
    pub fn with_values(&self, values: Array3<f32>) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(Error::ShapeMismatch(format!(
                "expected {:?}, got {:?}",
                self.values.dim(),
                values.dim()
            )));
        }
        Ok(FieldSet {
            values,
            specs: self.specs.clone(),
            time_index: self.time_index,
            dt_hours: self.dt_hours,
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        for (c, ch) in self.values.outer_iter().enumerate() {
            if ch.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { channel: c });
            }
        }
        Ok(())
    }

    /// Full invariant check: finite values, grid edges of at least [`MIN_GRID`].
    pub fn validate(&self) -> Result<()> {
        let (_, y, x) = self.dims();
        if y < MIN_GRID || x < MIN_GRID {
            return Err(Error::ShapeMismatch(format!("grid {y}x{x} smaller than {MIN_GRID}x{MIN_GRID}")));
        }
        for s in &self.specs {
            s.validate()?;
        }
        self.check_finite()
    }

    /// Same variables and grid size.
    pub fn compatible_with(&self, other: &FieldSet) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        let a: Vec<_> = self.specs.iter().map(|s| s.name.as_str()).collect();
        let b: Vec<_> = other.specs.iter().map(|s| s.name.as_str()).collect();
        if a != b {
            return Err(Error::ShapeMismatch(format!("variables {a:?} vs {b:?}")));
        }
        Ok(())
    }
}

fn map_channels(fs: &FieldSet, f: impl Fn(&VariableSpec, f64) -> f64) -> Result<FieldSet> {
    for s in &fs.specs {
        s.validate()?;
    }
    let mut out = fs.values.clone();
    for (c, mut ch) in out.outer_iter_mut().enumerate() {
        let spec = &fs.specs[c];
        for v in ch.iter_mut() {
            if !v.is_finite() {
                return Err(Error::NonFinite { channel: c });
            }
            *v = f(spec, *v as f64) as f32;
        }
    }
    fs.with_values(out)
}

/// Per channel `(T(v) - mean) / std`.
pub fn normalize(fs: &FieldSet) -> Result<FieldSet> {
    map_channels(fs, |s, v| s.normalize_value(v))
}

/// Inverse of [`normalize`].
pub fn denormalize(fs: &FieldSet) -> Result<FieldSet> {
    map_channels(fs, |s, z| s.denormalize_value(z))
}

/// Offsets of a centered window: `floor((dim - out) / 2)` on each axis.
pub fn center_offsets(dims: (usize, usize), out: (usize, usize)) -> Result<(usize, usize)> {
    if out.0 > dims.0 || out.1 > dims.1 || out.0 == 0 || out.1 == 0 {
        return Err(Error::ShapeMismatch(format!(
            "crop {}x{} does not fit in {}x{}",
            out.0, out.1, dims.0, dims.1
        )));
    }
    Ok(((dims.0 - out.0) / 2, (dims.1 - out.1) / 2))
}

pub fn crop_center(fs: &FieldSet, y_out: usize, x_out: usize) -> Result<FieldSet> {
    let (_, y, x) = fs.dims();
    let (oy, ox) = center_offsets((y, x), (y_out, x_out))?;
    let values = fs.values.slice(s![.., oy..oy + y_out, ox..ox + x_out]).to_owned();
    Ok(FieldSet {
        values,
        specs: fs.specs.clone(),
        time_index: fs.time_index,
        dt_hours: fs.dt_hours,
    })
}

/// Per-channel mean and std of `T(v)` over a sequence; used for train-split statistics.
pub fn channel_stats(seq: &[FieldSet]) -> Result<Vec<(f64, f64)>> {
    let first = seq
        .first()
        .ok_or_else(|| Error::InvalidConfig("statistics of an empty sequence".into()))?;
    let mut out = Vec::with_capacity(first.channels());
    for c in 0..first.channels() {
        let t = first.specs[c].transform;
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        for fs in seq {
            for &v in fs.channel(c).iter() {
                let v = t.forward(v as f64);
                n += 1;
                sum += v;
                sq += v * v;
            }
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        // Constant channels keep a unit scale instead of dividing by zero.
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        out.push((mean, std));
    }
    Ok(out)
}

/// Stacks one channel across a sequence into 2-D slices.
pub fn channel_series(seq: &[FieldSet], c: usize) -> Vec<Array2<f32>> {
    seq.iter().map(|fs| fs.channel(c).to_owned()).collect()
}
