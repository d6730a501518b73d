//! Neural-network building blocks on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted path. Initial values are
//! drawn from a per-parameter seeded stream, so two models built from the same
//! seed are bit-identical regardless of construction order.

pub mod checkpoint;
pub mod optim;
pub mod swin;
pub mod unet;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Linear};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub struct ParamStore {
    seed: u64,
    device: Device,
    vars: BTreeMap<String, Var>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        ParamStore {
            seed,
            device: device.clone(),
            vars: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn register(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidConfig(format!("parameter '{name}' registered twice")));
        }
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        self.vars.insert(name.to_string(), v);
        Ok(out)
    }

    fn draw(&self, name: &str, n: usize, f: impl Fn(&mut rand_chacha::ChaCha8Rng) -> f32) -> Vec<f32> {
        let mut r = rng::stream(self.seed, fnv1a(name));
        (0..n).map(|_| f(&mut r)).collect()
    }

    /// Seeded uniform draw keyed by `name`, not registered as a parameter.
    pub fn sample_uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = self.draw(name, n, |r| r.random_range(-bound..bound) as f32);
        Ok(Tensor::from_vec(data, shape, &self.device)?)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let t = self.sample_uniform(name, shape, bound)?;
        self.register(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = self.draw(name, n, |r| (rng::normal_f64(r) * std) as f32);
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.register(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, DType::F32, &self.device)? * value)?;
        self.register(name, t)
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        self.register(name, t)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn param_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `values`; names and shapes must match exactly.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} arrays, model has {}",
                values.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks array '{name}'")))?;
            if t.dims() != var.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "array '{name}': checkpoint {:?} vs model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

/// PyTorch-default linear init: uniform in `+-1/sqrt(fan_in)`.
pub fn linear(ps: &mut ParamStore, path: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = ps.uniform(&format!("{path}.weight"), &[fan_out, fan_in], bound)?;
    let b = if bias {
        Some(ps.uniform(&format!("{path}.bias"), &[fan_out], bound)?)
    } else {
        None
    };
    Ok(Linear::new(w, b))
}

pub fn linear_zero(ps: &mut ParamStore, path: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
    let w = ps.constant(&format!("{path}.weight"), &[fan_out, fan_in], 0.0)?;
    let b = ps.constant(&format!("{path}.bias"), &[fan_out], 0.0)?;
    Ok(Linear::new(w, Some(b)))
}

pub fn conv2d(ps: &mut ParamStore, path: &str, c_in: usize, c_out: usize, k: usize, padding: usize) -> Result<Conv2d> {
    let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
    let w = ps.uniform(&format!("{path}.weight"), &[c_out, c_in, k, k], bound)?;
    let b = ps.uniform(&format!("{path}.bias"), &[c_out], bound)?;
    Ok(Conv2d::new(w, Some(b), Conv2dConfig { padding, ..Default::default() }))
}

pub fn conv2d_zero(ps: &mut ParamStore, path: &str, c_in: usize, c_out: usize, k: usize, padding: usize) -> Result<Conv2d> {
    let w = ps.constant(&format!("{path}.weight"), &[c_out, c_in, k, k], 0.0)?;
    let b = ps.constant(&format!("{path}.bias"), &[c_out], 0.0)?;
    Ok(Conv2d::new(w, Some(b), Conv2dConfig { padding, ..Default::default() }))
}

pub fn group_norm(ps: &mut ParamStore, path: &str, channels: usize, groups: usize) -> Result<GroupNorm> {
    let w = ps.constant(&format!("{path}.weight"), &[channels], 1.0)?;
    let b = ps.constant(&format!("{path}.bias"), &[channels], 0.0)?;
    Ok(GroupNorm::new(w, b, channels, groups, 1e-5)?)
}

/// Layer norm over the last dimension, composed from differentiable primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, path: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: ps.constant(&format!("{path}.weight"), &[dim], 1.0)?,
            bias: ps.constant(&format!("{path}.bias"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let n = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / n)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = (xc.sqr()?.sum_keepdim(D::Minus1)? / n)?;
        xc.broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// `[B, C*4, H, W] -> [B, C, 2H, 2W]`
pub fn pixel_shuffle2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c4, h, w) = x.dims4()?;
    let c = c4 / 4;
    x.reshape((b, c, 2, 2, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, c, 2 * h, 2 * w))
}

/// `[B, C, H, W] -> [B, H/p, W/p, C*p*p]`
pub fn patchify(x: &Tensor, p: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h / p, p, w / p, p))?
        .permute((0, 2, 4, 1, 3, 5))?
        .reshape((b, h / p, w / p, c * p * p))
}

/// Row-stochastic matrix for 2x linear up-sampling with half-pixel centers and edge clamping.
pub fn bilinear_matrix(n: usize, device: &Device) -> candle_core::Result<Tensor> {
    let mut m = vec![0f32; 2 * n * n];
    for i in 0..2 * n {
        let src = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let t = src - lo as f64;
        m[i * n + lo] += (1.0 - t) as f32;
        m[i * n + hi] += t as f32;
    }
    Tensor::from_vec(m, (2 * n, n), device)
}

/// 2x bilinear up-sampling as two matrix products, so it is differentiable.
pub fn upsample_bilinear2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mh = bilinear_matrix(h, x.device())?;
    let mw = bilinear_matrix(w, x.device())?;
    // [B,C,H,W] x [W,2W] -> [B,C,H,2W]; then [2H,H] x over the H axis
    let xw = x.broadcast_matmul(&mw.t()?)?;
    let xt = xw.transpose(2, 3)?.contiguous()?;
    xt.broadcast_matmul(&mh.t()?)?.transpose(2, 3)?.contiguous()
}

/// Nearest-neighbour 2x up-sampling via broadcasting.
pub fn upsample_nearest2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))
}

fn reflect_index(i: i64, n: usize) -> u32 {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as u32
}

/// Reflect padding of the trailing two dims (`[.., H, W]`), mirror without repeating the edge.
pub fn reflect_pad(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> candle_core::Result<Tensor> {
    let dims = x.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let rows: Vec<u32> = (-(top as i64)..(h + bottom) as i64).map(|i| reflect_index(i, h)).collect();
    let cols: Vec<u32> = (-(left as i64)..(w + right) as i64).map(|i| reflect_index(i, w)).collect();
    let rows = Tensor::new(rows, x.device())?;
    let cols = Tensor::new(cols, x.device())?;
    x.index_select(&rows, dims.len() - 2)?.index_select(&cols, dims.len() - 1)
}

/// Dual up-sample block: a sub-pixel (pixel-shuffle) branch and a bilinear
/// branch, concatenated and mixed by a learned 1x1 convolution.
///
/// The sub-pixel convolution is ICNR-initialized (all four sub-kernels equal)
/// and uses edge-replicate padding, so a constant input maps to a constant
/// output at initialization.
pub struct DualUpsample {
    subpixel: Conv2d,
    bilinear: Conv2d,
    mix: Conv2d,
}

impl DualUpsample {
    pub fn new(ps: &mut ParamStore, path: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let k = 3;
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let base_w = ps.sample_uniform(&format!("{path}.icnr.weight"), &[c_out, 1, c_in, k, k], bound)?;
        let base_b = ps.sample_uniform(&format!("{path}.icnr.bias"), &[c_out, 1], bound)?;
        // channel c*4 + s of the sub-pixel conv feeds sub-position s of output channel c
        let w = base_w.broadcast_as((c_out, 4, c_in, k, k))?.reshape((c_out * 4, c_in, k, k))?.contiguous()?;
        let b = base_b.broadcast_as((c_out, 4))?.reshape(c_out * 4)?.contiguous()?;
        let w = ps.insert(&format!("{path}.subpixel.weight"), w)?;
        let b = ps.insert(&format!("{path}.subpixel.bias"), b)?;
        Ok(DualUpsample {
            subpixel: Conv2d::new(w, Some(b), Conv2dConfig::default()),
            bilinear: conv2d(ps, &format!("{path}.bilinear"), c_in, c_out, 1, 0)?,
            mix: conv2d(ps, &format!("{path}.mix"), 2 * c_out, c_out, 1, 0)?,
        })
    }
}

impl Module for DualUpsample {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let padded = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
        let sub = pixel_shuffle2(&self.subpixel.forward(&padded)?)?;
        let bil = upsample_bilinear2(&self.bilinear.forward(x)?)?;
        self.mix.forward(&Tensor::cat(&[sub, bil], 1)?)
    }
}

/// Collects a `[1, C, H, W]` tensor into an owned `[C, H, W]` array.
pub fn tensor_to_array3(t: &Tensor) -> Result<ndarray::Array3<f32>> {
    let (_, c, h, w) = t.dims4()?;
    let v = t.flatten_all()?.to_vec1::<f32>()?;
    ndarray::Array3::from_shape_vec((c, h, w), v).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

pub fn array3_to_tensor(a: &ndarray::Array3<f32>, device: &Device) -> Result<Tensor> {
    let (c, h, w) = a.dim();
    let v: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(v, (1, c, h, w), device)?)
}

/// Stacks `[C, H, W]` arrays into a `[B, C, H, W]` batch.
pub fn stack_arrays<'a>(arrays: impl IntoIterator<Item = &'a ndarray::Array3<f32>>, device: &Device) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut b = 0;
    for a in arrays {
        dims.get_or_insert(a.dim());
        if Some(a.dim()) != dims {
            return Err(Error::ShapeMismatch("batch members differ in shape".into()));
        }
        data.extend(a.iter().copied());
        b += 1;
    }
    let (c, h, w) = dims.ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
    Ok(Tensor::from_vec(data, (b, c, h, w), device)?)
}
