//! Attention-free U-Net denoiser backbone: residual blocks with scale-shift
//! conditioning on a sinusoidal noise-level embedding.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, GroupNorm, Linear};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv2d, conv2d_zero, group_norm, linear, upsample_nearest2, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnetConfig {
    pub in_channels: usize,
    pub base_embed: usize,
    pub channel_mult: Vec<usize>,
    pub res_blocks: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            in_channels: 3,
            base_embed: 32,
            channel_mult: vec![1, 2, 2, 2],
            res_blocks: 2,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_embed == 0 || self.res_blocks == 0 {
            return Err(Error::InvalidConfig("corrector widths and block counts must be positive".into()));
        }
        if self.base_embed % 4 != 0 {
            return Err(Error::InvalidConfig(format!("base_embed {} must be a multiple of 4", self.base_embed)));
        }
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return Err(Error::InvalidConfig("channel_mult must be non-empty and positive".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    /// Grid dims must be multiples of this.
    pub fn granularity(&self) -> usize {
        1 << (self.levels() - 1)
    }

    fn emb_dim(&self) -> usize {
        4 * self.base_embed
    }
}

fn groups_for(c: usize) -> usize {
    (1..=32.min(c)).rev().find(|g| c % g == 0 && c / g >= 2).unwrap_or(1)
}

/// Sinusoidal embedding of a per-sample scalar, `[B] -> [B, dim]`.
pub fn sinusoidal_embedding(t: &Tensor, dim: usize) -> candle_core::Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f32> = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp() as f32).collect();
    let freqs = Tensor::from_vec(freqs, (1, half), t.device())?;
    let args = t.unsqueeze(1)?.broadcast_mul(&freqs)?;
    Tensor::cat(&[args.cos()?, args.sin()?], 1)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    affine: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, path: &str, c_in: usize, c_out: usize, emb: usize) -> Result<Self> {
        Ok(ResBlock {
            norm1: group_norm(ps, &format!("{path}.norm1"), c_in, groups_for(c_in))?,
            conv1: conv2d(ps, &format!("{path}.conv1"), c_in, c_out, 3, 1)?,
            affine: linear(ps, &format!("{path}.affine"), emb, 2 * c_out, true)?,
            norm2: group_norm(ps, &format!("{path}.norm2"), c_out, groups_for(c_out))?,
            conv2: conv2d_zero(ps, &format!("{path}.conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out {
                Some(conv2d(ps, &format!("{path}.skip"), c_in, c_out, 1, 0)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let ss = self.affine.forward(emb)?.unsqueeze(2)?.unsqueeze(3)?;
        let c = h.dim(1)?;
        let scale = ss.narrow(1, 0, c)?;
        let shift = ss.narrow(1, c, c)?;
        let h = self
            .norm2
            .forward(&h)?
            .broadcast_mul(&(scale + 1.0)?)?
            .broadcast_add(&shift)?
            .silu()?;
        let h = self.conv2.forward(&h)?;
        match &self.skip {
            Some(s) => s.forward(x)? + h,
            None => x + h,
        }
    }
}

enum Layer {
    Block(ResBlock),
    Down,
    Up(Conv2d),
}

pub struct Unet {
    cfg: UnetConfig,
    map0: Linear,
    map1: Linear,
    stem: Conv2d,
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl Unet {
    pub fn new(ps: &mut ParamStore, cfg: &UnetConfig) -> Result<Self> {
        cfg.validate()?;
        let emb = cfg.emb_dim();
        let base = cfg.base_embed;
        let map0 = linear(ps, "map.0", base, emb, true)?;
        let map1 = linear(ps, "map.1", emb, emb, true)?;
        let stem = conv2d(ps, "stem", cfg.in_channels, base, 3, 1)?;

        let mut encoder = Vec::new();
        let mut skip_channels = vec![base];
        let mut c = base;
        for (l, &m) in cfg.channel_mult.iter().enumerate() {
            for i in 0..cfg.res_blocks {
                let co = base * m;
                encoder.push(Layer::Block(ResBlock::new(ps, &format!("enc.{l}.{i}"), c, co, emb)?));
                c = co;
                skip_channels.push(c);
            }
            if l + 1 < cfg.levels() {
                encoder.push(Layer::Down);
                skip_channels.push(c);
            }
        }
        let mut decoder = Vec::new();
        for (l, &m) in cfg.channel_mult.iter().enumerate().rev() {
            for i in 0..=cfg.res_blocks {
                let co = base * m;
                let cs = skip_channels.pop().expect("skip per decoder block");
                decoder.push(Layer::Block(ResBlock::new(ps, &format!("dec.{l}.{i}"), c + cs, co, emb)?));
                c = co;
            }
            if l > 0 {
                decoder.push(Layer::Up(conv2d(ps, &format!("dec.{l}.up"), c, c, 3, 1)?));
            }
        }
        Ok(Unet {
            cfg: cfg.clone(),
            map0,
            map1,
            stem,
            encoder,
            decoder,
            out_norm: group_norm(ps, "out.norm", c, groups_for(c))?,
            out_conv: conv2d_zero(ps, "out.conv", c, cfg.in_channels, 3, 1)?,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.cfg
    }

    /// `x: [B, C, H, W]`, `c_noise: [B]`.
    pub fn forward(&self, x: &Tensor, c_noise: &Tensor) -> candle_core::Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let g = self.cfg.granularity();
        if h % g != 0 || w % g != 0 {
            candle_core::bail!("grid {h}x{w} is not divisible by {g}");
        }
        let emb = sinusoidal_embedding(c_noise, self.cfg.base_embed)?;
        let emb = self.map1.forward(&self.map0.forward(&emb)?.silu()?)?.silu()?;

        let mut hcur = self.stem.forward(x)?;
        let mut skips = vec![hcur.clone()];
        for layer in &self.encoder {
            hcur = match layer {
                Layer::Block(b) => b.forward(&hcur, &emb)?,
                Layer::Down => hcur.avg_pool2d(2)?,
                Layer::Up(_) => unreachable!("encoder has no up-sampling"),
            };
            skips.push(hcur.clone());
        }
        for layer in &self.decoder {
            hcur = match layer {
                Layer::Block(b) => {
                    let s = skips.pop().expect("skip per decoder block");
                    b.forward(&Tensor::cat(&[hcur, s], 1)?, &emb)?
                }
                Layer::Up(conv) => conv.forward(&upsample_nearest2(&hcur)?)?,
                Layer::Down => unreachable!("decoder has no down-sampling"),
            };
        }
        self.out_conv.forward(&self.out_norm.forward(&hcur)?.silu()?)
    }
}
