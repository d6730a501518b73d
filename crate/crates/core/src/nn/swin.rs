//! U-shaped encoder-decoder of shifted-window transformer blocks (SwinV2 style:
//! scaled cosine attention, log-spaced continuous position bias, residual
//! post-norm) with dual up-sampling in the decoder.

use candle_core::{Device, Module, Tensor, D};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear, reflect_pad, DualUpsample, LayerNorm, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwinUnetConfig {
    pub in_channels: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub window_size: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub mlp_ratio: usize,
    /// Hidden width of the continuous position bias MLP.
    pub cpb_hidden: usize,
    /// Predict the increment `x_{t+1} - x_t` instead of the state.
    pub residual: bool,
    /// Reflect-pad indivisible grids up to the next valid size and crop afterwards.
    pub reflect_pad: bool,
}

impl Default for SwinUnetConfig {
    fn default() -> Self {
        SwinUnetConfig {
            in_channels: 3,
            embed_dim: 32,
            patch_size: 2,
            window_size: 4,
            depths: vec![2, 2, 2],
            heads: vec![2, 4, 8],
            mlp_ratio: 4,
            cpb_hidden: 64,
            residual: false,
            reflect_pad: false,
        }
    }
}

impl SwinUnetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.in_channels == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 || self.cpb_hidden == 0 {
            return bad("predictor widths must be positive".into());
        }
        if self.patch_size == 0 || self.window_size == 0 {
            return bad("patch_size and window_size must be positive".into());
        }
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return bad(format!(
                "depths ({}) and heads ({}) must be non-empty and of equal length",
                self.depths.len(),
                self.heads.len()
            ));
        }
        for (i, &h) in self.heads.iter().enumerate() {
            let dim = self.embed_dim << i;
            if h == 0 || dim % h != 0 {
                return bad(format!("stage {i}: width {dim} is not divisible by {h} heads"));
            }
        }
        Ok(())
    }

    /// Grid dims must be multiples of this on both axes.
    pub fn granularity(&self) -> usize {
        self.patch_size * self.window_size * (1 << (self.depths.len() - 1))
    }

    /// Smallest valid grid covering `(h, w)`.
    pub fn padded_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let g = self.granularity();
        (h.div_ceil(g) * g, w.div_ceil(g) * g)
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let g = self.granularity();
        if h % g == 0 && w % g == 0 {
            return Ok(());
        }
        if self.reflect_pad {
            return Ok(());
        }
        let (ph, pw) = self.padded_dims(h, w);
        Err(Error::InvalidConfig(format!(
            "grid {h}x{w} is not divisible by {g} (patch x window x 2^(stages-1)); \
             pad to {ph}x{pw} (add {} rows, {} columns) or enable reflect_pad",
            ph - h,
            pw - w
        )))
    }
}

fn l2_normalize(x: &Tensor) -> candle_core::Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    x.broadcast_div(&n)
}

fn window_partition(x: &Tensor, w: usize) -> candle_core::Result<Tensor> {
    let (b, h, wd, c) = x.dims4()?;
    x.reshape((b, h / w, w, wd / w, w, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / w) * (wd / w), w * w, c))
}

fn window_reverse(x: &Tensor, w: usize, b: usize, h: usize, wd: usize) -> candle_core::Result<Tensor> {
    let c = x.dim(D::Minus1)?;
    x.reshape((b, h / w, wd / w, w, w, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, wd, c))
}

/// `[(2w-1)^2, 2]` log-spaced relative coordinates and the `[w^4]` lookup index.
fn relative_tables(w: usize, device: &Device) -> candle_core::Result<(Tensor, Tensor)> {
    let span = 2 * w - 1;
    let mut coords = Vec::with_capacity(span * span * 2);
    for dy in 0..span {
        for dx in 0..span {
            for d in [dy, dx] {
                let r = (d as f64 - (w as f64 - 1.0)) / (w as f64 - 1.0).max(1.0) * 8.0;
                coords.push((r.signum() * (r.abs() + 1.0).log2() / 8f64.log2()) as f32);
            }
        }
    }
    let n = w * w;
    let mut index = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = (i / w) as i64 - (j / w) as i64 + w as i64 - 1;
            let dx = (i % w) as i64 - (j % w) as i64 + w as i64 - 1;
            index.push((dy * span as i64 + dx) as u32);
        }
    }
    Ok((
        Tensor::from_vec(coords, (span * span, 2), device)?,
        Tensor::from_vec(index, n * n, device)?,
    ))
}

/// Additive `[nW, N, N]` mask that blocks attention across the wrap-around seams of a cyclic shift.
fn shift_mask(h: usize, wd: usize, w: usize, shift: usize, device: &Device) -> candle_core::Result<Tensor> {
    let region = |i: usize, n: usize| -> u8 {
        if i < n - w {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw, n) = (h / w, wd / w, w * w);
    let mut mask = Vec::with_capacity(nh * nw * n * n);
    for wy in 0..nh {
        for wx in 0..nw {
            let ids: Vec<u8> = (0..n)
                .map(|p| 3 * region(wy * w + p / w, h) + region(wx * w + p % w, wd))
                .collect();
            for a in &ids {
                for b in &ids {
                    mask.push(if a == b { 0f32 } else { -100.0 });
                }
            }
        }
    }
    Tensor::from_vec(mask, (nh * nw, n, n), device)
}

struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    logit_scale: Tensor,
    cpb1: Linear,
    cpb2: Linear,
    coords: Tensor,
    index: Tensor,
    heads: usize,
}

impl WindowAttention {
    fn new(ps: &mut ParamStore, path: &str, dim: usize, heads: usize, w: usize, cpb_hidden: usize) -> Result<Self> {
        let (coords, index) = relative_tables(w, ps.device())?;
        Ok(WindowAttention {
            qkv: linear(ps, &format!("{path}.qkv"), dim, 3 * dim, true)?,
            proj: linear(ps, &format!("{path}.proj"), dim, dim, true)?,
            logit_scale: ps.constant(&format!("{path}.logit_scale"), &[heads, 1, 1], 10f64.ln())?,
            cpb1: linear(ps, &format!("{path}.cpb.0"), 2, cpb_hidden, true)?,
            cpb2: linear(ps, &format!("{path}.cpb.1"), cpb_hidden, heads, false)?,
            coords,
            index,
            heads,
        })
    }

    /// `x: [B*nW, N, C]`, `mask: [nW, N, N]`.
    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let (bn, n, c) = x.dims3()?;
        let h = self.heads;
        let qkv = self.qkv.forward(x)?.reshape((bn, n, 3, h, c / h))?.permute((2, 0, 3, 1, 4))?;
        let q = l2_normalize(&qkv.get(0)?.contiguous()?)?;
        let k = l2_normalize(&qkv.get(1)?.contiguous()?)?;
        let v = qkv.get(2)?.contiguous()?;
        let scale = self.logit_scale.minimum(100f64.ln())?.exp()?;
        let mut attn = q.matmul(&k.t()?)?.broadcast_mul(&scale)?;

        let table = self.cpb2.forward(&self.cpb1.forward(&self.coords)?.relu()?)?;
        let bias = table.index_select(&self.index, 0)?.reshape((n, n, h))?.permute((2, 0, 1))?;
        let bias = (candle_nn::ops::sigmoid(&bias)? * 16.0)?;
        attn = attn.broadcast_add(&bias)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            attn = attn
                .reshape((bn / nw, nw, h, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bn, h, n, n))?;
        }
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((bn, n, c))?;
        self.proj.forward(&out)
    }
}

struct SwinBlock {
    attn: WindowAttention,
    norm1: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    norm2: LayerNorm,
    window: usize,
    shift: usize,
    mask: Option<Tensor>,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamStore,
        path: &str,
        dim: usize,
        heads: usize,
        res: (usize, usize),
        window: usize,
        shifted: bool,
        cfg: &SwinUnetConfig,
    ) -> Result<Self> {
        // no shift when a single window already covers the grid
        let window = window.min(res.0).min(res.1);
        let shift = if shifted && res.0 > window && res.1 > window { window / 2 } else { 0 };
        let mask = if shift > 0 {
            Some(shift_mask(res.0, res.1, window, shift, ps.device())?)
        } else {
            None
        };
        Ok(SwinBlock {
            attn: WindowAttention::new(ps, &format!("{path}.attn"), dim, heads, window, cfg.cpb_hidden)?,
            norm1: LayerNorm::new(ps, &format!("{path}.norm1"), dim)?,
            fc1: linear(ps, &format!("{path}.mlp.fc1"), dim, dim * cfg.mlp_ratio, true)?,
            fc2: linear(ps, &format!("{path}.mlp.fc2"), dim * cfg.mlp_ratio, dim, true)?,
            norm2: LayerNorm::new(ps, &format!("{path}.norm2"), dim)?,
            window,
            shift,
            mask,
        })
    }

    /// `x: [B, H, W, C]`
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let s = self.shift as i32;
        let shifted = if s > 0 { x.roll(-s, 1)?.roll(-s, 2)? } else { x.clone() };
        let windows = window_partition(&shifted, self.window)?;
        let attended = self.attn.forward(&windows, self.mask.as_ref())?;
        let mut y = window_reverse(&attended, self.window, b, h, w)?;
        if s > 0 {
            y = y.roll(s, 1)?.roll(s, 2)?;
        }
        let x = (x + self.norm1.forward(&y)?)?;
        let m = self.fc2.forward(&self.fc1.forward(&x)?.gelu()?)?;
        x + self.norm2.forward(&m)?
    }
}

struct Stage {
    blocks: Vec<SwinBlock>,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamStore,
        path: &str,
        dim: usize,
        heads: usize,
        depth: usize,
        res: (usize, usize),
        cfg: &SwinUnetConfig,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| SwinBlock::new(ps, &format!("{path}.{i}"), dim, heads, res, cfg.window_size, i % 2 == 1, cfg))
            .collect::<Result<_>>()?;
        Ok(Stage { blocks })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.blocks.iter().try_fold(x.clone(), |x, b| b.forward(&x))
    }
}

struct PatchMerging {
    reduction: Linear,
    norm: LayerNorm,
}

impl PatchMerging {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let x = x
            .reshape((b, h / 2, 2, w / 2, 2, c))?
            .permute((0, 1, 3, 4, 2, 5))?
            .contiguous()?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        self.norm.forward(&self.reduction.forward(&x)?)
    }
}

struct DecoderStage {
    up: DualUpsample,
    fuse: Linear,
    stage: Stage,
}

fn to_channels_first(x: &Tensor) -> candle_core::Result<Tensor> {
    x.permute((0, 3, 1, 2))?.contiguous()
}

fn to_channels_last(x: &Tensor) -> candle_core::Result<Tensor> {
    x.permute((0, 2, 3, 1))?.contiguous()
}

pub struct SwinUnet {
    cfg: SwinUnetConfig,
    grid: (usize, usize),
    embed: Linear,
    embed_norm: LayerNorm,
    encoder: Vec<Stage>,
    merges: Vec<PatchMerging>,
    decoder: Vec<DecoderStage>,
    final_up: DualUpsample,
    head: candle_nn::Conv2d,
}

impl SwinUnet {
    /// Builds a network for a fixed `(h, w)` input grid.
    pub fn new(ps: &mut ParamStore, cfg: &SwinUnetConfig, grid: (usize, usize)) -> Result<Self> {
        cfg.validate()?;
        cfg.check_dims(grid.0, grid.1)?;
        let (ph, pw) = cfg.padded_dims(grid.0, grid.1);
        let p = cfg.patch_size;
        let e = cfg.embed_dim;
        let stages = cfg.depths.len();
        let res = |i: usize| (ph / p >> i, pw / p >> i);

        let embed = linear(ps, "embed.proj", cfg.in_channels * p * p, e, true)?;
        let embed_norm = LayerNorm::new(ps, "embed.norm", e)?;
        let mut encoder = Vec::new();
        let mut merges = Vec::new();
        for i in 0..stages {
            let dim = e << i;
            encoder.push(Stage::new(ps, &format!("enc.{i}"), dim, cfg.heads[i], cfg.depths[i], res(i), cfg)?);
            if i + 1 < stages {
                merges.push(PatchMerging {
                    reduction: linear(ps, &format!("merge.{i}.reduction"), 4 * dim, 2 * dim, false)?,
                    norm: LayerNorm::new(ps, &format!("merge.{i}.norm"), 2 * dim)?,
                });
            }
        }
        let mut decoder = Vec::new();
        for i in (0..stages - 1).rev() {
            let dim = e << i;
            decoder.push(DecoderStage {
                up: DualUpsample::new(ps, &format!("dec.{i}.up"), 2 * dim, dim)?,
                fuse: linear(ps, &format!("dec.{i}.fuse"), 2 * dim, dim, true)?,
                stage: Stage::new(ps, &format!("dec.{i}.blocks"), dim, cfg.heads[i], cfg.depths[i], res(i), cfg)?,
            });
        }
        let final_up = if p == 2 {
            DualUpsample::new(ps, "final.up", e, e)?
        } else {
            return Err(Error::InvalidConfig(format!(
                "patch_size {p} unsupported; the decoder restores resolution with one 2x up-sample"
            )));
        };
        // zero head: an untrained network predicts the mean state, or persistence in increment form
        let head = crate::nn::conv2d_zero(ps, "final.head", e, cfg.in_channels, 1, 0)?;
        Ok(SwinUnet {
            cfg: cfg.clone(),
            grid,
            embed,
            embed_norm,
            encoder,
            merges,
            decoder,
            final_up,
            head,
        })
    }

    pub fn config(&self) -> &SwinUnetConfig {
        &self.cfg
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }
}

impl Module for SwinUnet {
    /// `[B, C, H, W] -> [B, C, H, W]`
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if (h, w) != self.grid || c != self.cfg.in_channels {
            candle_core::bail!(
                "input {c}x{h}x{w} does not match the network's {}x{}x{}",
                self.cfg.in_channels,
                self.grid.0,
                self.grid.1
            );
        }
        let (ph, pw) = self.cfg.padded_dims(h, w);
        let xin = if (ph, pw) != (h, w) {
            let (t, l) = ((ph - h) / 2, (pw - w) / 2);
            reflect_pad(x, t, ph - h - t, l, pw - w - l)?
        } else {
            x.clone()
        };

        let mut t = self.embed_norm.forward(&self.embed.forward(&crate::nn::patchify(&xin, self.cfg.patch_size)?)?)?;
        let mut skips = Vec::new();
        for (i, stage) in self.encoder.iter().enumerate() {
            t = stage.forward(&t)?;
            if let Some(m) = self.merges.get(i) {
                skips.push(t.clone());
                t = m.forward(&t)?;
            }
        }
        for dec in &self.decoder {
            let up = to_channels_last(&dec.up.forward(&to_channels_first(&t)?)?)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            t = dec.stage.forward(&dec.fuse.forward(&Tensor::cat(&[up, skip], 3)?)?)?;
        }
        let y = self.head.forward(&self.final_up.forward(&to_channels_first(&t)?)?)?;
        let y = if (ph, pw) != (h, w) {
            y.narrow(2, (ph - h) / 2, h)?.narrow(3, (pw - w) / 2, w)?
        } else {
            y
        };
        if self.cfg.residual {
            x + y
        } else {
            Ok(y)
        }
    }
}
