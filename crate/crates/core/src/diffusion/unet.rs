use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Init, Linear, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub cond_tokens: usize,
    pub cond_dim: usize,
    pub heads: usize,
    pub groups: usize,
}

impl UNetConfig {
    pub fn desk(image_size: usize) -> Self {
        Self {
            image_size,
            base_channels: 32,
            cond_tokens: 2,
            cond_dim: 64,
            heads: 4,
            groups: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if !self.image_size.is_multiple_of(4) || self.image_size < 4 {
            return Err(Error::invalid("unet config", "image_size must be a positive multiple of 4"));
        }
        if c == 0 || self.heads == 0 || !(2 * c).is_multiple_of(self.heads) || self.groups == 0 || !c.is_multiple_of(self.groups) {
            return Err(Error::invalid("unet config", "channels must divide into heads and groups"));
        }
        if self.cond_tokens == 0 || self.cond_dim == 0 {
            return Err(Error::invalid("unet config", "conditioning must have at least one token and dimension"));
        }
        Ok(())
    }
}

/// Sinusoidal timestep features, one row of width `dim` per timestep.
pub fn timestep_features(ts: &[usize], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        v.extend(freqs.iter().map(|f| (t * f).sin()));
        v.extend(freqs.iter().map(|f| (t * f).cos()));
        v.resize(v.len() + dim - 2 * half, 0.0);
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), device)?)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(p: &mut Params, c_in: usize, c_out: usize, emb_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut p.push("norm1"), c_in, groups)?,
            conv1: Conv2d::new(&mut p.push("conv1"), c_in, c_out, 3, 1, 1.0)?,
            emb: Linear::new(&mut p.push("emb"), emb_dim, c_out, true, 0.5)?,
            norm2: GroupNorm::new(&mut p.push("norm2"), c_out, groups)?,
            conv2: Conv2d::new(&mut p.push("conv2"), c_out, c_out, 3, 1, 0.1)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&mut p.push("skip"), c_in, c_out, 1, 1, 1.0)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let e = self.emb.forward(emb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&e)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((s + h)?)
    }
}

struct Attention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
}

impl Attention {
    fn new(p: &mut Params, c: usize, context_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            to_q: Linear::new(&mut p.push("to_q"), c, c, false, 0.5)?,
            to_k: Linear::new(&mut p.push("to_k"), context_dim, c, false, 0.5)?,
            to_v: Linear::new(&mut p.push("to_v"), context_dim, c, false, 0.5)?,
            to_out: Linear::new(&mut p.push("to_out"), c, c, true, 0.5)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// `x: (B, N, C)`, `context: (B, M, Dc)`.
    fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let q = self.split_heads(&self.to_q.forward(x)?)?;
        let k = self.split_heads(&self.to_k.forward(context)?)?;
        let v = self.split_heads(&self.to_v.forward(context)?)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let w = candle_nn::ops::softmax(&(q.matmul(&k.t()?.contiguous()?)? * scale)?, D::Minus1)?;
        let o = w.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
        self.to_out.forward(&o)
    }
}

/// Self-attention over spatial tokens followed by cross-attention to the
/// conditioning tokens.
struct AttnBlock {
    norm1: GroupNorm,
    self_attn: Attention,
    norm2: GroupNorm,
    cross_attn: Attention,
}

impl AttnBlock {
    fn new(p: &mut Params, c: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut p.push("norm1"), c, cfg.groups)?,
            self_attn: Attention::new(&mut p.push("self"), c, c, cfg.heads)?,
            norm2: GroupNorm::new(&mut p.push("norm2"), c, cfg.groups)?,
            cross_attn: Attention::new(&mut p.push("cross"), c, cfg.cond_dim, cfg.heads)?,
        })
    }

    fn tokens(x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
    }

    fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let t = Self::tokens(&self.norm1.forward(x)?)?;
        let a = self.self_attn.forward(&t, &t)?;
        let x = (x + a.transpose(1, 2)?.reshape((b, c, h, w))?)?;
        let t = Self::tokens(&self.norm2.forward(&x)?)?;
        let a = self.cross_attn.forward(&t, cond)?;
        Ok((x + a.transpose(1, 2)?.reshape((b, c, h, w))?)?)
    }

    fn linears_mut(&mut self, prefix: &str) -> Vec<(String, &mut Linear)> {
        let mut v = Vec::new();
        for (name, a) in [("self", &mut self.self_attn), ("cross", &mut self.cross_attn)] {
            v.push((format!("{prefix}.{name}.to_q"), &mut a.to_q));
            v.push((format!("{prefix}.{name}.to_k"), &mut a.to_k));
            v.push((format!("{prefix}.{name}.to_v"), &mut a.to_v));
            v.push((format!("{prefix}.{name}.to_out"), &mut a.to_out));
        }
        v
    }
}

/// Two-level conditional UNet predicting the noise in `z_t`.
pub struct UNet {
    time1: Linear,
    time2: Linear,
    cond_proj: Linear,
    conv_in: Conv2d,
    d1: ResBlock,
    down1: Conv2d,
    d2: ResBlock,
    d2_attn: AttnBlock,
    down2: Conv2d,
    mid1: ResBlock,
    mid_attn: AttnBlock,
    mid2: ResBlock,
    up2: Conv2d,
    u2: ResBlock,
    u2_attn: AttnBlock,
    up1: Conv2d,
    u1: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    base_channels: usize,
    image_size: usize,
}

impl UNet {
    pub fn new(p: &mut Params, cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let e = 4 * c;
        let g = cfg.groups;
        Ok(Self {
            time1: Linear::new(&mut p.push("time1"), c, e, true, 1.0)?,
            time2: Linear::new(&mut p.push("time2"), e, e, true, 1.0)?,
            cond_proj: Linear::new(&mut p.push("cond_proj"), cfg.cond_dim, e, true, 1.0)?,
            conv_in: Conv2d::new(&mut p.push("conv_in"), 3, c, 3, 1, 1.0)?,
            d1: ResBlock::new(&mut p.push("d1"), c, c, e, g)?,
            down1: Conv2d::new(&mut p.push("down1"), c, c, 3, 2, 1.0)?,
            d2: ResBlock::new(&mut p.push("d2"), c, 2 * c, e, g)?,
            d2_attn: AttnBlock::new(&mut p.push("d2_attn"), 2 * c, cfg)?,
            down2: Conv2d::new(&mut p.push("down2"), 2 * c, 2 * c, 3, 2, 1.0)?,
            mid1: ResBlock::new(&mut p.push("mid1"), 2 * c, 2 * c, e, g)?,
            mid_attn: AttnBlock::new(&mut p.push("mid_attn"), 2 * c, cfg)?,
            mid2: ResBlock::new(&mut p.push("mid2"), 2 * c, 2 * c, e, g)?,
            up2: Conv2d::new(&mut p.push("up2"), 2 * c, 2 * c, 3, 1, 1.0)?,
            u2: ResBlock::new(&mut p.push("u2"), 4 * c, 2 * c, e, g)?,
            u2_attn: AttnBlock::new(&mut p.push("u2_attn"), 2 * c, cfg)?,
            up1: Conv2d::new(&mut p.push("up1"), 2 * c, c, 3, 1, 1.0)?,
            u1: ResBlock::new(&mut p.push("u1"), 2 * c, c, e, g)?,
            norm_out: GroupNorm::new(&mut p.push("norm_out"), c, g)?,
            conv_out: Conv2d::new(&mut p.push("conv_out"), c, 3, 3, 1, 0.1)?,
            base_channels: c,
            image_size: cfg.image_size,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Predicted noise for `z: (B, 3, S, S)` at per-sample timesteps `ts`
    /// (or one shared timestep) with conditioning tokens `cond: (B, L, D)`.
    pub fn forward(&self, z: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        let tf = timestep_features(ts, self.base_channels, z.device())?.to_dtype(z.dtype())?;
        let temb = self.time2.forward(&self.time1.forward(&tf)?.silu()?)?;
        let pooled = cond.mean(1)?;
        let emb = self.cond_proj.forward(&pooled)?.broadcast_add(&temb)?.silu()?;

        let h0 = self.conv_in.forward(z)?;
        let h1 = self.d1.forward(&h0, &emb)?;
        let h = self.down1.forward(&h1)?;
        let h2 = self.d2_attn.forward(&self.d2.forward(&h, &emb)?, cond)?;
        let h = self.down2.forward(&h2)?;
        let h = self.mid1.forward(&h, &emb)?;
        let h = self.mid_attn.forward(&h, cond)?;
        let h = self.mid2.forward(&h, &emb)?;
        let (_, _, s2, _) = h2.dims4()?;
        let h = self.up2.forward(&h.upsample_nearest2d(s2, s2)?)?;
        let h = self.u2.forward(&Tensor::cat(&[&h, &h2], 1)?, &emb)?;
        let h = self.u2_attn.forward(&h, cond)?;
        let (_, _, s1, _) = h1.dims4()?;
        let h = self.up1.forward(&h.upsample_nearest2d(s1, s1)?)?;
        let h = self.u1.forward(&Tensor::cat(&[&h, &h1], 1)?, &emb)?;
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }

    /// The attention projections that adapters may target, with parameter-style names.
    pub fn attention_linears_mut(&mut self) -> Vec<(String, &mut Linear)> {
        let mut v = self.d2_attn.linears_mut("d2_attn");
        v.extend(self.mid_attn.linears_mut("mid_attn"));
        v.extend(self.u2_attn.linears_mut("u2_attn"));
        v
    }
}

/// Learned conditioning tokens per class plus a trailing null entry.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// `(n_classes + 1, L, D)`
    pub table: Tensor,
    pub n_classes: usize,
}

pub const COND_TABLE: &str = "cond.table";

impl Conditioning {
    pub fn new(p: &mut Params, n_classes: usize, cfg: &UNetConfig) -> Result<Self> {
        let table = p.tensor(COND_TABLE, &[n_classes + 1, cfg.cond_tokens, cfg.cond_dim], Init::Normal(1.0))?;
        Ok(Self { table, n_classes })
    }

    pub fn null_index(&self) -> usize {
        self.n_classes
    }

    /// Token batch for class ids, `None` selecting the null embedding.
    pub fn tokens(&self, classes: &[Option<usize>]) -> Result<Tensor> {
        let idx: Vec<u32> = classes
            .iter()
            .map(|c| match c {
                Some(c) if *c < self.n_classes => Ok(*c as u32),
                Some(c) => Err(Error::invalid("conditioning", format!("class {c} out of range"))),
                None => Ok(self.n_classes as u32),
            })
            .collect::<Result<_>>()?;
        let idx = Tensor::from_vec(idx, classes.len(), self.table.device())?;
        Ok(self.table.index_select(&idx, 0)?)
    }
}
