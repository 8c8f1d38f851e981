use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamStore, Params};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    /// Cosine similarity between normalized features and class weights.
    Cosine,
}

/// Residual conv net shape: a stem conv, then one stage per width with
/// stride 2 after the first, then global average pooling and a head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub stem_stride: usize,
}

impl ArchSpec {
    /// Named presets: `desk` (about 1.2M parameters for 64x64 input), `tiny`
    /// (for small images and tests) and `full-scale` (a 34-layer residual net).
    pub fn preset(id: &str) -> Result<Self> {
        Ok(match id {
            "desk" => Self {
                widths: vec![32, 64, 128, 256],
                blocks_per_stage: vec![1; 4],
                stem_stride: 2,
            },
            "tiny" => Self {
                widths: vec![16, 32, 64, 128],
                blocks_per_stage: vec![1; 4],
                stem_stride: 1,
            },
            "full-scale" => Self {
                widths: vec![64, 128, 256, 512],
                blocks_per_stage: vec![3, 4, 6, 3],
                stem_stride: 2,
            },
            other => return Err(Error::invalid("architecture", format!("unknown preset {other}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.blocks_per_stage.len() {
            return Err(Error::invalid("architecture", "widths and blocks_per_stage must be nonempty and equal length"));
        }
        if self.widths.contains(&0) || self.blocks_per_stage.contains(&0) || self.stem_stride == 0 {
            return Err(Error::invalid("architecture", "sizes must be positive"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }
}

struct Block {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl Block {
    fn new(p: &mut Params, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let conv1 = Conv2d::new(&mut p.push("conv1"), c_in, c_out, 3, stride, 1.0)?;
        let conv2 = Conv2d::new(&mut p.push("conv2"), c_out, c_out, 3, 1, 0.25)?;
        let shortcut = if stride != 1 || c_in != c_out {
            Some(Conv2d::new(&mut p.push("shortcut"), c_in, c_out, 1, stride, 0.5)?)
        } else {
            None
        };
        Ok(Self { conv1, conv2, shortcut })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + s)?.relu()?)
    }
}

/// Residual conv net classifier. `forward` returns raw head outputs and the
/// pooled penultimate features; [`ResNet::logits`] applies the output scale.
pub struct ResNet {
    stem: Conv2d,
    blocks: Vec<Block>,
    pub head: Linear,
    pub head_kind: HeadKind,
    pub output_scale: f64,
}

impl ResNet {
    pub fn new(p: &mut Params, arch: &ArchSpec, n_classes: usize, head_kind: HeadKind, output_scale: f64) -> Result<Self> {
        arch.validate()?;
        let stem = Conv2d::new(&mut p.push("stem"), 3, arch.widths[0], 3, arch.stem_stride, 1.0)?;
        let mut blocks = Vec::new();
        let mut c_in = arch.widths[0];
        for (s, (&w, &n)) in arch.widths.iter().zip(&arch.blocks_per_stage).enumerate() {
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(Block::new(&mut p.push(&format!("stage{s}.block{b}")), c_in, w, stride)?);
                c_in = w;
            }
        }
        let head = Self::new_head(p, c_in, n_classes, head_kind)?;
        Ok(Self {
            stem,
            blocks,
            head,
            head_kind,
            output_scale,
        })
    }

    pub fn new_head(p: &mut Params, d: usize, n_classes: usize, kind: HeadKind) -> Result<Linear> {
        Linear::new(&mut p.push("head"), d, n_classes, kind == HeadKind::Linear, 0.5)
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(x)?.relu()?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h.mean((2, 3))?)
    }

    pub fn head_forward(&self, features: &Tensor) -> Result<Tensor> {
        head_forward(&self.head, self.head_kind, features)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.features(x)?;
        Ok((self.head_forward(&f)?, f))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.output(&self.forward(x)?.0)
    }

    pub fn output(&self, z: &Tensor) -> Result<Tensor> {
        Ok(if self.output_scale == 1.0 { z.clone() } else { (z * self.output_scale)? })
    }
}

pub(crate) fn head_forward(head: &Linear, kind: HeadKind, features: &Tensor) -> Result<Tensor> {
    match kind {
        HeadKind::Linear => head.forward(features),
        HeadKind::Cosine => {
            let f = l2_normalize(features)?;
            let w = l2_normalize(&head.weight)?;
            Ok(f.matmul(&w.t()?)?)
        }
    }
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Batched evaluation outputs on a fixed image set.
pub struct Predictions {
    /// Scaled logits, one row per sample.
    pub logits: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
}

impl Predictions {
    pub fn argmax(&self) -> Vec<usize> {
        self.logits
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

pub(crate) fn rows_f64(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2()?)
}

/// Builds a store and network from scratch with deterministic initialization.
pub fn init_resnet(
    arch: &ArchSpec,
    n_classes: usize,
    head_kind: HeadKind,
    output_scale: f64,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<(ParamStore, ResNet)> {
    let mut store = ParamStore::new(dtype, device);
    let mut rng = SplitMix64::labelled(seed, "classifier/init");
    let net = ResNet::new(&mut Params::new(&mut store, &mut rng, true), arch, n_classes, head_kind, output_scale)?;
    Ok((store, net))
}
