use candle_core::{Module, Tensor};

use super::{Init, Params};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(p: &mut Params, c_in: usize, c_out: usize, k: usize, stride: usize, gain: f64) -> Result<Self> {
        let weight = p.tensor(
            "weight",
            &[c_out, c_in, k, k],
            Init::Kaiming { fan_in: c_in * k * k, gain },
        )?;
        let bias = p.tensor("bias", &[c_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// `y = x W^T + b` over the last dimension, plus an optional low-rank
/// update `factor * x A^T B^T`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub low_rank: Option<LowRank>,
}

#[derive(Debug, Clone)]
pub struct LowRank {
    /// `r x d_in`
    pub a: Tensor,
    /// `d_out x r`
    pub b: Tensor,
    pub factor: f64,
}

fn right_matmul(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(match x.rank() {
        2 => x.matmul(&w.t()?)?,
        _ => x.broadcast_matmul(&w.t()?)?,
    })
}

impl Linear {
    pub fn new(p: &mut Params, d_in: usize, d_out: usize, bias: bool, gain: f64) -> Result<Self> {
        let weight = p.tensor("weight", &[d_out, d_in], Init::Kaiming { fan_in: d_in, gain })?;
        let bias = if bias {
            Some(p.tensor("bias", &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            low_rank: None,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = right_matmul(x, &self.weight)?;
        if let Some(lr) = &self.low_rank {
            let d = right_matmul(&right_matmul(x, &lr.a)?, &lr.b)?;
            y = (y + (d * lr.factor)?)?;
        }
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    inner: candle_nn::GroupNorm,
}

impl GroupNorm {
    pub fn new(p: &mut Params, channels: usize, groups: usize) -> Result<Self> {
        let weight = p.tensor("weight", &[channels], Init::Ones)?;
        let bias = p.tensor("bias", &[channels], Init::Zeros)?;
        let groups = groups.min(channels);
        Ok(Self {
            inner: candle_nn::GroupNorm::new(weight, bias, channels, groups, 1e-5)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}
