use candle_core::{Tensor, D};
use rand::Rng;

use super::{tensor_from_f64, ParamStore, Precision};
use crate::error::Result;

/// Additive attention mask value for excluded keys.
pub const NEG_MASK: f64 = -1e9;

/// Log-softmax over the last dimension. The max shift carries no gradient,
/// which is exact because the result is shift-invariant.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let z = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&z)?)
}

pub fn dropout(x: &Tensor, p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let precision = if x.dtype() == candle_core::DType::F64 {
        Precision::F64
    } else {
        Precision::F32
    };
    let mask = tensor_from_f64(mask, x.dims(), precision)?;
    Ok((x * mask)?)
}

/// Fixed sinusoidal position table, `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize, precision: Precision) -> Result<Tensor> {
    let mut v = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            v.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    tensor_from_f64(v, &[len, dim], precision)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            weight: store.get(&format!("{name}.weight"))?,
            bias: store.get(&format!("{name}.bias"))?,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies to the last dimension of a tensor of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("linear input has rank >= 1");
        let rows = x.elem_count() / d_in;
        let y = x
            .reshape((rows, d_in))?
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: store.get(&format!("{name}.gamma"))?,
            beta: store.get(&format!("{name}.beta"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            up: Linear::load(store, &format!("{name}.up"))?,
            down: Linear::load(store, &format!("{name}.down"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu()?)
    }
}

/// Result of one attention call.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// After the output projection, `B × Tq × D`.
    pub output: Tensor,
    /// Weighted sum of projected values before the output projection.
    pub context: Tensor,
    /// `B × H × Tq × Tk`, rows sum to one.
    pub weights: Tensor,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn load(store: &ParamStore, name: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::load(store, &format!("{name}.q"))?,
            k: Linear::load(store, &format!("{name}.k"))?,
            v: Linear::load(store, &format!("{name}.v"))?,
            o: Linear::load(store, &format!("{name}.o"))?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `mask` is additive and must broadcast to `B × H × Tq × Tk`.
    pub fn forward(&self, query: &Tensor, memory: &Tensor, mask: Option<&Tensor>) -> Result<AttentionOutput> {
        let (b, tq, d) = query.dims3()?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(memory)?)?;
        let v = self.split_heads(&self.v.forward(memory)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let weights = softmax(&scores)?;
        let context = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, d))?;
        let output = self.o.forward(&context)?;
        Ok(AttentionOutput {
            output,
            context,
            weights,
        })
    }
}
