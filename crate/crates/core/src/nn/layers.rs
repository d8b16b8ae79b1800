//! Building blocks shared by the autoencoder, the U-Net and the feature
//! extractor.
//!
//! Layers compute in the dtype of their input and cast their own parameters
//! to it explicitly. Normalization statistics and softmax are always taken
//! in at least f32, whatever the compute dtype.

use candle_core::{DType, Tensor, Var, D};

use super::{conv::conv2d, Init};
use crate::error::Result;

/// Dtype used for reductions when computing in `dt`.
pub fn stats_dtype(dt: DType) -> DType {
    if dt == DType::F64 {
        DType::F64
    } else {
        DType::F32
    }
}

fn cast(v: &Var, dt: DType) -> Result<Tensor> {
    Ok(v.as_tensor().to_dtype(dt)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(init: &mut Init, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = init.normal("weight", &[out_dim, in_dim], (in_dim as f64).powf(-0.5))?;
        let bias = if bias {
            Some(init.constant("bias", &[out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Same as [`Linear::new`] but with all-zero weights, for residual
    /// branches that should start as the identity.
    pub fn zeros(init: &mut Init, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = init.constant("weight", &[out_dim, in_dim], 0.0)?;
        let bias = Some(init.constant("bias", &[out_dim], 0.0)?);
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dt = x.dtype();
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("non-scalar input");
        let rows = x.elem_count() / in_dim;
        let w = cast(&self.weight, dt)?;
        let y = x.reshape((rows, in_dim))?.matmul(&w.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(&cast(b, dt)?)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-scalar") = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = init.normal("weight", &[out_ch, in_ch, kernel, kernel], fan_in.powf(-0.5))?;
        let bias = init.constant("bias", &[out_ch], 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn zeros(init: &mut Init, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let weight = init.constant("weight", &[out_ch, in_ch, kernel, kernel], 0.0)?;
        let bias = init.constant("bias", &[out_ch], 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dt = x.dtype();
        let y = conv2d(x, &cast(&self.weight, dt)?, self.stride, self.padding)?;
        Ok(super::fused::add_channel_bias(&y, &cast(&self.bias, dt)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Var,
    bias: Var,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(init: &mut Init, channels: usize, groups: usize) -> Result<Self> {
        let groups = largest_divisor_at_most(channels, groups);
        Ok(Self {
            weight: init.constant("weight", &[channels], 1.0)?,
            bias: init.constant("bias", &[channels], 0.0)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dt = x.dtype();
        let st = stats_dtype(dt);
        let y = super::fused::group_norm(
            &x.to_dtype(st)?,
            &cast(&self.weight, st)?,
            &cast(&self.bias, st)?,
            self.groups,
            self.eps,
        )?;
        Ok(y.to_dtype(dt)?)
    }
}

fn largest_divisor_at_most(n: usize, at_most: usize) -> usize {
    (1..=at_most.min(n)).rev().find(|g| n % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Var,
    bias: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: init.constant("weight", &[dim], 1.0)?,
            bias: init.constant("bias", &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dt = x.dtype();
        let st = stats_dtype(dt);
        let xs = x.to_dtype(st)?;
        let mean = xs.mean_keepdim(D::Minus1)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&cast(&self.weight, st)?)?
            .broadcast_add(&cast(&self.bias, st)?)?
            .to_dtype(dt)?)
    }
}

/// Numerically stable softmax over the last axis, reduced in f32 or wider.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let dt = x.dtype();
    let xs = x.to_dtype(stats_dtype(dt))?;
    let max = xs.max_keepdim(D::Minus1)?.detach();
    let e = xs.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?.to_dtype(dt)?)
}

/// Multi-head attention. Keys and values come from `context` when given
/// (cross-attention), otherwise from the queries' own sequence.
#[derive(Debug, Clone)]
pub struct Attention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
    head_dim: usize,
}

impl Attention {
    pub fn new(init: &mut Init, query_dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        let heads = largest_divisor_at_most(query_dim, heads);
        Ok(Self {
            to_q: Linear::new(&mut init.sub("to_q"), query_dim, query_dim, false)?,
            to_k: Linear::new(&mut init.sub("to_k"), context_dim, query_dim, false)?,
            to_v: Linear::new(&mut init.sub("to_v"), context_dim, query_dim, false)?,
            to_out: Linear::new(&mut init.sub("to_out"), query_dim, query_dim, true)?,
            heads,
            head_dim: query_dim / heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `x`: (B × N × query_dim); `context`: (B × M × context_dim).
    pub fn forward(&self, x: &Tensor, context: Option<&Tensor>) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let kv_source = context.unwrap_or(x);
        let q = self.split_heads(&self.to_q.forward(x)?)?;
        let k = self.split_heads(&self.to_k.forward(kv_source)?)?;
        let v = self.split_heads(&self.to_v.forward(kv_source)?)?;
        let scale = (self.head_dim as f64).powf(-0.5);
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let weights = softmax_last_dim(&scores)?;
        let out = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.to_out.forward(&out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = crate::rng::stream(0, "gn", 0);
        let gn = GroupNorm::new(&mut Init::new(&mut store, &mut rng), 4, 2).unwrap();
        let x = Tensor::arange(0f64, 32.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 4, 2, 4))
            .unwrap();
        let y = gn.forward(&x).unwrap().reshape((2, 16)).unwrap();
        let mean = y.mean(1).unwrap().to_vec1::<f64>().unwrap();
        let var = y.sqr().unwrap().mean(1).unwrap().to_vec1::<f64>().unwrap();
        for (m, v) in mean.iter().zip(&var) {
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn group_count_falls_back_to_a_divisor() {
        assert_eq!(largest_divisor_at_most(12, 8), 6);
        assert_eq!(largest_divisor_at_most(3, 8), 3);
        assert_eq!(largest_divisor_at_most(7, 4), 1);
    }

    #[test]
    fn softmax_rows_sum_to_one_in_half_precision() {
        let x = Tensor::new(&[[1000f32, 1001.0, 999.0], [0.0, 0.0, 0.0]], &Device::Cpu)
            .unwrap()
            .to_dtype(DType::F16)
            .unwrap();
        let s = softmax_last_dim(&x).unwrap();
        assert_eq!(s.dtype(), DType::F16);
        let sums = s.to_dtype(DType::F32).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        for v in sums {
            assert!((v - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn attention_output_shape_follows_queries() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = crate::rng::stream(0, "attn", 0);
        let attn = Attention::new(&mut Init::new(&mut store, &mut rng), 8, 5, 2).unwrap();
        let x = Tensor::zeros((3, 6, 8), DType::F32, &Device::Cpu).unwrap();
        let ctx = Tensor::ones((3, 77, 5), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(attn.forward(&x, Some(&ctx)).unwrap().dims(), &[3, 6, 8]);
        let self_attn = Attention::new(&mut Init::new(&mut store, &mut rng).sub("s"), 8, 8, 2).unwrap();
        assert_eq!(self_attn.forward(&x, None).unwrap().dims(), &[3, 6, 8]);
    }
}
