//! Small differentiable building blocks shared by the encoder, the language
//! model and the propagation head.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{ensure, Result};
use crate::params::{Init, ParamBuilder};

/// Row-wise softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Scaled dot-product attention weights `softmax(q k^T / sqrt(d))` over the
/// last two dimensions. `mask` is added to the scores before the softmax.
pub fn attention_weights(q: &Tensor, k: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let d = *q.dims().last().unwrap_or(&1) as f64;
    let kt = k.transpose(D::Minus2, D::Minus1)?.contiguous()?;
    let mut scores = (q.contiguous()?.matmul(&kt)? / d.sqrt())?;
    if let Some(mask) = mask {
        scores = scores.broadcast_add(mask)?;
    }
    softmax_last(&scores)
}

/// Additive causal mask: 0 on and below the diagonal, `-inf` above.
pub fn causal_mask(t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f64> = (0..t)
        .flat_map(|i| (0..t).map(move |j| if j > i { f64::NEG_INFINITY } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(values, (t, t), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = pb.var("weight", &[d_in, d_out], Init::FanIn)?;
        let bias = if bias {
            Some(pb.var("bias", &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = *x.dims().last().unwrap_or(&0);
        ensure!(
            last == self.d_in(),
            "linear layer expects {} input channels, got {last}",
            self.d_in()
        );
        let y = match x.rank() {
            2 => x.matmul(&self.weight)?,
            _ => {
                let lead: Vec<usize> = x.dims()[..x.rank() - 1].to_vec();
                let rows: usize = lead.iter().product();
                let y = x.reshape((rows, last))?.matmul(&self.weight)?;
                let mut shape = lead;
                shape.push(self.d_out());
                y.reshape(shape)?
            }
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Normalization over the last dimension with a learnable affine map.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.var("gamma", &[dim], Init::Ones)?,
            beta: pb.var("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        ensure!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Ok(Self {
            q: Linear::new(&mut pb.pp("q"), dim, dim, true)?,
            k: Linear::new(&mut pb.pp("k"), dim, dim, true)?,
            v: Linear::new(&mut pb.pp("v"), dim, dim, true)?,
            out: Linear::new(&mut pb.pp("out"), dim, dim, true)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (t, d) = x.dims2()?;
        Ok(x
            .reshape((t, self.heads, d / self.heads))?
            .transpose(0, 1)?
            .contiguous()?)
    }

    /// Returns the output `[T x D]` and the per-head weights `[H x T x T]`.
    pub fn forward_with_weights(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (t, d) = x.dims2()?;
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k = self.split_heads(&self.k.forward(x)?)?;
        let v = self.split_heads(&self.v.forward(x)?)?;
        let w = attention_weights(&q, &k, mask)?;
        let ctx = w.matmul(&v)?.transpose(0, 1)?.contiguous()?.reshape((t, d))?;
        Ok((self.out.forward(&ctx)?, w))
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(x, mask)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&mut pb.pp("up"), dim, hidden, true)?,
            down: Linear::new(&mut pb.pp("down"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu()?)
    }
}

/// Pre-norm transformer layer: `x + attn(norm(x))`, then `x + ffn(norm(x))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut pb.pp("norm1"), dim)?,
            attn: MultiHeadAttention::new(&mut pb.pp("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut pb.pp("norm2"), dim)?,
            ffn: FeedForward::new(&mut pb.pp("ffn"), dim, 2 * dim)?,
        })
    }

    pub fn forward_with_weights(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (a, w) = self.attn.forward_with_weights(&self.norm1.forward(x)?, mask)?;
        let x = (x + a)?;
        let x = (&x + self.ffn.forward(&self.norm2.forward(&x)?)?)?;
        Ok((x, w))
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(x, mask)?.0)
    }
}

pub fn to_f64_vec2(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar()?)
}

pub fn tensor_from_rows(rows: &[Vec<f64>], dtype: DType, device: &Device) -> Result<Tensor> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    ensure!(rows.iter().all(|row| row.len() == c), "ragged rows");
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (r, c), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, -50.0, 0.0, 50.0], (2, 3), &Device::Cpu).unwrap();
        let s = to_f64_vec2(&softmax_last(&x).unwrap()).unwrap();
        for row in s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_attention_is_lower_triangular() {
        let mut store = ParamStore::new(DType::F64, 1);
        let mha = MultiHeadAttention::new(&mut store.root().pp("a"), 4, 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (5, 4), &Device::Cpu).unwrap();
        let mask = causal_mask(5, DType::F64, &Device::Cpu).unwrap();
        let (_, w) = mha.forward_with_weights(&x, Some(&mask)).unwrap();
        let w: Vec<Vec<Vec<f64>>> = w.to_vec3().unwrap();
        for head in w {
            for (i, row) in head.iter().enumerate() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[i + 1..].iter().all(|&p| p == 0.0));
            }
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut store = ParamStore::new(DType::F64, 0);
        let ln = LayerNorm::new(&mut store.root(), 4).unwrap();
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], (1, 4), &Device::Cpu).unwrap();
        let y = to_f64_vec2(&ln.forward(&x).unwrap()).unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
