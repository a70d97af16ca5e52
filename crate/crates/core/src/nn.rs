//! Small layers built from differentiable candle primitives.
//!
//! The fused candle kernels for layer norm and last-dim softmax have no
//! backward pass (and no f64 path), so both are composed here from primitives.

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;

use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

pub fn linear(ps: &ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Linear> {
    let w = ps.get(&format!("{name}.weight"), &[out_dim, in_dim], Init::FanIn(in_dim))?;
    let b = if bias {
        Some(ps.get(&format!("{name}.bias"), &[out_dim], Init::Zeros)?)
    } else {
        None
    };
    Ok(Linear::new(w, b))
}

pub fn linear_zeros(ps: &ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let w = ps.get(&format!("{name}.weight"), &[out_dim, in_dim], Init::Zeros)?;
    let b = ps.get(&format!("{name}.bias"), &[out_dim], Init::Zeros)?;
    Ok(Linear::new(w, Some(b)))
}

/// 2-D convolution with `padding = kernel / 2`, computed as patch extraction
/// plus a matrix product so its gradient is cheap on the CPU backend.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl Conv2d {
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (out, _, k, _) = self.weight.dims4()?;
        let cols = if k == 1 {
            x.reshape((b, c, h * w))?
        } else {
            let p = k / 2;
            let xp = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
            let mut patches = Vec::with_capacity(k * k);
            for dy in 0..k {
                for dx in 0..k {
                    patches.push(xp.narrow(2, dy, h)?.narrow(3, dx, w)?);
                }
            }
            Tensor::stack(&patches, 2)?.reshape((b, c * k * k, h * w))?
        };
        let wm = self.weight.reshape((out, c * k * k))?;
        let y = wm
            .broadcast_matmul(&cols)?
            .reshape((b, out, h, w))?
            .broadcast_add(&self.bias.reshape((1, out, 1, 1))?)?;
        if self.stride == 1 {
            return Ok(y);
        }
        let s = self.stride;
        let (ho, wo) = (h.div_ceil(s), w.div_ceil(s));
        let y = y
            .pad_with_zeros(2, 0, ho * s - h)?
            .pad_with_zeros(3, 0, wo * s - w)?
            .reshape((b, out, ho, s, wo, s))?
            .narrow(3, 0, 1)?
            .narrow(5, 0, 1)?;
        y.reshape((b, out, ho, wo))
    }
}

pub fn conv2d(
    ps: &ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
) -> Result<Conv2d> {
    if kernel % 2 == 0 || stride == 0 {
        return Err(Error::Config(format!("{name}: kernel must be odd and stride positive")));
    }
    let fan_in = in_ch * kernel * kernel;
    let weight = ps.get(
        &format!("{name}.weight"),
        &[out_ch, in_ch, kernel, kernel],
        Init::FanIn(fan_in),
    )?;
    let bias = ps.get(&format!("{name}.bias"), &[out_ch], Init::Zeros)?;
    Ok(Conv2d {
        weight,
        bias,
        stride,
    })
}

/// Layer norm over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: ps.get(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: ps.get(&format!("{name}.beta"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Per-pixel normalization over the channel axis of an NCHW tensor. Unlike
/// group norm it never mixes spatial positions.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl ChannelNorm {
    pub fn new(ps: &ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(ChannelNorm {
            gamma: ps.get(&format!("{name}.gamma"), &[1, channels, 1, 1], Init::Ones)?,
            beta: ps.get(&format!("{name}.beta"), &[1, channels, 1, 1], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(1)?;
        let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// `(B, L, H*dh)` -> `(B, H, L, dh)`.
fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, l, d) = x.dims3()?;
    Ok(x.reshape((b, l, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, l, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, l, h * dh))?)
}

/// Scaled dot-product attention over already-projected `q, k, v`.
///
/// `bias` is added to the logits and broadcasts as `(B, Lq, Lk)` over heads.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, bias: Option<&Tensor>) -> Result<Tensor> {
    let dh = q.dim(D::Minus1)? / heads;
    let q = split_heads(q, heads)?;
    let k = split_heads(k, heads)?;
    let v = split_heads(v, heads)?;
    let mut logits = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
    if let Some(bias) = bias {
        logits = logits.broadcast_add(&bias.unsqueeze(1)?)?;
    }
    let p = softmax_last(&logits)?;
    merge_heads(&p.matmul(&v)?)
}

/// Multi-head attention with learned projections.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(ps: &ParamStore, name: &str, dim: usize, ctx_dim: usize, heads: usize) -> Result<Self> {
        Ok(Attention {
            q: linear(ps, &format!("{name}.q"), dim, dim, false)?,
            k: linear(ps, &format!("{name}.k"), ctx_dim, dim, false)?,
            v: linear(ps, &format!("{name}.v"), ctx_dim, dim, false)?,
            o: linear(ps, &format!("{name}.o"), dim, dim, true)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let out = attend(
            &self.q.forward(x)?,
            &self.k.forward(ctx)?,
            &self.v.forward(ctx)?,
            self.heads,
            bias,
        )?;
        Ok(self.o.forward(&out)?)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(ps: &ParamStore, name: &str, dim: usize, mult: usize) -> Result<Self> {
        Ok(FeedForward {
            up: linear(ps, &format!("{name}.up"), dim, dim * mult, true)?,
            down: linear(ps, &format!("{name}.down"), dim * mult, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.down.forward(&self.up.forward(x)?.gelu()?)?)
    }
}

/// Pre-norm transformer layer: self-attention then feed-forward.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl TransformerLayer {
    pub fn new(ps: &ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(TransformerLayer {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(ps, &format!("{name}.attn"), dim, dim, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim)?,
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, 2)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, bias)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

/// Queries attend to a context, then a feed-forward; both pre-norm residual.
#[derive(Debug, Clone)]
pub struct PerceiverBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl PerceiverBlock {
    pub fn new(ps: &ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        Ok(PerceiverBlock {
            ln_q: LayerNorm::new(ps, &format!("{name}.ln_q"), width)?,
            ln_kv: LayerNorm::new(ps, &format!("{name}.ln_kv"), width)?,
            attn: Attention::new(ps, &format!("{name}.attn"), width, width, heads)?,
            ln_ff: LayerNorm::new(ps, &format!("{name}.ln_ff"), width)?,
            ff: FeedForward::new(ps, &format!("{name}.ff"), width, 2)?,
        })
    }

    pub fn forward(&self, q: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let ctx = self.ln_kv.forward(ctx)?;
        let q = (q + self.attn.forward(&self.ln_q.forward(q)?, &ctx, None)?)?;
        Ok((&q + self.ff.forward(&self.ln_ff.forward(&q)?)?)?)
    }
}

/// Sinusoidal features of scalars `values` (shape `(N,)`), output `(N, dim)`.
pub fn sinusoidal(values: &[f64], dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(values.len() * dim);
    for &v in values {
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            out.push((v * freq).cos());
        }
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            out.push((v * freq).sin());
        }
        if dim % 2 == 1 {
            out.push(0.0);
        }
    }
    out
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn conv_matches_reference_kernel() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(4, DType::F64);
        let x = Tensor::randn(0.0f64, 1.0, (2, 3, 9, 8), &dev).unwrap();
        for (k, s) in [(1, 1), (3, 1), (3, 2), (5, 1), (5, 2)] {
            let c = conv2d(&ps, &format!("c{k}{s}"), 3, 4, k, s).unwrap();
            let b = Tensor::randn(0.0f64, 1.0, 4, &dev).unwrap();
            let c = Conv2d { bias: b.clone(), ..c };
            let got = c.forward(&x).unwrap();
            let want = x
                .conv2d(c.weight(), k / 2, s, 1, 1)
                .unwrap()
                .broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(got.dims(), want.dims(), "k={k} s={s}");
            let d = (got - want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-12, "k={k} s={s}: {d}");
        }
    }

    #[test]
    fn layer_norm_normalizes() {
        let ps = ParamStore::new(0, DType::F64);
        let ln = LayerNorm::new(&ps, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn attend_single_key_returns_value() {
        let dev = Device::Cpu;
        let q = Tensor::new(&[[[0.3f64, -1.0]]], &dev).unwrap();
        let k = Tensor::new(&[[[2.0f64, 5.0]]], &dev).unwrap();
        let v = Tensor::new(&[[[7.0f64, -3.0]]], &dev).unwrap();
        let out = attend(&q, &k, &v, 1, None).unwrap().to_vec3::<f64>().unwrap();
        assert_eq!(out[0][0], vec![7.0, -3.0]);
    }

    #[test]
    fn sinusoidal_shape() {
        let s = sinusoidal(&[0.0, 10.0], 6, 10000.0);
        assert_eq!(s.len(), 12);
        assert_eq!(s[0], 1.0);
        assert_eq!(s[3], 0.0);
    }
}
