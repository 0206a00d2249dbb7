//! Layer library: convolutions (including a transposed conv built from
//! zero-stuffing so the backward pass is available on every backend),
//! gated WaveNet stacks with global style conditioning, multi-receptive
//! field fusion blocks, layer norm and self-attention.

use candle_core::{DType, Tensor, D};

use crate::error::{ModelError, Result};
use crate::params::{Init, ParamBuilder};

pub const LRELU_SLOPE: f64 = 0.1;

pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, LRELU_SLOPE)?)
}

/// Binary mask [B, 1, T] from per-item valid lengths.
pub fn length_mask(lengths: &[usize], t_max: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let b = lengths.len();
    let mut data = vec![0.0f64; b * t_max];
    for (i, &len) in lengths.iter().enumerate() {
        for t in 0..len.min(t_max) {
            data[i * t_max + t] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (b, 1, t_max), device)?.to_dtype(dtype)?)
}

/// Masked mean of |x| over all elements (mask broadcast over channels).
pub fn masked_mean_abs(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    match mask {
        None => Ok(x.abs()?.mean_all()?),
        Some(m) => {
            let num = x.abs()?.broadcast_mul(m)?.sum_all()?;
            let channels = x.elem_count() as f64 / (m.dims()[0] * m.dims()[2]) as f64;
            let denom = (m.sum_all()? * channels)?;
            Ok((num / denom)?)
        }
    }
}

pub fn apply_mask(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    match mask {
        None => Ok(x.clone()),
        Some(m) => Ok(x.broadcast_mul(m)?),
    }
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv1d {
    /// "Same"-padded convolution for odd kernels at stride 1.
    pub fn same(pb: &mut ParamBuilder, name: &str, in_ch: usize, out_ch: usize, kernel: usize, dilation: usize) -> Result<Self> {
        let padding = (kernel - 1) * dilation / 2;
        Self::new(pb, name, in_ch, out_ch, kernel, 1, padding, dilation)
    }

    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        let mut pb = pb.sub(name);
        let fan_in = in_ch * kernel;
        let weight = pb.tensor("weight", &[out_ch, in_ch, kernel], Init::FanIn { fan_in })?;
        let bias = pb.tensor("bias", &[out_ch], Init::FanIn { fan_in })?;
        Ok(Self { weight, bias, stride, padding, dilation })
    }

    /// Zero-initialized variant; used where identity-at-init is a contract.
    pub fn zeroed(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Result<Self> {
        let mut pb = pb.sub(name);
        let weight = pb.tensor("weight", &[out_ch, in_ch, kernel], Init::Zeros)?;
        let bias = pb.tensor("bias", &[out_ch], Init::Zeros)?;
        Ok(Self { weight, bias, stride: 1, padding: (kernel - 1) / 2, dilation: 1 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // Right-pad strided convs to exact coverage; a partially consumed
        // tail makes the backward gradient shorter than the input.
        let mut x = x.clone();
        if self.stride > 1 {
            let t = x.dims3()?.2;
            let k = self.weight.dims()[2];
            let span = t + 2 * self.padding - (k - 1) * self.dilation - 1;
            let rem = span % self.stride;
            if rem != 0 {
                x = x.pad_with_zeros(2, 0, self.stride - rem)?;
            }
        }
        let y = x.conv1d(&self.weight, self.padding, self.stride, self.dilation, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Transposed 1-D convolution expressed as zero-stuffing followed by a
/// regular convolution with the flipped kernel; exact `stride x` upsampling
/// with kernel `2s` (even strides) or `2s+1` (odd strides).
#[derive(Debug, Clone)]
pub struct UpsampleConv1d {
    weight: Tensor, // [in, out, k]
    bias: Tensor,
    pub stride: usize,
    pub kernel: usize,
    padding: usize,
}

impl UpsampleConv1d {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        let kernel = if stride % 2 == 0 { 2 * stride } else { 2 * stride + 1 };
        let padding = (kernel - stride) / 2;
        let mut pb = pb.sub(name);
        let fan_in = in_ch * kernel / stride;
        let weight = pb.tensor("weight", &[in_ch, out_ch, kernel], Init::FanIn { fan_in })?;
        let bias = pb.tensor("bias", &[out_ch], Init::FanIn { fan_in })?;
        Ok(Self { weight, bias, stride, kernel, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, t) = x.dims3()?;
        let s = self.stride;
        let stuffed = if s == 1 {
            x.clone()
        } else {
            let zeros = Tensor::zeros((b, c, t, s - 1), x.dtype(), x.device())?;
            Tensor::cat(&[&x.unsqueeze(3)?, &zeros], 3)?
                .reshape((b, c, t * s))?
                .narrow(2, 0, (t - 1) * s + 1)?
        };
        // conv with time-flipped kernel and swapped channel roles
        let idx: Vec<u32> = (0..self.kernel as u32).rev().collect();
        let idx = Tensor::from_vec(idx, self.kernel, x.device())?;
        let w = self.weight.index_select(&idx, 2)?.transpose(0, 1)?.contiguous()?;
        let y = stuffed.conv1d(&w, self.kernel - 1 - self.padding, 1, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let mut pb = pb.sub(name);
        let fan_in = in_ch * kernel * kernel;
        let weight =
            pb.tensor("weight", &[out_ch, in_ch, kernel, kernel], Init::FanIn { fan_in })?;
        let bias = pb.tensor("bias", &[out_ch], Init::FanIn { fan_in })?;
        Ok(Self { weight, bias, stride, padding })
    }

    /// Expressed as a sum of shifted pointwise matmuls so that both passes
    /// run through gemm; the direct conv2d path is an order of magnitude
    /// slower on CPU at these channel counts.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (out_ch, in_ch, k, _) = self.weight.dims4()?;
        let mut x = x.clone();
        if self.padding > 0 {
            x = x
                .pad_with_zeros(2, self.padding, self.padding)?
                .pad_with_zeros(3, self.padding, self.padding)?;
        }
        // Pad so strided subsampling divides exactly.
        for dim in [2usize, 3] {
            let size = x.dims()[dim];
            let span = size.saturating_sub(k - 1);
            let rem = span % self.stride;
            if rem != 0 {
                x = x.pad_with_zeros(dim, 0, self.stride - rem)?;
            }
        }
        let (b, _c, h_pad, w_pad) = x.dims4()?;
        let h_out_full = h_pad - k + 1;
        let w_out_full = w_pad - k + 1;

        let mut acc: Option<Tensor> = None;
        for ky in 0..k {
            for kx in 0..k {
                let view = x
                    .narrow(2, ky, h_out_full)?
                    .narrow(3, kx, w_out_full)?
                    .contiguous()?
                    .reshape((b, in_ch, h_out_full * w_out_full))?;
                let w = self
                    .weight
                    .narrow(2, ky, 1)?
                    .narrow(3, kx, 1)?
                    .contiguous()?
                    .reshape((out_ch, in_ch))?;
                let term = w.broadcast_matmul(&view)?;
                acc = Some(match acc {
                    None => term,
                    Some(prev) => (prev + term)?,
                });
            }
        }
        let mut y = acc
            .expect("kernel is non-empty")
            .reshape((b, out_ch, h_out_full, w_out_full))?;
        if self.stride > 1 {
            let s = self.stride;
            y = y
                .reshape((b, out_ch, h_out_full / s, s, w_out_full / s, s))?
                .narrow(3, 0, 1)?
                .narrow(5, 0, 1)?
                .contiguous()?
                .reshape((b, out_ch, h_out_full / s, w_out_full / s))?;
        }
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor, // [out, in]
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        let weight = pb.tensor("weight", &[out_dim, in_dim], Init::FanIn { fan_in: in_dim })?;
        let bias = pb.tensor("bias", &[out_dim], Init::FanIn { fan_in: in_dim })?;
        Ok(Self { weight, bias })
    }

    /// x: [.., in] -> [.., out]
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Layer norm over the last dimension (f64-safe, built from primitives).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        let weight = pb.tensor("weight", &[dim], Init::Const(1.0))?;
        let bias = pb.tensor("bias", &[dim], Init::Zeros)?;
        Ok(Self { weight, bias, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

// ---------------------------------------------------------------------------
// Gated WaveNet stack with global conditioning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WaveNetConfig {
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
    pub dilation_base: usize,
}

pub struct WaveNet {
    in_layers: Vec<Conv1d>,
    res_skip: Vec<Conv1d>,
    cond: Option<Conv1d>,
    hidden: usize,
}

impl WaveNet {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: WaveNetConfig, style_dim: Option<usize>) -> Result<Self> {
        let mut pb = pb.sub(name);
        let h = cfg.hidden;
        let mut in_layers = Vec::with_capacity(cfg.layers);
        let mut res_skip = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let dilation = cfg.dilation_base.max(1).pow(i as u32);
            in_layers.push(Conv1d::same(&mut pb, &format!("in.{i}"), h, 2 * h, cfg.kernel, dilation)?);
            let out = if i + 1 == cfg.layers { h } else { 2 * h };
            res_skip.push(Conv1d::new(&mut pb, &format!("res_skip.{i}"), h, out, 1, 1, 0, 1)?);
        }
        let cond = match style_dim {
            Some(s) => Some(Conv1d::new(&mut pb, "cond", s, 2 * h * cfg.layers, 1, 1, 0, 1)?),
            None => None,
        };
        Ok(Self { in_layers, res_skip, cond, hidden: h })
    }

    /// x: [B, H, T]; style: [B, S, 1]; returns [B, H, T].
    pub fn forward(&self, x: &Tensor, style: Option<&Tensor>, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = self.hidden;
        let g = match (&self.cond, style) {
            (Some(c), Some(s)) => Some(c.forward(s)?),
            (Some(_), None) => {
                return Err(ModelError::validation("style-conditioned stack called without style"))
            }
            _ => None,
        };
        let mut x = x.clone();
        let mut skip: Option<Tensor> = None;
        for (i, (inl, rs)) in self.in_layers.iter().zip(&self.res_skip).enumerate() {
            let mut x_in = inl.forward(&x)?;
            if let Some(g) = &g {
                let g_l = g.narrow(1, i * 2 * h, 2 * h)?;
                x_in = x_in.broadcast_add(&g_l)?;
            }
            let a = x_in.narrow(1, 0, h)?;
            let b = x_in.narrow(1, h, h)?;
            let acts = (a.tanh()? * candle_nn::ops::sigmoid(&b)?)?;
            let rs_out = rs.forward(&acts)?;
            if i + 1 < self.in_layers.len() {
                let res = rs_out.narrow(1, 0, h)?;
                x = apply_mask(&(x + res)?, mask)?;
                let s = rs_out.narrow(1, h, h)?;
                skip = Some(match skip {
                    None => s,
                    Some(prev) => (prev + s)?,
                });
            } else {
                skip = Some(match skip {
                    None => rs_out,
                    Some(prev) => (prev + rs_out)?,
                });
            }
        }
        apply_mask(&skip.expect("at least one layer"), mask)
    }
}

// ---------------------------------------------------------------------------
// Multi-receptive field fusion
// ---------------------------------------------------------------------------

pub struct ResBlock1 {
    convs1: Vec<Conv1d>,
    convs2: Vec<Conv1d>,
}

impl ResBlock1 {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, kernel: usize, dilations: &[usize]) -> Result<Self> {
        let mut pb = pb.sub(name);
        let mut convs1 = Vec::new();
        let mut convs2 = Vec::new();
        for (i, &d) in dilations.iter().enumerate() {
            convs1.push(Conv1d::same(&mut pb, &format!("c1.{i}"), channels, channels, kernel, d)?);
            convs2.push(Conv1d::same(&mut pb, &format!("c2.{i}"), channels, channels, kernel, 1)?);
        }
        Ok(Self { convs1, convs2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (c1, c2) in self.convs1.iter().zip(&self.convs2) {
            let xt = c1.forward(&lrelu(&x)?)?;
            let xt = c2.forward(&lrelu(&xt)?)?;
            x = (x + xt)?;
        }
        Ok(x)
    }
}

/// Parallel residual blocks over several kernel sizes, averaged.
pub struct Mrf {
    blocks: Vec<ResBlock1>,
}

impl Mrf {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, kernels: &[usize], dilations: &[Vec<usize>]) -> Result<Self> {
        if kernels.len() != dilations.len() || kernels.is_empty() {
            return Err(ModelError::config("MRF kernel and dilation lists must match and be non-empty"));
        }
        let mut pb = pb.sub(name);
        let blocks = kernels
            .iter()
            .zip(dilations)
            .enumerate()
            .map(|(i, (&k, d))| ResBlock1::new(&mut pb, &format!("b{i}"), channels, k, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for b in &self.blocks {
            let y = b.forward(x)?;
            acc = Some(match acc {
                None => y,
                Some(prev) => (prev + y)?,
            });
        }
        Ok((acc.expect("non-empty MRF") / self.blocks.len() as f64)?)
    }
}

// ---------------------------------------------------------------------------
// Self-attention (prosody decoder)
// ---------------------------------------------------------------------------

pub struct MultiHeadSelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(ModelError::config(format!("attention dim {dim} not divisible by {heads} heads")));
        }
        let mut pb = pb.sub(name);
        Ok(Self {
            qkv: Linear::new(&mut pb, "qkv", dim, 3 * dim)?,
            out: Linear::new(&mut pb, "out", dim, dim)?,
            heads,
        })
    }

    /// x: [B, T, C]
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let h = self.heads;
        let dh = c / h;
        let qkv = self.qkv.forward(x)?; // [B, T, 3C]
        let q = qkv.narrow(2, 0, c)?.reshape((b, t, h, dh))?.transpose(1, 2)?.contiguous()?;
        let k = qkv.narrow(2, c, c)?.reshape((b, t, h, dh))?.transpose(1, 2)?.contiguous()?;
        let v = qkv.narrow(2, 2 * c, c)?.reshape((b, t, h, dh))?.transpose(1, 2)?.contiguous()?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = attn.matmul(&v)?; // [B, h, T, dh]
        let ctx = ctx.transpose(1, 2)?.reshape((b, t, c))?;
        self.out.forward(&ctx)
    }
}

/// Feed-forward transformer block: self-attention plus a conv feed-forward,
/// both with residuals and layer norm.
pub struct FftBlock {
    attn: MultiHeadSelfAttention,
    norm1: LayerNorm,
    ff1: Conv1d,
    ff2: Conv1d,
    norm2: LayerNorm,
}

impl FftBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            attn: MultiHeadSelfAttention::new(&mut pb, "attn", dim, heads)?,
            norm1: LayerNorm::new(&mut pb, "norm1", dim)?,
            ff1: Conv1d::same(&mut pb, "ff1", dim, dim * 2, 3, 1)?,
            ff2: Conv1d::same(&mut pb, "ff2", dim * 2, dim, 3, 1)?,
            norm2: LayerNorm::new(&mut pb, "norm2", dim)?,
        })
    }

    /// x: [B, T, C]
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.norm1.forward(&(x + self.attn.forward(x)?)?)?;
        let ff = self.ff2.forward(&lrelu(&self.ff1.forward(&x.transpose(1, 2)?.contiguous()?)?)?)?;
        let x = self.norm2.forward(&(x + ff.transpose(1, 2)?)?)?;
        Ok(x)
    }
}
