//! Small differentiable building blocks. Everything is composed from
//! primitive tensor ops so gradients exist in both f32 and f64.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};

use super::store::{Init, Scope};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    /// Stored as (in, out).
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(scope: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(scope, d_in, d_out, Init::Normal(1.0 / (d_in as f64).sqrt()), true)
    }

    pub fn zero_init(scope: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(scope, d_in, d_out, Init::Zeros, true)
    }

    pub fn with_init(scope: &Scope, d_in: usize, d_out: usize, init: Init, bias: bool) -> Result<Self> {
        let weight = scope.var("weight", &[d_in, d_out], init)?;
        let bias = if bias {
            Some(scope.var("bias", &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut dims = x.dims().to_vec();
        let d_in = dims.pop().unwrap_or(1);
        let rows = dims.iter().product::<usize>();
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => (y + tile_rows(b, rows)?)?,
            None => y,
        };
        dims.push(self.weight.dim(1)?);
        Ok(y.reshape(dims)?)
    }
}

/// `(rows, M)` copy of a length-`M` vector built as an outer product, so
/// its gradient is a matrix product rather than a strided reduction.
pub fn tile_rows(v: &Tensor, rows: usize) -> Result<Tensor> {
    let m = v.elem_count();
    let ones = Tensor::ones((rows, 1), v.dtype(), v.device())?;
    Ok(ones.matmul(&v.reshape((1, m))?)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.var("gamma", &[dim], Init::Ones)?,
            beta: scope.var("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let m = self.gamma.elem_count();
        let normed = normalize_last(x, self.eps)?.reshape(((), m))?;
        let rows = normed.dim(0)?;
        let y = ((normed * tile_rows(&self.gamma, rows)?)? + tile_rows(&self.beta, rows)?)?;
        Ok(y.reshape(dims)?)
    }
}

/// Zero-mean, unit-variance along the last axis.
pub fn normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(NormalizeLast { eps })?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

/// Row-wise kernels over the last axis of a contiguous f32/f64 buffer.
fn map_rows(
    storage: &CpuStorage,
    layout: &Layout,
    f32_row: impl Fn(&[f32], &mut [f32]),
    f64_row: impl Fn(&[f64], &mut [f64]),
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("row kernel needs a contiguous input".into()))?;
    let n = layout.dims().last().copied().unwrap_or(1).max(1);
    let out = match storage {
        CpuStorage::F32(v) => {
            let src = &v[start..end];
            let mut dst = vec![0f32; src.len()];
            src.chunks(n).zip(dst.chunks_mut(n)).for_each(|(a, b)| f32_row(a, b));
            CpuStorage::F32(dst)
        }
        CpuStorage::F64(v) => {
            let src = &v[start..end];
            let mut dst = vec![0f64; src.len()];
            src.chunks(n).zip(dst.chunks_mut(n)).for_each(|(a, b)| f64_row(a, b));
            CpuStorage::F64(dst)
        }
        _ => return Err(candle_core::Error::Msg("row kernel supports f32 and f64".into())),
    };
    Ok((out, layout.shape().clone()))
}

macro_rules! softmax_row {
    ($t:ty) => {
        |a: &[$t], b: &mut [$t]| {
            let m = a.iter().copied().fold(<$t>::NEG_INFINITY, <$t>::max);
            let mut sum = 0.0;
            for (o, &x) in b.iter_mut().zip(a) {
                *o = (x - m).exp();
                sum += *o;
            }
            b.iter_mut().for_each(|o| *o /= sum);
        }
    };
}

macro_rules! normalize_row {
    ($t:ty, $eps:expr) => {
        |a: &[$t], b: &mut [$t]| {
            let n = a.len() as $t;
            let mean = a.iter().sum::<$t>() / n;
            let var = a.iter().map(|x| (x - mean) * (x - mean)).sum::<$t>() / n;
            let inv = 1.0 / (var + $eps as $t).sqrt();
            for (o, &x) in b.iter_mut().zip(a) {
                *o = (x - mean) * inv;
            }
        }
    };
}

struct SoftmaxLast;

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_rows(storage, layout, softmax_row!(f32), softmax_row!(f64))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // dx = y ⊙ (g − Σ g⊙y)
        let dot = (grad * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some((res * grad.broadcast_sub(&dot)?)?))
    }
}

struct NormalizeLast {
    eps: f64,
}

impl CustomOp1 for NormalizeLast {
    fn name(&self) -> &'static str {
        "normalize-last"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let eps = self.eps;
        map_rows(storage, layout, normalize_row!(f32, eps), normalize_row!(f64, eps))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // dx = (g − mean(g) − y·mean(g⊙y)) / σ
        let mean = arg.mean_keepdim(D::Minus1)?;
        let var = arg.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?;
        let sigma = (var + self.eps)?.sqrt()?;
        let gm = grad.mean_keepdim(D::Minus1)?;
        let gy = (grad * res)?.mean_keepdim(D::Minus1)?;
        let inner = (grad.broadcast_sub(&gm)? - res.broadcast_mul(&gy)?)?;
        Ok(Some(inner.broadcast_div(&sigma)?))
    }
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mean of `-log p[target]` over positions where `weight` is nonzero.
/// `logits`: (N, C); `targets`: (N,) u32; `weight`: (N,) float.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let logp = log_softmax_last(logits)?;
    let picked = logp.gather(&targets.unsqueeze(1)?, 1)?.squeeze(1)?;
    let total = weight.sum_all()?;
    Ok((picked.mul(weight)?.sum_all()? / total)?.neg()?)
}

/// Mean binary cross-entropy with logits.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    // log(1 + e^-|x|) + max(x, 0) - x*y
    let relu = logits.relu()?;
    let soft = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((relu + soft - logits.mul(targets)?)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Gelu => x.gelu()?,
            Activation::Silu => x.silu()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
    act: Activation,
}

impl Mlp {
    pub fn new(scope: &Scope, dim: usize, hidden: usize, act: Activation) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&scope.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&scope.pp("fc2"), hidden, dim)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.act.apply(&self.fc1.forward(x)?)?)
    }
}

/// Scaled dot-product attention on (B, H, L, dh) tensors. `bias` is an
/// additive (Lq, Lk) matrix, `0` where attention is allowed and a large
/// negative number elsewhere.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dh = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
    let scores = match bias {
        Some(b) => scores.broadcast_add(b)?,
        None => scores,
    };
    Ok(softmax_last(&scores)?.matmul(v)?)
}

/// Additive attention bias from a boolean mask (`true` = may attend).
pub fn mask_bias(mask: &[Vec<bool>], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let rows = mask.len();
    let cols = mask.first().map_or(0, Vec::len);
    let data: Vec<f32> = mask
        .iter()
        .flat_map(|r| r.iter().map(|&m| if m { 0.0 } else { -1e9 }))
        .collect();
    Ok(Tensor::from_vec(data, (rows, cols), device)?.to_dtype(dtype)?)
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, l, d) = x.dims3()?;
    Ok(x.reshape((b, l, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, l, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, l, h * dh))?)
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(scope: &Scope, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(&scope.pp("q"), dim, dim)?,
            k: Linear::new(&scope.pp("k"), dim, dim)?,
            v: Linear::new(&scope.pp("v"), dim, dim)?,
            out: Linear::new(&scope.pp("out"), dim, dim)?,
            heads,
        })
    }

    /// Per-head projections (B, H, L, dh).
    pub fn qkv(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        Ok((
            split_heads(&self.q.forward(x)?, self.heads)?,
            split_heads(&self.k.forward(x)?, self.heads)?,
            split_heads(&self.v.forward(x)?, self.heads)?,
        ))
    }

    /// Output projection of merged (B, H, L, dh) heads.
    pub fn project(&self, heads_out: &Tensor) -> Result<Tensor> {
        self.out.forward(&merge_heads(heads_out)?)
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (q, k, v) = self.qkv(x)?;
        self.project(&attention(&q, &k, &v, bias)?)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(scope: &Scope, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&scope.pp("ln1"), dim)?,
            attn: SelfAttention::new(&scope.pp("attn"), dim, heads)?,
            ln2: LayerNorm::new(&scope.pp("ln2"), dim)?,
            mlp: Mlp::new(&scope.pp("mlp"), dim, dim * mlp_ratio, Activation::Silu)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, bias)?)?;
        Ok((&x + self.mlp.forward(&self.ln2.forward(&x)?)?)?)
    }
}

/// Sinusoidal features of a (B,) time tensor, returned as (B, dim).
pub fn timestep_embedding(t: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp() * 1000.0)
        .collect();
    let freqs = Tensor::from_vec(freqs, (1, half), t.device())?.to_dtype(t.dtype())?;
    let args = t.unsqueeze(1)?.broadcast_mul(&freqs)?;
    Ok(Tensor::cat(&[args.cos()?, args.sin()?], 1)?)
}

/// Pooled mean over the token axis of (B, L, D).
pub fn mean_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(1)?)
}
