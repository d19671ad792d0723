//! Layer building blocks over [`Graph`]: each layer registers its parameters
//! in a [`ParamStore`] at construction and replays them by name in `forward`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{normal, uniform, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(weight.clone(), uniform(&[d_in, d_out], bound, rng), true);
        store.insert(bias.clone(), Tensor::zeros([d_out]), false);
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// Zero weights and bias.
    pub fn zeroed<F: Scalar>(store: &mut ParamStore<F>, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(weight.clone(), Tensor::zeros([d_in, d_out]), true);
        store.insert(bias.clone(), Tensor::zeros([d_out]), false);
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    /// Applies over the last axis of `x` for any leading shape.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("linear", "scalar input"))?;
        if d != self.d_in {
            return Err(Error::shape("linear", format!("expected width {}, got {shape:?}", self.d_in)));
        }
        let rows = g.value(x).numel() / d;
        let flat = g.reshape(x, &[rows, d])?;
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        let y = g.matmul(flat, w)?;
        let y = g.add_broadcast(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("nonempty") = self.d_out;
        g.reshape(y, &out_shape)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: String,
    bias: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(weight.clone(), uniform(&[c_out, c_in, kernel, kernel], bound, rng), true);
        store.insert(bias.clone(), Tensor::zeros([c_out]), false);
        Conv2d {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    /// 3x3, stride 1, same padding.
    pub fn same<F: Scalar, R: Rng>(store: &mut ParamStore<F>, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self::new(store, name, c_in, c_out, 3, 1, 1, rng)
    }

    pub fn zero_init<F: Scalar>(self, store: &mut ParamStore<F>) -> Self {
        if let Ok(w) = store.value_mut(&self.weight) {
            w.data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
        self
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        g.add_channel(y, b)
    }
}

/// Transposed convolution with weight layout `[c_in, c_out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: String,
    bias: String,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        // fan-in of each output pixel is c_in * (k / stride)^2
        let taps = (kernel / stride.max(1)).max(1);
        let bound = 1.0 / ((c_in * taps * taps) as f64).sqrt();
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(weight.clone(), uniform(&[c_in, c_out, kernel, kernel], bound, rng), true);
        store.insert(bias.clone(), Tensor::zeros([c_out]), false);
        ConvTranspose2d {
            weight,
            bias,
            c_in,
            c_out,
            stride,
            pad,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        let y = g.conv_transpose2d(x, w, self.stride, self.pad)?;
        g.add_channel(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: String,
    beta: String,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, groups: usize, channels: usize) -> Self {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.insert(gamma.clone(), Tensor::full([channels], F::one()), false);
        store.insert(beta.clone(), Tensor::zeros([channels]), false);
        GroupNorm {
            gamma,
            beta,
            groups: groups.min(channels).max(1),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let a = g.param(&self.gamma)?;
        let b = g.param(&self.beta)?;
        g.group_norm(x, a, b, self.groups, NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.insert(gamma.clone(), Tensor::full([dim], F::one()), false);
        store.insert(beta.clone(), Tensor::zeros([dim]), false);
        LayerNorm { gamma, beta }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let a = g.param(&self.gamma)?;
        let b = g.param(&self.beta)?;
        g.layer_norm(x, a, b, NORM_EPS)
    }
}

/// Multi-head self-attention over `[B, N, D]` token sequences.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    pub heads: usize,
}

/// Output of an attention layer plus the `[B*heads, N, N]` weight node.
pub struct AttentionOutput {
    pub out: NodeId,
    pub weights: NodeId,
}

impl SelfAttention {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        SelfAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            heads,
        }
    }

    pub fn proj_weight_name(&self) -> &str {
        self.proj.weight_name()
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<AttentionOutput> {
        let (b, n, d) = match g.shape(x)[..] {
            [b, n, d] => (b, n, d),
            _ => return Err(Error::shape("attention", format!("{:?}", g.shape(x)))),
        };
        let h = self.heads;
        let dh = d / h;
        let split = |g: &mut Graph<'_, F>, t: NodeId| -> Result<NodeId> {
            let t = g.reshape(t, &[b, n, h, dh])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[b * h, n, dh])
        };
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let scores = g.matmul_t(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax(scores)?;
        let mixed = g.matmul(weights, v)?;
        let mixed = g.reshape(mixed, &[b, h, n, dh])?;
        let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = g.reshape(mixed, &[b, n, d])?;
        let out = self.proj.forward(g, mixed)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Row-interpolation matrices for [`Graph::resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleKind {
    /// Half-pixel-centred bilinear interpolation.
    Bilinear,
    /// Area-weighted averaging (exact box average for integer factors).
    Area,
    /// Nearest neighbour (used for integer upsampling).
    Nearest,
}

impl ResampleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(ResampleKind::Bilinear),
            "area" => Ok(ResampleKind::Area),
            "nearest" => Ok(ResampleKind::Nearest),
            other => Err(Error::Config(format!("unknown resample kind '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ResampleKind::Bilinear => "bilinear",
            ResampleKind::Area => "area",
            ResampleKind::Nearest => "nearest",
        }
    }
}

/// `[out_len, in_len]` matrix mapping a 1-d signal of `in_len` samples to `out_len`.
pub fn resample_matrix<F: Scalar>(kind: ResampleKind, in_len: usize, out_len: usize) -> Tensor<F> {
    let mut m = vec![0.0f64; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let row = &mut m[o * in_len..(o + 1) * in_len];
        match kind {
            ResampleKind::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                let frac = src - lo as f64;
                row[lo] += 1.0 - frac;
                row[hi] += frac;
            }
            ResampleKind::Area => {
                let start = o as f64 * scale;
                let end = (o + 1) as f64 * scale;
                let mut i = start.floor() as usize;
                while (i as f64) < end && i < in_len {
                    let overlap = (end.min((i + 1) as f64) - start.max(i as f64)).max(0.0);
                    row[i] += overlap / scale;
                    i += 1;
                }
            }
            ResampleKind::Nearest => {
                let src = (((o as f64 + 0.5) * scale).floor() as usize).min(in_len - 1);
                row[src] = 1.0;
            }
        }
    }
    Tensor::from_f64([out_len, in_len], &m).expect("matrix shape")
}

/// Resample `[B, C, H, W]` to `[B, C, oh, ow]`.
pub fn resample<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: NodeId,
    kind: ResampleKind,
    oh: usize,
    ow: usize,
) -> Result<NodeId> {
    let (_, _, h, w) = g.value(x).dims4()?;
    if h == oh && w == ow {
        return Ok(x);
    }
    g.resample(x, resample_matrix(kind, h, oh), resample_matrix(kind, w, ow))
}

/// `[B, C, H, W]` -> `[B, H*W, C]`.
pub fn to_tokens<F: Scalar>(g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
    let (b, c, h, w) = g.value(x).dims4()?;
    let t = g.reshape(x, &[b, c, h * w])?;
    g.permute(t, &[0, 2, 1])
}

/// `[B, H*W, C]` -> `[B, C, H, W]`.
pub fn from_tokens<F: Scalar>(g: &mut Graph<'_, F>, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
    let (b, n, c) = match g.shape(x)[..] {
        [b, n, c] => (b, n, c),
        _ => return Err(Error::shape("from_tokens", format!("{:?}", g.shape(x)))),
    };
    if n != h * w {
        return Err(Error::shape("from_tokens", format!("{n} tokens into {h}x{w}")));
    }
    let t = g.permute(x, &[0, 2, 1])?;
    g.reshape(t, &[b, c, h, w])
}

/// Small-normal initialization for learned embeddings.
pub fn embedding_init<F: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    normal(shape, 0.02, rng)
}
