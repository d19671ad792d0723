//! Define-by-run reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! pulled from a [`ParamStore`] by name; each name maps to a single leaf per
//! graph, so a parameter consumed by several blocks accumulates one gradient.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{col2im, gemm, im2col, ConvGeom, MatRef, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    AddBroadcast(NodeId, NodeId),
    AddChannel(NodeId, NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat {
        a: NodeId,
        b: NodeId,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    Norm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        inner: usize,
        channels: usize,
        row_len: usize,
        rstd: Vec<F>,
    },
    Softmax(NodeId),
    Silu(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Resample {
        x: NodeId,
        rh: Tensor<F>,
        rw: Tensor<F>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    MeanSquare(NodeId),
    SumAll(NodeId),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// One recorded forward pass.
pub struct Graph<'p, F: Scalar> {
    store: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    params: BTreeMap<String, NodeId>,
    grad_enabled: bool,
}

/// Result of [`Graph::backward`].
pub struct Gradients<F> {
    by_node: Vec<Option<Tensor<F>>>,
    params: BTreeMap<String, NodeId>,
}

impl<F: Scalar> Gradients<F> {
    pub fn node(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name).and_then(|&id| self.node(id))
    }

    /// Gradients of every parameter that was reached from the loss.
    pub fn into_param_grads(mut self) -> BTreeMap<String, Tensor<F>> {
        let mut out = BTreeMap::new();
        for (name, id) in std::mem::take(&mut self.params) {
            if let Some(g) = self.by_node[id.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<F: Scalar>(x: &Tensor<F>, axes: &[usize]) -> Tensor<F> {
    let in_shape = x.shape();
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let src = x.data();
    let last = rank - 1;
    let (last_len, last_stride) = (out_shape[last], src_strides[last]);
    let mut offset = 0usize;
    if n == 0 {
        return Tensor::new(out_shape, out).expect("permute shape");
    }
    loop {
        for j in 0..last_len {
            out.push(src[offset + j * last_stride]);
        }
        // advance the odometer over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return Tensor::new(out_shape, out).expect("permute shape");
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    /// Graph that records gradients for every trainable parameter.
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// Forward-only graph: no node requires a gradient.
    pub fn inference(store: &'p ParamStore<F>) -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[NodeId]) -> NodeId {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input.
    pub fn input(&mut self, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient (used to differentiate w.r.t. activations).
    pub fn variable(&mut self, value: Tensor<F>) -> NodeId {
        let rg = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: rg,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated lookups return the same node.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let p = self.store.get(name)?;
        let rg = self.grad_enabled && p.trainable;
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: rg,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let s = F::from_f64(s);
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// `x + b` where `b`'s shape equals the trailing dims of `x`.
    pub fn add_broadcast(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::shape("add_broadcast", format!("{xs:?} + {bs:?}")));
        }
        let tail = self.value(b).numel();
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(tail) {
            for (a, &c) in chunk.iter_mut().zip(&bv) {
                *a += c;
            }
        }
        Ok(self.push(v, Op::AddBroadcast(x, b), &[x, b]))
    }

    /// `x[b, c, ...] + v[b, c]` (or `v[c]`), broadcasting over trailing spatial dims.
    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let vs = self.shape(v).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("add_channel", format!("x {xs:?}")));
        }
        let (b, c) = (xs[0], xs[1]);
        let per_sample = match vs[..] {
            [vc] if vc == c => false,
            [vb, vc] if vb == b && vc == c => true,
            _ => return Err(Error::shape("add_channel", format!("{xs:?} + {vs:?}"))),
        };
        let inner: usize = xs[2..].iter().product();
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let add = if per_sample { vv[i] } else { vv[i % c] };
            chunk.iter_mut().for_each(|a| *a += add);
        }
        Ok(self.push(out, Op::AddChannel(x, v), &[x, v]))
    }

    /// Batched matrix product over matching leading dims, with optional
    /// transposes of the last two axes of either operand.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() < 2 || as_.len() != bs.len() || as_[..as_.len() - 2] != bs[..bs.len() - 2] {
            return Err(Error::shape("matmul", format!("{as_:?} x {bs:?}")));
        }
        let r = as_.len();
        let (m, k) = if ta { (as_[r - 1], as_[r - 2]) } else { (as_[r - 2], as_[r - 1]) };
        let (k2, n) = if tb { (bs[r - 1], bs[r - 2]) } else { (bs[r - 2], bs[r - 1]) };
        if k != k2 {
            return Err(Error::shape("matmul", format!("{as_:?} x {bs:?} (ta={ta}, tb={tb})")));
        }
        let batch: usize = as_[..r - 2].iter().product();
        let mut out_shape = as_[..r - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![F::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                let am = op_mat(&ad[i * m * k..(i + 1) * m * k], m, k, ta);
                let bm = op_mat(&bd[i * k * n..(i + 1) * k * n], k, n, tb);
                gemm(am, bm, F::zero(), &mut out[i * m * n..(i + 1) * m * n]);
            }
        }
        let v = Tensor::new(out_shape, out)?;
        Ok(self.push(
            v,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for rank {rank}")));
        }
        let v = permute_data(self.value(x), axes);
        Ok(self.push(v, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let ok = as_.len() == bs.len()
            && axis < as_.len()
            && as_.iter().zip(&bs).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return Err(Error::shape("concat", format!("{as_:?} ++ {bs:?} on axis {axis}")));
        }
        let outer: usize = as_[..axis].iter().product();
        let a_inner = self.value(a).numel() / outer.max(1);
        let b_inner = self.value(b).numel() / outer.max(1);
        let mut data = Vec::with_capacity(outer * (a_inner + b_inner));
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for o in 0..outer {
                data.extend_from_slice(&ad[o * a_inner..(o + 1) * a_inner]);
                data.extend_from_slice(&bd[o * b_inner..(o + 1) * b_inner]);
            }
        }
        let mut shape = as_.clone();
        shape[axis] += bs[axis];
        let v = Tensor::new(shape, data)?;
        Ok(self.push(
            v,
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            },
            &[a, b],
        ))
    }

    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (b, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        let g = ConvGeom {
            channels: cin,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = g
            .out_dims()
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {k} too large for {h}x{wd}")))?;
        let npos = oh * ow;
        let mut out = vec![F::zero(); b * cout * npos];
        let mut cols = vec![F::zero(); g.col_rows() * npos];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            for i in 0..b {
                im2col(&xd[i * cin * h * wd..(i + 1) * cin * h * wd], g, &mut cols);
                gemm(
                    MatRef::new(wdat, cout, g.col_rows()),
                    MatRef::new(&cols, g.col_rows(), npos),
                    F::zero(),
                    &mut out[i * cout * npos..(i + 1) * cout * npos],
                );
            }
        }
        let v = Tensor::new(vec![b, cout, oh, ow], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, stride, pad }, &[x, w]))
    }

    /// Transposed convolution. `x: [B, Cin, H, W]`, `w: [Cin, Cout, k, k]`;
    /// output side is `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (b, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 || stride == 0 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input {:?}, weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        let oh = ((h - 1) * stride + k).checked_sub(2 * pad);
        let ow = ((wd - 1) * stride + k).checked_sub(2 * pad);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(c)) if a > 0 && c > 0 => (a, c),
            _ => return Err(Error::shape("conv_transpose2d", "padding exceeds output".to_string())),
        };
        let g = ConvGeom {
            channels: cout,
            height: oh,
            width: ow,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!(g.out_dims(), Some((h, wd)));
        let npos = h * wd;
        let mut out = vec![F::zero(); b * cout * oh * ow];
        let mut cols = vec![F::zero(); g.col_rows() * npos];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            for i in 0..b {
                gemm(
                    MatRef::t(wdat, cin, g.col_rows()),
                    MatRef::new(&xd[i * cin * npos..(i + 1) * cin * npos], cin, npos),
                    F::zero(),
                    &mut cols,
                );
                col2im(&cols, g, &mut out[i * cout * oh * ow..(i + 1) * cout * oh * ow]);
            }
        }
        let v = Tensor::new(vec![b, cout, oh, ow], out)?;
        Ok(self.push(v, Op::ConvTranspose2d { x, w, stride, pad }, &[x, w]))
    }

    /// Normalize contiguous rows of `row_len` elements, then apply a
    /// per-channel affine map where the channel of flat index `i` is
    /// `(i / inner) % channels`.
    fn norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        row_len: usize,
        inner: usize,
        channels: usize,
        eps: f64,
    ) -> Result<NodeId> {
        if self.value(gamma).numel() != channels || self.value(beta).numel() != channels {
            return Err(Error::shape(
                "norm",
                format!("affine params must have {channels} entries"),
            ));
        }
        let xv = self.value(x);
        let n = xv.numel();
        if row_len == 0 || !n.is_multiple_of(row_len) {
            return Err(Error::shape("norm", format!("{n} elements, row {row_len}")));
        }
        let rows = n / row_len;
        let eps = F::from_f64(eps);
        let len = F::from_f64(row_len as f64);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![F::zero(); n];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * row_len..(r + 1) * row_len];
            let mean = row.iter().copied().sum::<F>() / len;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / len;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let idx = r * row_len + j;
                let c = (idx / inner) % channels;
                out[idx] = (v - mean) * rs * gv[c] + bv[c];
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::Norm {
                x,
                gamma,
                beta,
                inner,
                channels,
                row_len,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Group normalization over `[B, C, H, W]`.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let (_, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_norm", format!("{c} channels into {groups} groups")));
        }
        self.norm(x, gamma, beta, (c / groups) * h * w, h * w, c, eps)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        self.norm(x, gamma, beta, d, 1, d, eps)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for a in row.iter_mut() {
                *a = (*a - mx).exp();
                s += *a;
            }
            row.iter_mut().for_each(|a| *a = *a / s);
        }
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a * sigmoid(a));
        self.push(v, Op::Silu(x), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| if a > F::zero() { a } else { F::zero() });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let c = F::from_f64(GELU_C);
        let a3 = F::from_f64(GELU_A);
        let half = F::from_f64(0.5);
        let v = self
            .value(x)
            .map(|u| half * u * (F::one() + (c * (u + a3 * u * u * u)).tanh()));
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Separable linear resampling of `[B, C, H, W]`:
    /// `out[b, c] = rh * x[b, c] * rw^T` with `rh: [OH, H]`, `rw: [OW, W]`.
    pub fn resample(&mut self, x: NodeId, rh: Tensor<F>, rw: Tensor<F>) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (rs, cs) = (rh.shape().to_vec(), rw.shape().to_vec());
        if rs.len() != 2 || cs.len() != 2 || rs[1] != h || cs[1] != w {
            return Err(Error::shape(
                "resample",
                format!("input {:?}, rows {rs:?}, cols {cs:?}", self.shape(x)),
            ));
        }
        let (oh, ow) = (rs[0], cs[0]);
        let planes = b * c;
        let mut tmp = vec![F::zero(); planes * h * ow];
        gemm(
            MatRef::new(self.value(x).data(), planes * h, w),
            MatRef::t(rw.data(), ow, w),
            F::zero(),
            &mut tmp,
        );
        let mut out = vec![F::zero(); planes * oh * ow];
        for p in 0..planes {
            gemm(
                MatRef::new(rh.data(), oh, h),
                MatRef::new(&tmp[p * h * ow..(p + 1) * h * ow], h, ow),
                F::zero(),
                &mut out[p * oh * ow..(p + 1) * oh * ow],
            );
        }
        let v = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(v, Op::Resample { x, rh, rw }, &[x]))
    }

    /// Row lookup: `table: [T, D]` -> `[ids.len(), D]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("embedding", format!("table {ts:?}")));
        }
        let (rows, d) = (ts[0], ts[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(Error::StepOutOfRange { t: i, steps: rows });
            }
            data.extend_from_slice(&self.value(table).data()[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean of squared entries, as a 1-element tensor.
    pub fn mean_square(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = F::from_f64(xv.numel().max(1) as f64);
        let s = xv.data().iter().map(|&v| v * v).sum::<F>() / n;
        self.push(Tensor::scalar(s), Op::MeanSquare(x), &[x])
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Reverse pass from a 1-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), F::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            by_node: grads,
            params: self.params.clone(),
        })
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |id: NodeId, t: Tensor<F>| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.clone());
                }
                if self.rg(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.clone());
                }
                if self.rg(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    acc(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    acc(*b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    let s = *s;
                    acc(*a, g.map(|v| v * s));
                }
            }
            Op::AddBroadcast(x, b) => {
                if self.rg(*x) {
                    acc(*x, g.clone());
                }
                if self.rg(*b) {
                    let bs = self.shape(*b).to_vec();
                    let tail = self.value(*b).numel();
                    let mut gb = vec![F::zero(); tail];
                    for chunk in g.data().chunks(tail) {
                        for (a, &c) in gb.iter_mut().zip(chunk) {
                            *a += c;
                        }
                    }
                    acc(*b, Tensor::new(bs, gb)?);
                }
            }
            Op::AddChannel(x, v) => {
                if self.rg(*x) {
                    acc(*x, g.clone());
                }
                if self.rg(*v) {
                    let xs = self.shape(*x);
                    let c = xs[1];
                    let inner: usize = xs[2..].iter().product();
                    let vs = self.shape(*v).to_vec();
                    let per_sample = vs.len() == 2;
                    let mut gv = vec![F::zero(); self.value(*v).numel()];
                    for (k, chunk) in g.data().chunks(inner).enumerate() {
                        let s: F = chunk.iter().copied().sum();
                        if per_sample {
                            gv[k] += s;
                        } else {
                            gv[k % c] += s;
                        }
                    }
                    acc(*v, Tensor::new(vs, gv)?);
                }
            }
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let gd = g.data();
                if self.rg(*a) {
                    let mut ga = vec![F::zero(); batch * m * k];
                    for i in 0..*batch {
                        let gm = MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                        let bm = op_mat(&bd[i * k * n..(i + 1) * k * n], k, n, *tb);
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if *ta {
                            // a stored [k, m]: grad = op(b) * g^T
                            gemm(bm, gm.transpose(), F::zero(), dst);
                        } else {
                            gemm(gm, bm.transpose(), F::zero(), dst);
                        }
                    }
                    acc(*a, Tensor::new(self.shape(*a).to_vec(), ga)?);
                }
                if self.rg(*b) {
                    let mut gb = vec![F::zero(); batch * k * n];
                    for i in 0..*batch {
                        let gm = MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                        let am = op_mat(&ad[i * m * k..(i + 1) * m * k], m, k, *ta);
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *tb {
                            // b stored [n, k]: grad = g^T * op(a)
                            gemm(gm.transpose(), am, F::zero(), dst);
                        } else {
                            gemm(am.transpose(), gm, F::zero(), dst);
                        }
                    }
                    acc(*b, Tensor::new(self.shape(*b).to_vec(), gb)?);
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    acc(*x, g.clone().reshape(self.shape(*x).to_vec())?);
                }
            }
            Op::Permute(x, axes) => {
                if self.rg(*x) {
                    let mut inv = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    acc(*x, permute_data(g, &inv));
                }
            }
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            } => {
                let gd = g.data();
                let w = a_inner + b_inner;
                if self.rg(*a) {
                    let mut ga = Vec::with_capacity(outer * a_inner);
                    for o in 0..*outer {
                        ga.extend_from_slice(&gd[o * w..o * w + a_inner]);
                    }
                    acc(*a, Tensor::new(self.shape(*a).to_vec(), ga)?);
                }
                if self.rg(*b) {
                    let mut gb = Vec::with_capacity(outer * b_inner);
                    for o in 0..*outer {
                        gb.extend_from_slice(&gd[o * w + a_inner..(o + 1) * w]);
                    }
                    acc(*b, Tensor::new(self.shape(*b).to_vec(), gb)?);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (b, cin, h, wd) = self.value(*x).dims4()?;
                let (cout, _, k, _) = self.value(*w).dims4()?;
                let geom = ConvGeom {
                    channels: cin,
                    height: h,
                    width: wd,
                    kernel: k,
                    stride: *stride,
                    pad: *pad,
                };
                let (oh, ow) = geom.out_dims().expect("checked in forward");
                let npos = oh * ow;
                let rows = geom.col_rows();
                let xd = self.value(*x).data();
                let wdat = self.value(*w).data();
                let gd = g.data();
                let mut cols = vec![F::zero(); rows * npos];
                let mut gw = vec![F::zero(); cout * rows];
                let mut gx = if self.rg(*x) {
                    Some(vec![F::zero(); b * cin * h * wd])
                } else {
                    None
                };
                for i in 0..b {
                    let gi = &gd[i * cout * npos..(i + 1) * cout * npos];
                    if self.rg(*w) {
                        im2col(&xd[i * cin * h * wd..(i + 1) * cin * h * wd], geom, &mut cols);
                        gemm(
                            MatRef::new(gi, cout, npos),
                            MatRef::t(&cols, rows, npos),
                            F::one(),
                            &mut gw,
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(
                            MatRef::t(wdat, cout, rows),
                            MatRef::new(gi, cout, npos),
                            F::zero(),
                            &mut cols,
                        );
                        col2im(&cols, geom, &mut gx[i * cin * h * wd..(i + 1) * cin * h * wd]);
                    }
                }
                if self.rg(*w) {
                    acc(*w, Tensor::new(self.shape(*w).to_vec(), gw)?);
                }
                if let Some(gx) = gx {
                    acc(*x, Tensor::new(self.shape(*x).to_vec(), gx)?);
                }
            }
            Op::ConvTranspose2d { x, w, stride, pad } => {
                let (b, cin, h, wd) = self.value(*x).dims4()?;
                let (_, cout, k, _) = self.value(*w).dims4()?;
                let (_, _, oh, ow) = g.dims4()?;
                let geom = ConvGeom {
                    channels: cout,
                    height: oh,
                    width: ow,
                    kernel: k,
                    stride: *stride,
                    pad: *pad,
                };
                let npos = h * wd;
                let rows = geom.col_rows();
                let xd = self.value(*x).data();
                let wdat = self.value(*w).data();
                let gd = g.data();
                let mut cols = vec![F::zero(); rows * npos];
                let mut gw = vec![F::zero(); cin * rows];
                let mut gx = if self.rg(*x) {
                    Some(vec![F::zero(); b * cin * npos])
                } else {
                    None
                };
                for i in 0..b {
                    im2col(&gd[i * cout * oh * ow..(i + 1) * cout * oh * ow], geom, &mut cols);
                    if self.rg(*w) {
                        gemm(
                            MatRef::new(&xd[i * cin * npos..(i + 1) * cin * npos], cin, npos),
                            MatRef::t(&cols, rows, npos),
                            F::one(),
                            &mut gw,
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(
                            MatRef::new(wdat, cin, rows),
                            MatRef::new(&cols, rows, npos),
                            F::zero(),
                            &mut gx[i * cin * npos..(i + 1) * cin * npos],
                        );
                    }
                }
                if self.rg(*w) {
                    acc(*w, Tensor::new(self.shape(*w).to_vec(), gw)?);
                }
                if let Some(gx) = gx {
                    acc(*x, Tensor::new(self.shape(*x).to_vec(), gx)?);
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                inner,
                channels,
                row_len,
                rstd,
            } => {
                let (inner, channels, row_len) = (*inner, *channels, *row_len);
                let xd = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let gd = g.data();
                let len = F::from_f64(row_len as f64);
                let mut ggamma = vec![F::zero(); channels];
                let mut gbeta = vec![F::zero(); channels];
                let mut gx = vec![F::zero(); xd.len()];
                let mut xhat = vec![F::zero(); row_len];
                let mut dxhat = vec![F::zero(); row_len];
                for (r, &rs) in rstd.iter().enumerate() {
                    let base = r * row_len;
                    let row = &xd[base..base + row_len];
                    let mean = row.iter().copied().sum::<F>() / len;
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for j in 0..row_len {
                        let idx = base + j;
                        let c = (idx / inner) % channels;
                        xhat[j] = (row[j] - mean) * rs;
                        ggamma[c] += gd[idx] * xhat[j];
                        gbeta[c] += gd[idx];
                        dxhat[j] = gd[idx] * gv[c];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                    }
                    let m1 = s1 / len;
                    let m2 = s2 / len;
                    for j in 0..row_len {
                        gx[base + j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.rg(*x) {
                    acc(*x, Tensor::new(self.shape(*x).to_vec(), gx)?);
                }
                if self.rg(*gamma) {
                    acc(*gamma, Tensor::new(self.shape(*gamma).to_vec(), ggamma)?);
                }
                if self.rg(*beta) {
                    acc(*beta, Tensor::new(self.shape(*beta).to_vec(), gbeta)?);
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let y = &node.value;
                    let d = *y.shape().last().expect("rank >= 1");
                    let mut gx = vec![F::zero(); y.numel()];
                    for ((yr, gr), out) in y
                        .data()
                        .chunks(d)
                        .zip(g.data().chunks(d))
                        .zip(gx.chunks_mut(d))
                    {
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*x, Tensor::new(y.shape().to_vec(), gx)?);
                }
            }
            Op::Silu(x) | Op::Relu(x) | Op::Sigmoid(x) | Op::Gelu(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x).data();
                    let yv = node.value.data();
                    let c = F::from_f64(GELU_C);
                    let a3 = F::from_f64(GELU_A);
                    let half = F::from_f64(0.5);
                    let three = F::from_f64(3.0);
                    let d: Vec<F> = (0..xv.len())
                        .map(|j| {
                            let (u, y) = (xv[j], yv[j]);
                            let deriv = match &node.op {
                                Op::Silu(_) => {
                                    let s = sigmoid(u);
                                    s * (F::one() + u * (F::one() - s))
                                }
                                Op::Relu(_) => {
                                    if u > F::zero() {
                                        F::one()
                                    } else {
                                        F::zero()
                                    }
                                }
                                Op::Sigmoid(_) => y * (F::one() - y),
                                _ => {
                                    let th = (c * (u + a3 * u * u * u)).tanh();
                                    half * (F::one() + th)
                                        + half * u * (F::one() - th * th) * c * (F::one() + three * a3 * u * u)
                                }
                            };
                            g.data()[j] * deriv
                        })
                        .collect();
                    acc(*x, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Resample { x, rh, rw } => {
                if self.rg(*x) {
                    let (b, c, h, w) = self.value(*x).dims4()?;
                    let (oh, ow) = (rh.shape()[0], rw.shape()[0]);
                    let planes = b * c;
                    let mut tmp = vec![F::zero(); planes * h * ow];
                    for p in 0..planes {
                        gemm(
                            MatRef::t(rh.data(), oh, h),
                            MatRef::new(&g.data()[p * oh * ow..(p + 1) * oh * ow], oh, ow),
                            F::zero(),
                            &mut tmp[p * h * ow..(p + 1) * h * ow],
                        );
                    }
                    let mut gx = vec![F::zero(); planes * h * w];
                    gemm(
                        MatRef::new(&tmp, planes * h, ow),
                        MatRef::new(rw.data(), ow, w),
                        F::zero(),
                        &mut gx,
                    );
                    acc(*x, Tensor::new(self.shape(*x).to_vec(), gx)?);
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let ts = self.shape(*table).to_vec();
                    let d = ts[1];
                    let mut gt = vec![F::zero(); ts[0] * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g.data()[r * d + j];
                        }
                    }
                    acc(*table, Tensor::new(ts, gt)?);
                }
            }
            Op::MeanSquare(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let s = g.data()[0] * F::from_f64(2.0 / xv.numel().max(1) as f64);
                    acc(*x, xv.map(|v| v * s));
                }
            }
            Op::SumAll(x) => {
                if self.rg(*x) {
                    let s = g.data()[0];
                    acc(*x, Tensor::full(self.shape(*x).to_vec(), s));
                }
            }
        }
        Ok(())
    }
}

/// Logical `rows x cols` operand built from a buffer stored either as
/// `[rows, cols]` or, when `trans`, as `[cols, rows]`.
fn op_mat<F>(data: &[F], rows: usize, cols: usize, trans: bool) -> MatRef<'_, F> {
    if trans {
        MatRef::t(data, cols, rows)
    } else {
        MatRef::new(data, rows, cols)
    }
}
