//! Reverse-mode differentiation over a linear record of tensor primitives.
//!
//! Nodes are appended in execution order, so the record is topologically
//! sorted by construction; `backward` walks it once in reverse. Parameter
//! leaves borrow their tensors from the caller, which keeps forward passes
//! over a shared weight store allocation-free on the parameter side.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MaskChannels { x: Var, mask: Vec<f64> },
    Scale(Var, f64),
    Reshape(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    PrependToken { cls: Var, x: Var },
    SliceTokens { x: Var, start: usize },
    MeanTokens(Var),
    TokensToGrid(Var),
    GridToTokens(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Patchify { x: Var, patch: usize },
    SumAll(Var),
    MeanAll(Var),
    Nll { logp: Var, labels: Vec<usize> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Single-owner record of one forward pass.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    precision: Precision,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no path from the loss reaches it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient for `v`, exactly zero when `v` did not participate.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn conv_out(extent: usize, kernel: usize, geom: ConvGeometry) -> Option<usize> {
    let padded = extent + 2 * geom.pad;
    (padded >= kernel).then(|| (padded - kernel) / geom.stride + 1)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        self.precision.round(&mut data);
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value: Cow::Owned(Tensor::from_parts(shape, data)),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Learnable leaf borrowed from the caller.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    /// Non-differentiable leaf (inputs, teacher targets, masks).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x·wᵀ + b` over the last axis of `x`, with `w` stored `[out×in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let d_in = *sx.last().unwrap_or(&1);
        if sw.len() != 2 || sw[1] != d_in {
            return Err(shape_err("linear", &sx, &sw));
        }
        let d_out = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(shape_err("linear bias", &sw, self.shape(b)));
            }
        }
        let m = self.value(x).numel() / d_in;
        let y = kernels::linear(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            m,
            d_in,
            d_out,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = d_out;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(shape, y, Op::Linear { x, w, b }, &inputs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (broadcast over leading axes).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", sa, sb));
        }
        let bv = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(bv.len()) {
            for (x, y) in chunk.iter_mut().zip(bv) {
                *x += y;
            }
        }
        Ok(self.push(self.shape(a).to_vec(), data, Op::AddBroadcast(a, b), &[a, b]))
    }

    /// Multiplies the last axis by a constant per-channel mask.
    pub fn mask_channels(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let d = self.value(x).last_dim();
        if mask.len() != d {
            return Err(shape_err("mask_channels", self.shape(x), &[mask.len()]));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, m) in row.iter_mut().zip(mask) {
                *v *= m;
            }
        }
        let op = Op::MaskChannels {
            x,
            mask: mask.to_vec(),
        };
        Ok(self.push(self.shape(x).to_vec(), data, op, &[x]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, c), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let rows = self.value(x).numel() / d;
        let mut out = vec![0.0; rows * d];
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        kernels::layer_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            d,
            eps,
            &mut out,
            &mut mean,
            &mut rstd,
        );
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        self.push(self.shape(x).to_vec(), data, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            kernels::softmax_inplace(row);
        }
        self.push(self.shape(x).to_vec(), data, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            kernels::log_softmax_inplace(row);
        }
        self.push(self.shape(x).to_vec(), data, Op::LogSoftmax(x), &[x])
    }

    /// Multi-head scaled dot-product attention. `q` is `[B,Tq,Da]`, `k`/`v`
    /// are `[B,Tk,Da]`; heads occupy contiguous channel runs of `Da/heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(shape_err("attention", sq, sk));
        }
        let (b, tq, da) = (sq[0], sq[1], sq[2]);
        let tk = sk[1];
        if heads == 0 || da % heads != 0 {
            return Err(Error::InvalidSpec(format!(
                "attention width {da} not divisible by {heads} heads"
            )));
        }
        let hd = da / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; b * tq * da];
        let mut probs = vec![0.0; b * heads * tq * tk];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * hd;
                for i in 0..tq {
                    let qrow = &qd[(bi * tq + i) * da + off..][..hd];
                    let prow = &mut probs[((bi * heads + h) * tq + i) * tk..][..tk];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let krow = &kd[(bi * tk + j) * da + off..][..hd];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                        *p = dot * scale;
                    }
                    kernels::softmax_inplace(prow);
                    let orow = &mut out[(bi * tq + i) * da + off..][..hd];
                    for (j, &p) in prow.iter().enumerate() {
                        let vrow = &vd[(bi * tk + j) * da + off..][..hd];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        };
        Ok(self.push(vec![b, tq, da], out, op, &[q, k, v]))
    }

    /// `[B,N,D]` tokens with a shared `[1,D]` token prepended → `[B,N+1,D]`.
    pub fn prepend_token(&mut self, cls: Var, x: Var) -> Result<Var> {
        let (sc, sx) = (self.shape(cls), self.shape(x));
        if sx.len() != 3 || sc != [1, sx[2]] {
            return Err(shape_err("prepend_token", sx, sc));
        }
        let (b, n, d) = (sx[0], sx[1], sx[2]);
        let cv = self.value(cls).data();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(b * (n + 1) * d);
        for bi in 0..b {
            data.extend_from_slice(cv);
            data.extend_from_slice(&xv[bi * n * d..(bi + 1) * n * d]);
        }
        Ok(self.push(vec![b, n + 1, d], data, Op::PrependToken { cls, x }, &[cls, x]))
    }

    /// Tokens `start..end` of `[B,T,D]`.
    pub fn slice_tokens(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || start >= end || end > sx[1] {
            return Err(shape_err("slice_tokens", &sx, &[start, end]));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(b * (end - start) * d);
        for bi in 0..b {
            data.extend_from_slice(&xv[(bi * t + start) * d..(bi * t + end) * d]);
        }
        Ok(self.push(vec![b, end - start, d], data, Op::SliceTokens { x, start }, &[x]))
    }

    /// Token `index` of `[B,T,D]` → `[B,D]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.slice_tokens(x, index, index + 1)?;
        let b = self.shape(x)[0];
        let d = self.shape(x)[2];
        self.reshape(s, &[b, d])
    }

    /// Mean over the token axis of `[B,T,D]` → `[B,D]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(shape_err("mean_tokens", &sx, &[]));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let xv = self.value(x).data();
        let mut data = vec![0.0; b * d];
        for bi in 0..b {
            let out = &mut data[bi * d..(bi + 1) * d];
            for ti in 0..t {
                for (o, v) in out.iter_mut().zip(&xv[(bi * t + ti) * d..][..d]) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= t as f64;
            }
        }
        Ok(self.push(vec![b, d], data, Op::MeanTokens(x), &[x]))
    }

    /// `[B,H·W,D]` tokens (raster order) → `[B,D,H,W]` feature map.
    pub fn tokens_to_grid(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[1] != h * w {
            return Err(shape_err("tokens_to_grid", &sx, &[h, w]));
        }
        let (b, n, d) = (sx[0], sx[1], sx[2]);
        let data = permute_021(self.value(x).data(), b, n, d);
        Ok(self.push(vec![b, d, h, w], data, Op::TokensToGrid(x), &[x]))
    }

    /// `[B,D,H,W]` → `[B,H·W,D]`.
    pub fn grid_to_tokens(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err("grid_to_tokens", &sx, &[]));
        }
        let (b, d, n) = (sx[0], sx[1], sx[2] * sx[3]);
        let data = permute_021(self.value(x).data(), b, d, n);
        Ok(self.push(vec![b, n, d], data, Op::GridToTokens(x), &[x]))
    }

    /// 2-D convolution: `x[B,Cin,H,W]`, `w[Cout,Cin/groups,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || geom.groups == 0 || geom.stride == 0 {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let (bn, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, cpg, k) = (sw[0], sw[1], sw[2]);
        if cin % geom.groups != 0 || cout % geom.groups != 0 || cin / geom.groups != cpg {
            return Err(shape_err("conv2d groups", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d bias", &sw, self.shape(b)));
            }
        }
        let (ho, wo) = match (conv_out(h, k, geom), conv_out(wd, k, geom)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(shape_err("conv2d kernel", &sx, &sw)),
        };
        let dims = ConvDims {
            b: bn,
            cin,
            h,
            w: wd,
            cout,
            k,
            ho,
            wo,
            geom,
        };
        let mut out = conv_forward(self.value(x).data(), self.value(w).data(), &dims);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (i, plane) in out.chunks_mut(ho * wo).enumerate() {
                let c = i % cout;
                for v in plane {
                    *v += bv[c];
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(vec![bn, cout, ho, wo], out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Non-overlapping `p×p` patches of `[B,C,H,W]` in raster order →
    /// `[B,N,C·p·p]`, each patch flattened channel-major.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || patch == 0 || !sx[2].is_multiple_of(patch) || !sx[3].is_multiple_of(patch) {
            return Err(shape_err("patchify", &sx, &[patch]));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (gh, gw) = (h / patch, w / patch);
        let pd = c * patch * patch;
        let xv = self.value(x).data();
        let mut data = vec![0.0; b * gh * gw * pd];
        for (dst, src) in patch_index(b, c, h, w, patch) {
            data[dst] = xv[src];
        }
        Ok(self.push(vec![b, gh * gw, pd], data, Op::Patchify { x, patch }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Vec::new(), vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Vec::new(), vec![s], Op::MeanAll(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under row-wise log-probs `[B,K]`.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logp).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("nll", &s, &[labels.len()]));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelRange {
                label: bad,
                classes: k,
            });
        }
        let lv = self.value(logp).data();
        let total: f64 = labels.iter().enumerate().map(|(i, &y)| -lv[i * k + y]).sum();
        let op = Op::Nll {
            logp,
            labels: labels.to_vec(),
        };
        Ok(self.push(Vec::new(), vec![total / labels.len() as f64], op, &[logp]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop(&node.op, &node.value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let bt = kernels::transpose(self.value(*b).data(), k, n);
                    let mut da = vec![0.0; m * k];
                    kernels::matmul(g, &bt, m, n, k, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let at = kernels::transpose(self.value(*a).data(), m, k);
                    let mut db = vec![0.0; k * n];
                    kernels::matmul(&at, g, k, m, n, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (d_out, d_in) = (sw[0], sw[1]);
                let m = g.len() / d_out;
                if self.needs(*x) {
                    let mut dx = vec![0.0; m * d_in];
                    kernels::matmul(g, self.value(*w).data(), m, d_out, d_in, &mut dx);
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let gt = kernels::transpose(g, m, d_out);
                    let mut dw = vec![0.0; d_out * d_in];
                    kernels::matmul(&gt, self.value(*x).data(), d_out, m, d_in, &mut dw);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; d_out];
                        for row in g.chunks(d_out) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.needs(*b) {
                    let nb = self.value(*b).numel();
                    let mut db = vec![0.0; nb];
                    for chunk in g.chunks(nb) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaskChannels { x, mask } => {
                let mut dx = g.to_vec();
                for row in dx.chunks_mut(mask.len()) {
                    for (v, m) in row.iter_mut().zip(mask) {
                        *v *= m;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..xv.len() / d {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean[r]) * rstd[r];
                        dxhat[j] = gr[j] * gv[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = g.iter().zip(xv).map(|(g, &x)| g * kernels::gelu_grad(x)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let d = out.last_dim();
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let d = out.last_dim();
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..d {
                        dr[j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let sq = self.shape(*q);
                let (b, tq, da) = (sq[0], sq[1], sq[2]);
                let tk = self.shape(*k)[1];
                let hd = da / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; tk];
                for bi in 0..b {
                    for h in 0..*heads {
                        let off = h * hd;
                        for i in 0..tq {
                            let prow = &probs[((bi * heads + h) * tq + i) * tk..][..tk];
                            let grow = &g[(bi * tq + i) * da + off..][..hd];
                            for j in 0..tk {
                                let vrow = &vd[(bi * tk + j) * da + off..][..hd];
                                dp[j] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                                let dvrow = &mut dv[(bi * tk + j) * da + off..][..hd];
                                for (d, gg) in dvrow.iter_mut().zip(grow) {
                                    *d += prow[j] * gg;
                                }
                            }
                            let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            let qrow = &qd[(bi * tq + i) * da + off..][..hd];
                            for j in 0..tk {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                let krow = &kd[(bi * tk + j) * da + off..][..hd];
                                let dqrow = &mut dq[(bi * tq + i) * da + off..][..hd];
                                for (d, kk) in dqrow.iter_mut().zip(krow) {
                                    *d += ds * kk;
                                }
                                let dkrow = &mut dk[(bi * tk + j) * da + off..][..hd];
                                for (d, qq) in dkrow.iter_mut().zip(qrow) {
                                    *d += ds * qq;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::PrependToken { cls, x } => {
                let sx = self.shape(*x);
                let (b, n, d) = (sx[0], sx[1], sx[2]);
                if self.needs(*cls) {
                    let mut dc = vec![0.0; d];
                    for bi in 0..b {
                        for (a, v) in dc.iter_mut().zip(&g[bi * (n + 1) * d..][..d]) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *cls, dc);
                }
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(b * n * d);
                    for bi in 0..b {
                        dx.extend_from_slice(&g[(bi * (n + 1) + 1) * d..][..n * d]);
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SliceTokens { x, start } => {
                let sx = self.shape(*x);
                let (b, t, d) = (sx[0], sx[1], sx[2]);
                let len = out.shape()[1];
                let mut dx = vec![0.0; b * t * d];
                for bi in 0..b {
                    dx[(bi * t + start) * d..][..len * d]
                        .copy_from_slice(&g[bi * len * d..][..len * d]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanTokens(x) => {
                let sx = self.shape(*x);
                let (b, t, d) = (sx[0], sx[1], sx[2]);
                let mut dx = vec![0.0; b * t * d];
                for bi in 0..b {
                    for ti in 0..t {
                        for j in 0..d {
                            dx[(bi * t + ti) * d + j] = g[bi * d + j] / t as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::TokensToGrid(x) => {
                let sx = self.shape(*x);
                let dx = permute_021(g, sx[0], sx[2], sx[1]);
                self.accumulate(grads, *x, dx);
            }
            Op::GridToTokens(x) => {
                let sx = self.shape(*x);
                let dx = permute_021(g, sx[0], sx[2] * sx[3], sx[1]);
                self.accumulate(grads, *x, dx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let so = out.shape();
                let dims = ConvDims {
                    b: sx[0],
                    cin: sx[1],
                    h: sx[2],
                    w: sx[3],
                    cout: sw[0],
                    k: sw[2],
                    ho: so[2],
                    wo: so[3],
                    geom: *geom,
                };
                let (dx, dw) = conv_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    &dims,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; dims.cout];
                    for (i, plane) in g.chunks(dims.ho * dims.wo).enumerate() {
                        db[i % dims.cout] += plane.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Patchify { x, patch } => {
                if self.needs(*x) {
                    let sx = self.shape(*x);
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (dst, src) in patch_index(sx[0], sx[1], sx[2], sx[3], *patch) {
                        dx[src] = g[dst];
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Nll { logp, labels } => {
                let k = self.shape(*logp)[1];
                let mut d = vec![0.0; labels.len() * k];
                let scale = g[0] / labels.len() as f64;
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] = -scale;
                }
                self.accumulate(grads, *logp, d);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

/// `[B,M,N]` → `[B,N,M]`.
fn permute_021(src: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        let base = bi * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = src[base + i * n + j];
            }
        }
    }
    out
}

/// (destination in patch layout, source in image layout) pairs.
fn patch_index(b: usize, c: usize, h: usize, w: usize, p: usize) -> impl Iterator<Item = (usize, usize)> {
    let (gh, gw) = (h / p, w / p);
    let pd = c * p * p;
    (0..b).flat_map(move |bi| {
        (0..gh * gw).flat_map(move |n| {
            let (py, px) = (n / gw, n % gw);
            (0..pd).map(move |e| {
                let ci = e / (p * p);
                let iy = (e / p) % p;
                let ix = e % p;
                let src = ((bi * c + ci) * h + py * p + iy) * w + px * p + ix;
                ((bi * gh * gw + n) * pd + e, src)
            })
        })
    })
}

struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeometry,
}

impl ConvDims {
    /// Input coordinate feeding output `o` through kernel tap `t`, if in bounds.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = o * self.geom.stride + t;
        (pos >= self.geom.pad && pos - self.geom.pad < extent).then(|| pos - self.geom.pad)
    }
}

fn conv_forward(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let cpg_in = d.cin / d.geom.groups;
    let cpg_out = d.cout / d.geom.groups;
    let mut out = vec![0.0; d.b * d.cout * d.ho * d.wo];
    for bi in 0..d.b {
        for co in 0..d.cout {
            let grp = co / cpg_out;
            let plane = &mut out[(bi * d.cout + co) * d.ho * d.wo..][..d.ho * d.wo];
            for cl in 0..cpg_in {
                let ci = grp * cpg_in + cl;
                let xplane = &x[(bi * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let wv = w[((co * cpg_in + cl) * d.k + ky) * d.k + kx];
                        for oy in 0..d.ho {
                            let Some(iy) = d.src(oy, ky, d.h) else { continue };
                            for ox in 0..d.wo {
                                let Some(ix) = d.src(ox, kx, d.w) else { continue };
                                plane[oy * d.wo + ox] += wv * xplane[iy * d.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    d: &ConvDims,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let cpg_in = d.cin / d.geom.groups;
    let cpg_out = d.cout / d.geom.groups;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    for bi in 0..d.b {
        for co in 0..d.cout {
            let grp = co / cpg_out;
            let gplane = &g[(bi * d.cout + co) * d.ho * d.wo..][..d.ho * d.wo];
            for cl in 0..cpg_in {
                let ci = grp * cpg_in + cl;
                let xbase = (bi * d.cin + ci) * d.h * d.w;
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let widx = ((co * cpg_in + cl) * d.k + ky) * d.k + kx;
                        let wv = w[widx];
                        let mut acc = 0.0;
                        for oy in 0..d.ho {
                            let Some(iy) = d.src(oy, ky, d.h) else { continue };
                            for ox in 0..d.wo {
                                let Some(ix) = d.src(ox, kx, d.w) else { continue };
                                let gv = gplane[oy * d.wo + ox];
                                let xi = xbase + iy * d.w + ix;
                                acc += gv * x[xi];
                                if let Some(dx) = dx.as_mut() {
                                    dx[xi] += gv * wv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}
