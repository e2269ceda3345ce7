//! Tape-based reverse-mode automatic differentiation over [`DenseTensor`]-shaped values.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value. [`Graph::backward`] walks the tape in reverse and
//! accumulates exact gradients into every node that (transitively) depends on
//! a leaf created with `requires_grad`. Nodes that depend only on constants or
//! frozen parameters never allocate a gradient buffer, so backward work stops
//! at the frozen part of a network.
//!
//! Binary elementwise ops broadcast with the usual trailing-axis rules.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::DenseTensor;

/// Label value excluded from [`Graph::cross_entropy`].
pub const IGNORE_INDEX: i64 = -100;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Sum(Var, usize),
    Mean(Var, usize),
    Max(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    Dropout(Var, Vec<f64>),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Gather(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        labels: Vec<i64>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// One recorded forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps flat indices of a broadcast output back to an input.
enum Bcast {
    Same,
    Cycle(usize),
    Map(Vec<usize>),
}

impl Bcast {
    fn new(out: &[usize], inp: &[usize]) -> Self {
        if out == inp {
            return Bcast::Same;
        }
        let stripped: &[usize] = {
            let lead = inp.iter().take_while(|&&d| d == 1).count();
            &inp[lead.min(inp.len().saturating_sub(1))..]
        };
        if stripped.len() <= out.len() && out[out.len() - stripped.len()..] == *stripped {
            return Bcast::Cycle(numel(stripped));
        }
        let rank = out.len();
        let mut strides = vec![0usize; rank];
        let mut s = 1;
        for i in (0..inp.len()).rev() {
            let oi = i + rank - inp.len();
            strides[oi] = if inp[i] == 1 { 0 } else { s };
            s *= inp[i];
        }
        let total = numel(out);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut cur = 0usize;
        for _ in 0..total {
            map.push(cur);
            for d in (0..rank).rev() {
                idx[d] += 1;
                cur += strides[d];
                if idx[d] < out[d] {
                    break;
                }
                cur -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        Bcast::Map(map)
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        return data.to_vec();
    }
    // innermost loop runs over the last output axis
    let last = rank - 1;
    let (n_last, s_last) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let outer = total / n_last;
    for _ in 0..outer {
        let mut off = base;
        for _ in 0..n_last {
            out.push(data[off]);
            off += s_last;
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

/// c[m,n] += a[m,k] · b[k,n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,k] += g[m,n] · b[k,n]ᵀ
fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * k + p] += acc;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · g[m,n]
fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct MatMulDims {
    batch: Vec<usize>,
    amap: Bcast,
    bmap: Bcast,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shape(ab, bb).ok_or_else(|| Error::shape("matmul", a, b))?;
    let amap = Bcast::new(&batch, ab);
    let bmap = Bcast::new(&batch, bb);
    Ok(MatMulDims {
        batch,
        amap,
        bmap,
        m,
        k,
        n,
    })
}

fn take_grad(node: &mut Node) -> Vec<f64> {
    node.grad
        .take()
        .unwrap_or_else(|| vec![0.0; node.value.len()])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, name: &str) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            other => Self::inputs(other)
                .iter()
                .any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::Softmax(a, _)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::Max(a, _)
            | Op::Dropout(a, _)
            | Op::Narrow(a, _, _)
            | Op::Gather(a, _) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Concat(v, _) => v.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: &DenseTensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// A leaf whose gradient is tracked when `requires_grad` is set.
    pub fn input(&mut self, t: &DenseTensor, requires_grad: bool) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), requires_grad)
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; trainable parameters track gradient.
    /// Repeated calls for the same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(
            p.tensor.shape().to_vec(),
            p.tensor.data().to_vec(),
            p.trainable,
        );
        self.params.insert(id, v);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> DenseTensor {
        let n = &self.nodes[v.0];
        DenseTensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are consistent")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Bcast, Bcast)> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(op, sa, sb))?;
        let ma = Bcast::new(&out, sa);
        let mb = Bcast::new(&out, sb);
        Ok((out, ma, mb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ma, mb) = self.binary_shape("add", a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = (0..numel(&out))
            .map(|i| va[ma.index(i)] + vb[mb.index(i)])
            .collect();
        self.push(out, value, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ma, mb) = self.binary_shape("mul", a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = (0..numel(&out))
            .map(|i| va[ma.index(i)] * vb[mb.index(i)])
            .collect();
        self.push(out, value, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|v| v * s).collect();
        let shape = n.shape.clone();
        self.push(shape, value, Op::Scale(a, s), "scale")
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = matmul_dims(&self.nodes[a.0].shape, &self.nodes[b.0].shape)?;
        let (m, k, n) = (dims.m, dims.k, dims.n);
        let nb = numel(&dims.batch);
        let mut value = vec![0.0; nb * m * n];
        {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            for bi in 0..nb {
                let ao = dims.amap.index(bi) * m * k;
                let bo = dims.bmap.index(bi) * k * n;
                gemm_nn(
                    &va[ao..ao + m * k],
                    &vb[bo..bo + k * n],
                    &mut value[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = dims.batch;
        shape.extend([m, n]);
        self.push(shape, value, Op::MatMul(a, b), "matmul")
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = &self.nodes[a.0].shape;
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", shape, perm));
        }
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let value = permute_data(&self.nodes[a.0].value, shape, perm);
        self.push(out_shape, value, Op::Permute(a, perm.to_vec()), "permute")
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.nodes[a.0].shape.len();
        if r < 2 {
            return Err(Error::Dimension("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        if numel(shape) != n.value.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &n.shape, shape));
        }
        let value = n.value.clone();
        self.push(shape.to_vec(), value, Op::Reshape(a), "reshape")
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let shape = &self.nodes[a.0].shape;
        if axis >= shape.len() {
            return Err(Error::shape(op, shape, &[axis]));
        }
        Ok(())
    }

    /// Softmax along `axis`, computed after subtracting the axis maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let n = &self.nodes[a.0];
        let (outer, len, inner) = split_axis(&n.shape, axis);
        let mut value = vec![0.0; n.value.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(n.value[base + j * inner]);
                }
                let mut s = 0.0;
                for j in 0..len {
                    let e = (n.value[base + j * inner] - mx).exp();
                    value[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    value[base + j * inner] /= s;
                }
            }
        }
        let shape = n.shape.clone();
        self.push(shape, value, Op::Softmax(a, axis), "softmax")
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Dimension("layer_norm on scalar".into()))?;
        for p in [gain, bias] {
            if self.nodes[p.0].value.len() != d {
                return Err(Error::shape("layer_norm", &shape, &self.nodes[p.0].shape));
            }
        }
        let rows = numel(&shape) / d;
        let xv = &self.nodes[x.0].value;
        let (gv, bv) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut value = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                value[r * d + j] = h * gv[j] + bv[j];
            }
        }
        self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&v| f(v)).collect();
        let shape = n.shape.clone();
        self.push(shape, value, op, name)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, gelu, Op::Gelu(a), "gelu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a), "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v.max(0.0), Op::Relu(a), "relu")
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut out: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if out.is_empty() {
            out.push(1);
        }
        out
    }

    fn reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis("reduce", a, axis)?;
        let n = &self.nodes[a.0];
        let (outer, len, inner) = split_axis(&n.shape, axis);
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &n.value[(o * len + j) * inner..(o * len + j + 1) * inner];
                let dst = &mut value[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            value.iter_mut().for_each(|v| *v /= len as f64);
        }
        let shape = Self::reduced_shape(&n.shape, axis);
        let op = if mean {
            Op::Mean(a, axis)
        } else {
            Op::Sum(a, axis)
        };
        self.push(shape, value, op, if mean { "mean" } else { "sum" })
    }

    /// Sum over `axis`; the axis is removed from the shape.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    /// Maximum over `axis`; gradient flows to the first maximal entry.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("max", a, axis)?;
        let n = &self.nodes[a.0];
        let (outer, len, inner) = split_axis(&n.shape, axis);
        let mut value = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    let src = (o * len + j) * inner + i;
                    let dst = o * inner + i;
                    if n.value[src] > value[dst] {
                        value[dst] = n.value[src];
                        arg[dst] = src;
                    }
                }
            }
        }
        let shape = Self::reduced_shape(&n.shape, axis);
        self.push(shape, value, Op::Max(a, arg), "max")
    }

    /// Stride-1 2-D convolution: `x [B,C,H,W]`, `w [O,C,KH,KW]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (xs, ws) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if self.nodes[b.0].value.len() != o || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", xs, ws));
        }
        let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let (xv, wv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let mut value = vec![0.0; bn * o * oh * ow];
        for n in 0..bn {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bv[oc];
                        for ic in 0..c {
                            for ky in 0..kh {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = ox + kx;
                                    if ix < pad || ix - pad >= wd {
                                        continue;
                                    }
                                    acc += xv[((n * c + ic) * h + iy - pad) * wd + ix - pad]
                                        * wv[((oc * c + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        value[((n * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        self.push(
            vec![bn, o, oh, ow],
            value,
            Op::Conv2d { x, w, b, pad },
            "conv2d",
        )
    }

    /// Inverted dropout. A rate of zero records nothing and returns `a`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let n = &self.nodes[a.0];
        let mask: Vec<f64> = (0..n.value.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = n.value.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = n.shape.clone();
        self.push(shape, value, Op::Dropout(a, mask), "dropout")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = &self.nodes[p.0];
                let chunk = n.shape[axis] * inner;
                value.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(shape, value, Op::Concat(parts.to_vec(), axis), "concat")
    }

    /// Entries `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", &shape, &[axis, start, len]));
        }
        let (outer, total, inner) = split_axis(&shape, axis);
        let src = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        self.push(out, value, Op::Narrow(a, axis, start), "narrow")
    }

    /// Row lookup into a `[V, w]` table; returns `[ids.len(), w]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = &self.nodes[table.0].shape;
        if s.len() != 2 || ids.is_empty() || ids.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape("gather_rows", s, &[ids.len()]));
        }
        let w = s[1];
        let tv = &self.nodes[table.0].value;
        let mut value = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            value.extend_from_slice(&tv[i * w..(i + 1) * w]);
        }
        self.push(
            vec![ids.len(), w],
            value,
            Op::Gather(table, ids.to_vec()),
            "gather_rows",
        )
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)` over
    /// the samples whose label is not [`IGNORE_INDEX`]. An all-ignored batch
    /// yields zero loss and zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<Var> {
        let s = &self.nodes[logits.0].shape;
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", s, &[labels.len()]));
        }
        let (b, k) = (s[0], s[1]);
        for &l in labels {
            if l != IGNORE_INDEX && (l < 0 || l as usize >= k) {
                return Err(Error::Label {
                    label: l,
                    classes: k,
                });
            }
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..b {
            let row = &lv[r * k..(r + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
            if labels[r] != IGNORE_INDEX {
                total += lse - row[labels[r] as usize];
                count += 1;
            }
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            "cross_entropy",
        )
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (lo, hi) = self.nodes.split_at_mut(i);
            let node = &hi[0];
            let Some(gout) = node.grad.as_ref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            Self::backward_node(lo, node, gout);
        }
        Ok(())
    }

    fn backward_node(lo: &mut [Node], node: &Node, gout: &[f64]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if lo[v.0].requires_grad {
                        let map = Bcast::new(&node.shape, &lo[v.0].shape);
                        let mut g = take_grad(&mut lo[v.0]);
                        for (i, go) in gout.iter().enumerate() {
                            g[map.index(i)] += go;
                        }
                        lo[v.0].grad = Some(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if lo[v.0].requires_grad {
                        let mv = Bcast::new(&node.shape, &lo[v.0].shape);
                        let mo = Bcast::new(&node.shape, &lo[other.0].shape);
                        let mut g = take_grad(&mut lo[v.0]);
                        let ov = &lo[other.0].value;
                        for (i, go) in gout.iter().enumerate() {
                            g[mv.index(i)] += go * ov[mo.index(i)];
                        }
                        lo[v.0].grad = Some(g);
                    }
                }
            }
            Op::Scale(a, s) => {
                if lo[a.0].requires_grad {
                    let mut g = take_grad(&mut lo[a.0]);
                    for (x, go) in g.iter_mut().zip(gout) {
                        *x += go * s;
                    }
                    lo[a.0].grad = Some(g);
                }
            }
            Op::MatMul(a, b) => {
                let dims = matmul_dims(&lo[a.0].shape, &lo[b.0].shape).expect("checked in forward");
                let (m, k, n) = (dims.m, dims.k, dims.n);
                let nb = numel(&dims.batch);
                if lo[a.0].requires_grad {
                    let mut g = take_grad(&mut lo[a.0]);
                    let bv = &lo[b.0].value;
                    for bi in 0..nb {
                        let ao = dims.amap.index(bi) * m * k;
                        let bo = dims.bmap.index(bi) * k * n;
                        gemm_nt(
                            &gout[bi * m * n..(bi + 1) * m * n],
                            &bv[bo..bo + k * n],
                            &mut g[ao..ao + m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    lo[a.0].grad = Some(g);
                }
                if lo[b.0].requires_grad {
                    let mut g = take_grad(&mut lo[b.0]);
                    let av = &lo[a.0].value;
                    for bi in 0..nb {
                        let ao = dims.amap.index(bi) * m * k;
                        let bo = dims.bmap.index(bi) * k * n;
                        gemm_tn(
                            &av[ao..ao + m * k],
                            &gout[bi * m * n..(bi + 1) * m * n],
                            &mut g[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    lo[b.0].grad = Some(g);
                }
            }
            Op::Permute(a, perm) => {
                if lo[a.0].requires_grad {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = permute_data(gout, &node.shape, &inv);
                    let mut g = take_grad(&mut lo[a.0]);
                    for (x, y) in g.iter_mut().zip(&back) {
                        *x += y;
                    }
                    lo[a.0].grad = Some(g);
                }
            }
            Op::Reshape(a) | Op::Dropout(a, _) => {
                if lo[a.0].requires_grad {
                    let mut g = take_grad(&mut lo[a.0]);
                    match &node.op {
                        Op::Dropout(_, mask) => {
                            for ((x, go), m) in g.iter_mut().zip(gout).zip(mask) {
                                *x += go * m;
                            }
                        }
                        _ => {
                            for (x, go) in g.iter_mut().zip(gout) {
                                *x += go;
                            }
                        }
                    }
                    lo[a.0].grad = Some(g);
                }
            }
            Op::Softmax(a, axis) => {
                if lo[a.0].requires_grad {
                    let (outer, len, inner) = split_axis(&node.shape, *axis);
                    let y = &node.value;
                    let mut g = take_grad(&mut lo[a.0]);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let p = base + j * inner;
                                dot += gout[p] * y[p];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                g[p] += y[p] * (gout[p] - dot);
                            }
                        }
                    }
                    lo[a.0].grad = Some(g);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *node.shape.last().expect("rank >= 1");
                let rows = gout.len() / d;
                if lo[x.0].requires_grad {
                    let gv = lo[gain.0].value.clone();
                    let mut g = take_grad(&mut lo[x.0]);
                    let mut gh = vec![0.0; d];
                    for r in 0..rows {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..d {
                            gh[j] = gout[r * d + j] * gv[j];
                            m1 += gh[j];
                            m2 += gh[j] * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            g[r * d + j] += inv_std[r] * (gh[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    lo[x.0].grad = Some(g);
                }
                if lo[gain.0].requires_grad {
                    let mut g = take_grad(&mut lo[gain.0]);
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += gout[r * d + j] * xhat[r * d + j];
                        }
                    }
                    lo[gain.0].grad = Some(g);
                }
                if lo[bias.0].requires_grad {
                    let mut g = take_grad(&mut lo[bias.0]);
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += gout[r * d + j];
                        }
                    }
                    lo[bias.0].grad = Some(g);
                }
            }
            Op::Gelu(a) | Op::Sigmoid(a) | Op::Relu(a) => {
                if lo[a.0].requires_grad {
                    let mut g = take_grad(&mut lo[a.0]);
                    let xv = &lo[a.0].value;
                    let y = &node.value;
                    for i in 0..g.len() {
                        let d = match &node.op {
                            Op::Gelu(_) => gelu_grad(xv[i]),
                            Op::Sigmoid(_) => y[i] * (1.0 - y[i]),
                            _ => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        g[i] += gout[i] * d;
                    }
                    lo[a.0].grad = Some(g);
                }
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                if lo[a.0].requires_grad {
                    let (outer, len, inner) = split_axis(&lo[a.0].shape, *axis);
                    let f = if matches!(node.op, Op::Mean(..)) {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let mut g = take_grad(&mut lo[a.0]);
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                g[(o * len + j) * inner + i] += gout[o * inner + i] * f;
                            }
                        }
                    }
                    lo[a.0].grad = Some(g);
                }
            }
            Op::Max(a, arg) => {
                if lo[a.0].requires_grad {
                    let mut g = take_grad(&mut lo[a.0]);
                    for (go, &src) in gout.iter().zip(arg) {
                        g[src] += go;
                    }
                    lo[a.0].grad = Some(g);
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let pad = *pad;
                let (xs, ws) = (lo[x.0].shape.clone(), lo[w.0].shape.clone());
                let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let need_x = lo[x.0].requires_grad;
                let need_w = lo[w.0].requires_grad;
                let mut gx = if need_x {
                    take_grad(&mut lo[x.0])
                } else {
                    Vec::new()
                };
                let mut gw = if need_w {
                    take_grad(&mut lo[w.0])
                } else {
                    Vec::new()
                };
                {
                    let (xv, wv) = (&lo[x.0].value, &lo[w.0].value);
                    for n in 0..bn {
                        for oc in 0..o {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let go = gout[((n * o + oc) * oh + oy) * ow + ox];
                                    for ic in 0..c {
                                        for ky in 0..kh {
                                            let iy = oy + ky;
                                            if iy < pad || iy - pad >= h {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix = ox + kx;
                                                if ix < pad || ix - pad >= wd {
                                                    continue;
                                                }
                                                let xi =
                                                    ((n * c + ic) * h + iy - pad) * wd + ix - pad;
                                                let wi = ((oc * c + ic) * kh + ky) * kw + kx;
                                                if need_x {
                                                    gx[xi] += go * wv[wi];
                                                }
                                                if need_w {
                                                    gw[wi] += go * xv[xi];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    lo[x.0].grad = Some(gx);
                }
                if need_w {
                    lo[w.0].grad = Some(gw);
                }
                if lo[b.0].requires_grad {
                    let mut g = take_grad(&mut lo[b.0]);
                    for n in 0..bn {
                        for oc in 0..o {
                            let s = (n * o + oc) * oh * ow;
                            g[oc] += gout[s..s + oh * ow].iter().sum::<f64>();
                        }
                    }
                    lo[b.0].grad = Some(g);
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = lo[p.0].shape[*axis];
                    if lo[p.0].requires_grad {
                        let mut g = take_grad(&mut lo[p.0]);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                g[dst + t] += gout[src + t];
                            }
                        }
                        lo[p.0].grad = Some(g);
                    }
                    offset += len;
                }
            }
            Op::Narrow(a, axis, start) => {
                if lo[a.0].requires_grad {
                    let (outer, total, inner) = split_axis(&lo[a.0].shape, *axis);
                    let len = node.shape[*axis];
                    let mut g = take_grad(&mut lo[a.0]);
                    for o in 0..outer {
                        let dst = (o * total + start) * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            g[dst + t] += gout[src + t];
                        }
                    }
                    lo[a.0].grad = Some(g);
                }
            }
            Op::Gather(table, ids) => {
                if lo[table.0].requires_grad {
                    let w = lo[table.0].shape[1];
                    let mut g = take_grad(&mut lo[table.0]);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..w {
                            g[id * w + j] += gout[r * w + j];
                        }
                    }
                    lo[table.0].grad = Some(g);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                if lo[logits.0].requires_grad && *count > 0 {
                    let k = lo[logits.0].shape[1];
                    let scale = gout[0] / *count as f64;
                    let mut g = take_grad(&mut lo[logits.0]);
                    for (r, &l) in labels.iter().enumerate() {
                        if l == IGNORE_INDEX {
                            continue;
                        }
                        for j in 0..k {
                            let onehot = if j as i64 == l { 1.0 } else { 0.0 };
                            g[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                    lo[logits.0].grad = Some(g);
                } else if lo[logits.0].requires_grad && lo[logits.0].grad.is_none() {
                    lo[logits.0].grad = Some(vec![0.0; lo[logits.0].value.len()]);
                }
            }
        }
    }

    /// Parameter leaves recorded on this graph.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }
}
