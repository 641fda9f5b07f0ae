//! Reverse-mode tape over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in execution order. [`Var`] is a
//! cheap copyable handle into that record; arithmetic on handles appends
//! nodes. [`Graph::backward`] replays the record in reverse and adds the
//! resulting adjoints into the `grad` slot of every leaf that requires one.
//! A graph is single-threaded (interior mutability through `RefCell`).

use std::cell::{Ref, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::sample::bilinear_taps;
use super::tensor::{numel_of, Tensor};
use crate::error::{Error, Result};

/// Clamp applied inside `inverse_sigmoid`.
pub const INV_SIGMOID_EPS: f64 = 1e-6;

/// One level of a flattened multi-scale value map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelShape {
    pub height: usize,
    pub width: usize,
    /// Row offset of this level inside the flattened `[S, C]` value tensor.
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Relu(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    InvSigmoid(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Sin(usize),
    Cos(usize),
    Sqrt(usize),
    MatMul(usize, usize),
    Sum(usize),
    SumAxis(usize, usize),
    Softmax(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Narrow {
        src: usize,
        axis: usize,
        start: usize,
    },
    Concat(Vec<usize>, usize),
    IndexSelect(usize, Vec<usize>),
    BilinearSample {
        feat: usize,
        pts: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        spec: ConvSpec,
        cols: Vec<f64>,
    },
    DeformAttn {
        value: usize,
        loc: usize,
        weight: usize,
        levels: Vec<LevelShape>,
    },
    RotateRows {
        dp: usize,
        theta: usize,
    },
    RowJacobian {
        src: usize,
        jac: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | Shift(a) | Relu(a) | Sigmoid(a) | LogSigmoid(a) | InvSigmoid(a) | Exp(a) | Ln(a)
            | Abs(a) | Sin(a) | Cos(a) | Sqrt(a) | Sum(a) | SumAxis(a, _) | Softmax(a, _)
            | Reshape(a) | Permute(a, _) | IndexSelect(a, _) => vec![*a],
            Narrow { src, .. } | RowJacobian { src, .. } => vec![*src],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat(parts, _) => parts.clone(),
            BilinearSample { feat, pts } => vec![*feat, *pts],
            Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            DeformAttn {
                value, loc, weight, ..
            } => vec![*value, *loc, *weight],
            RotateRows { dp, theta } => vec![*dp, *theta],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when this node is a grad-requiring leaf or depends on one.
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient only if `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let tracked = tensor.requires_grad();
        self.push(tensor, Op::Leaf, tracked)
    }

    /// Grad-requiring leaf.
    pub fn param(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn node_value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].tracked)
    }

    fn record(&self, value: Tensor, op: Op) -> Var<'_> {
        let tracked = self.tracked(&op.inputs());
        self.push(value, op, tracked)
    }

    /// Gradient accumulated on a leaf, if any.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let t = &nodes[var.id].value;
        t.grad()
            .map(|g| Tensor::from_parts(t.shape().to_vec(), g.to_vec()))
    }

    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.value.zero_grad();
        }
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::dim(format!("concat {s:?} with {base:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = vec![0.0; numel_of(&out_shape)];
        {
            let nodes = self.nodes.borrow();
            let mut offset = 0;
            for p in parts {
                let t = &nodes[p.id].value;
                let len = t.shape()[axis];
                for o in 0..outer {
                    let src = &t.data()[o * len * inner..(o + 1) * len * inner];
                    let dst_start = (o * total + offset) * inner;
                    data[dst_start..dst_start + len * inner].copy_from_slice(src);
                }
                offset += len;
            }
        }
        let op = Op::Concat(parts.iter().map(|p| p.id).collect(), axis);
        Ok(self.record(Tensor::from_parts(out_shape, data), op))
    }

    /// Stack equal-shaped tensors along a new leading axis.
    pub fn stack<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let expanded: Vec<Var<'g>> = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend(p.shape());
                p.reshape(&s)
            })
            .collect::<Result<_>>()?;
        self.concat(&expanded, 0)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Adjoints are added into the `grad` slot of every grad-requiring leaf,
    /// so repeated calls accumulate until [`Graph::zero_grads`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        adj[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !nodes[id].tracked {
                continue;
            }
            if let Op::Leaf = nodes[id].op {
                nodes[id].value.accumulate_grad(&g);
                continue;
            }
            let grads = adjoints(&nodes, id, &g);
            for (input, grad) in grads {
                if !nodes[input].tracked {
                    continue;
                }
                match &mut adj[input] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Shape helpers

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let da = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let db = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast to it. `None` when the shapes are identical.
fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if in_shape == out_shape {
        return None;
    }
    let n = numel_of(out_shape);
    let in_n = numel_of(in_shape);
    if in_n == 1 {
        return Some(vec![0; n]);
    }
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..in_shape.len()).rev() {
        strides[d + pad] = if in_shape[d] == 1 { 0 } else { s };
        s *= in_shape[d];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

fn reduce_to(grad: &[f64], map: &Option<Vec<usize>>, in_len: usize) -> Vec<f64> {
    match map {
        None => grad.to_vec(),
        Some(m) => {
            let mut out = vec![0.0; in_len];
            for (g, &i) in grad.iter().zip(m) {
                out[i] += g;
            }
            out
        }
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// `out[b] = a[b] (n x k) * b[b or shared] (k x m)`, optionally transposing either side.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    n: usize,
    k: usize,
    m: usize,
    trans_a: bool,
    trans_b: bool,
) {
    if trans_b && !trans_a {
        for i in 0..n {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..m {
                out[i * m + j] += dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = if trans_a { a[p * n + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            if trans_b {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[j * k + p];
                }
            } else {
                let brow = &b[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ---------------------------------------------------------------------------
// Adjoint rules

fn adjoints(nodes: &[Node], id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    let want = |i: usize| nodes[i].tracked;
    let unary = |a: usize, f: &dyn Fn(usize) -> f64| -> Vec<(usize, Vec<f64>)> {
        vec![(a, g.iter().enumerate().map(|(i, gi)| gi * f(i)).collect())]
    };
    match &nodes[id].op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let mut res = Vec::new();
            if want(*a) {
                let map = broadcast_map(val(*a).shape(), out.shape());
                res.push((*a, reduce_to(g, &map, val(*a).numel())));
            }
            if want(*b) {
                let map = broadcast_map(val(*b).shape(), out.shape());
                let mut gb = reduce_to(g, &map, val(*b).numel());
                if sign < 0.0 {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                res.push((*b, gb));
            }
            res
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(nodes[id].op, Op::Div(..));
            let (ta, tb) = (val(*a), val(*b));
            let ma = broadcast_map(ta.shape(), out.shape());
            let mb = broadcast_map(tb.shape(), out.shape());
            let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
            let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
            let mut res = Vec::new();
            if want(*a) {
                let ga: Vec<f64> = (0..g.len())
                    .map(|i| {
                        let bv = tb.data()[ib(i)];
                        if is_div {
                            g[i] / bv
                        } else {
                            g[i] * bv
                        }
                    })
                    .collect();
                res.push((*a, reduce_to(&ga, &ma, ta.numel())));
            }
            if want(*b) {
                let gb: Vec<f64> = (0..g.len())
                    .map(|i| {
                        let av = ta.data()[ia(i)];
                        if is_div {
                            let bv = tb.data()[ib(i)];
                            -g[i] * av / (bv * bv)
                        } else {
                            g[i] * av
                        }
                    })
                    .collect();
                res.push((*b, reduce_to(&gb, &mb, tb.numel())));
            }
            res
        }
        Op::Scale(a, c) => unary(*a, &|_| *c),
        Op::Shift(a) => unary(*a, &|_| 1.0),
        Op::Relu(a) => {
            let x = val(*a).data();
            unary(*a, &|i| if x[i] > 0.0 { 1.0 } else { 0.0 })
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            unary(*a, &|i| y[i] * (1.0 - y[i]))
        }
        Op::LogSigmoid(a) => {
            let x = val(*a).data();
            unary(*a, &|i| sigmoid(-x[i]))
        }
        Op::InvSigmoid(a) => {
            let p = val(*a).data();
            unary(*a, &|i| {
                let v = p[i];
                if v < INV_SIGMOID_EPS || v > 1.0 - INV_SIGMOID_EPS {
                    0.0
                } else {
                    1.0 / (v * (1.0 - v))
                }
            })
        }
        Op::Exp(a) => {
            let y = out.data();
            unary(*a, &|i| y[i])
        }
        Op::Ln(a) => {
            let x = val(*a).data();
            unary(*a, &|i| 1.0 / x[i])
        }
        Op::Abs(a) => {
            let x = val(*a).data();
            unary(*a, &|i| {
                if x[i] > 0.0 {
                    1.0
                } else if x[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
        }
        Op::Sin(a) => {
            let x = val(*a).data();
            unary(*a, &|i| x[i].cos())
        }
        Op::Cos(a) => {
            let x = val(*a).data();
            unary(*a, &|i| -x[i].sin())
        }
        Op::Sqrt(a) => {
            let y = out.data();
            unary(*a, &|i| 0.5 / y[i])
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let sa = ta.shape();
            let sb = tb.shape();
            let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let m = sb[sb.len() - 1];
            let batch = ta.numel() / (n * k);
            let shared_b = sb.len() == 2;
            let mut res = Vec::new();
            if want(*a) {
                let mut ga = vec![0.0; ta.numel()];
                for bi in 0..batch {
                    let boff = if shared_b { 0 } else { bi * k * m };
                    gemm(
                        &g[bi * n * m..(bi + 1) * n * m],
                        &tb.data()[boff..boff + k * m],
                        &mut ga[bi * n * k..(bi + 1) * n * k],
                        n,
                        m,
                        k,
                        false,
                        true,
                    );
                }
                res.push((*a, ga));
            }
            if want(*b) {
                let mut gb = vec![0.0; tb.numel()];
                if shared_b {
                    // Fold the batch into rows: A is (batch*n x k).
                    gemm(ta.data(), g, &mut gb, k, batch * n, m, true, false);
                } else {
                    for bi in 0..batch {
                        gemm(
                            &ta.data()[bi * n * k..(bi + 1) * n * k],
                            &g[bi * n * m..(bi + 1) * n * m],
                            &mut gb[bi * k * m..(bi + 1) * k * m],
                            k,
                            n,
                            m,
                            true,
                            false,
                        );
                    }
                }
                res.push((*b, gb));
            }
            res
        }
        Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
        Op::SumAxis(a, axis) => {
            let (outer, len, inner) = axis_split(val(*a).shape(), *axis);
            let mut ga = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        ga[(o * len + l) * inner + i] = g[o * inner + i];
                    }
                }
            }
            vec![(*a, ga)]
        }
        Op::Softmax(a, axis) => {
            let y = out.data();
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let mut ga = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        ga[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            vec![(*a, ga)]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = *val(*gamma).shape().last().unwrap();
            let rows = xhat.len() / d;
            let gam = val(*gamma).data();
            let mut gx = vec![0.0; xhat.len()];
            let mut gg = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for r in 0..rows {
                let row = r * d..(r + 1) * d;
                let (gr, xr) = (&g[row.clone()], &xhat[row.clone()]);
                let mut mean_gx = 0.0;
                let mut mean_gxx = 0.0;
                for j in 0..d {
                    let gxh = gr[j] * gam[j];
                    mean_gx += gxh;
                    mean_gxx += gxh * xr[j];
                    gg[j] += gr[j] * xr[j];
                    gbeta[j] += gr[j];
                }
                mean_gx /= d as f64;
                mean_gxx /= d as f64;
                for j in 0..d {
                    gx[r * d + j] = rstd[r] * (gr[j] * gam[j] - mean_gx - xr[j] * mean_gxx);
                }
            }
            vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
        }
        Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (_, data) = permute_data(g, out.shape(), &inv);
            vec![(*a, data)]
        }
        Op::Narrow { src, axis, start } => {
            let src_shape = val(*src).shape();
            let (outer, len, inner) = axis_split(src_shape, *axis);
            let take = out.shape()[*axis];
            let mut ga = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let dst = (o * len + start) * inner;
                ga[dst..dst + take * inner]
                    .copy_from_slice(&g[o * take * inner..(o + 1) * take * inner]);
            }
            vec![(*src, ga)]
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            let mut res = Vec::new();
            for &p in parts {
                let len = val(p).shape()[*axis];
                if want(p) {
                    let mut gp = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        gp[o * len * inner..(o + 1) * len * inner]
                            .copy_from_slice(&g[src..src + len * inner]);
                    }
                    res.push((p, gp));
                }
                offset += len;
            }
            res
        }
        Op::IndexSelect(a, rows) => {
            let ta = val(*a);
            let row_len = ta.numel() / ta.shape()[0];
            let mut ga = vec![0.0; ta.numel()];
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..row_len {
                    ga[r * row_len + j] += g[k * row_len + j];
                }
            }
            vec![(*a, ga)]
        }
        Op::BilinearSample { feat, pts } => {
            let tf = val(*feat);
            let tp = val(*pts);
            let (c, h, w) = (tf.shape()[0], tf.shape()[1], tf.shape()[2]);
            let n = tp.shape()[0];
            let mut gf = vec![0.0; tf.numel()];
            let mut gp = vec![0.0; tp.numel()];
            for q in 0..n {
                let taps = bilinear_taps(tp.data()[2 * q], tp.data()[2 * q + 1], h, w);
                for (idx, wt, dwx, dwy) in taps.iter() {
                    for ch in 0..c {
                        let go = g[q * c + ch];
                        let fv = tf.data()[ch * h * w + idx];
                        gf[ch * h * w + idx] += wt * go;
                        gp[2 * q] += dwx * fv * go;
                        gp[2 * q + 1] += dwy * fv * go;
                    }
                }
            }
            vec![(*feat, gf), (*pts, gp)]
        }
        Op::Conv2d { x, w, b, spec, cols } => {
            let tx = val(*x);
            let tw = val(*w);
            let (cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            let (cout, k) = (tw.shape()[0], tw.shape()[2]);
            let (ho, wo) = (out.shape()[1], out.shape()[2]);
            let patch = cin * k * k;
            let npix = ho * wo;
            let mut res = Vec::new();
            if want(*w) {
                let mut gw = vec![0.0; tw.numel()];
                gemm(g, cols, &mut gw, cout, npix, patch, false, true);
                res.push((*w, gw));
            }
            if want(*b) {
                let gb: Vec<f64> = (0..cout).map(|o| g[o * npix..(o + 1) * npix].iter().sum()).collect();
                res.push((*b, gb));
            }
            if want(*x) {
                let mut gcols = vec![0.0; patch * npix];
                gemm(tw.data(), g, &mut gcols, patch, cout, npix, true, false);
                let mut gx = vec![0.0; tx.numel()];
                col2im(&gcols, &mut gx, cin, h, wd, k, *spec, ho, wo);
                res.push((*x, gx));
            }
            res
        }
        Op::DeformAttn {
            value,
            loc,
            weight,
            levels,
        } => deform_attn_backward(val(*value), val(*loc), val(*weight), levels, g)
            .into_iter()
            .zip([*value, *loc, *weight])
            .map(|(grad, id)| (id, grad))
            .collect(),
        Op::RotateRows { dp, theta } => {
            let tdp = val(*dp);
            let tth = val(*theta);
            let groups = tth.numel();
            let per = tdp.numel() / (2 * groups);
            let mut gdp = vec![0.0; tdp.numel()];
            let mut gth = vec![0.0; groups];
            let y = out.data();
            for q in 0..groups {
                let (s, c) = tth.data()[q].sin_cos();
                for p in 0..per {
                    let i = 2 * (q * per + p);
                    let (gx, gy) = (g[i], g[i + 1]);
                    gdp[i] = gx * c - gy * s;
                    gdp[i + 1] = gx * s + gy * c;
                    gth[q] += gx * y[i + 1] - gy * y[i];
                }
            }
            vec![(*dp, gdp), (*theta, gth)]
        }
        Op::RowJacobian { src, jac } => {
            let width = jac.len() / g.len().max(1);
            let grad = (0..jac.len()).map(|i| g[i / width] * jac[i]).collect();
            vec![(*src, grad)]
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, spec: ConvSpec, ho: usize, wo: usize) -> Vec<f64> {
    let npix = ho * wo;
    let mut cols = vec![0.0; cin * k * k * npix];
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * spec.stride + ki) as isize - spec.padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * spec.stride + kj) as isize - spec.padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[row * npix + oi * wo + oj] = x[(c * h + ii as usize) * w + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], gx: &mut [f64], cin: usize, h: usize, w: usize, k: usize, spec: ConvSpec, ho: usize, wo: usize) {
    let npix = ho * wo;
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * spec.stride + ki) as isize - spec.padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * spec.stride + kj) as isize - spec.padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        gx[(c * h + ii as usize) * w + jj as usize] += cols[row * npix + oi * wo + oj];
                    }
                }
            }
        }
    }
}

struct DeformDims {
    queries: usize,
    heads: usize,
    levels: usize,
    points: usize,
    channels: usize,
    head_dim: usize,
}

fn deform_dims(value: &Tensor, loc: &Tensor, weight: &Tensor, levels: &[LevelShape]) -> Result<DeformDims> {
    let ls = loc.shape();
    let ws = weight.shape();
    if value.rank() != 2 || ls.len() != 5 || ls[4] != 2 || ws != &ls[..4] {
        return Err(Error::dim(format!(
            "deform attention wants value [S,C], loc [Q,H,L,K,2], weight [Q,H,L,K]; got {:?} {:?} {:?}",
            value.shape(),
            ls,
            ws
        )));
    }
    let (queries, heads, nlev, points) = (ls[0], ls[1], ls[2], ls[3]);
    let channels = value.shape()[1];
    if nlev != levels.len() || channels % heads != 0 {
        return Err(Error::dim("deform attention level/head mismatch"));
    }
    let rows: usize = levels.iter().map(|l| l.height * l.width).sum();
    if levels.iter().any(|l| l.start + l.height * l.width > value.shape()[0]) || rows != value.shape()[0] {
        return Err(Error::dim("deform attention level table does not cover value rows"));
    }
    Ok(DeformDims {
        queries,
        heads,
        levels: nlev,
        points,
        channels,
        head_dim: channels / heads,
    })
}

fn deform_attn_forward(value: &Tensor, loc: &Tensor, weight: &Tensor, levels: &[LevelShape], d: &DeformDims) -> Vec<f64> {
    let mut out = vec![0.0; d.queries * d.channels];
    let v = value.data();
    for q in 0..d.queries {
        for h in 0..d.heads {
            let col = h * d.head_dim;
            let dst = &mut out[q * d.channels + col..q * d.channels + col + d.head_dim];
            for (l, lev) in levels.iter().enumerate() {
                for k in 0..d.points {
                    let s = ((q * d.heads + h) * d.levels + l) * d.points + k;
                    let wq = weight.data()[s];
                    let taps = bilinear_taps(loc.data()[2 * s], loc.data()[2 * s + 1], lev.height, lev.width);
                    for (idx, tw, _, _) in taps.iter() {
                        let row = (lev.start + idx) * d.channels + col;
                        let f = wq * tw;
                        for (o, &x) in dst.iter_mut().zip(&v[row..row + d.head_dim]) {
                            *o += f * x;
                        }
                    }
                }
            }
        }
    }
    out
}

fn deform_attn_backward(value: &Tensor, loc: &Tensor, weight: &Tensor, levels: &[LevelShape], g: &[f64]) -> Vec<Vec<f64>> {
    let d = deform_dims(value, loc, weight, levels).expect("validated at forward");
    let v = value.data();
    let mut gv = vec![0.0; value.numel()];
    let mut gl = vec![0.0; loc.numel()];
    let mut gw = vec![0.0; weight.numel()];
    for q in 0..d.queries {
        for h in 0..d.heads {
            let col = h * d.head_dim;
            let go = &g[q * d.channels + col..q * d.channels + col + d.head_dim];
            for (l, lev) in levels.iter().enumerate() {
                for k in 0..d.points {
                    let s = ((q * d.heads + h) * d.levels + l) * d.points + k;
                    let wq = weight.data()[s];
                    let taps = bilinear_taps(loc.data()[2 * s], loc.data()[2 * s + 1], lev.height, lev.width);
                    for (idx, tw, dwx, dwy) in taps.iter() {
                        let row = (lev.start + idx) * d.channels + col;
                        let dot: f64 = go.iter().zip(&v[row..row + d.head_dim]).map(|(a, b)| a * b).sum();
                        gw[s] += tw * dot;
                        gl[2 * s] += wq * dwx * dot;
                        gl[2 * s + 1] += wq * dwy * dot;
                        let f = wq * tw;
                        for (gvv, &gg) in gv[row..row + d.head_dim].iter_mut().zip(go) {
                            *gvv += f * gg;
                        }
                    }
                }
            }
        }
    }
    vec![gv, gl, gw]
}

// ---------------------------------------------------------------------------
// Forward constructors

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.node_value(self.id).shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.node_value(self.id).numel()
    }

    pub fn value(&self) -> Tensor {
        let t = self.graph.node_value(self.id);
        Tensor::from_parts(t.shape().to_vec(), t.data().to_vec())
    }

    pub fn data(&self) -> Vec<f64> {
        self.graph.node_value(self.id).data().to_vec()
    }

    /// Borrow the value without copying. Do not create nodes inside `f`.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.node_value(self.id))
    }

    pub fn item(&self) -> f64 {
        self.graph.node_value(self.id).item()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value())
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    fn binary(&self, other: &Var<'g>, op: fn(usize, usize) -> Op, f: fn(f64, f64) -> f64) -> Result<Var<'g>> {
        self.same_graph(other);
        let value = {
            let a = self.graph.node_value(self.id);
            let b = self.graph.node_value(other.id);
            let shape = broadcast_shape(a.shape(), b.shape())?;
            let ma = broadcast_map(a.shape(), &shape);
            let mb = broadcast_map(b.shape(), &shape);
            let n = numel_of(&shape);
            let data = (0..n)
                .map(|i| {
                    let x = a.data()[ma.as_ref().map_or(i, |m| m[i])];
                    let y = b.data()[mb.as_ref().map_or(i, |m| m[i])];
                    f(x, y)
                })
                .collect();
            Tensor::from_parts(shape, data)
        };
        Ok(self.graph.record(value, op(self.id, other.id)))
    }

    pub fn try_add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn try_sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn try_mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn try_div(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    fn unary(&self, op: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let value = self.graph.node_value(self.id).map(f);
        self.graph.record(value, op(self.id))
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        let value = self.graph.node_value(self.id).map(|v| v * c);
        self.graph.record(value, Op::Scale(self.id, c))
    }

    pub fn shift(&self, c: f64) -> Var<'g> {
        self.unary(Op::Shift, |v| v + c)
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(Op::Relu, |v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    /// `ln(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&self) -> Var<'g> {
        self.unary(Op::LogSigmoid, log_sigmoid)
    }

    /// `ln(p / (1 - p))` with `p` clamped to `[eps, 1 - eps]`.
    pub fn inverse_sigmoid(&self) -> Var<'g> {
        self.unary(Op::InvSigmoid, inverse_sigmoid)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Var<'g> {
        self.unary(Op::Ln, f64::ln)
    }

    pub fn abs(&self) -> Var<'g> {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn sin(&self) -> Var<'g> {
        self.unary(Op::Sin, f64::sin)
    }

    pub fn cos(&self) -> Var<'g> {
        self.unary(Op::Cos, f64::cos)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn square(&self) -> Var<'g> {
        *self * *self
    }

    /// Batched matrix product `[.., n, k] x [k, m]` or `[.., n, k] x [.., k, m]`.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        let value = {
            let a = self.graph.node_value(self.id);
            let b = self.graph.node_value(other.id);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() < 2 || sb.len() < 2 {
                return Err(Error::dim(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}")));
            }
            let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (kb, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            let shared = sb.len() == 2;
            if k != kb || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
                return Err(Error::dim(format!("matmul {sa:?} x {sb:?}")));
            }
            let batch = a.numel() / (n * k);
            let mut out = vec![0.0; batch * n * m];
            if shared {
                gemm(a.data(), b.data(), &mut out, batch * n, k, m, false, false);
            } else {
                for bi in 0..batch {
                    gemm(
                        &a.data()[bi * n * k..(bi + 1) * n * k],
                        &b.data()[bi * k * m..(bi + 1) * k * m],
                        &mut out[bi * n * m..(bi + 1) * n * m],
                        n,
                        k,
                        m,
                        false,
                        false,
                    );
                }
            }
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(m);
            Tensor::from_parts(shape, out)
        };
        Ok(self.graph.record(value, Op::MatMul(self.id, other.id)))
    }

    pub fn sum(&self) -> Var<'g> {
        let s: f64 = self.graph.node_value(self.id).data().iter().sum();
        self.graph.record(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        let value = {
            let a = self.graph.node_value(self.id);
            if axis >= a.rank() {
                return Err(Error::dim(format!("sum axis {axis} for {:?}", a.shape())));
            }
            let (outer, len, inner) = axis_split(a.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += a.data()[(o * len + l) * inner + i];
                    }
                }
            }
            let mut shape = a.shape().to_vec();
            shape.remove(axis);
            Tensor::from_parts(shape, out)
        };
        Ok(self.graph.record(value, Op::SumAxis(self.id, axis)))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let value = {
            let a = self.graph.node_value(self.id);
            if axis >= a.rank() {
                return Err(Error::dim(format!("softmax axis {axis} for {:?}", a.shape())));
            }
            let (outer, len, inner) = axis_split(a.shape(), axis);
            let x = a.data();
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for l in 0..len {
                        let e = (x[at(l)] - max).exp();
                        y[at(l)] = e;
                        total += e;
                    }
                    for l in 0..len {
                        y[at(l)] /= total;
                    }
                }
            }
            Tensor::from_parts(a.shape().to_vec(), y)
        };
        Ok(self.graph.record(value, Op::Softmax(self.id, axis)))
    }

    /// Normalize over the trailing dimension, then apply `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (value, xhat, rstd) = {
            let x = self.graph.node_value(self.id);
            let gm = self.graph.node_value(gamma.id);
            let bt = self.graph.node_value(beta.id);
            let d = *x.shape().last().ok_or_else(|| Error::dim("layer_norm on scalar"))?;
            if gm.shape() != [d] || bt.shape() != [d] {
                return Err(Error::dim(format!(
                    "layer_norm gamma {:?} beta {:?} for trailing dim {d}",
                    gm.shape(),
                    bt.shape()
                )));
            }
            let rows = x.numel() / d;
            let mut xhat = vec![0.0; x.numel()];
            let mut rstd = vec![0.0; rows];
            let mut y = vec![0.0; x.numel()];
            for r in 0..rows {
                let row = &x.data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let xh = (row[j] - mean) * rs;
                    xhat[r * d + j] = xh;
                    y[r * d + j] = xh * gm.data()[j] + bt.data()[j];
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), y), xhat, rstd)
        };
        Ok(self.graph.record(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.graph.node_value(self.id).reshape(shape)?;
        Ok(self.graph.record(value, Op::Reshape(self.id)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g>> {
        let value = {
            let a = self.graph.node_value(self.id);
            let mut seen = perm.to_vec();
            seen.sort_unstable();
            if seen != (0..a.rank()).collect::<Vec<_>>() {
                return Err(Error::dim(format!("bad permutation {perm:?} for {:?}", a.shape())));
            }
            let (shape, data) = permute_data(a.data(), a.shape(), perm);
            Tensor::from_parts(shape, data)
        };
        Ok(self.graph.record(value, Op::Permute(self.id, perm.to_vec())))
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Var<'g>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let value = {
            let a = self.graph.node_value(self.id);
            if axis >= a.rank() || start + len > a.shape()[axis] || len == 0 {
                return Err(Error::dim(format!(
                    "narrow axis {axis} [{start}, {}) of {:?}",
                    start + len,
                    a.shape()
                )));
            }
            let (outer, full, inner) = axis_split(a.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * full + start) * inner;
                data.extend_from_slice(&a.data()[s..s + len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = len;
            Tensor::from_parts(shape, data)
        };
        Ok(self.graph.record(
            value,
            Op::Narrow {
                src: self.id,
                axis,
                start,
            },
        ))
    }

    /// Gather rows along the leading axis.
    pub fn index_select(&self, rows: &[usize]) -> Result<Var<'g>> {
        let value = {
            let a = self.graph.node_value(self.id);
            if a.rank() == 0 || rows.is_empty() {
                return Err(Error::dim("index_select needs rank >= 1 and at least one row"));
            }
            let n = a.shape()[0];
            let row_len = a.numel() / n;
            let mut data = Vec::with_capacity(rows.len() * row_len);
            for &r in rows {
                if r >= n {
                    return Err(Error::dim(format!("row {r} out of {n}")));
                }
                data.extend_from_slice(&a.data()[r * row_len..(r + 1) * row_len]);
            }
            let mut shape = a.shape().to_vec();
            shape[0] = rows.len();
            Tensor::from_parts(shape, data)
        };
        Ok(self.graph.record(value, Op::IndexSelect(self.id, rows.to_vec())))
    }

    /// Row `i` of the leading axis, dropping that axis.
    pub fn row(&self, i: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        self.index_select(&[i])?.reshape(&shape[1..])
    }

    /// Entry `j` of a 1-D tensor as a scalar.
    pub fn at(&self, j: usize) -> Result<Var<'g>> {
        self.narrow(0, j, 1)?.reshape(&[])
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(INV_SIGMOID_EPS, 1.0 - INV_SIGMOID_EPS);
    (p / (1.0 - p)).ln()
}

impl Graph {
    /// Sample `feat: [C, H, W]` at `pts: [N, 2]` normalized `(x, y)` locations.
    /// Returns `[N, C]`.
    pub fn bilinear_sample<'g>(&'g self, feat: Var<'g>, pts: Var<'g>) -> Result<Var<'g>> {
        let value = {
            let f = self.node_value(feat.id);
            let p = self.node_value(pts.id);
            if f.rank() != 3 || p.rank() != 2 || p.shape()[1] != 2 {
                return Err(Error::dim(format!(
                    "bilinear_sample wants [C,H,W] and [N,2], got {:?} and {:?}",
                    f.shape(),
                    p.shape()
                )));
            }
            if p.data().iter().any(|v| v.is_nan()) {
                return Err(Error::input("NaN sampling coordinate"));
            }
            let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
            let n = p.shape()[0];
            let mut out = vec![0.0; n * c];
            for q in 0..n {
                let taps = bilinear_taps(p.data()[2 * q], p.data()[2 * q + 1], h, w);
                for (idx, wt, _, _) in taps.iter() {
                    for ch in 0..c {
                        out[q * c + ch] += wt * f.data()[ch * h * w + idx];
                    }
                }
            }
            Tensor::from_parts(vec![n, c], out)
        };
        Ok(self.record(value, Op::BilinearSample { feat: feat.id, pts: pts.id }))
    }

    /// 2-D convolution of a single image `x: [Cin, H, W]` with `w: [Cout, Cin, k, k]`.
    pub fn conv2d<'g>(&'g self, x: Var<'g>, w: Var<'g>, b: Var<'g>, spec: ConvSpec) -> Result<Var<'g>> {
        let (value, cols) = {
            let tx = self.node_value(x.id);
            let tw = self.node_value(w.id);
            let tb = self.node_value(b.id);
            let (sx, sw) = (tx.shape(), tw.shape());
            if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || tb.shape() != [sw[0]] {
                return Err(Error::dim(format!("conv2d x {sx:?} w {sw:?} b {:?}", tb.shape())));
            }
            let (cin, h, wd) = (sx[0], sx[1], sx[2]);
            let (cout, k) = (sw[0], sw[2]);
            if h + 2 * spec.padding < k || wd + 2 * spec.padding < k || spec.stride == 0 {
                return Err(Error::dim("conv2d kernel larger than padded input"));
            }
            let ho = (h + 2 * spec.padding - k) / spec.stride + 1;
            let wo = (wd + 2 * spec.padding - k) / spec.stride + 1;
            let cols = im2col(tx.data(), cin, h, wd, k, spec, ho, wo);
            let npix = ho * wo;
            let mut out = vec![0.0; cout * npix];
            for (o, chunk) in out.chunks_mut(npix).enumerate() {
                chunk.fill(tb.data()[o]);
            }
            gemm(tw.data(), &cols, &mut out, cout, cin * k * k, npix, false, false);
            (Tensor::from_parts(vec![cout, ho, wo], out), cols)
        };
        Ok(self.record(
            value,
            Op::Conv2d {
                x: x.id,
                w: w.id,
                b: b.id,
                spec,
                cols,
            },
        ))
    }

    /// Fused multi-scale deformable sampling.
    ///
    /// `value: [S, C]` holds all levels flattened row-major (see
    /// [`LevelShape`]), with `C` split evenly across heads. `loc: [Q, H, L, K, 2]`
    /// are normalized sampling locations and `weight: [Q, H, L, K]` the
    /// attention weights. Returns `[Q, C]`: per head, the weighted sum of
    /// bilinear reads of that head's channel slice.
    pub fn deform_attn<'g>(&'g self, value: Var<'g>, loc: Var<'g>, weight: Var<'g>, levels: &[LevelShape]) -> Result<Var<'g>> {
        let out = {
            let tv = self.node_value(value.id);
            let tl = self.node_value(loc.id);
            let tw = self.node_value(weight.id);
            let dims = deform_dims(&tv, &tl, &tw, levels)?;
            if tl.data().iter().any(|v| v.is_nan()) {
                return Err(Error::input("NaN sampling location"));
            }
            let data = deform_attn_forward(&tv, &tl, &tw, levels, &dims);
            Tensor::from_parts(vec![dims.queries, dims.channels], data)
        };
        Ok(self.record(
            out,
            Op::DeformAttn {
                value: value.id,
                loc: loc.id,
                weight: weight.id,
                levels: levels.to_vec(),
            },
        ))
    }

    /// Multiply every 2-vector row of group `q` by `R^T(theta[q])`, where
    /// `R(t) = ((cos t, -sin t), (sin t, cos t))^T`:
    /// `(x, y) -> (x cos t + y sin t, -x sin t + y cos t)`.
    ///
    /// `dp` has shape `[Q, .., 2]` and `theta` has `Q` elements (a scalar
    /// `theta` rotates every row).
    pub fn rotate_rows<'g>(&'g self, dp: Var<'g>, theta: Var<'g>) -> Result<Var<'g>> {
        let value = {
            let tdp = self.node_value(dp.id);
            let tth = self.node_value(theta.id);
            let groups = tth.numel();
            if tdp.shape().last() != Some(&2) || tdp.numel() % (2 * groups) != 0 || (groups > 1 && tdp.shape()[0] != groups) {
                return Err(Error::dim(format!(
                    "rotate_rows dp {:?} with {groups} angles",
                    tdp.shape()
                )));
            }
            let per = tdp.numel() / (2 * groups);
            let mut out = vec![0.0; tdp.numel()];
            for q in 0..groups {
                let (s, c) = tth.data()[q].sin_cos();
                for p in 0..per {
                    let i = 2 * (q * per + p);
                    let (x, y) = (tdp.data()[i], tdp.data()[i + 1]);
                    out[i] = x * c + y * s;
                    out[i + 1] = -x * s + y * c;
                }
            }
            Tensor::from_parts(tdp.shape().to_vec(), out)
        };
        Ok(self.record(value, Op::RotateRows { dp: dp.id, theta: theta.id }))
    }

    /// Apply `f(row_index, row)` to each row of `x: [P, N]`, giving `[P]`.
    /// `f` returns the row value together with its gradient with respect to
    /// the row, which is stored for the backward pass.
    pub fn row_map<'g>(&'g self, x: Var<'g>, f: impl Fn(usize, &[f64]) -> Result<(f64, Vec<f64>)>) -> Result<Var<'g>> {
        let (value, jac) = {
            let tx = self.node_value(x.id);
            if tx.rank() != 2 {
                return Err(Error::dim(format!("row_map needs [P, N], got {:?}", tx.shape())));
            }
            let width = tx.shape()[1];
            let mut vals = Vec::with_capacity(tx.shape()[0]);
            let mut jac = Vec::with_capacity(tx.numel());
            for (i, row) in tx.data().chunks(width.max(1)).take(tx.shape()[0]).enumerate() {
                let (v, d) = f(i, row)?;
                if d.len() != width {
                    return Err(Error::Contract(format!("row_map gradient has {} entries for width {width}", d.len())));
                }
                vals.push(v);
                jac.extend(d);
            }
            let p = vals.len();
            (Tensor::from_parts(vec![p], vals), jac)
        };
        Ok(self.record(value, Op::RowJacobian { src: x.id, jac }))
    }
}

// ---------------------------------------------------------------------------
// Operator sugar. Shapes must broadcast; mismatches panic, use `try_*` to
// handle them.

macro_rules! binop {
    ($trait:ident, $method:ident, $try:ident) => {
        impl<'g> $trait for Var<'g> {
            type Output = Var<'g>;
            fn $method(self, rhs: Var<'g>) -> Var<'g> {
                self.$try(&rhs).expect(concat!(stringify!($method), " shape mismatch"))
            }
        }
        impl<'g> $trait<&Var<'g>> for Var<'g> {
            type Output = Var<'g>;
            fn $method(self, rhs: &Var<'g>) -> Var<'g> {
                self.$try(rhs).expect(concat!(stringify!($method), " shape mismatch"))
            }
        }
    };
}

binop!(Add, add, try_add);
binop!(Sub, sub, try_sub);
binop!(Mul, mul, try_mul);
binop!(Div, div, try_div);

impl<'g> Add<f64> for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: f64) -> Var<'g> {
        self.shift(rhs)
    }
}

impl<'g> Sub<f64> for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: f64) -> Var<'g> {
        self.shift(-rhs)
    }
}

impl<'g> Mul<f64> for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: f64) -> Var<'g> {
        self.scale(rhs)
    }
}

impl<'g> Div<f64> for Var<'g> {
    type Output = Var<'g>;
    fn div(self, rhs: f64) -> Var<'g> {
        self.scale(1.0 / rhs)
    }
}

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]).unwrap(), vec![2, 4, 3]);
        assert_eq!(broadcast_shape(&[], &[4]).unwrap(), vec![4]);
        assert!(broadcast_shape(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0, 3.0]));
        g.backward(x.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0]));
        g.backward((x * x).sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0]));
        let loss = (x * x).sum();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0, 8.0]);
        g.zero_grads();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let g = Graph::new();
        let x = g.param(t(&[2, 3], &[0.0; 6]));
        let b = g.param(Tensor::vector(&[1.0, 2.0, 3.0]));
        let y = x + b;
        assert_eq!(y.data(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        g.backward(y.sum()).unwrap();
        assert_eq!(b.grad().unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_batched_shared() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]));
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.shape(), vec![2, 1, 2]);
        assert_eq!(y.data(), vec![1.0, 4.0, 3.0, 8.0]);
    }

    #[test]
    fn permute_and_back() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = a.transpose().unwrap();
        assert_eq!(p.shape(), vec![3, 2]);
        assert_eq!(p.data(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn concat_and_narrow() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(c.data(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.narrow(1, 1, 2).unwrap().data(), b.data());
    }

    #[test]
    fn rotate_rows_quarter_turn() {
        let g = Graph::new();
        let dp = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let th = g.scalar(std::f64::consts::FRAC_PI_2);
        let r = g.rotate_rows(dp, th).unwrap().data();
        assert!(r[0].abs() < 1e-15 && (r[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn conv_identity_kernel() {
        let g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = g.constant(Tensor::vector(&[0.5]));
        let y = g.conv2d(x, w, b, ConvSpec { stride: 1, padding: 0 }).unwrap();
        assert_eq!(y.data(), vec![2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0]));
        let w = g.param(Tensor::vector(&[3.0]));
        g.backward((x * w).sum()).unwrap();
        assert!(x.grad().is_none());
        assert_eq!(w.grad().unwrap().data(), &[1.0]);
    }
}
