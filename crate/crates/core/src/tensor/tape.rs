//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive executed through a [`Var`] handle.
//! [`Tape::backward`] replays the record in reverse and returns a
//! [`Gradients`] table. The tape is single-use: a second backward pass is an
//! error, and a fresh tape is built for every forward pass.

use std::cell::RefCell;
use std::rc::Rc;

use super::param::{ParamId, ParamStore};
use super::value::{
    broadcast_shape, broadcast_strides, for_each_broadcast, numel, reduce_to_shape, strides, Tensor,
};
use crate::error::{Error, Result};
use crate::ssm::recurrence::{self, ScanMode};

pub(crate) type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    Exprel(NodeId),
    Powf(NodeId, f64),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId, usize),
    LayerNorm(NodeId, f64),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Gather(NodeId, Rc<[usize]>),
    ScatterAdd(NodeId, Rc<[usize]>),
    Concat(Vec<NodeId>, usize),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    Clip(NodeId, f64, f64),
    StraightThrough(NodeId),
    Recurrence {
        coef: NodeId,
        input: NodeId,
        init: Option<NodeId>,
        mode: ScanMode,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Record of executed primitives for one forward pass.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'_>> {
        let value = value.ensure_finite(name)?;
        let mut inner = self.inner.borrow_mut();
        let requires_grad = match &op {
            Op::Leaf => false,
            other => op_inputs(other)
                .into_iter()
                .any(|i| inner.nodes[i].requires_grad),
        };
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Ok(Var {
            tape: self,
            id: inner.nodes.len() - 1,
        })
    }

    fn push_leaf(
        &self,
        value: Tensor,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Result<Var<'_>> {
        let value = value.ensure_finite("leaf")?;
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Ok(Var {
            tape: self,
            id: inner.nodes.len() - 1,
        })
    }

    /// A leaf that receives a gradient.
    pub fn var(&self, value: Tensor) -> Result<Var<'_>> {
        self.push_leaf(value, true, None)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.push_leaf(value, false, None)
    }

    /// Binds a stored parameter as a leaf. Frozen parameters are bound as
    /// constants.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Result<Var<'_>> {
        let p = store.get(id);
        self.push_leaf(p.value().clone(), !p.is_frozen(), Some(id))
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = inner.nodes[loss.id].value.shape().to_vec();
        if inner.nodes[loss.id].value.len() != 1 {
            return Err(Error::NotScalar(loss_shape));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::from_parts(loss_shape, vec![1.0]));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contribution) in backward_rule(nodes, id, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                accumulate(&mut grads[input], contribution);
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

/// Gradients of one backward pass, keyed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(NodeId, ParamId)>,
}

impl Gradients {
    /// Gradient for a leaf; `None` when the leaf did not influence the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for a leaf, with zeros substituted for an unreached leaf.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::from_parts(var.shape(), vec![0.0; numel(&var.shape())]),
        }
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(pid, g)?;
            }
        }
        Ok(())
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    use Op::*;
    match op {
        Leaf => vec![],
        Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
        Exp(a)
        | Ln(a)
        | Softplus(a)
        | Sigmoid(a)
        | Tanh(a)
        | Abs(a)
        | Exprel(a)
        | Powf(a, _)
        | Scale(a, _)
        | AddScalar(a)
        | Sum(a, _)
        | Mean(a, _)
        | Softmax(a, _)
        | LogSoftmax(a, _)
        | LayerNorm(a, _)
        | Reshape(a)
        | Permute(a, _)
        | Gather(a, _)
        | ScatterAdd(a, _)
        | Clip(a, _, _)
        | StraightThrough(a) => vec![*a],
        Slice { input, .. } => vec![*input],
        Concat(inputs, _) => inputs.clone(),
        Recurrence {
            coef, input, init, ..
        } => {
            let mut v = vec![*coef, *input];
            v.extend(init);
            v
        }
    }
}

// ---------------------------------------------------------------------------
// numeric kernels shared by forward and backward

fn binary_broadcast(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![0.0; numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |i, oa, ob| data[i] = f(ad[oa], bd[ob]));
    Ok(Tensor::from_parts(out, data))
}

/// Elementwise binary map of `g` over broadcast operands, reduced back to
/// the shape of operand `a` (`which_a`) or `b`.
fn binary_grad(
    g: &Tensor,
    a: &Tensor,
    b: &Tensor,
    target_shape: &[usize],
    f: impl Fn(f64, f64, f64) -> f64,
) -> Tensor {
    let out = g.shape();
    let full = if a.shape() == b.shape() {
        let data = g
            .data()
            .iter()
            .zip(a.data().iter().zip(b.data()))
            .map(|(&gv, (&x, &y))| f(gv, x, y))
            .collect();
        Tensor::from_parts(out.to_vec(), data)
    } else {
        let sa = broadcast_strides(a.shape(), out);
        let sb = broadcast_strides(b.shape(), out);
        let (ad, bd, gd) = (a.data(), b.data(), g.data());
        let mut data = vec![0.0; g.len()];
        for_each_broadcast(out, &sa, &sb, |i, oa, ob| {
            data[i] = f(gd[i], ad[oa], bd[ob])
        });
        Tensor::from_parts(out.to_vec(), data)
    };
    reduce_to_shape(&full, target_shape)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a (m×n) · bᵀ` where `b` is `k×n`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_axis(t: &Tensor, axis: Option<usize>, scale_by_count: bool) -> Tensor {
    match axis {
        None => {
            let s = t.sum();
            let v = if scale_by_count {
                s / t.len() as f64
            } else {
                s
            };
            Tensor::scalar(v)
        }
        Some(ax) => {
            let (outer, n, inner) = axis_blocks(t.shape(), ax);
            let mut out = vec![0.0; outer * inner];
            let d = t.data();
            for o in 0..outer {
                for k in 0..n {
                    let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
            if scale_by_count {
                out.iter_mut().for_each(|v| *v /= n as f64);
            }
            let mut shape = t.shape().to_vec();
            shape.remove(ax);
            Tensor::from_parts(shape, out)
        }
    }
}

fn expand_axis(g: &Tensor, shape: &[usize], axis: Option<usize>, scale: f64) -> Tensor {
    match axis {
        None => Tensor::from_parts(shape.to_vec(), vec![g.data()[0] * scale; numel(shape)]),
        Some(ax) => {
            let (outer, n, inner) = axis_blocks(shape, ax);
            let mut out = vec![0.0; numel(shape)];
            let gd = g.data();
            for o in 0..outer {
                for k in 0..n {
                    let dst = &mut out[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (d, &v) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                        *d = v * scale;
                    }
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
    }
}

fn softmax_axis(t: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, n, inner) = axis_blocks(t.shape(), axis);
    let d = t.data();
    let mut out = vec![0.0; t.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..n).map(|k| (d[at(k)] - max).exp()).sum();
            let log_denom = denom.ln();
            for k in 0..n {
                out[at(k)] = if log {
                    d[at(k)] - max - log_denom
                } else {
                    (d[at(k)] - max).exp() / denom
                };
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

fn permute_raw(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_strides = strides(t.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; perm.len()];
    let d = t.data();
    let mut out = vec![0.0; t.len()];
    for_each_broadcast(&out_shape, &src_strides, &zeros, |i, src, _| {
        out[i] = d[src]
    });
    Tensor::from_parts(out_shape, out)
}

fn gather_rows(t: &Tensor, index: &[usize]) -> Tensor {
    let row: usize = t.shape()[1..].iter().product();
    let d = t.data();
    let mut out = Vec::with_capacity(index.len() * row);
    for &i in index {
        out.extend_from_slice(&d[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = index.len();
    Tensor::from_parts(shape, out)
}

fn scatter_rows(t: &Tensor, index: &[usize], rows: usize) -> Tensor {
    let row: usize = t.shape()[1..].iter().product();
    let d = t.data();
    let mut out = vec![0.0; rows * row];
    for (k, &i) in index.iter().enumerate() {
        for (o, &v) in out[i * row..(i + 1) * row]
            .iter_mut()
            .zip(&d[k * row..(k + 1) * row])
        {
            *o += v;
        }
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows;
    Tensor::from_parts(shape, out)
}

fn slice_raw(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, n, inner) = axis_blocks(t.shape(), axis);
    let d = t.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, out)
}

/// `expm1(z) / z`, continued by its Taylor series near zero.
pub(crate) fn exprel(z: f64) -> f64 {
    crate::ssm::discretize::exprel(z)
}

fn exprel_derivative(z: f64) -> f64 {
    if z.abs() < crate::ssm::discretize::SERIES_THRESHOLD {
        // derivative of the truncated series used in the forward pass
        0.5 + z / 3.0
    } else if z.abs() < 1e-2 {
        0.5 + z / 3.0 + z * z / 8.0 + z.powi(3) / 30.0 + z.powi(4) / 144.0
    } else {
        (z.exp() * (z - 1.0) + 1.0) / (z * z)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn layer_norm_raw(t: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let n = *t.shape().last().unwrap_or(&1);
    let rows = t.len() / n;
    let d = t.data();
    let mut out = vec![0.0; t.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let x = &d[r * n..(r + 1) * n];
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(x) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (Tensor::from_parts(t.shape().to_vec(), out), inv_std)
}

fn one_hot_rows(t: &Tensor) -> Tensor {
    let n = *t.shape().last().unwrap_or(&1);
    let d = t.data();
    let mut out = vec![0.0; t.len()];
    for r in 0..t.len() / n {
        let row = &d[r * n..(r + 1) * n];
        out[r * n + argmax(row)] = 1.0;
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

/// Index of the first maximum.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn unary(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    t.map(f)
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(&gv, &xv)| f(gv, xv))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn zip3_map(g: &Tensor, x: &Tensor, y: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(x.data().iter().zip(y.data()))
        .map(|(&gv, (&xv, &yv))| f(gv, xv, yv))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn backward_rule(nodes: &[Node], id: NodeId, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
    let val = |i: NodeId| -> &Tensor { &nodes[i].value };
    let out = &nodes[id].value;
    use Op::*;
    let r = match &nodes[id].op {
        Leaf => vec![],
        Add(a, b) => vec![
            (*a, reduce_to_shape(g, val(*a).shape())),
            (*b, reduce_to_shape(g, val(*b).shape())),
        ],
        Sub(a, b) => {
            let gb = reduce_to_shape(g, val(*b).shape()).map(|v| -v);
            vec![(*a, reduce_to_shape(g, val(*a).shape())), (*b, gb)]
        }
        Mul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            vec![
                (*a, binary_grad(g, x, y, x.shape(), |gv, _, yv| gv * yv)),
                (*b, binary_grad(g, x, y, y.shape(), |gv, xv, _| gv * xv)),
            ]
        }
        Div(a, b) => {
            let (x, y) = (val(*a), val(*b));
            vec![
                (*a, binary_grad(g, x, y, x.shape(), |gv, _, yv| gv / yv)),
                (
                    *b,
                    binary_grad(g, x, y, y.shape(), |gv, xv, yv| -gv * xv / (yv * yv)),
                ),
            ]
        }
        MatMul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            vec![
                (
                    *a,
                    Tensor::from_parts(vec![m, k], matmul_nt(g.data(), y.data(), m, n, k)),
                ),
                (
                    *b,
                    Tensor::from_parts(vec![k, n], matmul_tn(x.data(), g.data(), m, k, n)),
                ),
            ]
        }
        Exp(a) => vec![(*a, zip_map(g, out, |gv, y| gv * y))],
        Ln(a) => vec![(*a, zip_map(g, val(*a), |gv, x| gv / x))],
        Softplus(a) => vec![(*a, zip_map(g, val(*a), |gv, x| gv * sigmoid(x)))],
        Sigmoid(a) => vec![(*a, zip_map(g, out, |gv, y| gv * y * (1.0 - y)))],
        Tanh(a) => vec![(*a, zip_map(g, out, |gv, y| gv * (1.0 - y * y)))],
        Abs(a) => vec![(
            *a,
            zip_map(g, val(*a), |gv, x| {
                gv * x.signum() * (x != 0.0) as u8 as f64
            }),
        )],
        Exprel(a) => vec![(*a, zip_map(g, val(*a), |gv, x| gv * exprel_derivative(x)))],
        Powf(a, p) => {
            let p = *p;
            vec![(*a, zip_map(g, val(*a), |gv, x| gv * p * x.powf(p - 1.0)))]
        }
        Scale(a, s) => {
            let s = *s;
            vec![(*a, g.map(|v| v * s))]
        }
        AddScalar(a) => vec![(*a, g.clone())],
        Sum(a, axis) => vec![(*a, expand_axis(g, val(*a).shape(), *axis, 1.0))],
        Mean(a, axis) => {
            let shape = val(*a).shape();
            let count = match axis {
                None => numel(shape),
                Some(ax) => shape[*ax],
            };
            vec![(*a, expand_axis(g, shape, *axis, 1.0 / count as f64))]
        }
        Softmax(a, axis) => {
            // dx = y * (g - sum(g * y))
            let gy = zip_map(g, out, |gv, y| gv * y);
            let s = expand_axis(
                &reduce_axis(&gy, Some(*axis), false),
                out.shape(),
                Some(*axis),
                1.0,
            );
            vec![(*a, zip3_map(g, out, &s, |gv, y, sv| y * (gv - sv)))]
        }
        LogSoftmax(a, axis) => {
            // dx = g - softmax * sum(g)
            let s = expand_axis(
                &reduce_axis(g, Some(*axis), false),
                out.shape(),
                Some(*axis),
                1.0,
            );
            vec![(*a, zip3_map(g, out, &s, |gv, y, sv| gv - y.exp() * sv))]
        }
        LayerNorm(a, eps) => {
            let (y, inv_std) = layer_norm_raw(val(*a), *eps);
            let n = *y.shape().last().unwrap_or(&1);
            let mut dx = vec![0.0; y.len()];
            for (r, inv) in inv_std.iter().enumerate() {
                let gr = &g.data()[r * n..(r + 1) * n];
                let yr = &y.data()[r * n..(r + 1) * n];
                let mean_g = gr.iter().sum::<f64>() / n as f64;
                let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    dx[r * n + j] = inv * (gr[j] - mean_g - yr[j] * mean_gy);
                }
            }
            vec![(*a, Tensor::from_parts(y.shape().to_vec(), dx))]
        }
        Reshape(a) => vec![(
            *a,
            Tensor::from_parts(val(*a).shape().to_vec(), g.data().to_vec()),
        )],
        Permute(a, perm) => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            vec![(*a, permute_raw(g, &inverse))]
        }
        Gather(a, index) => vec![(*a, scatter_rows(g, index, val(*a).shape()[0]))],
        ScatterAdd(a, index) => vec![(*a, gather_rows(g, index))],
        Concat(inputs, axis) => {
            let mut start = 0;
            inputs
                .iter()
                .map(|&i| {
                    let len = val(i).shape()[*axis];
                    let part = slice_raw(g, *axis, start, len);
                    start += len;
                    (i, part)
                })
                .collect()
        }
        Slice { input, axis, start } => {
            let x = val(*input);
            let (outer, n, inner) = axis_blocks(x.shape(), *axis);
            let len = g.shape()[*axis];
            let mut dx = vec![0.0; x.len()];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                dx[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*input, Tensor::from_parts(x.shape().to_vec(), dx))]
        }
        Clip(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            vec![(
                *a,
                zip_map(
                    g,
                    val(*a),
                    |gv, x| if x >= lo && x <= hi { gv } else { 0.0 },
                ),
            )]
        }
        StraightThrough(a) => vec![(*a, g.clone())],
        Recurrence {
            coef,
            input,
            init,
            mode,
        } => {
            let coefs = val(*coef);
            let states = out;
            let len = coefs.shape()[0];
            let lanes = coefs.len() / len;
            let init_value = init.map(|i| val(i).data().to_vec());
            let adj = recurrence::adjoint(
                coefs.data(),
                states.data(),
                init_value.as_deref(),
                g.data(),
                len,
                lanes,
                *mode,
            );
            let mut r = vec![
                (*coef, Tensor::from_parts(coefs.shape().to_vec(), adj.coef)),
                (
                    *input,
                    Tensor::from_parts(coefs.shape().to_vec(), adj.input),
                ),
            ];
            if let Some(i) = init {
                r.push((*i, Tensor::from_parts(val(*i).shape().to_vec(), adj.init)));
            }
            r
        }
    };
    Ok(r)
}

// ---------------------------------------------------------------------------
// forward primitives

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id]
            .value
            .shape()
            .to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::invalid("operands recorded on different tapes"))
        }
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: fn(NodeId, NodeId) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = binary_broadcast(&self.value(), &other.value(), name, f)?;
        self.tape.push(value, op(self.id, other.id), name)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "subtract", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "multiply", Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "divide", Op::Div, |a, b| a / b)
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(
                "matrix-multiply",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let value = Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n));
        self.tape
            .push(value, Op::MatMul(self.id, other.id), "matrix-multiply")
    }

    fn unary(self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let value = unary(&self.value(), f);
        self.tape.push(value, op, name)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exponential", Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary("natural-log", Op::Ln(self.id), f64::ln)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary("softplus", Op::Softplus(self.id), softplus)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", Op::Tanh(self.id), f64::tanh)
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary("abs", Op::Abs(self.id), f64::abs)
    }

    /// `(exp(z) - 1) / z`, with the series branch for small `|z|`.
    pub fn exprel(self) -> Result<Var<'t>> {
        self.unary("exprel", Op::Exprel(self.id), exprel)
    }

    pub fn powf(self, p: f64) -> Result<Var<'t>> {
        self.unary("power", Op::Powf(self.id, p), |x| x.powf(p))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, s), |x| x * s)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        self.unary("add-scalar", Op::AddScalar(self.id), |x| x + s)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Result<Var<'t>> {
        self.mul(self.sigmoid()?)
    }

    fn check_axis(&self, axis: usize, name: &'static str) -> Result<()> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(Error::shape(name, format!("axis {axis} for rank {rank}")));
        }
        Ok(())
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let v = reduce_axis(&self.value(), None, false);
        self.tape.push(v, Op::Sum(self.id, None), "reduce-sum")
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.check_axis(axis, "reduce-sum")?;
        let v = reduce_axis(&self.value(), Some(axis), false);
        self.tape
            .push(v, Op::Sum(self.id, Some(axis)), "reduce-sum")
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let v = reduce_axis(&self.value(), None, true);
        self.tape.push(v, Op::Mean(self.id, None), "reduce-mean")
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.check_axis(axis, "reduce-mean")?;
        let v = reduce_axis(&self.value(), Some(axis), true);
        self.tape
            .push(v, Op::Mean(self.id, Some(axis)), "reduce-mean")
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.check_axis(axis, "softmax")?;
        let v = softmax_axis(&self.value(), axis, false);
        self.tape.push(v, Op::Softmax(self.id, axis), "softmax")
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.check_axis(axis, "log-softmax")?;
        let v = softmax_axis(&self.value(), axis, true);
        self.tape
            .push(v, Op::LogSoftmax(self.id, axis), "log-softmax")
    }

    /// Normalizes the last axis to zero mean and unit variance.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        if self.shape().is_empty() {
            return Err(Error::shape("layer-normalization", "scalar input"));
        }
        let (v, _) = layer_norm_raw(&self.value(), eps);
        self.tape
            .push(v, Op::LayerNorm(self.id, eps), "layer-normalization")
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        self.tape.push(v, Op::Reshape(self.id), "reshape")
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(
                "permute-axes",
                format!("{perm:?} for {shape:?}"),
            ));
        }
        let v = permute_raw(&self.value(), perm);
        self.tape
            .push(v, Op::Permute(self.id, perm.to_vec()), "permute-axes")
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(self) -> Result<Var<'t>> {
        self.permute(&[1, 0])
    }

    /// Selects rows (along axis 0) by index.
    pub fn gather(self, index: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let Some(&rows) = shape.first() else {
            return Err(Error::shape("gather-by-index", "scalar input"));
        };
        if index.is_empty() {
            return Err(Error::shape("gather-by-index", "empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                op: "gather-by-index",
                index: bad,
                extent: rows,
            });
        }
        let v = gather_rows(&self.value(), index);
        self.tape
            .push(v, Op::Gather(self.id, index.into()), "gather-by-index")
    }

    /// Adds each row `k` of `self` into row `index[k]` of a zero tensor with
    /// `rows` rows.
    pub fn scatter_add(self, index: &[usize], rows: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.first() != Some(&index.len()) || rows == 0 {
            return Err(Error::shape(
                "scatter-add-by-index",
                format!("{shape:?} with {} indices into {rows} rows", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                op: "scatter-add-by-index",
                index: bad,
                extent: rows,
            });
        }
        let v = scatter_rows(&self.value(), index, rows);
        self.tape.push(
            v,
            Op::ScatterAdd(self.id, index.into()),
            "scatter-add-by-index",
        )
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        self.check_axis(axis, "slice")?;
        let shape = self.shape();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let v = slice_raw(&self.value(), axis, start, len);
        self.tape.push(
            v,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            "slice",
        )
    }

    pub fn clip(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        if lo > hi {
            return Err(Error::invalid(format!("clip bounds {lo} > {hi}")));
        }
        self.unary("clip", Op::Clip(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    /// One-hot of the row-wise argmax over the last axis; the backward pass
    /// routes the gradient to `self` unchanged.
    pub fn straight_through_one_hot(self) -> Result<Var<'t>> {
        let v = one_hot_rows(&self.value());
        self.tape
            .push(v, Op::StraightThrough(self.id), "straight-through")
    }

    /// A copy of this value with no gradient connection.
    pub fn detach(self) -> Result<Var<'t>> {
        self.tape.constant((*self.value()).clone())
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concatenate", "no inputs"))?;
    let tape = first.tape;
    let base = first.shape();
    if axis >= base.len() {
        return Err(Error::shape(
            "concatenate",
            format!("axis {axis} for {base:?}"),
        ));
    }
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let mut total = 0;
    for (p, v) in parts.iter().zip(&values) {
        first.same_tape(p)?;
        let s = v.shape();
        if s.len() != base.len()
            || s.iter()
                .zip(&base)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::shape("concatenate", format!("{base:?} vs {s:?}")));
        }
        total += s[axis];
    }
    let (outer, _, inner) = axis_blocks(&base, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let n = v.shape()[axis];
            data.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    tape.push(
        Tensor::from_parts(shape, data),
        Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
        "concatenate",
    )
}

/// Linear recurrence `h_k = coef_k ⊙ h_{k-1} + input_k` over axis 0, returning
/// every state. `init` (shaped like one step) defaults to zero.
pub fn linear_recurrence<'t>(
    coef: Var<'t>,
    input: Var<'t>,
    init: Option<Var<'t>>,
    mode: ScanMode,
) -> Result<Var<'t>> {
    coef.same_tape(&input)?;
    let (a, u) = (coef.value(), input.value());
    if a.shape() != u.shape() || a.rank() < 1 {
        return Err(Error::shape(
            "linear-recurrence",
            format!("{:?} vs {:?}", a.shape(), u.shape()),
        ));
    }
    let len = a.shape()[0];
    let lanes = a.len() / len;
    let init_value = match init {
        Some(h) => {
            coef.same_tape(&h)?;
            let hv = h.value();
            if hv.shape() != &a.shape()[1..] {
                return Err(Error::shape(
                    "linear-recurrence",
                    format!(
                        "initial state {:?} for steps {:?}",
                        hv.shape(),
                        &a.shape()[1..]
                    ),
                ));
            }
            Some(hv.data().to_vec())
        }
        None => None,
    };
    let states = recurrence::run(a.data(), u.data(), init_value.as_deref(), len, lanes, mode);
    coef.tape.push(
        Tensor::from_parts(a.shape().to_vec(), states),
        Op::Recurrence {
            coef: coef.id,
            input: input.id,
            init: init.map(|h| h.id),
            mode,
        },
        "linear-recurrence",
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn multiply_pointwise() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[2., 3.])).unwrap();
        let b = tape.constant(t(&[2], &[4., 5.])).unwrap();
        assert_eq!(a.mul(b).unwrap().value().data(), &[8., 15.]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[0., 0.])).unwrap();
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.var(t(&[3], &[1., -2., 7.])).unwrap();
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn grad_of_square() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[3., -2.])).unwrap();
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6., -4.]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[1., 2.])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let s = x.sum().unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[0., 1.])).unwrap();
        assert!(matches!(x.ln(), Err(Error::NonFinite { .. })));
        let y = tape.var(t(&[1], &[800.])).unwrap();
        assert!(matches!(y.exp(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn gather_out_of_range() {
        let tape = Tape::new();
        let x = tape.var(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        assert!(matches!(
            x.gather(&[0, 2]),
            Err(Error::IndexOutOfRange { index: 2, .. })
        ));
    }

    #[test]
    fn shape_mismatch_in_matmul() {
        let tape = Tape::new();
        let a = tape.var(Tensor::zeros(vec![2, 3]).unwrap()).unwrap();
        let b = tape.var(Tensor::zeros(vec![2, 3]).unwrap()).unwrap();
        assert!(matches!(a.matmul(b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(
            a.add(tape.var(Tensor::zeros(vec![2]).unwrap()).unwrap()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn leaf_used_twice_accumulates() {
        // f = sum(x * w) + sum(exp(x)) against the two branches taken separately
        let x0 = t(&[3], &[0.3, -0.7, 1.1]);
        let w0 = t(&[3], &[2., -1., 0.5]);
        let tape = Tape::new();
        let x = tape.var(x0.clone()).unwrap();
        let w = tape.constant(w0.clone()).unwrap();
        let f = x
            .mul(w)
            .unwrap()
            .sum()
            .unwrap()
            .add(x.exp().unwrap().sum().unwrap())
            .unwrap();
        let joint = tape.backward(f).unwrap().wrt(x);

        let t1 = Tape::new();
        let x1 = t1.var(x0.clone()).unwrap();
        let w1 = t1.constant(w0).unwrap();
        let g1 = t1
            .backward(x1.mul(w1).unwrap().sum().unwrap())
            .unwrap()
            .wrt(x1);
        let t2 = Tape::new();
        let x2 = t2.var(x0).unwrap();
        let g2 = t2
            .backward(x2.exp().unwrap().sum().unwrap())
            .unwrap()
            .wrt(x2);
        for i in 0..3 {
            assert_eq!(joint.data()[i], g1.data()[i] + g2.data()[i]);
        }
    }

    #[test]
    fn straight_through_forward_is_one_hot() {
        let tape = Tape::new();
        let x = tape
            .var(t(&[2, 3], &[0.1, 0.7, 0.2, 0.5, 0.2, 0.3]))
            .unwrap();
        let h = x.straight_through_one_hot().unwrap();
        assert_eq!(h.value().data(), &[0., 1., 0., 1., 0., 0.]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let tape = Tape::new();
        let a = tape.var(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let b = tape.var(t(&[2, 1], &[5., 6.])).unwrap();
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1., 2., 5., 3., 4., 6.]);
        assert_eq!(c.slice(1, 2, 1).unwrap().value().data(), &[5., 6.]);
        assert_eq!(*c.slice(1, 0, 2).unwrap().value(), *a.value());
    }
}
