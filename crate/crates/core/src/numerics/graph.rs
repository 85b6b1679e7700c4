//! Define-by-run tape for reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! execution order, so node ids are already a topological order and the
//! backward sweep simply walks ids from the loss down to zero. Gradient
//! accumulation therefore happens in a fixed order and is bit-reproducible.

use super::tensor::{strides_of, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance inside [`Primitive::LayerNorm`].
pub const LAYER_NORM_EPS: f64 = 1e-10;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitives.
///
/// Shape rules:
/// - `Matmul`: `[.., k] x [k, n] -> [.., n]` (shared right operand) or
///   `[B, m, k] x [B, k, n] -> [B, m, n]` (batched).
/// - `Add` / `Mul`: right-aligned broadcasting, a size-1 axis stretches.
/// - `SoftmaxLastDim` / `LayerNorm`: normalise over the last axis. Layer norm
///   has no affine part; callers apply their own scale and shift.
/// - `MeanOverAxis(a)`: removes axis `a` (a rank-1 input becomes `[1]`).
/// - `Sum`: reduces everything to `[1]`.
/// - `Slice` / `Concat`: along one axis, other axes must agree.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Matmul,
    Add,
    Mul,
    Relu,
    SoftmaxLastDim,
    LayerNorm,
    MeanOverAxis(usize),
    Scale(f64),
    Log,
    Neg,
    Tanh,
    Sum,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Slice { axis: usize, start: usize, len: usize },
    Concat(usize),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Relu => "relu",
            Primitive::SoftmaxLastDim => "softmax_lastdim",
            Primitive::LayerNorm => "layer_norm",
            Primitive::MeanOverAxis(_) => "mean_over_axis",
            Primitive::Scale(_) => "scale",
            Primitive::Log => "log",
            Primitive::Neg => "neg",
            Primitive::Tanh => "tanh",
            Primitive::Sum => "sum",
            Primitive::Reshape(_) => "reshape",
            Primitive::Permute(_) => "permute",
            Primitive::Slice { .. } => "slice",
            Primitive::Concat(_) => "concat",
        }
    }
}

enum Op {
    Leaf,
    Prim(Primitive),
    /// Recorded value with no backward rule.
    Opaque(String),
}

enum Saved {
    None,
    InvStd(Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
    saved: Saved,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not depend on any differentiable leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
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

    /// Multiply-accumulates performed by every matmul recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new(), true, Saved::None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new(), false, Saved::None)
    }

    /// Records a value computed outside the graph. Backward through it fails
    /// with [`Error::UnsupportedOp`] if any of `inputs` needs a gradient.
    pub fn opaque(&mut self, name: &str, value: Tensor, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, Op::Opaque(name.to_string()), inputs.to_vec(), rg, Saved::None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>, rg: bool, saved: Saved) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad: rg,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// Applies a primitive, records the node and validates the result.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity_ok = match op {
            Primitive::Matmul | Primitive::Add | Primitive::Mul => inputs.len() == 2,
            Primitive::Concat(_) => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::shape(format!(
                "{} received {} inputs",
                op.name(),
                inputs.len()
            )));
        }
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::shape(format!("unknown node id {}", v.0)));
            }
        }
        let (value, saved) = self.forward(&op, inputs)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Op::Prim(op), inputs.to_vec(), rg, saved))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Matmul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SoftmaxLastDim, &[a])
    }
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LayerNorm, &[a])
    }
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::MeanOverAxis(axis), &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Neg, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Primitive::Permute(axes.to_vec()), &[a])
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, len }, &[a])
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat(axis), xs)
    }

    fn forward(&mut self, op: &Primitive, inputs: &[Var]) -> Result<(Tensor, Saved)> {
        let x = &self.nodes[inputs[0].0].value;
        let out = match op {
            Primitive::Matmul => {
                let b = &self.nodes[inputs[1].0].value;
                let (t, macs) = matmul_forward(x, b)?;
                self.macs += macs;
                t
            }
            Primitive::Add => broadcast_binary(x, &self.nodes[inputs[1].0].value, |a, b| a + b)?,
            Primitive::Mul => broadcast_binary(x, &self.nodes[inputs[1].0].value, |a, b| a * b)?,
            Primitive::Relu => map(x, |v| if v > 0.0 { v } else { 0.0 }),
            Primitive::SoftmaxLastDim => softmax_forward(x),
            Primitive::LayerNorm => {
                let (t, inv) = layer_norm_forward(x);
                return Ok((t, Saved::InvStd(inv)));
            }
            Primitive::MeanOverAxis(axis) => {
                let (outer, size, inner) = axis_split(x.shape(), *axis)?;
                let mut out = vec![0.0; outer * inner];
                let xd = x.data();
                for o in 0..outer {
                    for s in 0..size {
                        let base = (o * size + s) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += xd[base + i];
                        }
                    }
                }
                let inv = 1.0 / size as f64;
                out.iter_mut().for_each(|v| *v *= inv);
                let mut shape = x.shape().to_vec();
                shape.remove(*axis);
                if shape.is_empty() {
                    shape.push(1);
                }
                Tensor::from_parts(&shape, out)?
            }
            Primitive::Scale(c) => {
                let c = *c;
                map(x, |v| v * c)
            }
            Primitive::Log => map(x, f64::ln),
            Primitive::Neg => map(x, |v| -v),
            Primitive::Tanh => map(x, f64::tanh),
            Primitive::Sum => Tensor::scalar(x.sum()),
            Primitive::Reshape(shape) => x.clone().reshape(shape)?,
            Primitive::Permute(axes) => permute_forward(x, axes)?,
            Primitive::Slice { axis, start, len } => {
                let (outer, size, inner) = axis_split(x.shape(), *axis)?;
                if *len == 0 || start + len > size {
                    return Err(Error::shape(format!(
                        "slice {start}..{} out of range for axis {axis} of {:?}",
                        start + len,
                        x.shape()
                    )));
                }
                let mut out = Vec::with_capacity(outer * len * inner);
                let xd = x.data();
                for o in 0..outer {
                    let base = (o * size + start) * inner;
                    out.extend_from_slice(&xd[base..base + len * inner]);
                }
                let mut shape = x.shape().to_vec();
                shape[*axis] = *len;
                Tensor::from_parts(&shape, out)?
            }
            Primitive::Concat(axis) => {
                let parts: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                concat_forward(&parts, *axis)?
            }
        };
        Ok((out, Saved::None))
    }

    /// Reverse sweep from a scalar `loss`; the seed gradient is 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::shape(format!(
                "loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Opaque(name) => return Err(Error::UnsupportedOp(name.clone())),
                Op::Prim(p) => {
                    let contribs = self.backward_node(p, node, &g)?;
                    for (inp, c) in node.inputs.iter().zip(contribs) {
                        let Some(c) = c else { continue };
                        if !self.nodes[inp.0].requires_grad {
                            continue;
                        }
                        match &mut grads[inp.0] {
                            Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(c),
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| {
                    Tensor::from_parts(self.nodes[i].value.shape(), d)
                        .expect("gradient matches node shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, op: &Primitive, node: &Node, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let needs = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        let x = &self.nodes[node.inputs[0].0].value;
        let y = &node.value;
        let out = match op {
            Primitive::Matmul => {
                let b = &self.nodes[node.inputs[1].0].value;
                let (ga, gb) = matmul_backward(x, b, g, needs(0), needs(1));
                vec![ga, gb]
            }
            Primitive::Add => {
                let b = &self.nodes[node.inputs[1].0].value;
                let ga = needs(0).then(|| reduce_to(g, y.shape(), x.shape()));
                let gb = needs(1).then(|| reduce_to(g, y.shape(), b.shape()));
                vec![ga, gb]
            }
            Primitive::Mul => {
                let b = &self.nodes[node.inputs[1].0].value;
                let ga = needs(0).then(|| {
                    let prod = broadcast_binary_raw(g, y.shape(), b, |gv, bv| gv * bv);
                    reduce_to(&prod, y.shape(), x.shape())
                });
                let gb = needs(1).then(|| {
                    let prod = broadcast_binary_raw(g, y.shape(), x, |gv, av| gv * av);
                    reduce_to(&prod, y.shape(), b.shape())
                });
                vec![ga, gb]
            }
            Primitive::Relu => vec![Some(
                x.data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect(),
            )],
            Primitive::SoftmaxLastDim => {
                let d = *y.shape().last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((yr, gr), out) in y.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(gx)]
            }
            Primitive::LayerNorm => {
                let Saved::InvStd(inv) = &node.saved else {
                    unreachable!("layer norm saves its inverse std")
                };
                let d = *y.shape().last().unwrap();
                let mut gx = vec![0.0; g.len()];
                let rows = y.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d));
                for (r, ((yr, gr), out)) in rows.enumerate() {
                    let mg: f64 = gr.iter().sum::<f64>() / d as f64;
                    let mgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        out[j] = inv[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                vec![Some(gx)]
            }
            Primitive::MeanOverAxis(axis) => {
                let (outer, size, inner) = axis_split(x.shape(), *axis)?;
                let inv = 1.0 / size as f64;
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for s in 0..size {
                        let base = (o * size + s) * inner;
                        for i in 0..inner {
                            gx[base + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                vec![Some(gx)]
            }
            Primitive::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
            Primitive::Log => vec![Some(x.data().iter().zip(g).map(|(a, b)| b / a).collect())],
            Primitive::Neg => vec![Some(g.iter().map(|v| -v).collect())],
            Primitive::Tanh => vec![Some(
                y.data().iter().zip(g).map(|(t, b)| b * (1.0 - t * t)).collect(),
            )],
            Primitive::Sum => vec![Some(vec![g[0]; x.len()])],
            Primitive::Reshape(_) => vec![Some(g.to_vec())],
            Primitive::Permute(axes) => {
                let map = permute_index_map(x.shape(), axes);
                let mut gx = vec![0.0; x.len()];
                for (o, &i) in map.iter().enumerate() {
                    gx[i] = g[o];
                }
                vec![Some(gx)]
            }
            Primitive::Slice { axis, start, len } => {
                let (outer, size, inner) = axis_split(x.shape(), *axis)?;
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    let base = (o * size + start) * inner;
                    let src = o * len * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(gx)]
            }
            Primitive::Concat(axis) => {
                let (outer, total, inner) = axis_split(y.shape(), *axis)?;
                let mut offset = 0;
                let mut out = Vec::with_capacity(node.inputs.len());
                for (k, inp) in node.inputs.iter().enumerate() {
                    let len = self.nodes[inp.0].value.shape()[*axis];
                    if needs(k) {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[base..base + len * inner]);
                        }
                        out.push(Some(gx));
                    } else {
                        out.push(None);
                    }
                    offset += len;
                }
                out
            }
        };
        Ok(out)
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_parts(x.shape(), data).expect("same shape")
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat index of the broadcast
/// source with shape `in_shape`.
fn broadcast_index_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let in_len: usize = in_shape.iter().product();
    if in_shape == out_shape {
        return (0..n).collect();
    }
    // suffix case (bias-style): input equals trailing dims of the output
    if in_shape.len() <= out_shape.len() && out_shape.ends_with(in_shape) {
        return (0..n).map(|o| o % in_len).collect();
    }
    let rank = out_shape.len();
    let in_strides = strides_of(in_shape);
    let mut eff = vec![0; rank];
    for i in 0..rank {
        if i + in_shape.len() >= rank {
            let k = i + in_shape.len() - rank;
            eff[i] = if in_shape[k] == 1 { 0 } else { in_strides[k] };
        }
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_parts(&shape, data);
    }
    let ma = broadcast_index_map(&shape, a.shape());
    let mb = broadcast_index_map(&shape, b.shape());
    let (ad, bd) = (a.data(), b.data());
    let data = ma.iter().zip(&mb).map(|(&i, &j)| f(ad[i], bd[j])).collect();
    Tensor::from_parts(&shape, data)
}

/// `f(g[o], other[map(o)])` for a gradient `g` laid out in `out_shape`.
fn broadcast_binary_raw(g: &[f64], out_shape: &[usize], other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if other.shape() == out_shape {
        return g.iter().zip(other.data()).map(|(&x, &y)| f(x, y)).collect();
    }
    let m = broadcast_index_map(out_shape, other.shape());
    let od = other.data();
    g.iter().zip(&m).map(|(&x, &j)| f(x, od[j])).collect()
}

/// Sums a gradient in `out_shape` down to a broadcast source of `in_shape`.
fn reduce_to(g: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return g.to_vec();
    }
    let m = broadcast_index_map(out_shape, in_shape);
    let mut acc = vec![0.0; in_shape.iter().product()];
    for (&gv, &j) in g.iter().zip(&m) {
        acc[j] += gv;
    }
    acc
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<(Tensor, u64)> {
    match (a.shape(), b.shape()) {
        (sa, &[k, n]) if *sa.last().unwrap() == k => {
            let m = a.len() / k;
            let mut out = vec![0.0; m * n];
            gemm_acc(a.data(), b.data(), &mut out, m, k, n);
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = n;
            Ok((Tensor::from_parts(&shape, out)?, (m * k * n) as u64))
        }
        (&[bt, m, k], &[bt2, k2, n]) if bt == bt2 && k == k2 => {
            let mut out = vec![0.0; bt * m * n];
            for i in 0..bt {
                gemm_acc(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Ok((Tensor::from_parts(&[bt, m, n], out)?, (bt * m * k * n) as u64))
        }
        (sa, sb) => Err(Error::shape(format!("matmul cannot contract {sa:?} with {sb:?}"))),
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`, accumulating over `k` in ascending order.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

/// `ga[m,k] = g[m,n] * b^T`, `gb[k,n] = a^T * g`.
fn gemm_grads(a: &[f64], b: &[f64], g: &[f64], ga: Option<&mut [f64]>, gb: Option<&mut [f64]>, m: usize, k: usize, n: usize) {
    if let Some(ga) = ga {
        // row-wise axpy over b^T; same summation order as a dot product
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for q in 0..n {
                bt[q * k + p] = b[p * n + q];
            }
        }
        let mut acc = vec![0.0; k];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (q, &gv) in g[i * n..(i + 1) * n].iter().enumerate() {
                for (o, &bv) in acc.iter_mut().zip(&bt[q * k..(q + 1) * k]) {
                    *o += gv * bv;
                }
            }
            for (o, v) in ga[i * k..(i + 1) * k].iter_mut().zip(&acc) {
                *o += v;
            }
        }
    }
    if let Some(gb) = gb {
        for i in 0..m {
            let gr = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                let row = &mut gb[p * n..(p + 1) * n];
                for (o, &gv) in row.iter_mut().zip(gr) {
                    *o += av * gv;
                }
            }
        }
    }
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &[f64], need_a: bool, need_b: bool) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut ga = need_a.then(|| vec![0.0; a.len()]);
    let mut gb = need_b.then(|| vec![0.0; b.len()]);
    if b.rank() == 2 {
        let (k, n) = (b.shape()[0], b.shape()[1]);
        let m = a.len() / k;
        gemm_grads(a.data(), b.data(), g, ga.as_deref_mut(), gb.as_deref_mut(), m, k, n);
    } else {
        let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let n = b.shape()[2];
        for i in 0..bt {
            gemm_grads(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &g[i * m * n..(i + 1) * m * n],
                ga.as_deref_mut().map(|s| &mut s[i * m * k..(i + 1) * m * k]),
                gb.as_deref_mut().map(|s| &mut s[i * k * n..(i + 1) * k * n]),
                m,
                k,
                n,
            );
        }
    }
    (ga, gb)
}

fn softmax_forward(x: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap();
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            z += *o;
        }
        or.iter_mut().for_each(|o| *o /= z);
    }
    Tensor::from_parts(x.shape(), out).expect("same shape")
}

fn layer_norm_forward(x: &Tensor) -> (Tensor, Vec<f64>) {
    let d = *x.shape().last().unwrap();
    let mut out = vec![0.0; x.len()];
    let mut invs = Vec::with_capacity(x.len() / d);
    for (xr, or) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - mean) * inv;
        }
        invs.push(inv);
    }
    (Tensor::from_parts(x.shape(), out).expect("same shape"), invs)
}

/// For every flat output index of the permuted tensor, the flat input index.
fn permute_index_map(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = in_shape.iter().product();
    let rank = axes.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn permute_forward(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let mut seen = vec![false; x.rank()];
    if axes.len() != x.rank() || axes.iter().any(|&a| a >= x.rank() || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape(format!(
            "invalid permutation {axes:?} for rank {}",
            x.rank()
        )));
    }
    let map = permute_index_map(x.shape(), axes);
    let xd = x.data();
    let data = map.iter().map(|&i| xd[i]).collect();
    let shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    Tensor::from_parts(&shape, data)
}

fn concat_forward(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0].shape();
    let mut total = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != first.len()
            || axis >= s.len()
            || s.iter().zip(first).enumerate().any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::shape(format!(
                "concat along axis {axis}: {s:?} incompatible with {first:?}"
            )));
        }
        total += s[axis];
    }
    let (outer, _, inner) = axis_split(first, axis)?;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::from_parts(&shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_zeroes_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data()[0], 1.0);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let l = g.sum(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn relu_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x).unwrap();
        let l = g.sum(r).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[0.0]));
        let r = g.relu(x).unwrap();
        let l = g.sum(r).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn opaque_node_blocks_backward() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]));
        let o = g.opaque("resample", Tensor::ones(&[2]), &[x]);
        let l = g.sum(o).unwrap();
        assert!(matches!(g.backward(l), Err(Error::UnsupportedOp(name)) if name == "resample"));
    }

    #[test]
    fn log_of_zero_is_numeric_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        let c = g.constant(Tensor::ones(&[4]));
        assert!(matches!(g.add(a, c), Err(Error::Shape(_))));
        assert!(matches!(g.apply(Primitive::Relu, &[a, b]), Err(Error::Shape(_))));
    }

    #[test]
    fn broadcasting_add_and_reduce() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 1, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.leaf(t(&[2, 1], &[10., 20.]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 3]);
        assert_eq!(
            g.value(c).data(),
            &[11., 12., 13., 21., 22., 23., 14., 15., 16., 24., 25., 26.]
        );
        let l = g.sum(c).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0; 6]);
        assert_eq!(grads.get(b).unwrap().data(), &[6.0, 6.0]);
    }

    #[test]
    fn permute_slice_concat_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let p = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.value(p).data(), &[1., 4., 2., 5., 3., 6.]);
        let a = g.slice(x, 1, 0, 1).unwrap();
        let b = g.slice(x, 1, 1, 2).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), g.value(x));
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 4], &[1., 2., 3., 4., -3., 0.5, 9., 2.]));
        let y = g.layer_norm(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mac_counter_tracks_matmuls() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 5, 3]));
        let w = g.constant(Tensor::ones(&[3, 4]));
        g.matmul(a, w).unwrap();
        assert_eq!(g.macs(), 2 * 5 * 3 * 4);
    }
}
