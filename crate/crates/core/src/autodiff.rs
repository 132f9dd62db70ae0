//! Reverse-mode automatic differentiation over a single linear tape.
//!
//! Every operation appends one node holding its output value and the indices
//! of its inputs. [`Tape::backward`] walks the nodes in exact reverse creation
//! order and accumulates gradients; nodes that do not require gradients are
//! skipped, which is how stop-gradient ([`Tape::detach`]) and frozen target
//! parameters are expressed.
//!
//! Binary elementwise ops broadcast over equal-rank shapes where each axis
//! either matches or is `1` on one side (e.g. `B×d` with `1×d` or `B×1`).

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    generation: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Square,
    Sqrt,
    /// `sqrt(x + eps)`, `eps > 0`.
    SqrtEps(f64),
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(ElementwiseKind, usize, usize),
    Unary(ElementwiseKind, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reduce {
        kind: ReduceKind,
        input: usize,
        axis: Option<usize>,
    },
    Reshape(usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Select {
        input: usize,
        axis: usize,
        index: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Pick {
        input: usize,
        indices: Vec<usize>,
    },
    IndexSelect {
        input: usize,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    generation: Cell<u64>,
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Option<Vec<Option<Vec<f64>>>>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() != b.len() {
        return shape_err(format!("cannot broadcast {a:?} with {b:?}: rank differs"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

/// For every flat output index, the flat index of the (possibly broadcast)
/// input element feeding it.
fn broadcast_map(input: &[usize], output: &[usize]) -> Vec<usize> {
    let n: usize = output.iter().product();
    if input == output {
        return (0..n).collect();
    }
    let rank = output.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for ax in (0..rank).rev() {
        strides[ax] = if input[ax] == 1 { 0 } else { acc };
        acc *= input[ax];
    }
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            flat += strides[ax];
            if counter[ax] < output[ax] {
                break;
            }
            flat -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    map
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            generation: Cell::new(0),
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
            consumed: Cell::new(false),
        }
    }

    /// Drops every recorded node and cached value. Vars from before the
    /// clear become foreign to this tape.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        *self.grads.borrow_mut() = None;
        self.consumed.set(false);
        self.generation.set(self.generation.get() + 1);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.generation != self.generation.get() {
            return Err(Error::Tape("variable belongs to a different tape".into()));
        }
        if v.index >= self.nodes.borrow().len() {
            return Err(Error::Tape(format!("variable index {} out of range", v.index)));
        }
        Ok(v.index)
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            generation: self.generation.get(),
            index: nodes.len() - 1,
        }
    }

    /// A differentiable input (parameter or probe variable).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Stop-gradient: a constant copy of `v`'s value.
    pub fn detach(&self, v: Var) -> Result<Var> {
        let value = self.value(v)?;
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> Result<Tensor> {
        let i = self.check(v)?;
        Ok(self.nodes.borrow()[i].value.clone())
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        let i = self.check(v)?;
        Ok(self.nodes.borrow()[i].value.shape().to_vec())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let i = self.check(v)?;
        Ok(self.nodes.borrow()[i].requires_grad)
    }

    fn rg(&self, idx: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        idx.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn elementwise(&self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        use ElementwiseKind::*;
        let ia = self.check(a)?;
        match (kind, b) {
            (Add | Sub | Mul | Div, Some(b)) => {
                let ib = self.check(b)?;
                let (out_shape, data) = {
                    let nodes = self.nodes.borrow();
                    let (ta, tb) = (&nodes[ia].value, &nodes[ib].value);
                    let out_shape = broadcast_shape(ta.shape(), tb.shape())?;
                    let ma = broadcast_map(ta.shape(), &out_shape);
                    let mb = broadcast_map(tb.shape(), &out_shape);
                    let (da, db) = (ta.data(), tb.data());
                    let f: fn(f64, f64) -> f64 = match kind {
                        Add => |x, y| x + y,
                        Sub => |x, y| x - y,
                        Mul => |x, y| x * y,
                        _ => |x, y| x / y,
                    };
                    let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
                    (out_shape, data)
                };
                let rg = self.rg(&[ia, ib]);
                Ok(self.push(Tensor::new(out_shape, data)?, rg, Op::Binary(kind, ia, ib)))
            }
            (Add | Sub | Mul | Div, None) => Err(Error::Contract(format!("{kind:?} needs two operands"))),
            (_, Some(_)) => Err(Error::Contract(format!("{kind:?} takes one operand"))),
            (SqrtEps(eps), None) if !(eps > 0.0) => Err(Error::Domain(format!("sqrt-eps needs eps > 0, got {eps}"))),
            (_, None) => {
                let value = {
                    let nodes = self.nodes.borrow();
                    let x = &nodes[ia].value;
                    match kind {
                        Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
                        Square => x.map(|v| v * v),
                        Sqrt => x.map(f64::sqrt),
                        SqrtEps(eps) => x.map(|v| (v + eps).sqrt()),
                        Neg => x.map(|v| -v),
                        _ => unreachable!(),
                    }
                };
                let rg = self.rg(&[ia]);
                Ok(self.push(value, rg, Op::Unary(kind, ia)))
            }
        }
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Add, a, Some(b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Sub, a, Some(b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Mul, a, Some(b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Div, a, Some(b))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Relu, a, None)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Square, a, None)
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Sqrt, a, None)
    }

    pub fn sqrt_eps(&self, a: Var, eps: f64) -> Result<Var> {
        self.elementwise(ElementwiseKind::SqrtEps(eps), a, None)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Neg, a, None)
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes.borrow()[ia].value.map(|v| v * c);
        let rg = self.rg(&[ia]);
        Ok(self.push(value, rg, Op::Scale(ia, c)))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes.borrow()[ia].value.map(|v| v + c);
        let rg = self.rg(&[ia]);
        Ok(self.push(value, rg, Op::AddScalar(ia)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[ia].value, &nodes[ib].value);
            if ta.rank() != 2 || tb.rank() != 2 {
                return shape_err(format!("matmul needs rank-2 operands, got {:?} and {:?}", ta.shape(), tb.shape()));
            }
            let (m, k, k2, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0], tb.shape()[1]);
            if k != k2 {
                return shape_err(format!("matmul inner extents differ: {:?} · {:?}", ta.shape(), tb.shape()));
            }
            Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?
        };
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(value, rg, Op::MatMul(ia, ib)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[ia].value;
            if t.rank() != 2 {
                return shape_err(format!("transpose needs rank 2, got {:?}", t.shape()));
            }
            let (r, c) = (t.shape()[0], t.shape()[1]);
            Tensor::new(vec![c, r], transpose_raw(t.data(), r, c))?
        };
        let rg = self.rg(&[ia]);
        Ok(self.push(value, rg, Op::Transpose(ia)))
    }

    pub fn reduce(&self, kind: ReduceKind, a: Var, axis: Option<usize>) -> Result<Var> {
        let ia = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[ia].value;
            match axis {
                None => {
                    let s: f64 = t.data().iter().sum();
                    let v = match kind {
                        ReduceKind::Sum => s,
                        ReduceKind::Mean if t.is_empty() => {
                            return shape_err("mean of an empty tensor");
                        }
                        ReduceKind::Mean => s / t.len() as f64,
                    };
                    Tensor::scalar(v)
                }
                Some(ax) => {
                    if ax >= t.rank() {
                        return shape_err(format!("axis {ax} invalid for shape {:?}", t.shape()));
                    }
                    let (outer, n, inner) = axis_split(t.shape(), ax);
                    if n == 0 && kind == ReduceKind::Mean {
                        return shape_err("mean over an empty axis");
                    }
                    let mut out = vec![0.0; outer * inner];
                    let d = t.data();
                    for o in 0..outer {
                        for j in 0..n {
                            let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *acc += v;
                            }
                        }
                    }
                    if kind == ReduceKind::Mean {
                        out.iter_mut().for_each(|v| *v /= n as f64);
                    }
                    let mut shape = t.shape().to_vec();
                    shape.remove(ax);
                    Tensor::new(shape, out)?
                }
            }
        };
        let rg = self.rg(&[ia]);
        Ok(self.push(value, rg, Op::Reduce { kind, input: ia, axis }))
    }

    pub fn sum(&self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axis)
    }

    pub fn mean(&self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axis)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes.borrow()[ia].value.reshaped(shape.to_vec())?;
        let rg = self.rg(&[ia]);
        Ok(self.push(value, rg, Op::Reshape(ia)))
    }

    /// `len` consecutive entries along `axis`, starting at `start`; the axis
    /// is kept.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[ia].value;
            if axis >= t.rank() || start + len > t.shape()[axis] {
                return shape_err(format!("slice {start}..{} on axis {axis} of {:?}", start + len, t.shape()));
            }
            let (outer, n, inner) = axis_split(t.shape(), axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                out.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, out)?
        };
        let rg = self.rg(&[ia]);
        Ok(self.push(value, rg, Op::Slice { input: ia, axis, start }))
    }

    /// Entry `index` along `axis`; the axis is removed.
    pub fn select(&self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[ia].value;
            if axis >= t.rank() || index >= t.shape()[axis] {
                return shape_err(format!("select {index} on axis {axis} of {:?}", t.shape()));
            }
            let (outer, n, inner) = axis_split(t.shape(), axis);
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                let base = (o * n + index) * inner;
                out.extend_from_slice(&t.data()[base..base + inner]);
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Tensor::new(shape, out)?
        };
        let rg = self.rg(&[ia]);
        Ok(self.push(value, rg, Op::Select { input: ia, axis, index }))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of nothing");
        }
        let idx = parts.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[idx[0]].value.shape().to_vec();
            if axis >= first.len() {
                return shape_err(format!("concat axis {axis} invalid for {first:?}"));
            }
            let mut total = 0;
            for &i in &idx {
                let s = nodes[i].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(ax, (x, y))| ax == axis || x == y);
                if !compatible {
                    return shape_err(format!("concat of {first:?} with {s:?} along {axis}"));
                }
                total += s[axis];
            }
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for &i in &idx {
                    let t = &nodes[i].value;
                    let n = t.shape()[axis];
                    out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::new(shape, out)?
        };
        let rg = self.rg(&idx);
        Ok(self.push(value, rg, Op::Concat { inputs: idx, axis }))
    }

    /// Stacks equal-shaped tensors along a new axis.
    pub fn stack(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = self.shape(p)?;
            if axis > s.len() {
                return shape_err(format!("stack axis {axis} invalid for {s:?}"));
            }
            s.insert(axis, 1);
            expanded.push(self.reshape(p, &s)?);
        }
        self.concat(&expanded, axis)
    }

    /// `out[i] = a[i, indices[i]]` for a rank-2 `a`.
    pub fn pick(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[ia].value;
            if t.rank() != 2 || t.shape()[0] != indices.len() {
                return shape_err(format!("pick of {} indices from {:?}", indices.len(), t.shape()));
            }
            let cols = t.shape()[1];
            if let Some(&bad) = indices.iter().find(|&&j| j >= cols) {
                return Err(Error::Domain(format!("pick index {bad} out of range for {cols} columns")));
            }
            Tensor::vector(&indices.iter().enumerate().map(|(i, &j)| t.data()[i * cols + j]).collect::<Vec<_>>())
        };
        let rg = self.rg(&[ia]);
        Ok(self.push(value, rg, Op::Pick { input: ia, indices: indices.to_vec() }))
    }

    /// Rows of `a` (along axis 0) in the order given by `indices`.
    pub fn index_select(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[ia].value;
            if t.rank() == 0 {
                return shape_err("index_select on a scalar");
            }
            let n = t.shape()[0];
            let inner = if n == 0 { 0 } else { t.len() / n };
            let mut out = Vec::with_capacity(indices.len() * inner);
            for &r in indices {
                if r >= n {
                    return Err(Error::Domain(format!("row {r} out of range for {n} rows")));
                }
                out.extend_from_slice(&t.data()[r * inner..(r + 1) * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = indices.len();
            Tensor::new(shape, out)?
        };
        let rg = self.rg(&[ia]);
        Ok(self.push(value, rg, Op::IndexSelect { input: ia, indices: indices.to_vec() }))
    }

    /// Accumulates d`loss`/d`v` into every grad-requiring ancestor. A tape
    /// accepts one backward pass; call [`Tape::clear`] to reuse it.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if self.consumed.get() {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[li].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[li].requires_grad {
            grads[li] = Some(vec![1.0]);
        }
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        drop(nodes);
        *self.grads.borrow_mut() = Some(grads);
        self.consumed.set(true);
        Ok(())
    }

    /// Gradient of the last backward's loss w.r.t. `v`; zeros when `v` is
    /// off the loss path or detached.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        let i = self.check(v)?;
        let shape = self.nodes.borrow()[i].value.shape().to_vec();
        let grads = self.grads.borrow();
        let grads = grads
            .as_ref()
            .ok_or_else(|| Error::Contract("grad requested before backward".into()))?;
        match grads.get(i).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Ok(Tensor::zeros(&shape)),
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], target: usize, contrib: impl FnOnce(&mut [f64])) {
    if !nodes[target].requires_grad {
        return;
    }
    let slot = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
    contrib(slot);
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    use ElementwiseKind::*;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let ma = broadcast_map(ta.shape(), out.shape());
            let mb = broadcast_map(tb.shape(), out.shape());
            let (da, db) = (ta.data(), tb.data());
            accumulate(grads, nodes, *a, |ga| {
                for (o, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
                    ga[ia] += match kind {
                        Add | Sub => g[o],
                        Mul => g[o] * db[ib],
                        Div => g[o] / db[ib],
                        _ => unreachable!(),
                    };
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for (o, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
                    gb[ib] += match kind {
                        Add => g[o],
                        Sub => -g[o],
                        Mul => g[o] * da[ia],
                        Div => -g[o] * da[ia] / (db[ib] * db[ib]),
                        _ => unreachable!(),
                    };
                }
            });
        }
        Op::Unary(kind, a) => {
            let x = nodes[*a].value.data();
            let y = out.data();
            accumulate(grads, nodes, *a, |ga| {
                for (k, acc) in ga.iter_mut().enumerate() {
                    *acc += match kind {
                        Relu => {
                            if x[k] > 0.0 {
                                g[k]
                            } else {
                                0.0
                            }
                        }
                        Square => 2.0 * x[k] * g[k],
                        Sqrt | SqrtEps(_) => 0.5 * g[k] / y[k],
                        Neg => -g[k],
                        _ => unreachable!(),
                    };
                }
            });
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, |ga| {
            ga.iter_mut().zip(g).for_each(|(acc, &gv)| *acc += c * gv);
        }),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, nodes, *a, |ga| {
            ga.iter_mut().zip(g).for_each(|(acc, &gv)| *acc += gv);
        }),
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            accumulate(grads, nodes, *a, |ga| {
                let bt = transpose_raw(tb.data(), k, n);
                let d = matmul_raw(g, &bt, m, n, k);
                ga.iter_mut().zip(d).for_each(|(acc, v)| *acc += v);
            });
            accumulate(grads, nodes, *b, |gb| {
                let at = transpose_raw(ta.data(), m, k);
                let d = matmul_raw(&at, g, k, m, n);
                gb.iter_mut().zip(d).for_each(|(acc, v)| *acc += v);
            });
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[1], out.shape()[0]);
            accumulate(grads, nodes, *a, |ga| {
                // out is c×r, input is r×c
                let d = transpose_raw(g, c, r);
                ga.iter_mut().zip(d).for_each(|(acc, v)| *acc += v);
            });
        }
        Op::Reduce { kind, input, axis } => {
            let t = &nodes[*input].value;
            accumulate(grads, nodes, *input, |ga| match axis {
                None => {
                    let v = match kind {
                        ReduceKind::Sum => g[0],
                        ReduceKind::Mean => g[0] / t.len() as f64,
                    };
                    ga.iter_mut().for_each(|acc| *acc += v);
                }
                Some(ax) => {
                    let (outer, n, inner) = axis_split(t.shape(), *ax);
                    let scale = match kind {
                        ReduceKind::Sum => 1.0,
                        ReduceKind::Mean => 1.0 / n as f64,
                    };
                    for o in 0..outer {
                        for j in 0..n {
                            for q in 0..inner {
                                ga[(o * n + j) * inner + q] += scale * g[o * inner + q];
                            }
                        }
                    }
                }
            });
        }
        Op::Slice { input, axis, start } => {
            let t = &nodes[*input].value;
            let (outer, n, inner) = axis_split(t.shape(), *axis);
            let len = out.shape()[*axis];
            accumulate(grads, nodes, *input, |ga| {
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    for q in 0..len * inner {
                        ga[dst + q] += g[src + q];
                    }
                }
            });
        }
        Op::Select { input, axis, index } => {
            let t = &nodes[*input].value;
            let (outer, n, inner) = axis_split(t.shape(), *axis);
            accumulate(grads, nodes, *input, |ga| {
                for o in 0..outer {
                    for q in 0..inner {
                        ga[(o * n + index) * inner + q] += g[o * inner + q];
                    }
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[axis + 1..].iter().product();
            let total = out.shape()[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let n = nodes[inp].value.shape()[*axis];
                accumulate(grads, nodes, inp, |ga| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        for q in 0..n * inner {
                            ga[o * n * inner + q] += g[src + q];
                        }
                    }
                });
                offset += n;
            }
        }
        Op::Pick { input, indices } => {
            let cols = nodes[*input].value.shape()[1];
            accumulate(grads, nodes, *input, |ga| {
                for (r, &j) in indices.iter().enumerate() {
                    ga[r * cols + j] += g[r];
                }
            });
        }
        Op::IndexSelect { input, indices } => {
            let t = &nodes[*input].value;
            let inner = if t.shape()[0] == 0 { 0 } else { t.len() / t.shape()[0] };
            accumulate(grads, nodes, *input, |ga| {
                for (k, &r) in indices.iter().enumerate() {
                    for q in 0..inner {
                        ga[r * inner + q] += g[k * inner + q];
                    }
                }
            });
        }
    }
}

/// Per-column mean and population standard deviation of a `B×d` batch.
///
/// The std has an infinite derivative at zero; use a `sqrt_eps`-based
/// statistic when differentiating through possibly constant columns.
pub fn batch_stats(tape: &Tape, z: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(z)?;
    if shape.len() != 2 {
        return shape_err(format!("batch_stats needs B×d, got {shape:?}"));
    }
    if shape[0] < 2 {
        return Err(Error::DegenerateBatch(format!("batch_stats needs B >= 2, got {}", shape[0])));
    }
    let mean = tape.mean(z, Some(0))?;
    let centered = tape.sub(z, tape.reshape(mean, &[1, shape[1]])?)?;
    let var = tape.mean(tape.square(centered)?, Some(0))?;
    Ok((mean, tape.sqrt(var)?))
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Compares the tape gradient of a scalar function with central finite
/// differences. The relative error per coordinate is
/// `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step must be positive, got {h}")));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.leaf(point);
        let out = f(&tape, xv)?;
        let value = tape.value(out)?.item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("function value {value} is not finite")));
        }
        Ok(value)
    };

    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&tape, xv)?;
    let value = tape.value(loss)?.item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("function value {value} is not finite")));
    }
    tape.backward(loss)?;
    let analytic = tape.grad(xv)?;

    let mut numeric = Tensor::zeros(x.shape());
    let mut max_rel: f64 = 0.0;
    for k in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[k] += h;
        let mut minus = x.clone();
        minus.data_mut()[k] -= h;
        let n = (eval(plus)? - eval(minus)?) / (2.0 * h);
        numeric.data_mut()[k] = n;
        let a = analytic.data()[k];
        max_rel = max_rel.max((a - n).abs() / (a.abs() + n.abs()).max(1e-12));
    }
    Ok(GradCheckReport {
        max_relative_error: max_rel,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_relu_examples() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(&[1.0, 2.0]));
        let b = tape.constant(Tensor::vector(&[3.0, 4.0]));
        assert_eq!(tape.value(tape.add(a, b).unwrap()).unwrap().data(), &[4.0, 6.0]);
        let x = tape.constant(Tensor::vector(&[-1.0, 0.0, 2.0]));
        assert_eq!(tape.value(tape.relu(x).unwrap()).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn square_backward() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[3.0]));
        let y = tape.sum(tape.square(x).unwrap(), None).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[0.0, 1.0]));
        let y = tape.sum(tape.relu(x).unwrap(), None).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn broadcast_trailing_singleton() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.leaf(t(&[2, 1], &[10., 20.]));
        let c = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &[10., 20., 30., 80., 100., 120.]);
        tape.backward(tape.sum(c, None).unwrap()).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[6.0, 15.0]);
        assert_eq!(tape.grad(a).unwrap().data(), &[10., 10., 10., 20., 20., 20.]);
    }

    #[test]
    fn illegal_broadcast_is_a_shape_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn sqrt_eps_requires_positive_eps() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(&[1.0]));
        assert!(tape.sqrt_eps(a, 0.0).is_err());
        let y = tape.sqrt_eps(a, 3.0).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(tape.value(tape.matmul(i2, m).unwrap()).unwrap().data(), &[1., 2., 3., 4.]);
        let a = tape.constant(t(&[1, 2], &[1., 0.]));
        let b = tape.constant(t(&[2, 1], &[0., 5.]));
        assert_eq!(tape.value(tape.matmul(a, b).unwrap()).unwrap().data(), &[0.0]);
        assert!(matches!(tape.matmul(a, a), Err(Error::Shape(_))));
    }

    #[test]
    fn reduce_examples() {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::vector(&[2., 4., 6.]));
        assert_eq!(tape.value(tape.mean(v, None).unwrap()).unwrap().item().unwrap(), 4.0);
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(tape.value(tape.sum(m, Some(0)).unwrap()).unwrap().data(), &[4., 6.]);
        assert!(matches!(tape.sum(m, Some(2)), Err(Error::Shape(_))));

        let tape = Tape::new();
        let ab = tape.leaf(Tensor::vector(&[7.0, -3.0]));
        tape.backward(tape.mean(ab, None).unwrap()).unwrap();
        assert_eq!(tape.grad(ab).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn batch_stats_examples() {
        let tape = Tape::new();
        let z = tape.constant(t(&[2, 1], &[1., 3.]));
        let (mean, std) = batch_stats(&tape, z).unwrap();
        assert_eq!(tape.value(mean).unwrap().data(), &[2.0]);
        assert_eq!(tape.value(std).unwrap().data(), &[1.0]);

        let c = tape.constant(t(&[3, 2], &[5., 1., 5., 2., 5., 3.]));
        let (_, std) = batch_stats(&tape, c).unwrap();
        assert_eq!(tape.value(std).unwrap().data()[0], 0.0);

        let centered = tape.constant(t(&[2, 2], &[1., -2., -1., 2.]));
        let (mean, _) = batch_stats(&tape, centered).unwrap();
        assert_eq!(tape.value(mean).unwrap().data(), &[0.0, 0.0]);

        let one = tape.constant(t(&[1, 2], &[1., 2.]));
        assert!(matches!(batch_stats(&tape, one), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1., 2., 3.]));
        tape.backward(tape.sum(x, None).unwrap()).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 1., 1.]);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1., 2.]));
        let loss = tape.mean(tape.square(x).unwrap(), None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn detached_branch_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1., 2.]));
        let sq = tape.square(x).unwrap();
        let frozen = tape.detach(sq).unwrap();
        let loss = tape.sum(tape.mul(frozen, frozen).unwrap(), None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn off_path_grad_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1., 2.]));
        let unused = tape.leaf(Tensor::vector(&[5.]));
        tape.backward(tape.sum(x, None).unwrap()).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = tape.sum(x, None).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));

        let other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(Error::Tape(_))));

        tape.clear();
        assert!(tape.is_empty());
        assert!(matches!(tape.value(x), Err(Error::Tape(_))));
        let z = tape.leaf(Tensor::scalar(2.0));
        let sq = tape.square(z).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(z).unwrap().data(), &[4.0]);
    }

    #[test]
    fn slicing_and_concat_route_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3, 2], &(0..12).map(f64::from).collect::<Vec<_>>()));
        let s = tape.slice(x, 1, 1, 2).unwrap();
        assert_eq!(tape.shape(s).unwrap(), vec![2, 2, 2]);
        assert_eq!(tape.value(s).unwrap().data(), &[2., 3., 4., 5., 8., 9., 10., 11.]);
        let sel = tape.select(x, 1, 0).unwrap();
        assert_eq!(tape.value(sel).unwrap().data(), &[0., 1., 6., 7.]);
        let cat = tape.concat(&[sel, sel], 1).unwrap();
        assert_eq!(tape.value(cat).unwrap().data(), &[0., 1., 0., 1., 6., 7., 6., 7.]);
        let loss = tape.add(tape.sum(s, None).unwrap(), tape.sum(cat, None).unwrap()).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(
            tape.grad(x).unwrap().data(),
            &[2., 2., 1., 1., 1., 1., 2., 2., 1., 1., 1., 1.]
        );
    }

    #[test]
    fn pick_and_index_select() {
        let tape = Tape::new();
        let q = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let p = tape.pick(q, &[2, 0]).unwrap();
        assert_eq!(tape.value(p).unwrap().data(), &[3., 4.]);
        let r = tape.index_select(q, &[1, 1]).unwrap();
        assert_eq!(tape.value(r).unwrap().data(), &[4., 5., 6., 4., 5., 6.]);
        assert!(matches!(tape.pick(q, &[3, 0]), Err(Error::Domain(_))));
        let loss = tape.add(tape.sum(p, None).unwrap(), tape.sum(r, None).unwrap()).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(q).unwrap().data(), &[0., 0., 1., 3., 2., 2.]);
    }

    #[test]
    fn grad_check_examples() {
        let x = Tensor::vector(&[0.3, -1.2, 1.9, 0.05]);
        let sq = grad_check(|t, v| t.sum(t.square(v)?, None), &x, 1e-5).unwrap();
        assert!(sq.max_relative_error < 1e-8, "{}", sq.max_relative_error);
        let mean = grad_check(|t, v| t.mean(v, None), &x, 1e-5).unwrap();
        assert!(mean.max_relative_error < 1e-10);

        let detached = grad_check(|t, v| t.sum(t.square(t.detach(v)?)?, None), &x, 1e-5).unwrap();
        assert!(detached.analytic.data().iter().all(|&g| g == 0.0));
        assert!(detached.numeric.data().iter().any(|&g| g != 0.0));
        assert!(detached.max_relative_error > 0.5);

        let bad = grad_check(|t, v| t.div(v, t.constant(Tensor::vector(&[0.0; 4]))).and_then(|q| t.sum(q, None)), &x, 1e-5);
        assert!(matches!(bad, Err(Error::Numeric(_))));
    }
}
