//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Var::backward`] walks the records in reverse creation order, which is a
//! valid topological order because a node can only reference nodes created
//! before it. The tape is dropped after the backward pass.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::array::{Array, Mask};
use super::kernels;
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand is a single value.
    Scalar,
    /// Right operand has the length of the left operand's last axis.
    Row,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    Add { a: usize, b: usize, bc: Broadcast },
    Sub { a: usize, b: usize, bc: Broadcast },
    Mul { a: usize, b: usize, bc: Broadcast },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    MatMul { a: usize, b: usize },
    BatchMatMul { a: usize, b: usize, transpose_b: bool },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Exp { a: usize },
    Log { a: usize },
    XLogX { a: usize },
    Relu { a: usize },
    MaskedSoftmax { a: usize },
    LayerNorm { a: usize, inv_std: Vec<f64> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Reshape { a: usize },
    Sum { a: usize },
    Mean { a: usize },
}

struct Node {
    value: Rc<Array>,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_rc(&self, id: usize) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var<'_>, NumericsError> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                context: format!("output of `{op_name}` at flat index {index}"),
            });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents(&op).iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push(Array::from_parts(shape, data), op, requires_grad))
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf | Op::Detach => Vec::new(),
        Op::Add { a, b, .. }
        | Op::Sub { a, b, .. }
        | Op::Mul { a, b, .. }
        | Op::MatMul { a, b }
        | Op::BatchMatMul { a, b, .. } => vec![*a, *b],
        Op::Scale { a, .. }
        | Op::AddScalar { a }
        | Op::Sigmoid { a }
        | Op::Tanh { a }
        | Op::Exp { a }
        | Op::Log { a }
        | Op::XLogX { a }
        | Op::Relu { a }
        | Op::MaskedSoftmax { a }
        | Op::LayerNorm { a, .. }
        | Op::Slice { a, .. }
        | Op::Reshape { a }
        | Op::Sum { a }
        | Op::Mean { a } => vec![*a],
        Op::Concat { parts, .. } => parts.clone(),
    }
}

fn broadcast_kind(op: &'static str, lhs: &Array, rhs: &Array) -> Result<Broadcast, NumericsError> {
    if lhs.shape() == rhs.shape() {
        Ok(Broadcast::Same)
    } else if rhs.len() == 1 {
        Ok(Broadcast::Scalar)
    } else if rhs.len() == lhs.last_dim() && rhs.shape().iter().rev().skip(1).all(|&d| d == 1) {
        Ok(Broadcast::Row)
    } else {
        Err(NumericsError::shape(op, &[lhs.shape(), rhs.shape()]))
    }
}

#[inline]
fn rhs_index(bc: Broadcast, i: usize, cols: usize) -> usize {
    match bc {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Row => i % cols,
    }
}

fn is_broadcastable_lhs(lhs: &Array, rhs: &Array) -> bool {
    lhs.len() < rhs.len() && broadcast_kind("", rhs, lhs).is_ok()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Shared view of the value.
    pub fn value(&self) -> Rc<Array> {
        self.tape.value_rc(self.id)
    }

    /// Borrowed view of the value; do not hold across further ops.
    pub fn value_ref(&self) -> Ref<'_, Array> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.as_ref())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize, Broadcast) -> Op,
    ) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let b = other.value();
        let bc = broadcast_kind(name, &a, &b)?;
        let cols = a.last_dim();
        let bd = b.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[rhs_index(bc, i, cols)]))
            .collect();
        self.tape
            .record(name, a.shape().to_vec(), data, make(self.id, other.id, bc))
    }

    /// Elementwise sum; either side may be a scalar or a trailing-axis row.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        if is_broadcastable_lhs(&self.value(), &other.value()) {
            return other.add(self);
        }
        self.binary(other, "add", |x, y| x + y, |a, b, bc| Op::Add { a, b, bc })
    }

    /// Elementwise difference; only the right side may broadcast.
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        if is_broadcastable_lhs(&self.value(), &other.value()) {
            return other.sub(self)?.neg();
        }
        self.binary(other, "sub", |x, y| x - y, |a, b, bc| Op::Sub { a, b, bc })
    }

    /// Elementwise product; either side may be a scalar or a trailing-axis row.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        if is_broadcastable_lhs(&self.value(), &other.value()) {
            return other.mul(self);
        }
        self.binary(other, "mul", |x, y| x * y, |a, b, bc| Op::Mul { a, b, bc })
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * c).collect();
        self.tape
            .record("scale", a.shape().to_vec(), data, Op::Scale { a: self.id, c })
    }

    pub fn neg(self) -> Result<Var<'t>, NumericsError> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let data = a.data().iter().map(|x| x + c).collect();
        self.tape
            .record("add_scalar", a.shape().to_vec(), data, Op::AddScalar { a: self.id })
    }

    /// `[m, k] × [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let b = other.value();
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(NumericsError::shape("matmul", &[a.shape(), b.shape()]));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(a.data(), b.data(), &mut out, m, k, n);
        self.tape.record(
            "matmul",
            vec![m, n],
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
        )
    }

    /// Batched product over the leading axis: `[B, m, k] × [B, k, n]`, or
    /// `[B, m, k] × [B, n, k]ᵀ` when `transpose_b` is set.
    pub fn bmm(self, other: Var<'t>, transpose_b: bool) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let b = other.value();
        let bad = || NumericsError::shape("bmm", &[a.shape(), b.shape()]);
        if a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bk, n) = if transpose_b {
            (b.shape()[2], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[2])
        };
        if bk != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ab = &a.data()[i * m * k..(i + 1) * m * k];
            let bb = &b.data()[i * k * n..(i + 1) * k * n];
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                kernels::gemm_nt(ab, bb, ob, m, k, n);
            } else {
                kernels::gemm_nn(ab, bb, ob, m, k, n);
            }
        }
        self.tape.record(
            "bmm",
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                transpose_b,
            },
        )
    }

    fn unary(self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let data = a.data().iter().map(|&x| f(x)).collect();
        self.tape.record(name, a.shape().to_vec(), data, op)
    }

    pub fn sigmoid(self) -> Result<Var<'t>, NumericsError> {
        self.unary("sigmoid", kernels::sigmoid, Op::Sigmoid { a: self.id })
    }

    pub fn tanh(self) -> Result<Var<'t>, NumericsError> {
        self.unary("tanh", f64::tanh, Op::Tanh { a: self.id })
    }

    pub fn exp(self) -> Result<Var<'t>, NumericsError> {
        self.unary("exp", f64::exp, Op::Exp { a: self.id })
    }

    /// Natural logarithm; non-positive inputs are an error.
    pub fn log(self) -> Result<Var<'t>, NumericsError> {
        if let Some(i) = self.value().data().iter().position(|&x| x <= 0.0) {
            return Err(NumericsError::Domain {
                op: "log",
                index: i,
            });
        }
        self.unary("log", f64::ln, Op::Log { a: self.id })
    }

    /// `x·ln x` with the convention `0·ln 0 = 0`; inputs must be non-negative.
    pub fn xlogx(self) -> Result<Var<'t>, NumericsError> {
        if let Some(i) = self.value().data().iter().position(|&x| x < 0.0) {
            return Err(NumericsError::Domain {
                op: "xlogx",
                index: i,
            });
        }
        self.unary("xlogx", kernels::xlogx, Op::XLogX { a: self.id })
    }

    pub fn relu(self) -> Result<Var<'t>, NumericsError> {
        self.unary("relu", |x| x.max(0.0), Op::Relu { a: self.id })
    }

    /// Softmax over the last axis with blocked entries forced to zero.
    ///
    /// The mask is tiled over the input. A row with every entry blocked
    /// yields all zeros.
    pub fn masked_softmax(self, mask: &Mask) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let cols = a.last_dim();
        if mask.shape().last() != Some(&cols) || !a.len().is_multiple_of(mask.len()) {
            return Err(NumericsError::shape("masked_softmax", &[a.shape(), mask.shape()]));
        }
        let mut out = vec![0.0; a.len()];
        let allowed = mask.allowed();
        for (r, (row, orow)) in a.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let moff = (r * cols) % allowed.len();
            kernels::softmax_row(row, &allowed[moff..moff + cols], orow);
        }
        self.tape.record(
            "masked_softmax",
            a.shape().to_vec(),
            out,
            Op::MaskedSoftmax { a: self.id },
        )
    }

    /// Softmax over the last axis without masking.
    pub fn softmax(self) -> Result<Var<'t>, NumericsError> {
        let cols = self.value().last_dim();
        self.masked_softmax(&Mask::none(&[cols]))
    }

    /// Normalizes each last-axis vector to zero mean and unit variance.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let cols = a.last_dim();
        let rows = a.len() / cols;
        let mut out = vec![0.0; a.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for (row, orow) in a.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, x) in orow.iter_mut().zip(row) {
                *o = (x - mean) * r;
            }
            inv_std.push(r);
        }
        self.tape.record(
            "layer_norm",
            a.shape().to_vec(),
            out,
            Op::LayerNorm { a: self.id, inv_std },
        )
    }

    /// Joins vars along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::shape("concat", &[]))?;
        let tape = first.tape;
        let values: Vec<Rc<Array>> = parts.iter().map(Var::value).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(NumericsError::shape("concat", &[&base]));
        }
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                let shapes: Vec<&[usize]> = values.iter().map(|v| v.shape()).collect();
                return Err(NumericsError::shape("concat", &shapes));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total_axis: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        tape.record(
            "concat",
            shape,
            data,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        )
    }

    /// Sub-range `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        if axis >= a.ndim() || start >= end || end > a.shape()[axis] {
            return Err(NumericsError::Slice {
                shape: a.shape().to_vec(),
                axis,
                start,
                end,
            });
        }
        let outer: usize = a.shape()[..axis].iter().product();
        let inner: usize = a.shape()[axis + 1..].iter().product();
        let len_axis = a.shape()[axis];
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len_axis * inner;
            data.extend_from_slice(&a.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = end - start;
        self.tape.record(
            "slice",
            shape,
            data,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != a.len() {
            return Err(NumericsError::shape("reshape", &[a.shape(), shape]));
        }
        self.tape
            .record("reshape", shape.to_vec(), a.data().to_vec(), Op::Reshape { a: self.id })
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(self) -> Result<Var<'t>, NumericsError> {
        let total = self.value().sum();
        self.tape.record("sum", vec![1], vec![total], Op::Sum { a: self.id })
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(self) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let m = a.sum() / a.len() as f64;
        self.tape.record("mean", vec![1], vec![m], Op::Mean { a: self.id })
    }

    /// Same value, no gradient flow to anything upstream.
    pub fn detach(self) -> Var<'t> {
        let value = (*self.value()).clone();
        self.tape.push(value, Op::Detach, false)
    }

    /// Reverse pass from this node, seeded with ones.
    pub fn backward(self) -> Gradients {
        backward(self.tape, self.id)
    }
}

/// Gradients of one backward pass, keyed by leaf.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf. Leaves that the output does not depend on get zeros.
    pub fn get(&self, var: Var<'_>) -> Array {
        self.get_id(var.id)
            .unwrap_or_else(|| Array::zeros(&var.shape()))
    }

    fn get_id(&self, id: usize) -> Option<Array> {
        let g = self.grads.get(id)?.as_ref()?;
        Some(Array::from_parts(self.shapes[id].clone(), g.clone()))
    }

    /// Moves the gradient out, if the leaf received one.
    pub fn take(&mut self, var: Var<'_>) -> Option<Array> {
        let g = self.grads.get_mut(var.id)?.take()?;
        Some(Array::from_parts(self.shapes[var.id].clone(), g))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn backward(tape: &Tape, root: usize) -> Gradients {
    let nodes = tape.nodes.borrow();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
    let mut shapes: Vec<Vec<usize>> = vec![Vec::new(); root + 1];
    grads[root] = Some(vec![1.0; nodes[root].value.len()]);

    for id in (0..=root).rev() {
        let node = &nodes[id];
        if !node.requires_grad {
            grads[id] = None;
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        let need = |p: usize| nodes[p].requires_grad;
        let val = |p: usize| nodes[p].value.as_ref();
        match &node.op {
            Op::Leaf => {
                shapes[id] = node.value.shape().to_vec();
                grads[id] = Some(g);
                continue;
            }
            Op::Detach => {}
            Op::Add { a, b, bc } | Op::Sub { a, b, bc } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if need(*a) {
                    let ga = accumulate(&mut grads, *a, g.len());
                    for (x, y) in ga.iter_mut().zip(&g) {
                        *x += y;
                    }
                }
                if need(*b) {
                    let blen = val(*b).len();
                    let cols = node.value.last_dim();
                    let gb = accumulate(&mut grads, *b, blen);
                    for (i, y) in g.iter().enumerate() {
                        gb[rhs_index(*bc, i, cols)] += sign * y;
                    }
                }
            }
            Op::Mul { a, b, bc } => {
                let av = val(*a).data();
                let bv = val(*b).data();
                let cols = node.value.last_dim();
                if need(*a) {
                    let ga = accumulate(&mut grads, *a, g.len());
                    for (i, y) in g.iter().enumerate() {
                        ga[i] += y * bv[rhs_index(*bc, i, cols)];
                    }
                }
                if need(*b) {
                    let gb = accumulate(&mut grads, *b, bv.len());
                    for (i, y) in g.iter().enumerate() {
                        gb[rhs_index(*bc, i, cols)] += y * av[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                let ga = accumulate(&mut grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(&g) {
                    *x += c * y;
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                let ga = accumulate(&mut grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(&g) {
                    *x += y;
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if need(*a) {
                    let ga = accumulate(&mut grads, *a, m * k);
                    kernels::gemm_nt(&g, bv.data(), ga, m, n, k);
                }
                if need(*b) {
                    let gb = accumulate(&mut grads, *b, k * n);
                    kernels::gemm_tn(av.data(), &g, gb, m, k, n);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                if need(*a) {
                    let ga = accumulate(&mut grads, *a, batch * m * k);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        if *transpose_b {
                            // dA = dC · B with B stored [n, k]
                            kernels::gemm_nn(gi, bi, out, m, n, k);
                        } else {
                            kernels::gemm_nt(gi, bi, out, m, n, k);
                        }
                    }
                }
                if need(*b) {
                    let gb = accumulate(&mut grads, *b, batch * k * n);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // dB = dCᵀ · A, shape [n, k]
                            kernels::gemm_tn(gi, ai, out, m, n, k);
                        } else {
                            kernels::gemm_tn(ai, gi, out, m, k, n);
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                let ga = accumulate(&mut grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                let ga = accumulate(&mut grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Exp { a } => {
                let y = node.value.data();
                let ga = accumulate(&mut grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }
            Op::Log { a } => {
                let x = val(*a).data();
                let ga = accumulate(&mut grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] / x[i];
                }
            }
            Op::XLogX { a } => {
                let x = val(*a).data();
                let ga = accumulate(&mut grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        ga[i] += g[i] * (x[i].ln() + 1.0);
                    }
                }
            }
            Op::Relu { a } => {
                let x = val(*a).data();
                let ga = accumulate(&mut grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::MaskedSoftmax { a } => {
                let y = node.value.data();
                let cols = node.value.last_dim();
                let ga = accumulate(&mut grads, *a, g.len());
                for r in 0..g.len() / cols {
                    let span = r * cols..(r + 1) * cols;
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (p, q)) in ga[span].iter_mut().zip(yr.iter().zip(gr)) {
                        *o += p * (q - dot);
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let y = node.value.data();
                let cols = node.value.last_dim();
                let ga = accumulate(&mut grads, *a, g.len());
                for (r, &rstd) in inv_std.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let mean_g = gr.iter().sum::<f64>() / cols as f64;
                    let mean_gy = yr.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>() / cols as f64;
                    for (o, (p, q)) in ga[span].iter_mut().zip(yr.iter().zip(gr)) {
                        *o += rstd * (q - mean_g - p * mean_gy);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = val(p).shape()[*axis] * inner;
                    if need(p) {
                        let gp = accumulate(&mut grads, p, outer * chunk);
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            for (x, y) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { a, axis, start } => {
                let src_shape = val(*a).shape();
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let len_axis = src_shape[*axis];
                let width = node.value.shape()[*axis] * inner;
                let ga = accumulate(&mut grads, *a, outer * len_axis * inner);
                for o in 0..outer {
                    let base = o * len_axis * inner + start * inner;
                    for (x, y) in ga[base..base + width].iter_mut().zip(&g[o * width..(o + 1) * width]) {
                        *x += y;
                    }
                }
            }
            Op::Sum { a } => {
                let n = val(*a).len();
                let ga = accumulate(&mut grads, *a, n);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
            Op::Mean { a } => {
                let n = val(*a).len();
                let ga = accumulate(&mut grads, *a, n);
                for x in ga.iter_mut() {
                    *x += g[0] / n as f64;
                }
            }
        }
    }
    Gradients { grads, shapes }
}
