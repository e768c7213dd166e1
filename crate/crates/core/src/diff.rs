//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in exact reverse order and
//! accumulates gradients additively. Leaves are either trainable (gradients
//! are produced for them) or constant; [`Var::stop_gradient`] re-enters a value
//! as a constant so nothing flows back through it.

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};

/// Contiguous row-major tensor. A scalar has shape `[]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape { op: "tensor", lhs: shape, rhs: vec![data.len()] });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c = a(m×k) · b(k×n)` with arbitrary strides, via the blocked GEMM kernel.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the given extents and
    // strides (checked above); `c` is row-major m×n and does not alias a or b.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major 2-D matrix product without recording.
pub fn matmul_plain(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    if m * k * n > 0 {
        gemm(m, k, n, &a.data, (k as isize, 1), &b.data, (n as isize, 1), &mut out, false);
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smooth L1 with transition at `beta`.
#[inline]
pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

#[inline]
fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Right-aligned broadcast compatibility: every source dim equals the target
/// dim or is 1.
fn broadcast_compatible(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let off = to.len() - from.len();
    from.iter().enumerate().all(|(i, &d)| d == 1 || d == to[off + i])
}

/// Index into the broadcast source for each target element.
fn broadcast_index_map(from: &[usize], to: &[usize]) -> Vec<usize> {
    let off = to.len() - from.len();
    let mut src_strides = vec![0usize; to.len()];
    let mut stride = 1;
    for i in (0..from.len()).rev() {
        src_strides[off + i] = if from[i] == 1 { 0 } else { stride };
        stride *= from[i];
    }
    let total: usize = to.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; to.len()];
    let mut cur = 0usize;
    for _ in 0..total {
        out.push(cur);
        for d in (0..to.len()).rev() {
            idx[d] += 1;
            cur += src_strides[d];
            if idx[d] < to[d] {
                break;
            }
            cur -= src_strides[d] * to[d];
            idx[d] = 0;
        }
    }
    out
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Recip(usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Softplus(usize),
    Sigmoid(usize),
    Softmax(usize, usize),
    SmoothL1(usize, f64),
    Broadcast(usize, Vec<usize>),
    Reshape(usize),
    IndexRows(usize, Vec<usize>),
    CumsumExclusive(usize, usize),
    ClampMin(usize, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward/backward pass. Single-owner.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; `None` when no gradient
    /// reached it (constants, stop-gradient inputs, unused leaves).
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf: gradients are produced for it.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Back-propagates from the scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar output, got shape {:?}", out.value.shape)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::full(&out.value.shape, 1.0));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            let mut acc = |target: usize, delta: Tensor| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip(val(*b), |g, y| g * y));
                    acc(*b, g.zip(val(*a), |g, x| g * x));
                }
                Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
                Op::AddScalar(a) => acc(*a, g.clone()),
                Op::Recip(a) => acc(*a, g.zip(&node.value, |g, y| -g * y * y)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                    if nodes[*a].needs_grad {
                        // dA = G · Bᵀ
                        let mut da = vec![0.0; m * k];
                        if m * k * n > 0 {
                            gemm(m, n, k, &g.data, (n as isize, 1), &bv.data, (1, n as isize), &mut da, false);
                        }
                        acc(*a, Tensor { shape: av.shape.clone(), data: da });
                    }
                    if nodes[*b].needs_grad {
                        // dB = Aᵀ · G
                        let mut db = vec![0.0; k * n];
                        if m * k * n > 0 {
                            gemm(k, m, n, &av.data, (1, k as isize), &g.data, (n as isize, 1), &mut db, false);
                        }
                        acc(*b, Tensor { shape: bv.shape.clone(), data: db });
                    }
                }
                Op::Sum(a) => {
                    let s = g.item();
                    acc(*a, Tensor::full(&val(*a).shape, s));
                }
                Op::Mean(a) => {
                    let n = val(*a).len().max(1) as f64;
                    acc(*a, Tensor::full(&val(*a).shape, g.item() / n));
                }
                Op::SumAxis(a, axis) => {
                    let shape = &val(*a).shape;
                    let (outer, n, inner) = axis_split(shape, *axis);
                    let mut d = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        for i in 0..n {
                            let dst = &mut d[(o * n + i) * inner..(o * n + i + 1) * inner];
                            dst.copy_from_slice(&g.data[o * inner..(o + 1) * inner]);
                        }
                    }
                    acc(*a, Tensor { shape: shape.clone(), data: d });
                }
                Op::Exp(a) => acc(*a, g.zip(&node.value, |g, y| g * y)),
                Op::Log(a) => acc(*a, g.zip(val(*a), |g, x| g / x)),
                Op::Relu(a) => acc(*a, g.zip(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
                Op::Softplus(a) => acc(*a, g.zip(val(*a), |g, x| g * sigmoid(x))),
                Op::Sigmoid(a) => acc(*a, g.zip(&node.value, |g, y| g * y * (1.0 - y))),
                Op::Softmax(a, axis) => {
                    let y = &node.value;
                    let (outer, n, inner) = axis_split(&y.shape, *axis);
                    let mut d = vec![0.0; y.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let dot: f64 = (0..n).map(|i| g.data[idx(i)] * y.data[idx(i)]).sum();
                            for i in 0..n {
                                d[idx(i)] = y.data[idx(i)] * (g.data[idx(i)] - dot);
                            }
                        }
                    }
                    acc(*a, Tensor { shape: y.shape.clone(), data: d });
                }
                Op::SmoothL1(a, beta) => acc(*a, g.zip(val(*a), |g, x| g * smooth_l1_grad(x, *beta))),
                Op::Broadcast(a, from) => {
                    let map = broadcast_index_map(from, &node.value.shape);
                    let mut d = vec![0.0; from.iter().product()];
                    for (gi, &si) in g.data.iter().zip(&map) {
                        d[si] += gi;
                    }
                    acc(*a, Tensor { shape: from.clone(), data: d });
                }
                Op::Reshape(a) => acc(*a, Tensor { shape: val(*a).shape.clone(), data: g.data.clone() }),
                Op::IndexRows(a, rows) => {
                    let src = val(*a);
                    let cols = src.shape[1];
                    let mut d = vec![0.0; src.len()];
                    for (r, &s) in rows.iter().enumerate() {
                        let gr = &g.data[r * cols..(r + 1) * cols];
                        for (dst, v) in d[s * cols..(s + 1) * cols].iter_mut().zip(gr) {
                            *dst += v;
                        }
                    }
                    acc(*a, Tensor { shape: src.shape.clone(), data: d });
                }
                Op::CumsumExclusive(a, axis) => {
                    // y_i = Σ_{j<i} x_j  ⇒  dx_j = Σ_{i>j} g_i
                    let (outer, n, inner) = axis_split(&node.value.shape, *axis);
                    let mut d = vec![0.0; node.value.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let mut run = 0.0;
                            for i in (0..n).rev() {
                                let idx = (o * n + i) * inner + j;
                                d[idx] = run;
                                run += g.data[idx];
                            }
                        }
                    }
                    acc(*a, Tensor { shape: node.value.shape.clone(), data: d });
                }
                Op::ClampMin(a, lo) => acc(*a, g.zip(val(*a), |g, x| if x > *lo { g } else { 0.0 })),
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    /// Scalar value (one-element tensors).
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'t>> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::Numerical(format!("non-finite value produced by {op:?}")));
        }
        let needs = inputs.iter().any(|&i| self.tape.needs(i));
        Ok(self.tape.push(value, op, needs))
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::Shape { op, lhs: a, rhs: b });
        }
        Ok(())
    }

    /// Value re-entered as a constant: gradients stop here.
    pub fn stop_gradient(&self) -> Var<'t> {
        let v = self.value().clone();
        self.tape.constant(v)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "add")?;
        let v = self.value().zip(&other.value(), |a, b| a + b);
        self.record(v, Op::Add(self.id, other.id), &[self.id, other.id])
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "sub")?;
        let v = self.value().zip(&other.value(), |a, b| a - b);
        self.record(v, Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "mul")?;
        let v = self.value().zip(&other.value(), |a, b| a * b);
        self.record(v, Op::Mul(self.id, other.id), &[self.id, other.id])
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        let v = self.value().map(|a| a * s);
        self.record(v, Op::Scale(self.id, s), &[self.id])
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'t>> {
        let v = self.value().map(|a| a + s);
        self.record(v, Op::AddScalar(self.id), &[self.id])
    }

    pub fn recip(&self) -> Result<Var<'t>> {
        let v = self.value().map(|a| 1.0 / a);
        self.record(v, Op::Recip(self.id), &[self.id])
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = matmul_plain(&self.value(), &other.value())?;
        self.record(v, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().data.iter().sum());
        self.record(v, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let (s, n) = {
            let x = self.value();
            (x.data.iter().sum::<f64>(), x.len())
        };
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        self.record(Tensor::scalar(s / n as f64), Op::Mean(self.id), &[self.id])
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value().clone();
        if axis >= x.shape.len() {
            return Err(Error::Shape { op: "sum_axis", lhs: x.shape.clone(), rhs: vec![axis] });
        }
        let (outer, n, inner) = axis_split(&x.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &x.data[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = x.shape.clone();
        shape.remove(axis);
        self.record(Tensor { shape, data: out }, Op::SumAxis(self.id, axis), &[self.id])
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        let v = self.value().map(f64::exp);
        self.record(v, Op::Exp(self.id), &[self.id])
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let v = self.value().map(f64::ln);
        self.record(v, Op::Log(self.id), &[self.id])
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        let v = self.value().map(|x| x.max(0.0));
        self.record(v, Op::Relu(self.id), &[self.id])
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        let v = self.value().map(softplus);
        self.record(v, Op::Softplus(self.id), &[self.id])
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        let v = self.value().map(sigmoid);
        self.record(v, Op::Sigmoid(self.id), &[self.id])
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value().clone();
        if axis >= x.shape.len() {
            return Err(Error::Shape { op: "softmax", lhs: x.shape.clone(), rhs: vec![axis] });
        }
        let (outer, n, inner) = axis_split(&x.shape, axis);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let m = (0..n).map(|i| x.data[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..n {
                    let e = (x.data[idx(i)] - m).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    out[idx(i)] /= z;
                }
            }
        }
        let shape = x.shape.clone();
        self.record(Tensor { shape, data: out }, Op::Softmax(self.id, axis), &[self.id])
    }

    pub fn smooth_l1(&self, beta: f64) -> Result<Var<'t>> {
        if !(beta > 0.0) {
            return Err(Error::InvalidInput(format!("smooth_l1 beta must be positive, got {beta}")));
        }
        let v = self.value().map(|x| smooth_l1(x, beta));
        self.record(v, Op::SmoothL1(self.id, beta), &[self.id])
    }

    /// Numpy-style broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value().clone();
        if !broadcast_compatible(&x.shape, shape) {
            return Err(Error::Shape { op: "broadcast", lhs: x.shape.clone(), rhs: shape.to_vec() });
        }
        let map = broadcast_index_map(&x.shape, shape);
        let data = map.iter().map(|&i| x.data[i]).collect();
        let from = x.shape.clone();
        self.record(Tensor { shape: shape.to_vec(), data }, Op::Broadcast(self.id, from), &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value().clone();
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::Shape { op: "reshape", lhs: x.shape.clone(), rhs: shape.to_vec() });
        }
        self.record(Tensor { shape: shape.to_vec(), data: x.data }, Op::Reshape(self.id), &[self.id])
    }

    /// Gathers rows of a 2-D tensor; repeated indices are allowed and their
    /// gradients accumulate.
    pub fn index_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let x = self.value().clone();
        if x.shape.len() != 2 || rows.iter().any(|&r| r >= x.shape[0]) {
            return Err(Error::Shape { op: "index_rows", lhs: x.shape.clone(), rhs: vec![rows.iter().copied().max().unwrap_or(0)] });
        }
        let cols = x.shape[1];
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(&x.data[r * cols..(r + 1) * cols]);
        }
        self.record(Tensor { shape: vec![rows.len(), cols], data }, Op::IndexRows(self.id, rows.to_vec()), &[self.id])
    }

    /// `y_i = Σ_{j<i} x_j` along `axis`.
    pub fn cumsum_exclusive(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value().clone();
        if axis >= x.shape.len() {
            return Err(Error::Shape { op: "cumsum", lhs: x.shape.clone(), rhs: vec![axis] });
        }
        let (outer, n, inner) = axis_split(&x.shape, axis);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let mut run = 0.0;
                for i in 0..n {
                    let idx = (o * n + i) * inner + j;
                    out[idx] = run;
                    run += x.data[idx];
                }
            }
        }
        let shape = x.shape.clone();
        self.record(Tensor { shape, data: out }, Op::CumsumExclusive(self.id, axis), &[self.id])
    }

    /// `max(x, lo)`; zero gradient where clamped.
    pub fn clamp_min(&self, lo: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x.max(lo));
        self.record(v, Op::ClampMin(self.id, lo), &[self.id])
    }
}

/// Denominator floor for [`grad_check`]'s relative error, so coordinates with
/// (near-)zero gradient are judged on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compares tape gradients of the scalar `f` at `input` against central
/// finite differences. Returns the maximum relative error over coordinates,
/// `|g − fd| / max(|g|, |fd|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside [1e-7, 1e-4]")));
    }
    let eval = |x: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(x);
        let out = f(&tape, v)?;
        let val = out.value();
        if val.len() != 1 {
            return Err(Error::Contract(format!("grad_check needs a scalar function, got shape {:?}", val.shape)));
        }
        Ok(val.item())
    };
    let tape = Tape::new();
    let x = tape.param(input.clone());
    let out = f(&tape, x)?;
    if out.value().len() != 1 {
        return Err(Error::Contract(format!("grad_check needs a scalar function, got shape {:?}", out.shape())));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));

    let mut worst: f64 = 0.0;
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data[i] += eps;
        let mut minus = input.clone();
        minus.data[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data[i];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 5], 3.7));
        let y = x.softmax(1).unwrap();
        assert!(y.value().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn smooth_l1_piecewise_values() {
        for beta in [0.5, 1.0, 2.0] {
            assert_eq!(smooth_l1(0.0, beta), 0.0);
            assert!((smooth_l1(2.0 * beta, beta) - 1.5 * beta).abs() < 1e-15);
            assert!((smooth_l1(-2.0 * beta, beta) - 1.5 * beta).abs() < 1e-15);
        }
        assert_eq!(smooth_l1(0.5, 1.0), 0.125);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let tape = Tape::new();
        let a = t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i = t2(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let y = tape.constant(i).matmul(tape.constant(a.clone())).unwrap();
        assert_eq!(*y.value(), a);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        let msg = a.matmul(a).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.5, -2.0]));
        // f = Σ (x + x·x) → df/dx = 1 + 2x
        let y = x.add(x.mul(x).unwrap()).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[4.0, -3.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![2.0, 3.0]));
        let target = x.scale(2.0).unwrap().stop_gradient();
        let loss = x.sub(target).unwrap().mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        // d/dx Σ (x − c)·x with c constant = 2x − c = 2x − 2x = 0
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0]);
        assert!(g.wrt(target).is_none());
    }

    #[test]
    fn broadcast_sum_gradient_counts_copies() {
        let tape = Tape::new();
        let b = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = b.broadcast_to(&[4, 3]).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(b).unwrap().shape(), &[3]);
        assert_eq!(g.wrt(b).unwrap().data(), &[4.0, 4.0, 4.0]);
        assert!(b.broadcast_to(&[4, 2]).is_err());
    }

    #[test]
    fn cumsum_exclusive_values() {
        let tape = Tape::new();
        let x = tape.constant(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(x.cumsum_exclusive(1).unwrap().value().data(), &[0.0, 1.0, 3.0, 0.0, 4.0, 9.0]);
        assert_eq!(x.cumsum_exclusive(0).unwrap().value().data(), &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn grad_check_of_sum_of_squares() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.9, -0.4]);
        let err = grad_check(|_, v| v.mul(v)?.sum(), &x, 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps_and_non_scalar() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|_, v| v.sum(), &x, 1e-2).is_err());
        let y = Tensor::vector(vec![1.0, 2.0]);
        assert!(matches!(grad_check(|_, v| v.exp(), &y, 1e-6), Err(Error::Contract(_))));
    }

    #[test]
    fn debug_builds_reject_non_finite_results() {
        if cfg!(debug_assertions) {
            let tape = Tape::new();
            let x = tape.constant(Tensor::vector(vec![0.0]));
            assert!(matches!(x.log(), Err(Error::Numerical(_))));
        }
    }
}
