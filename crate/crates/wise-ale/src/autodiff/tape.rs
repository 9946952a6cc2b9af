//! Dynamic computation graph (Wengert tape) with reverse-mode
//! differentiation.
//!
//! The tape is rebuilt for every training step: forward ops append nodes in
//! topological order, `backward` replays them in reverse and accumulates
//! gradients into the leaves marked trainable. All execution is
//! single-threaded and deterministic; matrix multiplies go through
//! `matrixmultiply::dgemm` (single-threaded), everything else is plain
//! sequential loops in index order.

use super::array::{broadcast_binary, reduce_to_shape, DenseArray};
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Inputs to `log` below this threshold are clamped (and counted) instead of
/// producing -inf; saturated sigmoids under a Bernoulli likelihood hit this.
pub const LOG_CLAMP: f64 = 1e-12;

/// Identifier of a node on the tape. Ids are assigned in insertion order, so
/// inputs always precede their consumers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf: external input or trainable parameter.
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    /// Natural log with the `LOG_CLAMP` guard; the mask records which
    /// elements were clamped (zero local gradient there).
    Log(NodeId, Vec<bool>),
    Square(NodeId),
    Neg(NodeId),
    ScalarMul(NodeId, f64),
    ScalarAdd(NodeId),
    /// Clamp to [lo, hi]; gradient passes through strictly inside the range.
    Clamp(NodeId, f64, f64),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    /// Log-sum-exp over the last axis (axis removed from the output shape).
    LogSumExpLast(NodeId),
    ConcatLast(NodeId, NodeId),
    Reshape(NodeId),
}

struct Node {
    op: Op,
    value: DenseArray,
}

/// Wengert tape: operation records plus the set of trainable leaf ids.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    clamp_events: u64,
}

/// Gradients of a scalar root with respect to the tape's parameters.
#[derive(Debug)]
pub struct Gradients {
    by_param: HashMap<NodeId, DenseArray>,
}

impl Gradients {
    /// Gradient for one parameter; parameters unreached by the root get a
    /// zero gradient of the parameter's shape.
    pub fn get(&self, param: NodeId) -> &DenseArray {
        &self.by_param[&param]
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            clamp_events: 0,
        }
    }

    /// Non-trainable leaf.
    pub fn input(&mut self, value: DenseArray) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Trainable leaf; its gradient is reported by `backward`.
    pub fn param(&mut self, value: DenseArray) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.params.push(id);
        id
    }

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    /// Number of log/clamp guard events since construction.
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: DenseArray) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let value = broadcast_binary(name, self.value(a), self.value(b), f)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// 2-D matrix product `[m,k]·[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        dgemm(m, k, n, va.data(), (k, 1), vb.data(), (n, 1), &mut out);
        let value = DenseArray::from_vec(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(Error::Usage(format!(
                "transpose expects a 2-D array, got shape {:?}",
                va.shape()
            )));
        }
        let value = transpose2(va);
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid_scalar);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    /// Natural log. Strictly negative inputs are a domain error; inputs in
    /// `[0, LOG_CLAMP)` are clamped to `LOG_CLAMP` and counted.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let mut clamped = vec![false; va.numel()];
        let mut data = Vec::with_capacity(va.numel());
        for (i, &x) in va.iter().enumerate() {
            if x < 0.0 {
                return Err(Error::NumericDomain {
                    op: "log",
                    detail: format!("negative input {x} at flat index {i}"),
                });
            }
            if x < LOG_CLAMP {
                clamped[i] = true;
                data.push(LOG_CLAMP.ln());
            } else {
                data.push(x.ln());
            }
        }
        self.clamp_events += clamped.iter().filter(|&&c| c).count() as u64;
        let value = DenseArray::from_vec(shape, data)?;
        Ok(self.push(Op::Log(a, clamped), value))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), value)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), value)
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| x * c);
        self.push(Op::ScalarMul(a, c), value)
    }

    pub fn scalar_add(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| x + c);
        self.push(Op::ScalarAdd(a), value)
    }

    /// Clamp to `[lo, hi]`, counting how many elements moved.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let va = self.value(a);
        let moved = va.iter().filter(|&&x| x < lo || x > hi).count() as u64;
        let value = va.map(|x| x.clamp(lo, hi));
        self.clamp_events += moved;
        self.push(Op::Clamp(a, lo, hi), value)
    }

    /// Full reduction to a scalar (empty shape).
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).iter().sum();
        self.push(Op::SumAll(a), DenseArray::scalar(s))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let s: f64 = va.iter().sum();
        let n = va.numel() as f64;
        self.push(Op::MeanAll(a), DenseArray::scalar(s / n))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let value = reduce_axis(self.value(a), axis, false)?;
        Ok(self.push(Op::SumAxis(a, axis), value))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let value = reduce_axis(self.value(a), axis, true)?;
        Ok(self.push(Op::MeanAxis(a, axis), value))
    }

    /// Log-sum-exp over the last axis, computed with the max subtracted for
    /// stability; the axis is removed from the output shape.
    pub fn logsumexp_last(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let shape = va.shape();
        if shape.is_empty() {
            return Err(Error::Usage(
                "logsumexp_last needs at least one axis".into(),
            ));
        }
        let last = shape[shape.len() - 1];
        let rows = va.numel() / last;
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &va.data()[r * last..(r + 1) * last];
            data.push(logsumexp(row));
        }
        let out_shape = shape[..shape.len() - 1].to_vec();
        let value = DenseArray::from_vec(out_shape, data)?;
        Ok(self.push(Op::LogSumExpLast(a), value))
    }

    /// Concatenate along the last axis; all other extents must match.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let compatible = sa.len() == sb.len()
            && !sa.is_empty()
            && sa[..sa.len() - 1] == sb[..sb.len() - 1];
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat_last",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (la, lb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = va.numel() / la;
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * la..(r + 1) * la]);
            data.extend_from_slice(&vb.data()[r * lb..(r + 1) * lb]);
        }
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = la + lb;
        let value = DenseArray::from_vec(out_shape, data)?;
        Ok(self.push(Op::ConcatLast(a, b), value))
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Reverse pass from a scalar root. Returns the gradient of every
    /// trainable parameter; parameters the root does not depend on get zero
    /// gradients of their own shape.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<DenseArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(DenseArray::scalar(1.0));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, reduce_to_shape(&g, self.shape_of(*a)));
                    self.accumulate(&mut grads, *b, reduce_to_shape(&g, self.shape_of(*b)));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, reduce_to_shape(&g, self.shape_of(*a)));
                    let gb = reduce_to_shape(&g, self.shape_of(*b)).map(|x| -x);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let ga = broadcast_binary("mul_bwd", &g, self.value(*b), |g, y| g * y)?;
                    let gb = broadcast_binary("mul_bwd", &g, self.value(*a), |g, x| g * x)?;
                    self.accumulate(&mut grads, *a, reduce_to_shape(&ga, self.shape_of(*a)));
                    self.accumulate(&mut grads, *b, reduce_to_shape(&gb, self.shape_of(*b)));
                }
                Op::Div(a, b) => {
                    let ga = broadcast_binary("div_bwd", &g, self.value(*b), |g, y| g / y)?;
                    self.accumulate(&mut grads, *a, reduce_to_shape(&ga, self.shape_of(*a)));
                    let ratio =
                        broadcast_binary("div_bwd", self.value(*a), self.value(*b), |x, y| {
                            -x / (y * y)
                        })?;
                    let gb = broadcast_binary("div_bwd", &g, &ratio, |g, r| g * r)?;
                    self.accumulate(&mut grads, *b, reduce_to_shape(&gb, self.shape_of(*b)));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    // dA = dC · Bᵀ  (pass B with swapped strides)
                    let mut da = vec![0.0; m * k];
                    dgemm(m, n, k, g.data(), (n, 1), vb.data(), (1, n), &mut da);
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    dgemm(k, m, n, va.data(), (1, k), g.data(), (n, 1), &mut db);
                    self.accumulate(&mut grads, *a, DenseArray::from_vec(vec![m, k], da)?);
                    self.accumulate(&mut grads, *b, DenseArray::from_vec(vec![k, n], db)?);
                }
                Op::Transpose(a) => {
                    self.accumulate(&mut grads, *a, transpose2(&g));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    self.accumulate(&mut grads, *a, g.zip(y, |g, y| g * (1.0 - y * y)));
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    self.accumulate(&mut grads, *a, g.zip(y, |g, y| g * y * (1.0 - y)));
                }
                Op::Exp(a) => {
                    let y = &self.nodes[i].value;
                    self.accumulate(&mut grads, *a, g.zip(y, |g, y| g * y));
                }
                Op::Log(a, clamped) => {
                    let x = self.value(*a);
                    let mut gx = g.clone();
                    for (j, v) in gx.data_mut().iter_mut().enumerate() {
                        *v = if clamped[j] { 0.0 } else { *v / x.data()[j] };
                    }
                    self.accumulate(&mut grads, *a, gx);
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    self.accumulate(&mut grads, *a, g.zip(x, |g, x| g * 2.0 * x));
                }
                Op::Neg(a) => {
                    self.accumulate(&mut grads, *a, g.map(|x| -x));
                }
                Op::ScalarMul(a, c) => {
                    let c = *c;
                    self.accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::ScalarAdd(a) => {
                    self.accumulate(&mut grads, *a, g.clone());
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    let (lo, hi) = (*lo, *hi);
                    self.accumulate(
                        &mut grads,
                        *a,
                        g.zip(x, |g, x| if x < lo || x > hi { 0.0 } else { g }),
                    );
                }
                Op::SumAll(a) => {
                    let gv = g.scalar_value();
                    self.accumulate(&mut grads, *a, DenseArray::full(self.shape_of(*a), gv));
                }
                Op::MeanAll(a) => {
                    let shape = self.shape_of(*a);
                    let n: usize = shape.iter().product();
                    let gv = g.scalar_value() / n as f64;
                    self.accumulate(&mut grads, *a, DenseArray::full(shape, gv));
                }
                Op::SumAxis(a, axis) => {
                    let gx = spread_axis(&g, self.shape_of(*a), *axis, 1.0);
                    self.accumulate(&mut grads, *a, gx);
                }
                Op::MeanAxis(a, axis) => {
                    let shape = self.shape_of(*a);
                    let scale = 1.0 / shape[*axis] as f64;
                    let gx = spread_axis(&g, shape, *axis, scale);
                    self.accumulate(&mut grads, *a, gx);
                }
                Op::LogSumExpLast(a) => {
                    // d lse/dx_j = softmax_j = exp(x_j - lse)
                    let x = self.value(*a);
                    let y = &self.nodes[i].value;
                    let last = x.shape()[x.shape().len() - 1];
                    let mut gx = DenseArray::zeros(x.shape());
                    for r in 0..y.numel() {
                        let gr = g.data()[r];
                        let lse = y.data()[r];
                        for j in 0..last {
                            gx.data_mut()[r * last + j] =
                                gr * (x.data()[r * last + j] - lse).exp();
                        }
                    }
                    self.accumulate(&mut grads, *a, gx);
                }
                Op::ConcatLast(a, b) => {
                    let (sa, sb) = (self.shape_of(*a), self.shape_of(*b));
                    let (la, lb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
                    let rows: usize = sa[..sa.len() - 1].iter().product();
                    let mut ga = DenseArray::zeros(sa);
                    let mut gb = DenseArray::zeros(sb);
                    for r in 0..rows {
                        let src = &g.data()[r * (la + lb)..(r + 1) * (la + lb)];
                        ga.data_mut()[r * la..(r + 1) * la].copy_from_slice(&src[..la]);
                        gb.data_mut()[r * lb..(r + 1) * lb].copy_from_slice(&src[la..]);
                    }
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Reshape(a) => {
                    let gx = g.reshaped(self.shape_of(*a).to_vec())?;
                    self.accumulate(&mut grads, *a, gx);
                }
            }
        }

        let mut by_param = HashMap::new();
        for &p in &self.params {
            let g = grads[p.0]
                .take()
                .unwrap_or_else(|| DenseArray::zeros(self.shape_of(p)));
            by_param.insert(p, g);
        }
        Ok(Gradients { by_param })
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn accumulate(&self, grads: &mut [Option<DenseArray>], id: NodeId, delta: DenseArray) {
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Numerically stable sigmoid; exact 0.5 at zero.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable log-sum-exp of a slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

fn transpose2(a: &DenseArray) -> DenseArray {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut data = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            data[c * m + r] = a.data()[r * n + c];
        }
    }
    DenseArray::from_vec(vec![n, m], data).unwrap()
}

/// C += A·B for row-major C [m,n]; A and B are given with explicit
/// (row, col) strides so transposed views need no copy.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Broadcasts `g` (shape without `axis`) back to `shape`, scaling by `scale`.
fn spread_axis(g: &DenseArray, shape: &[usize], axis: usize, scale: f64) -> DenseArray {
    let mut out = DenseArray::zeros(shape);
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for j in 0..axis_len {
            for i in 0..inner {
                out.data_mut()[(o * axis_len + j) * inner + i] =
                    g.data()[o * inner + i] * scale;
            }
        }
    }
    out
}

fn reduce_axis(a: &DenseArray, axis: usize, mean: bool) -> Result<DenseArray> {
    let shape = a.shape();
    if axis >= shape.len() {
        return Err(Error::Usage(format!(
            "reduction axis {axis} out of range for shape {shape:?}"
        )));
    }
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..axis_len {
            for i in 0..inner {
                data[o * inner + i] += a.data()[(o * axis_len + j) * inner + i];
            }
        }
    }
    if mean {
        let scale = 1.0 / axis_len as f64;
        for v in &mut data {
            *v *= scale;
        }
    }
    DenseArray::from_vec(out_shape, data)
}
