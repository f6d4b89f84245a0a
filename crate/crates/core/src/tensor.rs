//! Dense tensors on a reverse-mode gradient tape.
//!
//! Ops record themselves on a [`Tape`] as they execute; [`Tape::backward`]
//! replays the record in reverse to fill gradients. The op set is exactly
//! what the summarization model needs (matmul, pointwise nonlinearities,
//! softmax, concatenation, indexing) plus a finite-difference gradient
//! checker that the test suites use as an independent oracle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities below this are clamped before taking logs.
pub const LN_EPS: f64 = 1e-12;

/// Numeric mode for a tape. `Single` rounds every stored value through
/// `f32`; `Double` keeps full `f64`. Gradient checking always runs in
/// `Double` because finite-difference tolerances are unreachable in
/// single precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl Precision {
    fn round_vec(self, mut v: Vec<f64>) -> Vec<f64> {
        if self == Precision::Single {
            for x in &mut v {
                *x = *x as f32 as f64;
            }
        }
        v
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    DataShape {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar {
        op: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of bounds for shape {shape:?}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("gradient check: loss is not finite")]
    NonFiniteLoss,
}

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Dense row-major tensor. `grad` is filled by [`Tape::backward`] for
/// tensors with `requires_grad`.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Hadamard(TensorId, TensorId),
    /// Multiply a tensor by a scalar tensor of shape `[1]`.
    ScaleBy(TensorId, TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    LeakyRelu(TensorId, f64),
    /// Elementwise `x * mul + add`; only the multiplier matters backward.
    Affine(TensorId, f64),
    Softmax(TensorId),
    Concat(TensorId, TensorId, usize),
    /// Stack equal-length vectors as the rows of a matrix.
    StackRows(Vec<TensorId>),
    Reshape(TensorId),
    Sum(TensorId),
    /// Select one row of a matrix (embedding lookup).
    Row(TensorId, usize),
    /// Select one entry of a vector as a `[1]` tensor.
    Pick(TensorId, usize),
    /// `ln(max(x, LN_EPS))` elementwise.
    LnClamped(TensorId),
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Append-only record of executed operations. Ids index into the record,
/// and every op's inputs precede it, so reverse iteration is a valid
/// topological order for backpropagation.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        let data = self.precision.round_vec(data);
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        id
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    /// Value of a `[1]` tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].tensor.numel(), 1);
        self.nodes[id.0].tensor.data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Create a leaf tensor.
    pub fn leaf(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataShape {
                op: "leaf",
                len: data.len(),
                shape,
            });
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        self.leaf(data, shape, false)
    }

    /// Scalar constant of shape `[1]`.
    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.push(vec![1], vec![value], false, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        let numel = shape.iter().product();
        self.push(shape, vec![0.0; numel], false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    fn binary_shape_check(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_shape_check("add", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_shape_check("hadamard", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::Hadamard(a, b)))
    }

    /// Multiply every entry of `a` by the scalar tensor `s` (shape `[1]`).
    pub fn scale_by(&mut self, a: TensorId, s: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(s) != [1] {
            return Err(TensorError::NotScalar {
                op: "scale_by",
                shape: self.shape(s).to_vec(),
            });
        }
        let sv = self.data(s)[0];
        let out: Vec<f64> = self.data(a).iter().map(|x| x * sv).collect();
        let rg = self.requires(a) || self.requires(s);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::ScaleBy(a, s)))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let rg = self.requires(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rg, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.requires(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rg, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> TensorId {
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let rg = self.requires(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rg, Op::LeakyRelu(a, slope))
    }

    /// Elementwise `x * mul + add`.
    pub fn affine(&mut self, a: TensorId, mul: f64, add: f64) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x * mul + add).collect();
        let rg = self.requires(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rg, Op::Affine(a, mul))
    }

    /// Numerically stable softmax of a vector. Ties produce exactly equal
    /// probabilities because equal inputs shift to equal exponents.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                lhs: self.shape(a).to_vec(),
                rhs: vec![0],
            });
        }
        let xs = self.data(a);
        if xs.is_empty() {
            return Err(TensorError::EmptyInput { op: "softmax" });
        }
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let rg = self.requires(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::Softmax(a)))
    }

    pub fn concat(
        &mut self,
        a: TensorId,
        b: TensorId,
        axis: usize,
    ) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (a_ax, b_ax) = (sa[axis], sb[axis]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * a_ax * inner..(o + 1) * a_ax * inner]);
            out.extend_from_slice(&db[o * b_ax * inner..(o + 1) * b_ax * inner]);
        }
        let mut shape = sa.clone();
        shape[axis] = a_ax + b_ax;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, out, rg, Op::Concat(a, b, axis)))
    }

    /// Stack `k` vectors of length `d` into a `[k, d]` matrix.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::EmptyInput { op: "stack_rows" });
        }
        let d = {
            let s = self.shape(rows[0]);
            if s.len() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: s.to_vec(),
                    rhs: vec![0],
                });
            }
            s[0]
        };
        let mut out = Vec::with_capacity(rows.len() * d);
        let mut rg = false;
        for &r in rows {
            if self.shape(r) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![d],
                    rhs: self.shape(r).to_vec(),
                });
            }
            out.extend_from_slice(self.data(r));
            rg |= self.requires(r);
        }
        Ok(self.push(vec![rows.len(), d], out, rg, Op::StackRows(rows.to_vec())))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(TensorError::DataShape {
                op: "reshape",
                len: self.data(a).len(),
                shape,
            });
        }
        let out = self.data(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(shape, out, rg, Op::Reshape(a)))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.data(a).iter().sum();
        let rg = self.requires(a);
        self.push(vec![1], vec![total], rg, Op::Sum(a))
    }

    /// Select row `r` of a matrix as a vector (embedding lookup).
    pub fn row(&mut self, m: TensorId, r: usize) -> Result<TensorId, TensorError> {
        let s = self.shape(m).to_vec();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "row",
                lhs: s,
                rhs: vec![0, 0],
            });
        }
        if r >= s[0] {
            return Err(TensorError::IndexOutOfBounds {
                op: "row",
                index: r,
                shape: s,
            });
        }
        let cols = s[1];
        let out = self.data(m)[r * cols..(r + 1) * cols].to_vec();
        let rg = self.requires(m);
        Ok(self.push(vec![cols], out, rg, Op::Row(m, r)))
    }

    /// Select entry `i` of a vector as a `[1]` tensor.
    pub fn pick(&mut self, v: TensorId, i: usize) -> Result<TensorId, TensorError> {
        let s = self.shape(v).to_vec();
        if s.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: s,
                rhs: vec![0],
            });
        }
        if i >= s[0] {
            return Err(TensorError::IndexOutOfBounds {
                op: "pick",
                index: i,
                shape: s,
            });
        }
        let out = vec![self.data(v)[i]];
        let rg = self.requires(v);
        Ok(self.push(vec![1], out, rg, Op::Pick(v, i)))
    }

    /// `ln(max(x, LN_EPS))` elementwise.
    pub fn ln_clamped(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.max(LN_EPS).ln()).collect();
        let rg = self.requires(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rg, Op::LnClamped(a))
    }

    /// `W x` for a `[m, k]` matrix and a `[k]` vector.
    pub fn matvec(&mut self, w: TensorId, x: TensorId) -> Result<TensorId, TensorError> {
        let k = self.shape(x)[0];
        let col = self.reshape(x, vec![k, 1])?;
        let prod = self.matmul(w, col)?;
        let m = self.shape(prod)[0];
        self.reshape(prod, vec![m])
    }

    /// Inner product of two equal-length vectors as a `[1]` tensor.
    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_shape_check("dot", a, b)?;
        let n = self.shape(a)[0];
        let ra = self.reshape(a, vec![1, n])?;
        let rb = self.reshape(b, vec![n, 1])?;
        let prod = self.matmul(ra, rb)?;
        self.reshape(prod, vec![1])
    }

    /// Backpropagate from a scalar loss. Fills `grad` on every tensor with
    /// `requires_grad`; tensors unreachable from the loss get zero grads.
    /// Two runs over the same tape produce bitwise-identical gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    {
                        let db = self.data(b);
                        let ga = acc(&mut grads, a, m * k);
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * db[p * n + j];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    }
                    {
                        let da = self.data(a);
                        let gb = acc(&mut grads, b, k * n);
                        for p in 0..k {
                            for i in 0..m {
                                let av = da[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[p * n + j] += av * g[i * n + j];
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, a, g.len()), &g);
                    add_into(acc(&mut grads, b, g.len()), &g);
                }
                Op::Hadamard(a, b) => {
                    {
                        let db = self.data(b).to_vec();
                        let ga = acc(&mut grads, a, g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] * db[i];
                        }
                    }
                    let da = self.data(a).to_vec();
                    let gb = acc(&mut grads, b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * da[i];
                    }
                }
                Op::ScaleBy(a, s) => {
                    let sv = self.data(s)[0];
                    {
                        let ga = acc(&mut grads, a, g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] * sv;
                        }
                    }
                    let da = self.data(a);
                    let contribution: f64 = g.iter().zip(da).map(|(gi, ai)| gi * ai).sum();
                    acc(&mut grads, s, 1)[0] += contribution;
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[id].tensor.data.clone();
                    let ga = acc(&mut grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Tanh(a) => {
                    let y = self.nodes[id].tensor.data.clone();
                    let ga = acc(&mut grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.data(a).to_vec();
                    let ga = acc(&mut grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * if x[i] >= 0.0 { 1.0 } else { slope };
                    }
                }
                Op::Affine(a, mul) => {
                    let ga = acc(&mut grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * mul;
                    }
                }
                Op::Softmax(a) => {
                    let y = self.nodes[id].tensor.data.clone();
                    let dot: f64 = g.iter().zip(&y).map(|(gi, yi)| gi * yi).sum();
                    let ga = acc(&mut grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += y[i] * (g[i] - dot);
                    }
                }
                Op::Concat(a, b, axis) => {
                    let sa = self.shape(a).to_vec();
                    let sb = self.shape(b).to_vec();
                    let outer: usize = sa[..axis].iter().product();
                    let inner: usize = sa[axis + 1..].iter().product();
                    let (a_ax, b_ax) = (sa[axis], sb[axis]);
                    let a_len: usize = sa.iter().product();
                    let b_len: usize = sb.iter().product();
                    let stride = (a_ax + b_ax) * inner;
                    {
                        let ga = acc(&mut grads, a, a_len);
                        for o in 0..outer {
                            let src = &g[o * stride..o * stride + a_ax * inner];
                            add_into(&mut ga[o * a_ax * inner..(o + 1) * a_ax * inner], src);
                        }
                    }
                    let gb = acc(&mut grads, b, b_len);
                    for o in 0..outer {
                        let src = &g[o * stride + a_ax * inner..(o + 1) * stride];
                        add_into(&mut gb[o * b_ax * inner..(o + 1) * b_ax * inner], src);
                    }
                }
                Op::StackRows(rows) => {
                    let d = self.shape(rows[0])[0];
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(acc(&mut grads, r, d), &g[i * d..(i + 1) * d]);
                    }
                }
                Op::Reshape(a) => {
                    add_into(acc(&mut grads, a, g.len()), &g);
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.0].tensor.data.len();
                    let ga = acc(&mut grads, a, len);
                    for v in ga.iter_mut() {
                        *v += g[0];
                    }
                }
                Op::Row(m, r) => {
                    let cols = self.shape(m)[1];
                    let len = self.nodes[m.0].tensor.data.len();
                    let gm = acc(&mut grads, m, len);
                    add_into(&mut gm[r * cols..(r + 1) * cols], &g);
                }
                Op::Pick(v, i) => {
                    let len = self.nodes[v.0].tensor.data.len();
                    acc(&mut grads, v, len)[i] += g[0];
                }
                Op::LnClamped(a) => {
                    let x = self.data(a).to_vec();
                    let ga = acc(&mut grads, a, g.len());
                    for i in 0..g.len() {
                        if x[i] >= LN_EPS {
                            ga[i] += g[i] / x[i];
                        }
                    }
                }
            }
            if self.nodes[id].tensor.requires_grad {
                self.nodes[id].tensor.grad = Some(self.precision.round_vec(g));
            }
        }

        // Tensors never reached by the sweep still get a grad so callers
        // can read one unconditionally.
        for node in &mut self.nodes {
            if node.tensor.requires_grad && node.tensor.grad.is_none() {
                node.tensor.grad = Some(vec![0.0; node.tensor.data.len()]);
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: TensorId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Analytic gradients of `f` at `params`, computed by taping `f` and
/// running backward. Each param is `(shape, data)`.
pub fn analytic_gradient<F, E>(
    f: &F,
    params: &[(Vec<usize>, Vec<f64>)],
) -> Result<Vec<Vec<f64>>, E>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new(Precision::Double);
    let ids: Vec<TensorId> = params
        .iter()
        .map(|(shape, data)| tape.leaf(data.clone(), shape.clone(), true))
        .collect::<Result<_, TensorError>>()?;
    let loss = f(&mut tape, &ids)?;
    if tape.tensor(loss).numel() != 1 {
        return Err(E::from(TensorError::NotScalar {
            op: "grad_check",
            shape: tape.shape(loss).to_vec(),
        }));
    }
    if !tape.value(loss).is_finite() {
        return Err(E::from(TensorError::NonFiniteLoss));
    }
    tape.backward(loss)?;
    Ok(ids
        .iter()
        .map(|&id| tape.grad(id).expect("leaf grad").to_vec())
        .collect())
}

/// Central finite-difference gradients of `f` at `params`.
pub fn numeric_gradient<F, E>(
    f: &F,
    params: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
) -> Result<Vec<Vec<f64>>, E>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId, E>,
    E: From<TensorError>,
{
    let eval = |vals: &[(Vec<usize>, Vec<f64>)]| -> Result<f64, E> {
        let mut tape = Tape::new(Precision::Double);
        let ids: Vec<TensorId> = vals
            .iter()
            .map(|(shape, data)| tape.leaf(data.clone(), shape.clone(), false))
            .collect::<Result<_, TensorError>>()?;
        let loss = f(&mut tape, &ids)?;
        let v = tape.value(loss);
        if !v.is_finite() {
            return Err(E::from(TensorError::NonFiniteLoss));
        }
        Ok(v)
    };

    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = vec![0.0; params[p].1.len()];
        for i in 0..grad.len() {
            let orig = work[p].1[i];
            work[p].1[i] = orig + eps;
            let plus = eval(&work)?;
            work[p].1[i] = orig - eps;
            let minus = eval(&work)?;
            work[p].1[i] = orig;
            grad[i] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Worst coordinate found by a gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Per-coordinate comparison `|a - n| / max(1e-8, |a| + |n|)`, reporting
/// the worst coordinate.
pub fn compare_gradients(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        param: 0,
        coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (p, (ga, gn)) in analytic.iter().zip(numeric).enumerate() {
        for (c, (&a, &n)) in ga.iter().zip(gn).enumerate() {
            let denom = (a.abs() + n.abs()).max(1e-8);
            let rel = (a - n).abs() / denom;
            if rel > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: rel,
                    param: p,
                    coord: c,
                    analytic: a,
                    numeric: n,
                };
            }
        }
    }
    report
}

/// Max over all coordinates of `|a - n| / max(1e-8, |a| + |n|)`.
pub fn max_rel_err(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    compare_gradients(analytic, numeric).max_rel_err
}

/// Compare analytic and finite-difference gradients of `f`; returns the
/// max relative error over all parameter coordinates. Always runs in
/// double precision.
pub fn grad_check<F, E>(f: F, params: &[(Vec<usize>, Vec<f64>)], eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId, E>,
    E: From<TensorError>,
{
    let analytic = analytic_gradient(&f, params)?;
    let numeric = numeric_gradient(&f, params, eps)?;
    Ok(max_rel_err(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn tape() -> Tape {
        Tape::new(Precision::Double)
    }

    fn rand_vec(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut t = tape();
        let eye = t
            .constant(
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
                vec![3, 3],
            )
            .unwrap();
        let a_data = vec![2.0, -1.0, 0.5, 4.0, 3.0, -2.0, 7.0, 0.0, 1.5];
        let a = t.constant(a_data.clone(), vec![3, 3]).unwrap();
        let prod = t.matmul(eye, a).unwrap();
        assert_eq!(t.data(prod), &a_data[..]);
    }

    #[test]
    fn matmul_scalar_product() {
        let mut t = tape();
        let a = t.constant(vec![2.0], vec![1, 1]).unwrap();
        let b = t.constant(vec![3.0], vec![1, 1]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[6.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = tape();
        let a = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = t.constant(vec![0.0; 8], vec![4, 2]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_closed_form_and_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a_data = rand_vec(&mut rng, 12);
        let b_data = rand_vec(&mut rng, 6);
        let params = vec![(vec![4, 3], a_data), (vec![3, 2], b_data.clone())];
        let f = |t: &mut Tape, ids: &[TensorId]| -> Result<TensorId, TensorError> {
            let prod = t.matmul(ids[0], ids[1])?;
            Ok(t.sum(prod))
        };
        let analytic = analytic_gradient(&f, &params).unwrap();
        // d(sum)/dA = ones(4,2) * B^T
        for i in 0..4 {
            for p in 0..3 {
                let expect = b_data[p * 2] + b_data[p * 2 + 1];
                assert!((analytic[0][i * 3 + p] - expect).abs() < 1e-12);
            }
        }
        let numeric = numeric_gradient(&f, &params, 1e-6).unwrap();
        assert!(max_rel_err(&analytic, &numeric) <= 1e-4);
    }

    #[test]
    fn pointwise_trivials() {
        let mut t = tape();
        let zero = t.constant(vec![0.0], vec![1]).unwrap();
        let sig = t.sigmoid(zero);
        assert_eq!(t.data(sig), &[0.5]);
        let th = t.tanh(zero);
        assert_eq!(t.data(th), &[0.0]);
        let neg = t.constant(vec![-1.0], vec![1]).unwrap();
        let lr = t.leaky_relu(neg, 0.2);
        assert!((t.data(lr)[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn softmax_uniform_and_singleton() {
        let mut t = tape();
        let v = t.constant(vec![0.0, 0.0, 0.0], vec![3]).unwrap();
        let s = t.softmax(v).unwrap();
        for &p in t.data(s) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let one = t.constant(vec![42.0], vec![1]).unwrap();
        let s1 = t.softmax(one).unwrap();
        assert_eq!(t.data(s1), &[1.0]);
    }

    #[test]
    fn softmax_large_inputs_no_overflow() {
        let mut t = tape();
        let v = t.constant(vec![1000.0, 0.0], vec![2]).unwrap();
        let s = t.softmax(v).unwrap();
        // With max subtraction the exact values are 1/(1+e^-1000) and
        // e^-1000/(1+e^-1000); e^-1000 underflows to zero in f64.
        assert_eq!(t.data(s), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_empty() {
        let mut t = tape();
        let v = t.constant(vec![], vec![0]).unwrap();
        assert!(matches!(
            t.softmax(v),
            Err(TensorError::EmptyInput { .. })
        ));
    }

    #[test]
    fn softmax_simplex_fuzz() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.gen_range(1..16);
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let mut t = tape();
            let v = t.constant(data, vec![n]).unwrap();
            let s = t.softmax(v).unwrap();
            let probs = t.data(s);
            assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
            let total: f64 = probs.iter().sum();
            assert!((total - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn concat_basics() {
        let mut t = tape();
        let a = t.constant(vec![1.0, 2.0], vec![2]).unwrap();
        let b = t.constant(vec![3.0], vec![1]).unwrap();
        let c = t.concat(a, b, 0).unwrap();
        assert_eq!(t.data(c), &[1.0, 2.0, 3.0]);

        let empty = t.constant(vec![], vec![0]).unwrap();
        let same = t.concat(a, empty, 0).unwrap();
        assert_eq!(t.data(same), t.data(a));
    }

    #[test]
    fn concat_gradient_routing() {
        let params = vec![
            (vec![3], vec![0.3, -0.2, 0.9]),
            (vec![2], vec![0.5, 0.1]),
        ];
        let f = |t: &mut Tape, ids: &[TensorId]| -> Result<TensorId, TensorError> {
            let c = t.concat(ids[0], ids[1], 0)?;
            Ok(t.sum(c))
        };
        let analytic = analytic_gradient(&f, &params).unwrap();
        assert_eq!(analytic[0], vec![1.0, 1.0, 1.0]);
        assert_eq!(analytic[1], vec![1.0, 1.0]);
        let numeric = numeric_gradient(&f, &params, 1e-6).unwrap();
        assert!(max_rel_err(&analytic, &numeric) <= 1e-4);
    }

    #[test]
    fn concat_matrix_axis1() {
        let mut t = tape();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let b = t.constant(vec![5.0, 6.0], vec![2, 1]).unwrap();
        let c = t.concat(a, b, 1).unwrap();
        assert_eq!(t.shape(c), &[2, 3]);
        assert_eq!(t.data(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = tape();
        let x = t.leaf(vec![0.4, -1.0, 2.5], vec![3], true).unwrap();
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_sum() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, -2.0], vec![2], true).unwrap();
        let sq = t.hadamard(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(matches!(
            t.backward(x),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn backward_unreachable_gets_zero_grad() {
        let mut t = tape();
        let x = t.leaf(vec![1.0], vec![1], true).unwrap();
        let y = t.leaf(vec![5.0, 6.0], vec![2], true).unwrap();
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(y).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_deterministic() {
        let build = |t: &mut Tape| -> (TensorId, TensorId) {
            let x = t.leaf(vec![0.3, -0.7, 0.2, 0.9], vec![2, 2], true).unwrap();
            let s = t.sigmoid(x);
            let h = t.hadamard(s, x).unwrap();
            let sm_in = t.reshape(h, vec![4]).unwrap();
            let sm = t.softmax(sm_in).unwrap();
            let loss = t.sum(sm);
            (x, loss)
        };
        let mut t1 = tape();
        let (x1, l1) = build(&mut t1);
        t1.backward(l1).unwrap();
        let mut t2 = tape();
        let (x2, l2) = build(&mut t2);
        t2.backward(l2).unwrap();
        let (g1, g2) = (t1.grad(x1).unwrap(), t2.grad(x2).unwrap());
        assert_eq!(g1.len(), g2.len());
        for (a, b) in g1.iter().zip(g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// Small composed recurrent-style expression: checks chained gates,
    /// matvec, and elementwise ops backprop correctly.
    #[test]
    fn composed_gate_step_matches_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let params = vec![
            (vec![3, 2], rand_vec(&mut rng, 6)),  // w_in
            (vec![3, 3], rand_vec(&mut rng, 9)),  // w_hidden
            (vec![3], rand_vec(&mut rng, 3)),     // bias
            (vec![2], rand_vec(&mut rng, 2)),     // x
            (vec![3], rand_vec(&mut rng, 3)),     // h
        ];
        let f = |t: &mut Tape, ids: &[TensorId]| -> Result<TensorId, TensorError> {
            let wx = t.matvec(ids[0], ids[3])?;
            let wh = t.matvec(ids[1], ids[4])?;
            let pre = t.add(wx, wh)?;
            let pre = t.add(pre, ids[2])?;
            let gate = t.sigmoid(pre);
            let cand = t.tanh(pre);
            let keep = t.affine(gate, -1.0, 1.0);
            let a = t.hadamard(gate, ids[4])?;
            let b = t.hadamard(keep, cand)?;
            let h = t.add(a, b)?;
            Ok(t.sum(h))
        };
        let err = grad_check(f, &params, 1e-5).unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let params = vec![(vec![4], vec![0.1, -2.0, 3.0, 0.7])];
        let f = |t: &mut Tape, ids: &[TensorId]| -> Result<TensorId, TensorError> { Ok(t.sum(ids[0])) };
        let err = grad_check(f, &params, 1e-5).unwrap();
        assert!(err <= 1e-8, "rel err {err}");
    }

    #[test]
    fn grad_check_detects_corrupted_gradient() {
        let params = vec![(vec![3], vec![0.2, 0.5, -0.4])];
        let f = |t: &mut Tape, ids: &[TensorId]| -> Result<TensorId, TensorError> {
            let sq = t.hadamard(ids[0], ids[0])?;
            Ok(t.sum(sq))
        };
        let mut analytic = analytic_gradient(&f, &params).unwrap();
        analytic[0][1] += 0.1;
        let numeric = numeric_gradient(&f, &params, 1e-5).unwrap();
        assert!(max_rel_err(&analytic, &numeric) > 1e-2);
    }

    #[test]
    fn grad_check_rejects_nan_loss() {
        let params = vec![(vec![1], vec![f64::MAX])];
        let f = |t: &mut Tape, ids: &[TensorId]| -> Result<TensorId, TensorError> {
            // x * x overflows to infinity for f64::MAX.
            let sq = t.hadamard(ids[0], ids[0])?;
            Ok(t.sum(sq))
        };
        // The forward debug assertion would fire first in debug builds;
        // exercise only the release-path error by evaluating numerically.
        let res = numeric_gradient(&f, &params, 1.0);
        assert!(matches!(res, Err(TensorError::NonFiniteLoss)));
    }

    /// Every differentiable op, random shapes, analytic vs central
    /// differences at rel err <= 1e-4.
    #[test]
    fn all_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        for case in 0..20 {
            let m = rng.gen_range(1..5);
            let k = rng.gen_range(1..5);
            let n = rng.gen_range(1..5);
            let params = vec![
                (vec![m, k], rand_vec(&mut rng, m * k)),
                (vec![k, n], rand_vec(&mut rng, k * n)),
                (vec![k], rand_vec(&mut rng, k)),
                (vec![k], rand_vec(&mut rng, k)),
                (vec![1], vec![rng.gen_range(0.2..1.5)]),
            ];
            let pick_i = rng.gen_range(0..k);
            let row_i = rng.gen_range(0..m);
            let f = move |t: &mut Tape, ids: &[TensorId]| -> Result<TensorId, TensorError> {
                let prod = t.matmul(ids[0], ids[1])?;           // matmul
                let flat = t.reshape(prod, vec![m * n])?;       // reshape
                let sm = t.softmax(flat)?;                      // softmax
                // Weight the softmax so its inputs keep real gradients
                // (a plain sum of a softmax is constant).
                let weights = t.constant((0..m * n).map(|i| 0.3 + i as f64).collect(), vec![m * n])?;
                let weighted = t.hadamard(sm, weights)?;
                let s1 = t.sum(weighted);
                let a = t.add(ids[2], ids[3])?;                 // add
                let h = t.hadamard(a, ids[2])?;                 // hadamard
                let sg = t.sigmoid(h);                          // sigmoid
                let th = t.tanh(a);                             // tanh
                // Shift both leaky inputs clear of the kink at zero so
                // finite differences stay in one linear piece.
                let pos = t.affine(h, 1.0, 3.0);
                let neg = t.affine(h, 1.0, -3.0);
                let lr_pos = t.leaky_relu(pos, 0.2);            // leaky_relu, x > 0
                let lr_neg = t.leaky_relu(neg, 0.2);            // leaky_relu, x < 0
                let lr = t.add(lr_pos, lr_neg)?;
                let af = t.affine(lr, 0.5, -0.1);               // affine
                let cat = t.concat(sg, th, 0)?;                 // concat
                let cat2 = t.concat(cat, af, 0)?;
                let sc = t.scale_by(cat2, ids[4])?;             // scale_by
                let stacked = t.stack_rows(&[ids[2], ids[3]])?; // stack_rows
                let r = t.row(stacked, 0)?;                     // row (of stack)
                let mrow = t.row(ids[0], row_i)?;               // row (of matmul arg)
                let p = t.pick(r, pick_i)?;                     // pick
                let sgp = t.sigmoid(p);
                let lnp = t.ln_clamped(sgp);                    // ln_clamped (>0 domain)
                let d = t.dot(ids[2], ids[3])?;                 // dot
                let s2 = t.sum(sc);
                let s3 = t.sum(mrow);
                let partial = t.add(s1, s2)?;
                let partial = t.add(partial, s3)?;
                let partial = t.add(partial, lnp)?;
                t.add(partial, d)
            };
            let err = grad_check(f, &params, 1e-5).unwrap();
            assert!(err <= 1e-4, "case {case}: rel err {err}");
        }
    }

    #[test]
    fn single_precision_rounds_through_f32() {
        let mut t = Tape::new(Precision::Single);
        let x = t.constant(vec![0.1], vec![1]).unwrap();
        assert_eq!(t.data(x)[0], 0.1f32 as f64);
        let y = t.affine(x, 3.0, 0.0);
        assert_eq!(t.data(y)[0], (0.1f32 as f64 * 3.0) as f32 as f64);
    }
}
