use alloc::boxed::Box;
use alloc::vec::Vec;

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::math::{cos, exp, ln, powf, sigmoid, sin, tanh};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`]. Ids increase in creation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule of a fused operation registered with [`Tape::custom`].
///
/// `input_grads[i]` arrives zeroed with the shape of input `i` and must be
/// accumulated into; `needs[i]` tells whether anyone will read it.
pub trait BackwardRule {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
        input_grads: &mut [Tensor],
    );
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ComplexMul(Var, Var),
    Abs2(Var),
    ComplexExp(Var),
    StraightThrough(Var),
    Custom(Vec<Var>, Box<dyn BackwardRule>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of tensor operations for reverse-mode gradients.
///
/// A tape is meant to be rebuilt for every evaluation of the loss.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of the tape that produced it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no path connects `v` to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`; zeros of the right shape for unreachable nodes.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

fn is_complex(t: &Tensor) -> bool {
    t.shape().len() == 2 && t.shape()[1] == 2
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = exp(*v - max);
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b)
            | Op::MatMul(a, b)
            | Op::ComplexMul(a, b) => self.rg(*a) || self.rg(*b),
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Powf(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::GatherRows(a, _)
            | Op::Abs2(a)
            | Op::ComplexExp(a)
            | Op::StraightThrough(a) => self.rg(*a),
            Op::ConcatRows(vs) | Op::ConcatCols(vs) | Op::Custom(vs, _) => {
                vs.iter().any(|v| self.rg(*v))
            }
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input treated as a constant; no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// Adds the vector `row` (length = columns of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(row).len() != c {
            return Err(mismatch("add_row", &[c], self.shape(row)));
        }
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for chunk in v.data_mut().chunks_mut(c) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, row), "add_row")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.map(a, |x| k * x);
        self.push(v, Op::Scale(a, k), "scale")
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.map(a, |x| x + k);
        self.push(v, Op::AddConst(a), "add_const")
    }

    /// Multiplies every element of `a` by the scalar node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(mismatch("mul_scalar", &[], self.shape(s)));
        }
        let k = self.value(s).item();
        let v = self.map(a, |x| k * x);
        self.push(v, Op::MulScalar(a, s), "mul_scalar")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nn(ta.data(), tb.data(), m, k, n, out.data_mut());
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, tanh);
        self.push(v, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, exp);
        self.push(v, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, ln);
        self.push(v, Op::Log(a), "log")
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let v = self.map(a, |x| powf(x, p));
        self.push(v, Op::Powf(a, p), "powf")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a), "softmax")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut v = x.clone();
        for row in v.data_mut().chunks_mut(c) {
            let lse = crate::math::log_sum_exp(row.iter().cloned());
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(v, Op::LogSoftmax(a), "log_softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::EmptyInput);
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a), "mean")
    }

    /// Column means of a matrix, shape `[1, cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(&[1, c]);
        for row in t.data().chunks(c) {
            out.add_assign(row);
        }
        for x in out.data_mut() {
            *x /= r as f64;
        }
        self.push(out, Op::MeanRows(a), "mean_rows")
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if !is_matrix(t) || start + len > c {
            return Err(mismatch("slice_cols", &[r, start + len], t.shape()));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in t.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let v = Tensor::new(&[r, len], data)?;
        self.push(v, Op::SliceCols(a, start), "slice_cols")
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if !is_matrix(t) || start + len > r {
            return Err(mismatch("slice_rows", &[start + len, c], t.shape()));
        }
        let v = Tensor::new(&[len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        self.push(v, Op::SliceRows(a, start), "slice_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput)?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if !is_matrix(t) || t.cols() != c {
                return Err(mismatch("concat_rows", &[t.rows(), c], t.shape()));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let v = Tensor::new(&[rows, c], data)?;
        self.push(v, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput)?;
        let r = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if !is_matrix(t) || t.rows() != r {
                return Err(mismatch("concat_cols", &[r, t.cols()], t.shape()));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(&[r, total], data)?;
        self.push(v, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Row `i` of the result is row `index[i]` of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if !is_matrix(t) {
            return Err(mismatch("gather_rows", &[r, c], t.shape()));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(mismatch("gather_rows", &[r], &[i]));
            }
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(&[index.len(), c], data)?;
        self.push(v, Op::GatherRows(a, index.to_vec()), "gather_rows")
    }

    /// Elementwise complex product of two `[n, 2]` tensors.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("complex_mul", a, b)?;
        if !is_complex(self.value(a)) {
            return Err(mismatch("complex_mul", &[self.value(a).rows(), 2], self.shape(a)));
        }
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ta.len());
        for (x, y) in ta.chunks(2).zip(tb.chunks(2)) {
            data.push(x[0] * y[0] - x[1] * y[1]);
            data.push(x[0] * y[1] + x[1] * y[0]);
        }
        let v = Tensor::new(self.shape(a), data)?;
        self.push(v, Op::ComplexMul(a, b), "complex_mul")
    }

    /// `|z|^2` of an `[n, 2]` tensor, shape `[n, 1]`.
    pub fn abs2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !is_complex(t) {
            return Err(mismatch("abs2", &[t.rows(), 2], t.shape()));
        }
        let data: Vec<f64> = t.data().chunks(2).map(|z| z[0] * z[0] + z[1] * z[1]).collect();
        let v = Tensor::new(&[data.len(), 1], data)?;
        self.push(v, Op::Abs2(a), "abs2")
    }

    /// Complex exponential `e^z` of an `[n, 2]` tensor.
    pub fn complex_exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !is_complex(t) {
            return Err(mismatch("complex_exp", &[t.rows(), 2], t.shape()));
        }
        let mut data = Vec::with_capacity(t.len());
        for z in t.data().chunks(2) {
            let m = exp(z[0]);
            data.push(m * cos(z[1]));
            data.push(m * sin(z[1]));
        }
        let v = Tensor::new(t.shape(), data)?;
        self.push(v, Op::ComplexExp(a), "complex_exp")
    }

    /// Straight-through estimator: the value is the one-hot argmax of each
    /// row of `soft`, the gradient is passed to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var) -> Result<Var> {
        let t = self.value(soft);
        let c = t.cols();
        let mut v = Tensor::zeros(t.shape());
        for (row, out) in t.data().chunks(c).zip(v.data_mut().chunks_mut(c)) {
            out[argmax(row)] = 1.0;
        }
        self.push(v, Op::StraightThrough(soft), "straight_through")
    }

    /// Records a fused operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        rule: Box<dyn BackwardRule>,
    ) -> Result<Var> {
        let name = rule.name();
        self.push(output, Op::Custom(inputs.to_vec(), rule), name)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.rg(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        slot.as_mut()
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(gd);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.add_assign(gd);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(gd);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (x, y) in gb.data_mut().iter_mut().zip(gd) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), bi) in ga.data_mut().iter_mut().zip(gd).zip(vb) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gi), ai) in gb.data_mut().iter_mut().zip(gd).zip(va) {
                        *x += gi * ai;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(gd);
                }
                let c = out.cols();
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in gd.chunks(c) {
                        gr.add_assign(chunk);
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, gi) in ga.data_mut().iter_mut().zip(gd) {
                        *x += k * gi;
                    }
                }
            }
            Op::AddConst(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(gd);
                }
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).item();
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, gi) in ga.data_mut().iter_mut().zip(gd) {
                        *x += k * gi;
                    }
                }
                if let Some(gs) = self.acc(grads, *s) {
                    let d: f64 = va.iter().zip(gd).map(|(x, y)| x * y).sum();
                    gs.data_mut()[0] += d;
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_nt(gd, tb.data(), m, k, n, ga.data_mut());
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_tn(ta.data(), gd, m, k, n, gb.data_mut());
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), y) in ga.data_mut().iter_mut().zip(gd).zip(out.data()) {
                        *x += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), y) in ga.data_mut().iter_mut().zip(gd).zip(out.data()) {
                        *x += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), y) in ga.data_mut().iter_mut().zip(gd).zip(out.data()) {
                        *x += gi * y;
                    }
                }
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), xi) in ga.data_mut().iter_mut().zip(gd).zip(va) {
                        *x += gi / xi;
                    }
                }
            }
            Op::Powf(a, p) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), xi) in ga.data_mut().iter_mut().zip(gd).zip(va) {
                        *x += gi * p * powf(*xi, p - 1.0);
                    }
                }
            }
            Op::Softmax(a) => {
                let c = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gx, gy), s) in ga
                        .data_mut()
                        .chunks_mut(c)
                        .zip(gd.chunks(c))
                        .zip(out.data().chunks(c))
                    {
                        let dot: f64 = gy.iter().zip(s).map(|(x, y)| x * y).sum();
                        for ((x, gi), si) in gx.iter_mut().zip(gy).zip(s) {
                            *x += si * (gi - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gx, gy), ls) in ga
                        .data_mut()
                        .chunks_mut(c)
                        .zip(gd.chunks(c))
                        .zip(out.data().chunks(c))
                    {
                        let total: f64 = gy.iter().sum();
                        for ((x, gi), l) in gx.iter_mut().zip(gy).zip(ls) {
                            *x += gi - exp(*l) * total;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let gi = gd[0];
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.data_mut() {
                        *x += gi;
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gi = gd[0] / n;
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.data_mut() {
                        *x += gi;
                    }
                }
            }
            Op::MeanRows(a) => {
                let t = self.value(*a);
                let (r, c) = (t.rows(), t.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    for chunk in ga.data_mut().chunks_mut(c) {
                        for (x, gi) in chunk.iter_mut().zip(gd) {
                            *x += gi / r as f64;
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let c_in = self.value(*a).cols();
                let len = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (row, gy) in ga.data_mut().chunks_mut(c_in).zip(gd.chunks(len)) {
                        for (x, gi) in row[*start..*start + len].iter_mut().zip(gy) {
                            *x += gi;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    let dst = &mut ga.data_mut()[start * c..start * c + gd.len()];
                    for (x, gi) in dst.iter_mut().zip(gd) {
                        *x += gi;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.add_assign(&gd[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for (row, gy) in gp.data_mut().chunks_mut(c).zip(gd.chunks(total)) {
                            for (x, gi) in row.iter_mut().zip(&gy[off..off + c]) {
                                *x += gi;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::GatherRows(a, index) => {
                let c = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    let dst = ga.data_mut();
                    for (k, &i) in index.iter().enumerate() {
                        for (x, gi) in dst[i * c..(i + 1) * c].iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                            *x += gi;
                        }
                    }
                }
            }
            Op::ComplexMul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // d/da (a b) = b, so the adjoint of a is conj(b) * g.
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), bi) in ga.data_mut().chunks_mut(2).zip(gd.chunks(2)).zip(vb.chunks(2)) {
                        x[0] += bi[0] * gi[0] + bi[1] * gi[1];
                        x[1] += bi[0] * gi[1] - bi[1] * gi[0];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gi), ai) in gb.data_mut().chunks_mut(2).zip(gd.chunks(2)).zip(va.chunks(2)) {
                        x[0] += ai[0] * gi[0] + ai[1] * gi[1];
                        x[1] += ai[0] * gi[1] - ai[1] * gi[0];
                    }
                }
            }
            Op::Abs2(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), z) in ga.data_mut().chunks_mut(2).zip(gd).zip(va.chunks(2)) {
                        x[0] += 2.0 * gi * z[0];
                        x[1] += 2.0 * gi * z[1];
                    }
                }
            }
            Op::ComplexExp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), e) in ga.data_mut().chunks_mut(2).zip(gd.chunks(2)).zip(out.data().chunks(2)) {
                        x[0] += e[0] * gi[0] + e[1] * gi[1];
                        x[1] += e[0] * gi[1] - e[1] * gi[0];
                    }
                }
            }
            Op::StraightThrough(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(gd);
                }
            }
            Op::Custom(inputs, rule) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.rg(*v)).collect();
                let mut local: Vec<Tensor> = values
                    .iter()
                    .zip(&needs)
                    .map(|(t, &need)| if need { Tensor::zeros(t.shape()) } else { Tensor::zeros(&[0]) })
                    .collect();
                rule.backward(&values, out, g, &needs, &mut local);
                for ((v, need), lg) in inputs.iter().zip(&needs).zip(local) {
                    if *need {
                        if let Some(gv) = self.acc(grads, *v) {
                            gv.add_assign(lg.data());
                        }
                    }
                }
            }
        }
    }
}

/// Index of the largest element; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
