//! Reverse-mode differentiation over a single-owner tape.
//!
//! Every op evaluates eagerly, appends a node that remembers its inputs and
//! whatever activations its backward rule needs, and returns a [`Var`]
//! handle. Node ids increase monotonically, so reverse id order is a valid
//! reverse topological order and [`Tape::backward`] visits each node once.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

pub const NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Matmul(usize, usize),
    MatmulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MulConst(usize, Rc<Tensor>),
    ScaleRows(usize, Rc<Vec<f64>>),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Square(usize),
    Softmax(usize, usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    RepeatRows(usize),
    BlockLeftMatmul { adj: usize, x: usize, blocks: usize },
    SymNormalize { a: usize, inv_sqrt_deg: Vec<f64> },
    Norm(NormSaved),
    StraightThrough { soft: usize },
}

struct NormSaved {
    x: usize,
    gamma: usize,
    beta: usize,
    xhat: Tensor,
    inv_std: Vec<f64>,
    /// Row-wise (layer norm) when true, column-wise (batch norm) otherwise.
    per_row: bool,
    /// Statistics were computed from `x` itself rather than supplied.
    data_stats: bool,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

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
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
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

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    fn push(&self, value: Tensor, op: Op, inputs: &[usize], name: &'static str) -> Result<Var<'_>> {
        let value = value.check_finite(name)?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Concatenate matrices with equal row counts side by side.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let rows = first.shape()[0];
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut cols = 0;
        for v in &values {
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(Error::shape("concat_cols", format!("{rows} rows"), format!("{:?}", v.shape())));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row_slice(i));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatCols(ids.clone()), &ids, "concat_cols")
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let cols = first.value().cols();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut rows = 0;
        let mut data = Vec::new();
        for v in &values {
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{cols} cols"), format!("{:?}", v.shape())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(ids.clone()), &ids, "concat_rows")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::shape("backward", "scalar loss", format!("{:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            let val = |i: usize| &nodes[i].value;
            let wants = |i: usize| nodes[i].requires_grad;
            let acc = |i: usize, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => existing.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => grads[id] = Some(g),
                Op::Matmul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if wants(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm_nt(m, n, k, g.data(), bv.data(), &mut ga);
                        acc(*a, Tensor::new(vec![m, k], ga)?, &mut grads);
                    }
                    if wants(*b) {
                        let mut gb = vec![0.0; k * n];
                        gemm_tn(m, k, n, av.data(), g.data(), &mut gb);
                        acc(*b, Tensor::new(vec![k, n], gb)?, &mut grads);
                    }
                }
                Op::MatmulNt(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    if wants(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm_nn(m, n, k, g.data(), bv.data(), &mut ga);
                        acc(*a, Tensor::new(vec![m, k], ga)?, &mut grads);
                    }
                    if wants(*b) {
                        let mut gb = vec![0.0; n * k];
                        gemm_tn(m, n, k, g.data(), av.data(), &mut gb);
                        acc(*b, Tensor::new(vec![n, k], gb)?, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(*a, g.hadamard(val(*b))?, &mut grads);
                    }
                    if wants(*b) {
                        acc(*b, g.hadamard(val(*a))?, &mut grads);
                    }
                }
                Op::AddRow(a, row) => {
                    if wants(*row) {
                        acc(*row, column_sums(&g), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Scale(a, f) => acc(*a, g.map(|x| x * f), &mut grads),
                Op::AddConst(a) => acc(*a, g, &mut grads),
                Op::MulConst(a, c) => acc(*a, g.hadamard(c)?, &mut grads),
                Op::ScaleRows(a, c) => {
                    let mut t = g;
                    let cols = t.cols();
                    for (i, row) in t.data_mut().chunks_mut(cols.max(1)).enumerate() {
                        row.iter_mut().for_each(|x| *x *= c[i]);
                    }
                    acc(*a, t, &mut grads);
                }
                Op::Sigmoid(a) => acc(*a, g.zip_map(out, "sigmoid'", |g, y| g * y * (1.0 - y))?, &mut grads),
                Op::Tanh(a) => acc(*a, g.zip_map(out, "tanh'", |g, y| g * (1.0 - y * y))?, &mut grads),
                Op::Relu(a) => acc(
                    *a,
                    g.zip_map(val(*a), "relu'", |g, x| if x > 0.0 { g } else { 0.0 })?,
                    &mut grads,
                ),
                Op::Square(a) => acc(*a, g.zip_map(val(*a), "square'", |g, x| 2.0 * x * g)?, &mut grads),
                Op::Softmax(a, axis) => {
                    let (outer, len, inner) = out.axis_split(*axis, "softmax'")?;
                    let mut gx = vec![0.0; out.numel()];
                    let (y, gd) = (out.data(), g.data());
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                            }
                        }
                    }
                    acc(*a, Tensor::new(out.shape().to_vec(), gx)?, &mut grads);
                }
                Op::Transpose(a) => acc(*a, g.transpose()?, &mut grads),
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let c = val(p).cols();
                        if wants(p) {
                            let t = Tensor::from_fn(rows, c, |i, j| g.get(i, offset + j));
                            acc(p, t, &mut grads);
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let r = val(p).rows();
                        if wants(p) {
                            let data = g.data()[offset * cols..(offset + r) * cols].to_vec();
                            acc(p, Tensor::new(vec![r, cols], data)?, &mut grads);
                        }
                        offset += r;
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = val(*x);
                    let cols = xv.cols();
                    let mut t = Tensor::zeros(xv.shape());
                    t.data_mut()[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                    acc(*x, t, &mut grads);
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let mut t = Tensor::zeros(xv.shape());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            t.set(i, start + j, g.get(i, j));
                        }
                    }
                    acc(*x, t, &mut grads);
                }
                Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item()), &mut grads),
                Op::Mean(a) => {
                    let av = val(*a);
                    acc(*a, Tensor::full(av.shape(), g.item() / av.numel() as f64), &mut grads);
                }
                Op::MeanRows(a) => {
                    let av = val(*a);
                    let m = av.rows() as f64;
                    acc(*a, Tensor::from_fn(av.rows(), av.cols(), |_, j| g.data()[j] / m), &mut grads);
                }
                Op::RepeatRows(a) => acc(*a, column_sums(&g), &mut grads),
                Op::BlockLeftMatmul { adj, x, blocks } => {
                    let (adj_v, xv) = (val(*adj), val(*x));
                    let n = adj_v.rows();
                    let f = xv.cols();
                    if wants(*x) {
                        let mut gx = vec![0.0; xv.numel()];
                        for b in 0..*blocks {
                            let r = b * n * f..(b + 1) * n * f;
                            gemm_tn(n, n, f, adj_v.data(), &g.data()[r.clone()], &mut gx[r]);
                        }
                        acc(*x, Tensor::new(xv.shape().to_vec(), gx)?, &mut grads);
                    }
                    if wants(*adj) {
                        let mut ga = vec![0.0; n * n];
                        for b in 0..*blocks {
                            let r = b * n * f..(b + 1) * n * f;
                            gemm_nt(n, f, n, &g.data()[r.clone()], &xv.data()[r], &mut ga);
                        }
                        acc(*adj, Tensor::new(vec![n, n], ga)?, &mut grads);
                    }
                }
                Op::SymNormalize { a, inv_sqrt_deg: s } => {
                    let av = val(*a);
                    let n = av.rows();
                    let mut ds = vec![0.0; n];
                    for i in 0..n {
                        for j in 0..n {
                            ds[i] += g.get(i, j) * av.get(i, j) * s[j] + g.get(j, i) * s[j] * av.get(j, i);
                        }
                    }
                    let ga = Tensor::from_fn(n, n, |i, j| {
                        g.get(i, j) * s[i] * s[j] - 0.5 * ds[i] * s[i] * s[i] * s[i]
                    });
                    acc(*a, ga, &mut grads);
                }
                Op::Norm(saved) => norm_backward(saved, &g, &nodes, &mut grads)?,
                Op::StraightThrough { soft } => acc(*soft, g, &mut grads),
            }
        }
        Ok(Gradients {
            grads,
            tracked: nodes.iter().map(|n| n.requires_grad).collect(),
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let cols = g.cols();
    let mut sums = vec![0.0; cols];
    for i in 0..g.rows() {
        for (s, v) in sums.iter_mut().zip(g.row_slice(i)) {
            *s += v;
        }
    }
    Tensor::row(&sums)
}

fn norm_backward(s: &NormSaved, g: &Tensor, nodes: &[Node], grads: &mut [Option<Tensor>]) -> Result<()> {
    let gamma = nodes[s.gamma].value.data().to_vec();
    let (rows, cols) = (g.rows(), g.cols());
    let mut add = |i: usize, t: Tensor| {
        if nodes[i].requires_grad {
            match &mut grads[i] {
                Some(e) => e.add_assign(&t),
                slot => *slot = Some(t),
            }
        }
    };
    // Scale and shift act per feature (column) in both layouts.
    let mut g_gamma = vec![0.0; cols];
    let mut g_beta = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            g_gamma[j] += g.get(i, j) * s.xhat.get(i, j);
            g_beta[j] += g.get(i, j);
        }
    }
    let mut gx = Tensor::zeros(&[rows, cols]);
    if s.per_row {
        for i in 0..rows {
            let gh: Vec<f64> = (0..cols).map(|j| g.get(i, j) * gamma[j]).collect();
            let m = cols as f64;
            let sum_g: f64 = gh.iter().sum();
            let sum_gx: f64 = gh.iter().enumerate().map(|(j, v)| v * s.xhat.get(i, j)).sum();
            for j in 0..cols {
                let v = if s.data_stats {
                    s.inv_std[i] / m * (m * gh[j] - sum_g - s.xhat.get(i, j) * sum_gx)
                } else {
                    s.inv_std[i] * gh[j]
                };
                gx.set(i, j, v);
            }
        }
    } else {
        let m = rows as f64;
        for j in 0..cols {
            let gh: Vec<f64> = (0..rows).map(|i| g.get(i, j) * gamma[j]).collect();
            let sum_g: f64 = gh.iter().sum();
            let sum_gx: f64 = gh.iter().enumerate().map(|(i, v)| v * s.xhat.get(i, j)).sum();
            for i in 0..rows {
                let v = if s.data_stats {
                    s.inv_std[j] / m * (m * gh[i] - sum_g - s.xhat.get(i, j) * sum_gx)
                } else {
                    s.inv_std[j] * gh[i]
                };
                gx.set(i, j, v);
            }
        }
    }
    add(s.x, gx);
    add(s.gamma, Tensor::row(&g_gamma));
    add(s.beta, Tensor::row(&g_beta));
    Ok(())
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    tracked: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var<'_>) -> Result<Tensor> {
        if !self.tracked.get(v.id).copied().unwrap_or(false) {
            return Err(Error::Detached);
        }
        Ok(match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'t>> {
        self.tape.push(value, op, &[self.id], name)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op, name: &'static str) -> Result<Var<'t>> {
        self.tape.push(value, op, &[self.id, other.id], name)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        self.binary(other, v, Op::Matmul(self.id, other.id), "matmul")
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul_nt(&other.value())?;
        self.binary(other, v, Op::MatmulNt(self.id, other.id), "matmul_nt")
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().add(&other.value())?;
        self.binary(other, v, Op::Add(self.id, other.id), "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().sub(&other.value())?;
        self.binary(other, v, Op::Sub(self.id, other.id), "sub")
    }

    pub fn hadamard(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().hadamard(&other.value())?;
        self.binary(other, v, Op::Mul(self.id, other.id), "hadamard")
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (x, r) = (self.value(), row.value());
        let n = x.cols();
        if x.shape().len() != 2 || r.numel() != n {
            return Err(Error::shape("add_row", format!("1x{n} row"), format!("{:?}", r.shape())));
        }
        let mut out = (*x).clone();
        for chunk in out.data_mut().chunks_mut(n.max(1)) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.binary(row, out, Op::AddRow(self.id, row.id), "add_row")
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        let v = self.value().scale(factor)?;
        self.unary(v, Op::Scale(self.id, factor), "scale")
    }

    pub fn add_const(self, c: &Tensor) -> Result<Var<'t>> {
        let v = self.value().add(c)?;
        self.unary(v, Op::AddConst(self.id), "add_const")
    }

    pub fn mul_const(self, c: Tensor) -> Result<Var<'t>> {
        let v = self.value().hadamard(&c)?;
        self.unary(v, Op::MulConst(self.id, Rc::new(c)), "mul_const")
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(self, factors: Vec<f64>) -> Result<Var<'t>> {
        let x = self.value();
        if factors.len() != x.rows() {
            return Err(Error::shape("scale_rows", x.rows(), factors.len()));
        }
        let mut out = (*x).clone();
        let cols = out.cols();
        for (i, row) in out.data_mut().chunks_mut(cols.max(1)).enumerate() {
            row.iter_mut().for_each(|v| *v *= factors[i]);
        }
        self.unary(out, Op::ScaleRows(self.id, Rc::new(factors)), "scale_rows")
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let v = self.value().sigmoid();
        self.unary(v, Op::Sigmoid(self.id), "sigmoid")
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let v = self.value().tanh();
        self.unary(v, Op::Tanh(self.id), "tanh")
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let v = self.value().relu();
        self.unary(v, Op::Relu(self.id), "relu")
    }

    pub fn square(self) -> Result<Var<'t>> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id), "square")
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let v = self.value().softmax(axis)?;
        self.unary(v, Op::Softmax(self.id, axis), "softmax")
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        self.unary(v, Op::Transpose(self.id), "transpose")
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape().len() != 2 || start + len > x.rows() {
            return Err(Error::shape("slice_rows", format!("{} rows", start + len), x.rows()));
        }
        let c = x.cols();
        let v = Tensor::new(vec![len, c], x.data()[start * c..(start + len) * c].to_vec())?;
        self.unary(v, Op::SliceRows { x: self.id, start }, "slice_rows")
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape().len() != 2 || start + len > x.cols() {
            return Err(Error::shape("slice_cols", format!("{} cols", start + len), x.cols()));
        }
        let v = Tensor::from_fn(x.rows(), len, |i, j| x.get(i, start + j));
        self.unary(v, Op::SliceCols { x: self.id, start }, "slice_cols")
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id), "sum")
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let x = self.value();
        let v = Tensor::scalar(x.sum() / x.numel() as f64);
        self.unary(v, Op::Mean(self.id), "mean")
    }

    /// Column means of an `m × n` matrix as a `1 × n` row.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let m = x.rows() as f64;
        let sums = column_sums(&x);
        let v = sums.map(|s| s / m);
        self.unary(v, Op::MeanRows(self.id), "mean_rows")
    }

    /// Broadcasts a `1 × n` row to `m × n`.
    pub fn repeat_rows(self, m: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rows() != 1 {
            return Err(Error::shape("repeat_rows", "1 row", x.rows()));
        }
        let v = Tensor::from_fn(m, x.cols(), |_, j| x.data()[j]);
        self.unary(v, Op::RepeatRows(self.id), "repeat_rows")
    }

    /// Applies an `n × n` matrix to each of `blocks` stacked `n × f` blocks
    /// of `self`.
    pub fn block_left_matmul(self, adj: Var<'t>, blocks: usize) -> Result<Var<'t>> {
        let (a, x) = (adj.value(), self.value());
        let n = a.rows();
        if a.shape() != [n, n] || x.rows() != n * blocks {
            return Err(Error::shape(
                "block_left_matmul",
                format!("{blocks} blocks of {n} rows"),
                format!("{:?}", x.shape()),
            ));
        }
        let f = x.cols();
        let mut out = vec![0.0; x.numel()];
        for b in 0..blocks {
            let r = b * n * f..(b + 1) * n * f;
            gemm_nn(n, n, f, a.data(), &x.data()[r.clone()], &mut out[r]);
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        self.tape.push(
            v,
            Op::BlockLeftMatmul { adj: adj.id, x: self.id, blocks },
            &[adj.id, self.id],
            "block_left_matmul",
        )
    }

    /// `D^{-1/2} A D^{-1/2}` with `D` the row sums; zero-degree rows map to zero.
    pub fn sym_normalize(self) -> Result<Var<'t>> {
        let a = self.value();
        let (out, s) = sym_normalize_values(&a)?;
        self.unary(out, Op::SymNormalize { a: self.id, inv_sqrt_deg: s }, "sym_normalize")
    }

    /// Inverted dropout: identity outside training or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(self, rate: f64, training: bool, rng: &mut R) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(self);
        }
        let shape = self.shape();
        let keep = 1.0 / (1.0 - rate);
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(Tensor::new(shape, mask)?)
    }

    /// Per-feature batch normalization of a `batch × features` matrix.
    ///
    /// With `stats = None` the batch's own biased statistics are used and
    /// returned so the caller can update running averages; otherwise the
    /// supplied statistics are treated as constants.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        stats: Option<&BatchStats>,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        let x = self.value();
        let (m, f) = (x.rows(), x.cols());
        check_affine(&gamma, &beta, f, "batch_norm")?;
        let (mean, var, data_stats) = match stats {
            Some(s) => (s.mean.clone(), s.var.clone(), false),
            None => {
                if m < 2 {
                    return Err(Error::invalid("batch norm in training mode needs at least 2 rows"));
                }
                let mean: Vec<f64> = (0..f).map(|j| (0..m).map(|i| x.get(i, j)).sum::<f64>() / m as f64).collect();
                let var: Vec<f64> = (0..f)
                    .map(|j| (0..m).map(|i| (x.get(i, j) - mean[j]).powi(2)).sum::<f64>() / m as f64)
                    .collect();
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let xhat = Tensor::from_fn(m, f, |i, j| (x.get(i, j) - mean[j]) * inv_std[j]);
        let out = affine(&xhat, &gamma.value(), &beta.value());
        let saved = NormSaved {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
            per_row: false,
            data_stats,
        };
        let y = self.tape.push(out, Op::Norm(saved), &[self.id, gamma.id, beta.id], "batch_norm")?;
        Ok((y, data_stats.then_some(BatchStats { mean, var })))
    }

    /// Layer normalization over the columns of each row.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let (m, f) = (x.rows(), x.cols());
        check_affine(&gamma, &beta, f, "layer_norm")?;
        let mut inv_std = Vec::with_capacity(m);
        let mut xhat = Tensor::zeros(&[m, f]);
        for i in 0..m {
            let row = x.row_slice(i);
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f as f64;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            for j in 0..f {
                xhat.set(i, j, (row[j] - mean) * s);
            }
            inv_std.push(s);
        }
        let out = affine(&xhat, &gamma.value(), &beta.value());
        let saved = NormSaved {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
            per_row: true,
            data_stats: true,
        };
        self.tape.push(out, Op::Norm(saved), &[self.id, gamma.id, beta.id], "layer_norm")
    }

    /// Forward value `hard`, backward routed to `self` unchanged.
    pub fn straight_through(self, hard: Tensor) -> Result<Var<'t>> {
        if hard.shape() != self.shape().as_slice() {
            return Err(Error::shape("straight_through", format!("{:?}", self.shape()), format!("{:?}", hard.shape())));
        }
        self.unary(hard, Op::StraightThrough { soft: self.id }, "straight_through")
    }
}

fn check_affine(gamma: &Var<'_>, beta: &Var<'_>, f: usize, op: &'static str) -> Result<()> {
    if gamma.value().numel() != f || beta.value().numel() != f {
        return Err(Error::shape(op, format!("{f} scale/shift entries"), gamma.value().numel()));
    }
    Ok(())
}

fn affine(xhat: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let (g, b) = (gamma.data(), beta.data());
    Tensor::from_fn(xhat.rows(), xhat.cols(), |i, j| xhat.get(i, j) * g[j] + b[j])
}

pub(crate) fn sym_normalize_values(a: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let n = a.rows();
    if a.shape() != [n, n] {
        return Err(Error::shape("sym_normalize", "square matrix", format!("{:?}", a.shape())));
    }
    let s: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = a.row_slice(i).iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Ok((Tensor::from_fn(n, n, |i, j| s[i] * a.get(i, j) * s[j]), s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_sum_gradient_has_outer_product_structure() {
        // loss = sum(W x) ⇒ dloss/dW[i][j] = x[j]
        let tape = Tape::new();
        let w = tape.param(Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]));
        let x = tape.constant(Tensor::column(&[0.5, -1.0, 2.0]));
        let loss = w.matmul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap().get(w).unwrap();
        assert_eq!(g.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let tape = Tape::new();
        let w = tape.param(Tensor::ones(&[2, 2]));
        let unused = tape.param(Tensor::ones(&[3]));
        let loss = w.sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), Tensor::zeros(&[3]));
    }

    #[test]
    fn detached_and_non_scalar_errors() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::ones(&[2]));
        let w = tape.param(Tensor::ones(&[2]));
        let y = w.add(c).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Shape { .. })));
        let grads = tape.backward(y.sum().unwrap()).unwrap();
        assert!(matches!(grads.get(c), Err(Error::Detached)));
    }

    #[test]
    fn dropout_identity_cases_and_rate_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::new();
        let x = tape.param(Tensor::ones(&[4, 4]));
        assert_eq!(x.dropout(0.0, true, &mut rng).unwrap().value(), x.value());
        assert_eq!(x.dropout(0.5, false, &mut rng).unwrap().value(), x.value());
        assert!(x.dropout(1.0, true, &mut rng).is_err());
        assert!(x.dropout(-0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let tape = Tape::new();
        let n = 100_000;
        let x = tape.constant(Tensor::ones(&[1, n]));
        let y = x.dropout(0.5, true, &mut rng).unwrap().value();
        let mean = y.sum() / n as f64;
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
        // 3σ band: each entry is 0 or 2 with p = 1/2, so σ = 1/√n.
        assert!((mean - 1.0).abs() <= 3.0 / (n as f64).sqrt());
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn batch_norm_examples() {
        let tape = Tape::new();
        let gamma = tape.param(Tensor::ones(&[1, 2]));
        let beta = tape.param(Tensor::zeros(&[1, 2]));
        let x = tape.constant(Tensor::from_rows(&[[3.0, -1.0], [3.0, 1.0]]));
        let (y, stats) = x.batch_norm(gamma, beta, None).unwrap();
        let y = y.value();
        assert_eq!(y.get(0, 0), 0.0);
        assert_eq!(y.get(1, 0), 0.0);
        let expected = 1.0 / (1.0 + NORM_EPS).sqrt();
        assert!((y.get(0, 1) + expected).abs() < 1e-15);
        assert!((y.get(1, 1) - expected).abs() < 1e-15);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![3.0, 0.0]);
        assert_eq!(stats.var, vec![0.0, 1.0]);

        let single = tape.constant(Tensor::ones(&[1, 2]));
        assert!(single.batch_norm(gamma, beta, None).is_err());
        let (a, none) = single.batch_norm(gamma, beta, Some(&stats)).unwrap();
        let (b, _) = single.batch_norm(gamma, beta, Some(&stats)).unwrap();
        assert!(none.is_none());
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[1.0, -3.0, 7.5], [0.0, 0.0, 1e-3]]));
        let s = x.softmax(1).unwrap().value();
        for i in 0..2 {
            let total: f64 = s.row_slice(i).iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn straight_through_forwards_hard_and_backprops_soft() {
        let tape = Tape::new();
        let soft = tape.param(Tensor::row(&[0.2, 0.8]));
        let st = soft.straight_through(Tensor::row(&[0.0, 1.0])).unwrap();
        assert_eq!(st.value().data(), &[0.0, 1.0]);
        let w = tape.constant(Tensor::row(&[3.0, 5.0]));
        let loss = st.hadamard(w).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap().get(soft).unwrap();
        assert_eq!(g.data(), &[3.0, 5.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let tape = Tape::new();
        let x = tape.param(Tensor::row(&[1e200]));
        assert!(matches!(x.square(), Err(Error::NonFinite { .. })));
    }
}
