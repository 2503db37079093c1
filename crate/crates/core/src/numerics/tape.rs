//! Tensor-level reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] computes its value eagerly and appends a node
//! to the owning [`Tape`]. Nodes are appended in creation order, so the tape is
//! always topologically sorted and [`Tape::backward`] is a single reverse sweep.
//! A tape serves exactly one backward pass.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::tensor::{
    cosine_matrix, dot, log_sum_exp, matmul_into, matmul_t_into, t_matmul_into, Tensor,
};
use crate::error::{Error, Result};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    Square(usize),
    RmsNorm(usize),
    CausalSoftmax(usize),
    SliceCols { src: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Row(usize, usize),
    Gather { table: usize, ids: Vec<usize> },
    CosineMatrix(usize, usize),
    Sum(usize),
    CrossEntropy { logits: usize, targets: Vec<usize> },
    Reshape(usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Single-use record of a forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
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

/// Gradients of every trainable leaf, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a trainable leaf; `None` for constants and intermediates.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
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

    /// Leaf that receives a gradient.
    pub fn param(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.push(value.into(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.push(value.into(), Op::Leaf, false)
    }

    fn push(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let rg = inputs.iter().any(|&i| self.requires_grad(i));
        self.push(Arc::new(value), op, rg)
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Usage("loss belongs to a different tape".into()));
        }
        if self.consumed.get() {
            return Err(Error::Usage("tape already consumed by a previous backward".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::shape("backward", root.value.shape(), &[]));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
        }

        let mut out = Vec::with_capacity(nodes.len());
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let data = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.push(Some(
                    Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"),
                ));
            } else {
                out.push(None);
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let numel = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; numel]))
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if let Some(da) = accumulate(nodes, grads, *a) {
                matmul_t_into(g, val(*b).data(), da, m, n, k);
            }
            if let Some(db) = accumulate(nodes, grads, *b) {
                t_matmul_into(val(*a).data(), g, db, m, k, n);
            }
        }
        Op::MatMulT(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[0];
            if let Some(da) = accumulate(nodes, grads, *a) {
                matmul_into(g, val(*b).data(), da, m, n, k);
            }
            if let Some(db) = accumulate(nodes, grads, *b) {
                t_matmul_into(g, val(*a).data(), db, m, n, k);
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = accumulate(nodes, grads, *a) {
                add_into(da, g, 1.0);
            }
            if let Some(db) = accumulate(nodes, grads, *b) {
                add_into(db, g, 1.0);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = accumulate(nodes, grads, *a) {
                add_into(da, g, 1.0);
            }
            if let Some(db) = accumulate(nodes, grads, *b) {
                add_into(db, g, -1.0);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(da) = accumulate(nodes, grads, *a) {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
            }
            if let Some(db) = accumulate(nodes, grads, *b) {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
        }
        Op::AddRow(a, bias) => {
            if let Some(da) = accumulate(nodes, grads, *a) {
                add_into(da, g, 1.0);
            }
            let n = out.cols();
            if let Some(db) = accumulate(nodes, grads, *bias) {
                for row in g.chunks(n) {
                    add_into(db, row, 1.0);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(da) = accumulate(nodes, grads, *a) {
                add_into(da, g, *c);
            }
        }
        Op::Silu(a) => {
            let x = val(*a).data();
            if let Some(da) = accumulate(nodes, grads, *a) {
                for ((d, gi), &xi) in da.iter_mut().zip(g).zip(x) {
                    let s = sigmoid(xi);
                    *d += gi * s * (1.0 + xi * (1.0 - s));
                }
            }
        }
        Op::Square(a) => {
            let x = val(*a).data();
            if let Some(da) = accumulate(nodes, grads, *a) {
                for ((d, gi), &xi) in da.iter_mut().zip(g).zip(x) {
                    *d += 2.0 * xi * gi;
                }
            }
        }
        Op::RmsNorm(a) => {
            let x = val(*a);
            let n = x.cols();
            if let Some(da) = accumulate(nodes, grads, *a) {
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let gr = &g[r * n..(r + 1) * n];
                    let rms = (dot(xr, xr) / n as f64 + RMS_EPS).sqrt();
                    let xg = dot(xr, gr);
                    let coef = xg / (n as f64 * rms * rms * rms);
                    for j in 0..n {
                        da[r * n + j] += gr[j] / rms - xr[j] * coef;
                    }
                }
            }
        }
        Op::CausalSoftmax(a) => {
            let y = out.data();
            let n = out.cols();
            if let Some(da) = accumulate(nodes, grads, *a) {
                for t in 0..out.rows() {
                    let width = t + 1;
                    let yr = &y[t * n..t * n + width];
                    let gr = &g[t * n..t * n + width];
                    let yg = dot(yr, gr);
                    for j in 0..width {
                        da[t * n + j] += yr[j] * (gr[j] - yg);
                    }
                }
            }
        }
        Op::SliceCols { src, start } => {
            let src_cols = val(*src).cols();
            let len = out.cols();
            if let Some(da) = accumulate(nodes, grads, *src) {
                for r in 0..out.rows() {
                    let dst = &mut da[r * src_cols + start..r * src_cols + start + len];
                    add_into(dst, &g[r * len..(r + 1) * len], 1.0);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if let Some(dp) = accumulate(nodes, grads, p) {
                    for r in 0..out.rows() {
                        add_into(
                            &mut dp[r * w..(r + 1) * w],
                            &g[r * total + offset..r * total + offset + w],
                            1.0,
                        );
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).numel();
                if let Some(dp) = accumulate(nodes, grads, p) {
                    add_into(dp, &g[offset..offset + len], 1.0);
                }
                offset += len;
            }
        }
        Op::Row(a, i) => {
            let n = out.numel();
            if let Some(da) = accumulate(nodes, grads, *a) {
                add_into(&mut da[i * n..(i + 1) * n], g, 1.0);
            }
        }
        Op::Gather { table, ids } => {
            let d = out.cols();
            if let Some(dt) = accumulate(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                }
            }
        }
        Op::CosineMatrix(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let d = av.cols();
            let (ra, rb) = (av.rows(), bv.rows());
            let na: Vec<f64> = (0..ra).map(|i| dot(av.row(i), av.row(i))).collect();
            let nb: Vec<f64> = (0..rb).map(|j| dot(bv.row(j), bv.row(j))).collect();
            let c = out.data();
            let mut ga = vec![0.0; ra * d];
            let mut gb = vec![0.0; rb * d];
            for i in 0..ra {
                for j in 0..rb {
                    let gij = g[i * rb + j];
                    if gij == 0.0 {
                        continue;
                    }
                    let cij = c[i * rb + j];
                    let inv = 1.0 / (na[i] * nb[j]).sqrt();
                    let (x, y) = (av.row(i), bv.row(j));
                    for k in 0..d {
                        ga[i * d + k] += gij * (y[k] * inv - cij * x[k] / na[i]);
                        gb[j * d + k] += gij * (x[k] * inv - cij * y[k] / nb[j]);
                    }
                }
            }
            if let Some(da) = accumulate(nodes, grads, *a) {
                add_into(da, &ga, 1.0);
            }
            if let Some(db) = accumulate(nodes, grads, *b) {
                add_into(db, &gb, 1.0);
            }
        }
        Op::Sum(a) => {
            if let Some(da) = accumulate(nodes, grads, *a) {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::CrossEntropy { logits, targets } => {
            let lv = val(*logits);
            let k = lv.cols();
            let scale = g[0] / targets.len() as f64;
            if let Some(dl) = accumulate(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    let row = lv.row(r);
                    let lse = log_sum_exp(row);
                    for j in 0..k {
                        let p = (row[j] - lse).exp();
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[r * k + j] += scale * (p - onehot);
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = accumulate(nodes, grads, *a) {
                add_into(da, g, 1.0);
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a single-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Usage("operands live on different tapes".into()))
        }
    }

    fn matrix_dims(t: &Tensor, op: &'static str, other: &Tensor) -> Result<(usize, usize)> {
        match t.shape() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::shape(op, t.shape(), other.shape())),
        }
    }

    /// Matrix product `self[m×k] · other[k×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (m, k) = Self::matrix_dims(&a, "matmul", &b)?;
        let (k2, n) = Self::matrix_dims(&b, "matmul", &a)?;
        if k != k2 {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.tape.record(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// `self[m×k] · other[n×k]ᵀ`; a linear layer with weight stored out×in.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (m, k) = Self::matrix_dims(&a, "matmul_t", &b)?;
        let (n, k2) = Self::matrix_dims(&b, "matmul_t", &a)?;
        if k != k2 {
            return Err(Error::shape("matmul_t", a.shape(), b.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_t_into(a.data(), b.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.tape.record(value, Op::MatMulT(self.id, other.id), &[self.id, other.id]))
    }

    fn elementwise(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.record(value, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias)?;
        let (a, b) = (self.value(), bias.value());
        let n = a.cols();
        if b.numel() != n || a.shape().len() != 2 {
            return Err(Error::shape("add_row", a.shape(), b.shape()));
        }
        let bd = b.data();
        let data = a
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.record(value, Op::AddRow(self.id, bias.id), &[self.id, bias.id]))
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.tape.record(value, op, &[self.id])
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|x| c * x, Op::Scale(self.id, c))
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(|x| x * sigmoid(x), Op::Silu(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    /// Row-wise root-mean-square normalization (unit gain).
    pub fn rms_norm(self) -> Var<'t> {
        let a = self.value();
        let n = a.cols();
        let mut data = Vec::with_capacity(a.numel());
        for r in 0..a.rows() {
            let row = a.row(r);
            let rms = (dot(row, row) / n as f64 + RMS_EPS).sqrt();
            data.extend(row.iter().map(|x| x / rms));
        }
        let value = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.tape.record(value, Op::RmsNorm(self.id), &[self.id])
    }

    /// Row-wise softmax of a square score matrix where row t sees columns 0..=t.
    pub fn causal_softmax(self) -> Result<Var<'t>> {
        let a = self.value();
        let (l, l2) = match a.shape() {
            [l, l2] => (*l, *l2),
            s => return Err(Error::shape("causal_softmax", s, s)),
        };
        if l != l2 {
            return Err(Error::shape("causal_softmax", a.shape(), &[l, l]));
        }
        let mut data = vec![0.0; l * l];
        for t in 0..l {
            let row = &a.row(t)[..=t];
            let lse = log_sum_exp(row);
            for j in 0..=t {
                data[t * l + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::new(vec![l, l], data)?;
        Ok(self.tape.record(value, Op::CausalSoftmax(self.id), &[self.id]))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = match a.shape() {
            [m, n] => (*m, *n),
            s => return Err(Error::shape("slice_cols", s, &[start, len])),
        };
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", a.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&a.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![m, len], data)?;
        Ok(self
            .tape
            .record(value, Op::SliceCols { src: self.id, start }, &[self.id]))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(self, i: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape().len() != 2 || i >= a.rows() {
            return Err(Error::Index {
                index: i,
                len: a.rows(),
            });
        }
        let value = Tensor::vector(a.row(i).to_vec());
        Ok(self.tape.record(value, Op::Row(self.id, i), &[self.id]))
    }

    /// Cosine similarity between the rows of `self` [B×d] and `other` [K×d];
    /// vectors count as single rows. Refuses zero-norm rows.
    pub fn cosine_matrix(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape().len() > 2 || b.shape().len() > 2 {
            return Err(Error::shape("cosine_matrix", a.shape(), b.shape()));
        }
        let value = cosine_matrix(&a, &b)?;
        Ok(self.tape.record(
            value,
            Op::CosineMatrix(self.id, other.id),
            &[self.id, other.id],
        ))
    }

    /// Cosine similarity of two equal-length vectors.
    pub fn cosine(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 1 || a.shape() != b.shape() {
            return Err(Error::shape("cosine", a.shape(), b.shape()));
        }
        self.cosine_matrix(other)?.reshape(&[])
    }

    pub fn sum(self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        self.tape.record(Tensor::scalar(total), Op::Sum(self.id), &[self.id])
    }

    /// Mean over rows of −log softmax(row)[target]; a vector is a single row.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let k = a.cols();
        if a.shape().len() > 2 || a.rows() != targets.len() || targets.is_empty() {
            return Err(Error::shape("cross_entropy", a.shape(), &[targets.len()]));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(Error::Index { index: t, len: k });
            }
            let row = a.row(r);
            total += log_sum_exp(row) - row[t];
        }
        let value = Tensor::scalar(total / targets.len() as f64);
        Ok(self.tape.record(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
            },
            &[self.id],
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.record(value, Op::Reshape(self.id), &[self.id]))
    }

    /// Looks up rows of an embedding table.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        let (vocab, d) = match table.shape() {
            [v, d] => (*v, *d),
            s => return Err(Error::shape("gather_rows", s, &[ids.len()])),
        };
        if ids.is_empty() {
            return Err(Error::Input("empty id sequence".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocab {
                    id,
                    vocab_size: vocab,
                });
            }
            data.extend_from_slice(table.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.tape.record(
            value,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        ))
    }
}

fn concat(parts: &[Var<'_>], rows: bool) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Input("concat of zero parts".into()))?;
    let values: Vec<Arc<Tensor>> = parts
        .iter()
        .map(|p| {
            first.same_tape(p)?;
            Ok(p.value())
        })
        .collect::<Result<_>>()?;
    if rows {
        let d = values[0].cols();
        let mut data = Vec::new();
        let mut n_rows = 0;
        for v in &values {
            if v.cols() != d || v.shape().len() > 2 {
                return Err(Error::shape("concat_rows", values[0].shape(), v.shape()));
            }
            n_rows += v.rows();
            data.extend_from_slice(v.data());
        }
        Tensor::new(vec![n_rows, d], data)
    } else {
        let m = values[0].rows();
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        for v in &values {
            if v.shape().len() != 2 || v.rows() != m {
                return Err(Error::shape("concat_cols", values[0].shape(), v.shape()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        Tensor::new(vec![m, total], data)
    }
}

/// Stacks matrices (or vectors, as single rows) vertically.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let value = concat(parts, true)?;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(parts[0].tape.record(value, Op::ConcatRows(ids.clone()), &ids))
}

/// Joins equal-height matrices side by side.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let value = concat(parts, false)?;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(parts[0].tape.record(value, Op::ConcatCols(ids.clone()), &ids))
}
