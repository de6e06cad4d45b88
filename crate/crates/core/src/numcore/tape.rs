//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records primitive operations on dense matrices together with
//! their forward values. Nodes are appended in evaluation order, so the
//! reverse of insertion order is a reverse topological order and
//! [`Tape::backward`] visits every node exactly once.
//!
//! Leaves registered with [`Tape::param`] carry a caller-chosen key; the
//! returned [`Gradients`] holds one gradient per key, zero-filled for keys
//! the loss does not depend on.

use std::collections::BTreeMap;

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    SubCol(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    Square(NodeId),
    SumAll(NodeId),
    RowSum(NodeId),
    LseRows(NodeId),
    ColSlice(NodeId, usize),
    RowSlice(NodeId, usize),
    ConcatCols(Vec<NodeId>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Record of a differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<(NodeId, usize)>,
}

/// Gradients of a scalar loss keyed by leaf key.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_key: BTreeMap<usize, Matrix>,
}

impl Gradients {
    pub fn get(&self, key: usize) -> Option<&Matrix> {
        self.by_key.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Matrix)> {
        self.by_key.iter().map(|(k, m)| (*k, m))
    }

    pub fn into_map(self) -> BTreeMap<usize, Matrix> {
        self.by_key
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "scalar() on non-scalar node");
        v[(0, 0)]
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Differentiable leaf; its gradient is reported under `key`.
    pub fn param(&mut self, value: Matrix, key: usize) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.leaves.push((id, key));
        id
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(a).map(f);
        self.push(v, op)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    fn row_broadcast(&mut self, a: NodeId, row: NodeId, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "row operand must be 1xk");
        assert_eq!(av.cols(), rv.cols(), "row broadcast width");
        let mut out = av.clone();
        let r = rv.as_slice();
        for i in 0..out.rows() {
            for (x, y) in out.row_mut(i).iter_mut().zip(r) {
                *x = f(*x, *y);
            }
        }
        out
    }

    fn col_broadcast(&mut self, a: NodeId, col: NodeId, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.cols(), 1, "column operand must be nx1");
        assert_eq!(av.rows(), cv.rows(), "column broadcast height");
        let mut out = av.clone();
        for i in 0..out.rows() {
            let c = cv[(i, 0)];
            for x in out.row_mut(i) {
                *x = f(*x, c);
            }
        }
        out
    }

    /// `a + 1 row` with a 1xk row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.row_broadcast(a, row, |x, y| x + y);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.row_broadcast(a, row, |x, y| x * y);
        self.push(v, Op::MulRow(a, row))
    }

    /// `a - col` with an nx1 column broadcast over the columns of `a`.
    pub fn sub_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let v = self.col_broadcast(a, col, |x, y| x - y);
        self.push(v, Op::SubCol(a, col))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let v = self.col_broadcast(a, col, |x, y| x * y);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::recip, Op::Recip(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Matrix::filled(1, 1, s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over columns: nxk -> nx1.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let sums: Vec<f64> = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        self.push(Matrix::col_vector(&sums), Op::RowSum(a))
    }

    /// Row-wise log-sum-exp: nxk -> nx1.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let out: Vec<f64> = (0..av.rows()).map(|r| super::logsumexp(av.row(r))).collect();
        self.push(Matrix::col_vector(&out), Op::LseRows(a))
    }

    pub fn col_slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).col_block(start, len);
        self.push(v, Op::ColSlice(a, start))
    }

    pub fn row_slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).row_block(start, len);
        self.push(v, Op::RowSlice(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat height");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Reverse pass from a 1x1 loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss node is not on this tape"));
        }
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::contract(format!("loss must be scalar, got {r}x{c}")));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut adj, *a, av.shape());
                    gemm(1.0, &g, false, bv, true, 1.0, ga);
                    let gb = acc(&mut adj, *b, bv.shape());
                    gemm(1.0, av, true, &g, false, 1.0, gb);
                }
                Op::Transpose(a) => {
                    add_into(acc(&mut adj, *a, g.transpose().shape()), &g.transpose(), 1.0);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut adj, *a, g.shape()), &g, 1.0);
                    add_into(acc(&mut adj, *b, g.shape()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut adj, *a, g.shape()), &g, 1.0);
                    add_into(acc(&mut adj, *b, g.shape()), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    add_into(acc(&mut adj, *a, g.shape()), &ga, 1.0);
                    add_into(acc(&mut adj, *b, g.shape()), &gb, 1.0);
                }
                Op::Scale(a, k) => add_into(acc(&mut adj, *a, g.shape()), &g, *k),
                Op::AddScalar(a) => add_into(acc(&mut adj, *a, g.shape()), &g, 1.0),
                Op::AddRow(a, row) => {
                    add_into(acc(&mut adj, *a, g.shape()), &g, 1.0);
                    let gr = acc(&mut adj, *row, (1, g.cols()));
                    for r in 0..g.rows() {
                        for (x, y) in gr.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
                Op::MulRow(a, row) => {
                    let (av, rv) = (self.value(*a), self.value(*row));
                    let ga = acc(&mut adj, *a, g.shape());
                    for r in 0..g.rows() {
                        for ((x, gy), w) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(rv.as_slice()) {
                            *x += gy * w;
                        }
                    }
                    let gr = acc(&mut adj, *row, (1, g.cols()));
                    for r in 0..g.rows() {
                        for ((x, gy), av) in gr.as_mut_slice().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *x += gy * av;
                        }
                    }
                }
                Op::SubCol(a, col) => {
                    add_into(acc(&mut adj, *a, g.shape()), &g, 1.0);
                    let gc = acc(&mut adj, *col, (g.rows(), 1));
                    for r in 0..g.rows() {
                        gc[(r, 0)] -= g.row(r).iter().sum::<f64>();
                    }
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (self.value(*a), self.value(*col));
                    let ga = acc(&mut adj, *a, g.shape());
                    for r in 0..g.rows() {
                        let c = cv[(r, 0)];
                        for (x, gy) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                            *x += gy * c;
                        }
                    }
                    let gc = acc(&mut adj, *col, (g.rows(), 1));
                    for r in 0..g.rows() {
                        gc[(r, 0)] += g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |gy, y| gy * (1.0 - y * y));
                    add_into(acc(&mut adj, *a, g.shape()), &d, 1.0);
                }
                Op::Softplus(a) => {
                    let d = g.zip_map(self.value(*a), |gy, x| gy * sigmoid(x));
                    add_into(acc(&mut adj, *a, g.shape()), &d, 1.0);
                }
                Op::Exp(a) => {
                    let d = g.zip_map(&node.value, |gy, y| gy * y);
                    add_into(acc(&mut adj, *a, g.shape()), &d, 1.0);
                }
                Op::Log(a) => {
                    let d = g.zip_map(self.value(*a), |gy, x| gy / x);
                    add_into(acc(&mut adj, *a, g.shape()), &d, 1.0);
                }
                Op::Sqrt(a) => {
                    let d = g.zip_map(&node.value, |gy, y| gy / (2.0 * y));
                    add_into(acc(&mut adj, *a, g.shape()), &d, 1.0);
                }
                Op::Recip(a) => {
                    let d = g.zip_map(&node.value, |gy, y| -gy * y * y);
                    add_into(acc(&mut adj, *a, g.shape()), &d, 1.0);
                }
                Op::Square(a) => {
                    let d = g.zip_map(self.value(*a), |gy, x| 2.0 * gy * x);
                    add_into(acc(&mut adj, *a, g.shape()), &d, 1.0);
                }
                Op::SumAll(a) => {
                    let s = g[(0, 0)];
                    let shape = self.value(*a).shape();
                    for x in acc(&mut adj, *a, shape).as_mut_slice() {
                        *x += s;
                    }
                }
                Op::RowSum(a) => {
                    let shape = self.value(*a).shape();
                    let ga = acc(&mut adj, *a, shape);
                    for r in 0..shape.0 {
                        let s = g[(r, 0)];
                        for x in ga.row_mut(r) {
                            *x += s;
                        }
                    }
                }
                Op::LseRows(a) => {
                    let av = self.value(*a);
                    let ga = acc(&mut adj, *a, av.shape());
                    for r in 0..av.rows() {
                        let (s, y) = (g[(r, 0)], node.value[(r, 0)]);
                        if y == f64::NEG_INFINITY {
                            continue;
                        }
                        for (x, v) in ga.row_mut(r).iter_mut().zip(av.row(r)) {
                            *x += s * (v - y).exp();
                        }
                    }
                }
                Op::ColSlice(a, start) => {
                    let shape = self.value(*a).shape();
                    let ga = acc(&mut adj, *a, shape);
                    for r in 0..g.rows() {
                        for (x, y) in ga.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
                Op::RowSlice(a, start) => {
                    let shape = self.value(*a).shape();
                    let ga = acc(&mut adj, *a, shape);
                    for r in 0..g.rows() {
                        for (x, y) in ga.row_mut(start + r).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let shape = self.value(*p).shape();
                        let gp = acc(&mut adj, *p, shape);
                        for r in 0..shape.0 {
                            for (x, y) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + shape.1]) {
                                *x += y;
                            }
                        }
                        off += shape.1;
                    }
                }
            }
        }

        let mut by_key: BTreeMap<usize, Matrix> = BTreeMap::new();
        for &(id, key) in &self.leaves {
            let shape = self.value(id).shape();
            let slot = by_key
                .entry(key)
                .or_insert_with(|| Matrix::zeros(shape.0, shape.1));
            if let Some(Some(g)) = adj.get(id.0) {
                add_into(slot, g, 1.0);
            }
        }
        Ok(Gradients { by_key })
    }
}

/// Adjoint slot for `id`, zero-initialized on first touch.
fn acc(adj: &mut [Option<Matrix>], id: NodeId, shape: (usize, usize)) -> &mut Matrix {
    adj[id.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn add_into(dst: &mut Matrix, src: &Matrix, k: f64) {
    assert_eq!(dst.shape(), src.shape(), "adjoint shape");
    for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *d += k * s;
    }
}
