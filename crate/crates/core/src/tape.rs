//! Reverse-mode automatic differentiation on a matrix-granularity tape.
//!
//! Every operation appends one node holding the full matrix value and the
//! indices of its parents. Parents always precede children, so walking the
//! tape backwards from the loss node is already a reverse topological order
//! and visits each node exactly once. Gradients are accumulated per node;
//! a node with no path to the loss keeps an exactly-zero gradient.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Floor for log arguments. Probabilities can underflow; clamping bounds the
/// losses without materially moving their optima.
pub const LOG_EPS: f64 = 1e-12;

/// Smoothing for the Frobenius norm, sqrt(|A|^2 + DELTA^2), so the gradient
/// exists at the zero matrix.
pub const FROBENIUS_DELTA: f64 = 1e-8;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Hadamard(usize, usize),
    Log(usize),
    Relu(usize),
    SoftmaxColumns(usize),
    Sum(usize),
    MeanColumns(usize),
    Trace(usize),
    FrobeniusNorm(usize),
    Transpose(usize),
    BroadcastColumn(usize, usize),
    ConcatColumns(usize, usize),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Computation tape. Confined to one thread; build the graph forward, then
/// call [`Tape::backward`] on a scalar node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        Var { id }
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.id].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.value(v);
        if m.rows() != 1 || m.cols() != 1 {
            return Err(Error::BadShape {
                op: "scalar",
                expected: "1x1",
                rows: m.rows(),
                cols: m.cols(),
            });
        }
        Ok(m.get(0, 0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a.id, b.id)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a.id, b.id)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a.id, b.id)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a.id, c))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Hadamard(a.id, b.id)))
    }

    /// Elementwise ln with the argument clamped at [`LOG_EPS`]; never NaN on
    /// finite input.
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(LOG_EPS).ln());
        self.push(value, Op::Log(a.id))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a.id))
    }

    /// Column softmax with per-column max subtraction; each output column
    /// sums to 1 and entries stay in (0, 1).
    pub fn softmax_columns(&mut self, a: Var) -> Var {
        let z = self.value(a);
        let (rows, cols) = (z.rows(), z.cols());
        let mut out = Matrix::zeros(rows, cols);
        for j in 0..cols {
            let mut max = f64::NEG_INFINITY;
            for i in 0..rows {
                max = max.max(z.get(i, j));
            }
            let mut denom = 0.0;
            for i in 0..rows {
                let e = (z.get(i, j) - max).exp();
                out.set(i, j, e);
                denom += e;
            }
            for i in 0..rows {
                out.set(i, j, out.get(i, j) / denom);
            }
        }
        self.push(out, Op::SoftmaxColumns(a.id))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.push(value, Op::Sum(a.id))
    }

    /// Row-wise mean over columns: (1/B) * M * 1_B, a rows x 1 node.
    pub fn mean_columns(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mean_columns()?;
        Ok(self.push(value, Op::MeanColumns(a.id)))
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.rows() != m.cols() {
            return Err(Error::BadShape {
                op: "trace",
                expected: "square",
                rows: m.rows(),
                cols: m.cols(),
            });
        }
        let t = (0..m.rows()).map(|i| m.get(i, i)).sum();
        Ok(self.push(Matrix::filled(1, 1, t), Op::Trace(a.id)))
    }

    /// Smoothed Frobenius norm sqrt(tr(A^T A) + delta^2), a 1x1 node.
    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let sq: f64 = self.value(a).data().iter().map(|v| v * v).sum();
        let value = (sq + FROBENIUS_DELTA * FROBENIUS_DELTA).sqrt();
        self.push(Matrix::filled(1, 1, value), Op::FrobeniusNorm(a.id))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a.id))
    }

    /// Replicate a rows x 1 column vector into rows x cols.
    pub fn broadcast_column(&mut self, a: Var, cols: usize) -> Result<Var> {
        let m = self.value(a);
        if m.cols() != 1 {
            return Err(Error::BadShape {
                op: "broadcast_column",
                expected: "rows x 1",
                rows: m.rows(),
                cols: m.cols(),
            });
        }
        let mut out = Matrix::zeros(m.rows(), cols);
        for i in 0..m.rows() {
            let v = m.get(i, 0);
            for j in 0..cols {
                out.set(i, j, v);
            }
        }
        Ok(self.push(out, Op::BroadcastColumn(a.id, cols)))
    }

    pub fn concat_columns(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_columns(self.value(b))?;
        Ok(self.push(value, Op::ConcatColumns(a.id, b.id)))
    }

    /// Reverse pass from a scalar loss node. Walks ids downward once, which
    /// is reverse topological order on an append-only tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let m = self.value(loss);
        if m.rows() != 1 || m.cols() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                expected: "scalar (1x1) loss",
                rows: m.rows(),
                cols: m.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(Matrix::filled(1, 1, 1.0));

        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            shapes: self
                .nodes
                .iter()
                .map(|n| (n.value.rows(), n.value.cols()))
                .collect(),
            grads,
        })
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let acc = |grads: &mut [Option<Matrix>], pid: usize, contrib: Matrix| {
            match &mut grads[pid] {
                Some(existing) => {
                    let summed = existing.add(&contrib).expect("gradient shape");
                    *existing = summed;
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let bt = self.nodes[b].value.transpose();
                let at = self.nodes[a].value.transpose();
                acc(grads, a, g.matmul(&bt).expect("matmul backward"));
                acc(grads, b, at.matmul(g).expect("matmul backward"));
            }
            Op::Add(a, b) => {
                acc(grads, a, g.clone());
                acc(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, a, g.clone());
                acc(grads, b, g.scale(-1.0));
            }
            Op::Scale(a, c) => {
                acc(grads, a, g.scale(c));
            }
            Op::Hadamard(a, b) => {
                acc(grads, a, g.hadamard(&self.nodes[b].value).expect("shape"));
                acc(grads, b, g.hadamard(&self.nodes[a].value).expect("shape"));
            }
            Op::Log(a) => {
                // Clamped region is flat: zero derivative below LOG_EPS.
                let x = &self.nodes[a].value;
                let mut contrib = Matrix::zeros(x.rows(), x.cols());
                for (i, out) in contrib.data_mut().iter_mut().enumerate() {
                    let xv = x.data()[i];
                    if xv > LOG_EPS {
                        *out = g.data()[i] / xv;
                    }
                }
                acc(grads, a, contrib);
            }
            Op::Relu(a) => {
                let x = &self.nodes[a].value;
                let mut contrib = Matrix::zeros(x.rows(), x.cols());
                for (i, out) in contrib.data_mut().iter_mut().enumerate() {
                    if x.data()[i] > 0.0 {
                        *out = g.data()[i];
                    }
                }
                acc(grads, a, contrib);
            }
            Op::SoftmaxColumns(a) => {
                let s = &self.nodes[id].value;
                let (rows, cols) = (s.rows(), s.cols());
                let mut contrib = Matrix::zeros(rows, cols);
                for j in 0..cols {
                    let mut dot = 0.0;
                    for i in 0..rows {
                        dot += g.get(i, j) * s.get(i, j);
                    }
                    for i in 0..rows {
                        contrib.set(i, j, s.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                acc(grads, a, contrib);
            }
            Op::Sum(a) => {
                let shape = &self.nodes[a].value;
                acc(grads, a, Matrix::filled(shape.rows(), shape.cols(), g.get(0, 0)));
            }
            Op::MeanColumns(a) => {
                let x = &self.nodes[a].value;
                let inv = 1.0 / x.cols() as f64;
                let mut contrib = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        contrib.set(i, j, g.get(i, 0) * inv);
                    }
                }
                acc(grads, a, contrib);
            }
            Op::Trace(a) => {
                let n = self.nodes[a].value.rows();
                acc(grads, a, Matrix::identity(n).scale(g.get(0, 0)));
            }
            Op::FrobeniusNorm(a) => {
                // d/dA sqrt(|A|^2 + delta^2) = A / value; value >= delta > 0.
                let value = self.nodes[id].value.get(0, 0);
                acc(grads, a, self.nodes[a].value.scale(g.get(0, 0) / value));
            }
            Op::Transpose(a) => {
                acc(grads, a, g.transpose());
            }
            Op::BroadcastColumn(a, cols) => {
                let rows = self.nodes[a].value.rows();
                let mut contrib = Matrix::zeros(rows, 1);
                for i in 0..rows {
                    let mut s = 0.0;
                    for j in 0..cols {
                        s += g.get(i, j);
                    }
                    contrib.set(i, 0, s);
                }
                acc(grads, a, contrib);
            }
            Op::ConcatColumns(a, b) => {
                let ca = self.nodes[a].value.cols();
                let rows = g.rows();
                let mut ga = Matrix::zeros(rows, ca);
                let mut gb = Matrix::zeros(rows, g.cols() - ca);
                for i in 0..rows {
                    for j in 0..ca {
                        ga.set(i, j, g.get(i, j));
                    }
                    for j in ca..g.cols() {
                        gb.set(i, j - ca, g.get(i, j));
                    }
                }
                acc(grads, a, ga);
                acc(grads, b, gb);
            }
        }
    }
}

/// Result of a backward pass, indexed by [`Var`].
pub struct Gradients {
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; exactly zero when `v` has
    /// no path to the loss.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                Matrix::zeros(r, c)
            }
        }
    }
}
