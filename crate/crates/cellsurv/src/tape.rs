//! Reverse-mode differentiation tape with a floating-point-operation ledger.
//!
//! A [`Tape`] records every forward operation as an append-only node list in
//! topological order. [`Tape::backward`] (or [`Tape::backward_seeded`]) runs
//! once per tape, accumulating gradients in reverse; afterwards the tape is
//! consumed and can only be dropped. A tape and its values belong to one
//! worker at a time; independent tapes may run concurrently.
//!
//! FLOP convention (fixed so cost measurements are comparable across runs):
//! a multiply-add counts as 2 flops (matmul `m x k x n` records `2mkn`),
//! plain elementwise arithmetic counts 1 flop per element, transcendental
//! activations (sigmoid/tanh/exp) count 4 per element, data movement
//! (concat, gather, transpose) counts 0, and neighbor averaging over an
//! undirected edge set E with feature width d counts `2|E|d`. Only forward
//! operations are metered.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::tensor::Tensor;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Value(usize);

/// Variance floor for [`Tape::instance_norm`].
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Inputs above this make `exp` overflow f64; guarded explicitly.
const EXP_OVERFLOW_LIMIT: f64 = 700.0;

enum Op {
    Leaf,
    MatMul(Value, Value),
    Transpose(Value),
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Relu(Value),
    Sigmoid(Value),
    Tanh(Value),
    Exp(Value),
    Log(Value),
    SoftmaxRows(Value),
    ConcatCols(Vec<Value>),
    ConcatRows(Vec<Value>),
    RowMean(Value),
    RowMax(Value, Vec<usize>),
    GatherRows(Value, Rc<Vec<usize>>),
    InstanceNorm(Value, f64),
    NeighborMean(Value, Rc<Adjacency>),
    MulColVec(Value, Value),
    AddRowVec(Value, Value),
    ScalarMul(Value, f64),
    SumAll(Value),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by tape node, produced by backward.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Value) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, or zeros when the node did not participate in the
    /// loss (unused parameters have zero gradient).
    pub fn get_or_zeros(&self, v: Value, rows: usize, cols: usize) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    flops: u64,
    consumed: bool,
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
            flops: 0,
            consumed: false,
        }
    }

    /// Forward flops recorded so far; monotonically non-decreasing.
    pub fn flop_count(&self) -> u64 {
        self.flops
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Record a constant leaf; no gradient is tracked through it.
    pub fn leaf(&mut self, t: Tensor) -> Value {
        self.push_unchecked(Op::Leaf, t, false)
    }

    /// Record a parameter leaf; backward reports its gradient.
    pub fn param(&mut self, t: Tensor) -> Value {
        self.push_unchecked(Op::Leaf, t, true)
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Value {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Value(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, flops: u64) -> Result<Value> {
        if self.consumed {
            return Err(Error::Contract(
                "tape already consumed by backward; create a fresh tape".into(),
            ));
        }
        self.flops += flops;
        Ok(self.push_unchecked(op, value, needs_grad))
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- ops ------------------------------------------------------------

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k) = self.value(a).shape();
        let (k2, n) = self.value(b).shape();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.value(a).shape_str(),
                rhs: self.value(b).shape_str(),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_acc(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        let flops = 2 * (m as u64) * (k as u64) * (n as u64);
        self.push(Op::MatMul(a, b), Tensor::new(m, n, out)?, needs, flops)
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        let t = self.value(a).transposed();
        let needs = self.needs(a);
        self.push(Op::Transpose(a), t, needs, 0)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Value,
        b: Value,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Value> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op: name,
                lhs: self.value(a).shape_str(),
                rhs: self.value(b).shape_str(),
            });
        }
        let (r, c) = self.value(a).shape();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let n = (r * c) as u64;
        self.push(op, Tensor::new(r, c, data)?, needs, n)
    }

    pub fn relu(&mut self, a: Value) -> Result<Value> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a), 1)
    }

    /// Numerically stable logistic function.
    pub fn sigmoid(&mut self, a: Value) -> Result<Value> {
        self.unary(
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(a),
            4,
        )
    }

    pub fn tanh(&mut self, a: Value) -> Result<Value> {
        self.unary(a, f64::tanh, Op::Tanh(a), 4)
    }

    pub fn exp(&mut self, a: Value) -> Result<Value> {
        if let Some(x) = self
            .value(a)
            .data()
            .iter()
            .find(|x| **x > EXP_OVERFLOW_LIMIT)
        {
            return Err(Error::Domain(format!("exp({x}) would overflow")));
        }
        self.unary(a, f64::exp, Op::Exp(a), 4)
    }

    pub fn log(&mut self, a: Value) -> Result<Value> {
        if let Some(x) = self.value(a).data().iter().find(|x| **x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {x}")));
        }
        self.unary(a, f64::ln, Op::Log(a), 1)
    }

    fn unary(
        &mut self,
        a: Value,
        f: impl Fn(f64) -> f64,
        op: Op,
        flops_per_elem: u64,
    ) -> Result<Value> {
        let (r, c) = self.value(a).shape();
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let needs = self.needs(a);
        let flops = flops_per_elem * (r * c) as u64;
        self.push(op, Tensor::new(r, c, data)?, needs, flops)
    }

    /// Row-wise softmax with max subtraction; each row sums to 1.
    pub fn softmax_rows(&mut self, a: Value) -> Result<Value> {
        let (m, n) = self.value(a).shape();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = self.value(a).row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.needs(a);
        let flops = 8 * (m * n) as u64;
        self.push(Op::SoftmaxRows(a), Tensor::new(m, n, data)?, needs, flops)
    }

    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::Degenerate("concat_cols of no tensors".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: format!("{rows} rows"),
                    rhs: self.value(p).shape_str(),
                });
            }
            cols += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::new(rows, cols, data)?,
            needs,
            0,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::Degenerate("concat_rows of no tensors".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: format!("{cols} cols"),
                    rhs: self.value(p).shape_str(),
                });
            }
            rows += self.value(p).rows();
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::new(rows, cols, data)?,
            needs,
            0,
        )
    }

    /// Column-wise mean over all rows, returning `1 x n`.
    pub fn row_mean(&mut self, a: Value) -> Result<Value> {
        let (m, n) = self.value(a).shape();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(self.value(a).row(i)) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        let needs = self.needs(a);
        let flops = (m * n + n) as u64;
        self.push(Op::RowMean(a), Tensor::new(1, n, out)?, needs, flops)
    }

    /// Column-wise max over all rows, returning `1 x n`. The gradient flows
    /// to the first maximal row per column.
    pub fn row_max(&mut self, a: Value) -> Result<Value> {
        let (m, n) = self.value(a).shape();
        let mut out = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![0usize; n];
        for i in 0..m {
            for (j, &x) in self.value(a).row(i).iter().enumerate() {
                if x > out[j] {
                    out[j] = x;
                    argmax[j] = i;
                }
            }
        }
        let needs = self.needs(a);
        let flops = (m * n) as u64;
        self.push(
            Op::RowMax(a, argmax),
            Tensor::new(1, n, out)?,
            needs,
            flops,
        )
    }

    /// Extract rows by index, in index-list order; duplicates allowed.
    pub fn gather_rows(&mut self, a: Value, indices: &[usize]) -> Result<Value> {
        if indices.is_empty() {
            return Err(Error::Degenerate("gather_rows with empty index list".into()));
        }
        let (m, n) = self.value(a).shape();
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.value(a).row(i));
        }
        let needs = self.needs(a);
        self.push(
            Op::GatherRows(a, Rc::new(indices.to_vec())),
            Tensor::new(indices.len(), n, data)?,
            needs,
            0,
        )
    }

    /// Normalize a `1 x d` vector to zero mean, unit variance (population
    /// variance, floor `1e-5`, no learnable affine).
    pub fn instance_norm(&mut self, a: Value) -> Result<Value> {
        let (r, d) = self.value(a).shape();
        if r != 1 || d < 2 {
            return Err(Error::Degenerate(format!(
                "instance_norm requires a 1 x d vector with d >= 2, got {}",
                self.value(a).shape_str()
            )));
        }
        let x = self.value(a).data();
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        let data = x.iter().map(|&v| (v - mean) * inv_std).collect();
        let needs = self.needs(a);
        let flops = 6 * d as u64;
        self.push(
            Op::InstanceNorm(a, inv_std),
            Tensor::new(1, d, data)?,
            needs,
            flops,
        )
    }

    /// Row k of the output is the mean of neighbor feature rows of node k;
    /// isolated nodes produce a zero row.
    pub fn neighbor_mean(&mut self, features: Value, adj: Rc<Adjacency>) -> Result<Value> {
        let (c, d) = self.value(features).shape();
        if adj.n_nodes() != c {
            return Err(Error::Shape {
                op: "neighbor_mean",
                lhs: format!("{c} feature rows"),
                rhs: format!("{} adjacency nodes", adj.n_nodes()),
            });
        }
        let mut data = vec![0.0; c * d];
        for k in 0..c {
            let nbrs = adj.neighbors(k);
            if nbrs.is_empty() {
                continue;
            }
            let out = &mut data[k * d..(k + 1) * d];
            for &j in nbrs {
                for (o, &x) in out.iter_mut().zip(self.value(features).row(j as usize)) {
                    *o += x;
                }
            }
            let inv = 1.0 / nbrs.len() as f64;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let needs = self.needs(features);
        let flops = 2 * adj.n_edges() as u64 * d as u64;
        self.push(
            Op::NeighborMean(features, adj),
            Tensor::new(c, d, data)?,
            needs,
            flops,
        )
    }

    /// Scale row i of `a` by the scalar `s[i]` (`s` is `m x 1`).
    pub fn mul_colvec(&mut self, a: Value, s: Value) -> Result<Value> {
        let (m, n) = self.value(a).shape();
        if self.value(s).shape() != (m, 1) {
            return Err(Error::Shape {
                op: "mul_colvec",
                lhs: self.value(a).shape_str(),
                rhs: self.value(s).shape_str(),
            });
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let si = self.value(s).data()[i];
            data.extend(self.value(a).row(i).iter().map(|&x| x * si));
        }
        let needs = self.needs(a) || self.needs(s);
        self.push(
            Op::MulColVec(a, s),
            Tensor::new(m, n, data)?,
            needs,
            (m * n) as u64,
        )
    }

    /// Add the row vector `b` (`1 x n`) to every row of `a`.
    pub fn add_rowvec(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, n) = self.value(a).shape();
        if self.value(b).shape() != (1, n) {
            return Err(Error::Shape {
                op: "add_rowvec",
                lhs: self.value(a).shape_str(),
                rhs: self.value(b).shape_str(),
            });
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(
                self.value(a)
                    .row(i)
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(&x, &y)| x + y),
            );
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Op::AddRowVec(a, b),
            Tensor::new(m, n, data)?,
            needs,
            (m * n) as u64,
        )
    }

    pub fn scalar_mul(&mut self, a: Value, k: f64) -> Result<Value> {
        let (r, c) = self.value(a).shape();
        let data = self.value(a).data().iter().map(|&x| x * k).collect();
        let needs = self.needs(a);
        self.push(
            Op::ScalarMul(a, k),
            Tensor::new(r, c, data)?,
            needs,
            (r * c) as u64,
        )
    }

    /// Sum of all entries, returning `1 x 1`.
    pub fn sum_all(&mut self, a: Value) -> Result<Value> {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        let n = self.value(a).len() as u64;
        self.push(Op::SumAll(a), Tensor::scalar(s), needs, n)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar loss. Consumes the tape: a second call is a
    /// contract error.
    pub fn backward(&mut self, loss: Value) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {}",
                self.value(loss).shape_str()
            )));
        }
        self.backward_seeded(loss, Tensor::scalar(1.0))
    }

    /// Reverse pass from an arbitrary output with an explicit cotangent,
    /// used when a loss computed on another tape feeds this one.
    pub fn backward_seeded(&mut self, out: Value, cotangent: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract(
                "tape already consumed; backward may run only once".into(),
            ));
        }
        if cotangent.shape() != self.value(out).shape() {
            return Err(Error::Shape {
                op: "backward_seeded",
                lhs: self.value(out).shape_str(),
                rhs: cotangent.shape_str(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[out.0].needs_grad {
            grads[out.0] = Some(cotangent);
        }
        for id in (0..=out.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).shape();
                let n = self.value(*b).cols();
                if self.needs(*a) {
                    // dA = G . B^T
                    let mut da = vec![0.0; m * k];
                    mm_nt_acc(g.data(), self.value(*b).data(), m, n, k, &mut da);
                    acc(&mut grads[a.0], Tensor::new(m, k, da)?);
                }
                if self.needs(*b) {
                    // dB = A^T . G
                    let mut db = vec![0.0; k * n];
                    mm_tn_acc(self.value(*a).data(), g.data(), m, k, n, &mut db);
                    acc(&mut grads[b.0], Tensor::new(k, n, db)?);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    acc(&mut grads[a.0], g.transposed());
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    acc(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    let (r, c) = g.shape();
                    let data = g.data().iter().map(|&x| -x).collect();
                    acc(&mut grads[b.0], Tensor::new(r, c, data)?);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(&mut grads[a.0], hadamard(g, self.value(*b))?);
                }
                if self.needs(*b) {
                    acc(&mut grads[b.0], hadamard(g, self.value(*a))?);
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let data = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    let (r, c) = g.shape();
                    acc(&mut grads[a.0], Tensor::new(r, c, data)?);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gi, &y)| gi * y * (1.0 - y))
                        .collect();
                    let (r, c) = g.shape();
                    acc(&mut grads[a.0], Tensor::new(r, c, data)?);
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gi, &y)| gi * (1.0 - y * y))
                        .collect();
                    let (r, c) = g.shape();
                    acc(&mut grads[a.0], Tensor::new(r, c, data)?);
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    acc(&mut grads[a.0], hadamard(g, &node.value)?);
                }
            }
            Op::Log(a) => {
                if self.needs(*a) {
                    let data = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gi, &x)| gi / x)
                        .collect();
                    let (r, c) = g.shape();
                    acc(&mut grads[a.0], Tensor::new(r, c, data)?);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let (m, n) = node.value.shape();
                    let mut data = vec![0.0; m * n];
                    for i in 0..m {
                        let y = node.value.row(i);
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                        for j in 0..n {
                            data[i * n + j] = y[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads[a.0], Tensor::new(m, n, data)?);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let mut col0 = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(rows * pc);
                        for i in 0..rows {
                            data.extend_from_slice(&g.row(i)[col0..col0 + pc]);
                        }
                        acc(&mut grads[p.0], Tensor::new(rows, pc, data)?);
                    }
                    col0 += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = node.value.cols();
                let mut row0 = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.needs(p) {
                        let data = g.data()[row0 * cols..(row0 + pr) * cols].to_vec();
                        acc(&mut grads[p.0], Tensor::new(pr, cols, data)?);
                    }
                    row0 += pr;
                }
            }
            Op::RowMean(a) => {
                if self.needs(*a) {
                    let (m, n) = self.value(*a).shape();
                    let inv = 1.0 / m as f64;
                    let mut data = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        data.extend(g.data().iter().map(|&x| x * inv));
                    }
                    acc(&mut grads[a.0], Tensor::new(m, n, data)?);
                }
            }
            Op::RowMax(a, argmax) => {
                if self.needs(*a) {
                    let (m, n) = self.value(*a).shape();
                    let mut data = vec![0.0; m * n];
                    for (j, &i) in argmax.iter().enumerate() {
                        data[i * n + j] = g.data()[j];
                    }
                    acc(&mut grads[a.0], Tensor::new(m, n, data)?);
                }
            }
            Op::GatherRows(a, indices) => {
                if self.needs(*a) {
                    let (m, n) = self.value(*a).shape();
                    let mut data = vec![0.0; m * n];
                    for (out_i, &src_i) in indices.iter().enumerate() {
                        for j in 0..n {
                            data[src_i * n + j] += g.data()[out_i * n + j];
                        }
                    }
                    acc(&mut grads[a.0], Tensor::new(m, n, data)?);
                }
            }
            Op::InstanceNorm(a, inv_std) => {
                if self.needs(*a) {
                    let d = node.value.cols();
                    let y = node.value.data();
                    let gmean = g.data().iter().sum::<f64>() / d as f64;
                    let gy_mean = g
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi * yi)
                        .sum::<f64>()
                        / d as f64;
                    let data = g
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| inv_std * (gi - gmean - yi * gy_mean))
                        .collect();
                    acc(&mut grads[a.0], Tensor::new(1, d, data)?);
                }
            }
            Op::NeighborMean(a, adj) => {
                if self.needs(*a) {
                    let (c, d) = self.value(*a).shape();
                    let mut data = vec![0.0; c * d];
                    for k in 0..c {
                        let nbrs = adj.neighbors(k);
                        if nbrs.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / nbrs.len() as f64;
                        let gr = g.row(k);
                        for &j in nbrs {
                            let out = &mut data[j as usize * d..(j as usize + 1) * d];
                            for (o, &x) in out.iter_mut().zip(gr) {
                                *o += x * inv;
                            }
                        }
                    }
                    acc(&mut grads[a.0], Tensor::new(c, d, data)?);
                }
            }
            Op::MulColVec(a, s) => {
                let (m, n) = self.value(*a).shape();
                if self.needs(*a) {
                    let mut data = Vec::with_capacity(m * n);
                    for i in 0..m {
                        let si = self.value(*s).data()[i];
                        data.extend(g.row(i).iter().map(|&x| x * si));
                    }
                    acc(&mut grads[a.0], Tensor::new(m, n, data)?);
                }
                if self.needs(*s) {
                    let mut data = Vec::with_capacity(m);
                    for i in 0..m {
                        data.push(
                            g.row(i)
                                .iter()
                                .zip(self.value(*a).row(i))
                                .map(|(&gi, &ai)| gi * ai)
                                .sum(),
                        );
                    }
                    acc(&mut grads[s.0], Tensor::new(m, 1, data)?);
                }
            }
            Op::AddRowVec(a, b) => {
                let (m, n) = self.value(*a).shape();
                if self.needs(*a) {
                    acc(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    let mut data = vec![0.0; n];
                    for i in 0..m {
                        for (o, &x) in data.iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads[b.0], Tensor::new(1, n, data)?);
                }
            }
            Op::ScalarMul(a, k) => {
                if self.needs(*a) {
                    let (r, c) = g.shape();
                    let data = g.data().iter().map(|&x| x * k).collect();
                    acc(&mut grads[a.0], Tensor::new(r, c, data)?);
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads[a.0], Tensor::full(r, c, g.data()[0]));
                }
            }
        }
        Ok(())
    }
}

fn acc(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(t) => {
            debug_assert_eq!(t.shape(), delta.shape());
            for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, c) = a.shape();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::new(r, c, data)
}

/// out += a (m x k) . b (k x n), row-major, ikj order.
fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a (m x n) . b^T where b is (k x n): row-row dot products.
fn mm_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut dot = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                dot += x * y;
            }
            *o += dot;
        }
    }
}

/// out += a^T . g where a is (m x k) and g is (m x n): rank-1 accumulation.
fn mm_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Adjacency;
    use rand::Rng;

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::stream(seed, &[99]);
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    /// Random weights kept away from zero so ReLU kinks are not sampled.
    fn randn_off_zero(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut t = randn(rows, cols, seed);
        for v in t.data_mut() {
            if v.abs() < 0.15 {
                *v += 0.3_f64.copysign(*v);
            }
        }
        t
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let id = tape.leaf(Tensor::identity(2));
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = tape.matmul(id, a).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let x = tape.leaf(Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap());
        let y = tape.matmul(p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "message should carry shapes: {msg}");
    }

    #[test]
    fn matmul_flops_are_2mkn() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(3, 4));
        let b = tape.leaf(Tensor::zeros(4, 2));
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.flop_count(), 2 * 3 * 4 * 2);
    }

    #[test]
    fn sigmoid_symmetry_and_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.5);
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(x).unwrap().data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(1, 2, vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::new(1, 2, vec![3.0, 4.0]).unwrap());
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_uniform_shift_invariant_and_normalized() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(1, 2, vec![0.0, 0.0]).unwrap());
        let y = tape.softmax_rows(a).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let big = tape.leaf(Tensor::new(1, 2, vec![1000.0, 1000.0]).unwrap());
        let yb = tape.softmax_rows(big).unwrap();
        assert!(tape.value(yb).all_finite());
        assert_eq!(tape.value(yb).data(), &[0.5, 0.5]);

        let r = tape.leaf(randn(4, 7, 3));
        let yr = tape.softmax_rows(r).unwrap();
        for i in 0..4 {
            let s: f64 = tape.value(yr).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn row_reductions_and_gather() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap());
        let mean = tape.row_mean(a).unwrap();
        assert_eq!(tape.value(mean).data(), &[2.0, 4.0]);
        let max = tape.row_max(a).unwrap();
        assert_eq!(tape.value(max).data(), &[3.0, 5.0]);

        let m = tape.leaf(randn(3, 4, 5));
        let g = tape.gather_rows(m, &[2, 0]).unwrap();
        assert_eq!(tape.value(g).row(0), tape.value(m).row(2));
        assert_eq!(tape.value(g).row(1), tape.value(m).row(0));

        assert!(matches!(
            tape.gather_rows(m, &[]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn instance_norm_constant_vector_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(1, 4, vec![1.0; 4]).unwrap());
        let y = tape.instance_norm(a).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn instance_norm_two_point_hand_value() {
        // [0,2]: mean 1, population var 1 -> +/- 1/sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(1, 2, vec![0.0, 2.0]).unwrap());
        let y = tape.instance_norm(a).unwrap();
        assert!((tape.value(y).data()[0] + expect).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn instance_norm_centers_random_input() {
        let mut tape = Tape::new();
        let a = tape.leaf(randn(1, 32, 11));
        let y = tape.instance_norm(a).unwrap();
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-10);

        let short = tape.leaf(Tensor::scalar(1.0));
        assert!(matches!(
            tape.instance_norm(short),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn neighbor_mean_swap_isolated_and_path() {
        let mut tape = Tape::new();
        let pair = Rc::new(Adjacency::from_edges(2, &[(0, 1)]).unwrap());
        let f = tape.leaf(Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap());
        let y = tape.neighbor_mean(f, pair).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 2.0]);

        let lonely = Rc::new(Adjacency::from_edges(2, &[]).unwrap());
        let z = tape.neighbor_mean(f, lonely).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0, 0.0]);

        let path = Rc::new(Adjacency::from_edges(3, &[(0, 1), (1, 2)]).unwrap());
        let g = tape.leaf(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let w = tape.neighbor_mean(g, path).unwrap();
        assert_eq!(tape.value(w).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn neighbor_mean_flops_are_2ed() {
        let mut tape = Tape::new();
        let adj = Rc::new(Adjacency::from_edges(3, &[(0, 1), (1, 2)]).unwrap());
        let f = tape.leaf(Tensor::zeros(3, 5));
        tape.neighbor_mean(f, adj).unwrap();
        assert_eq!(tape.flop_count(), 2 * 2 * 5);
    }

    #[test]
    fn log_domain_and_exp_overflow_errors() {
        let mut tape = Tape::new();
        let neg = tape.leaf(Tensor::scalar(-1.0));
        assert!(matches!(tape.log(neg), Err(Error::Domain(_))));
        let huge = tape.leaf(Tensor::scalar(800.0));
        assert!(matches!(tape.exp(huge), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_sum_of_linear_map_gives_input_broadcast() {
        // loss = sum(W . x) -> dW[i][j] = x[j]
        let mut tape = Tape::new();
        let w = tape.param(randn(3, 2, 7));
        let x = tape.leaf(Tensor::from_rows(&[vec![5.0], vec![-2.0]]).unwrap());
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get(w).unwrap();
        for i in 0..3 {
            assert_eq!(gw.row(i), &[5.0, -2.0]);
        }
    }

    #[test]
    fn backward_twice_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
        // recording after backward is also rejected
        assert!(matches!(tape.mul(x, x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(randn(2, 2, 1));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::scalar(3.0));
        let unused = tape.param(Tensor::zeros(2, 2));
        let loss = tape.sum_all(used).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, 2, 2), Tensor::zeros(2, 2));
    }

    #[test]
    fn deterministic_forward_and_flop_count() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.param(randn(4, 6, 21));
            let b = tape.param(randn(6, 3, 22));
            let c = tape.matmul(a, b).unwrap();
            let d = tape.tanh(c).unwrap();
            let e = tape.softmax_rows(d).unwrap();
            let loss = tape.sum_all(e).unwrap();
            (tape.value(loss).data()[0].to_bits(), tape.flop_count())
        };
        assert_eq!(run(), run());
    }

    // ---- finite-difference gradient suite --------------------------------

    #[test]
    fn gradcheck_matmul() {
        let err = fdcheck::max_rel_err(&[randn(3, 4, 1), randn(4, 2, 2)], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            let w = t.leaf(randn(3, 2, 50));
            let p = t.mul(y, w).unwrap();
            t.sum_all(p).unwrap()
        });
        assert!(err < 1e-4, "matmul rel err {err}");
    }

    #[test]
    fn gradcheck_elementwise_binary() {
        for (name, f) in [
            ("add", 0usize),
            ("sub", 1usize),
            ("mul", 2usize),
        ] {
            let err = fdcheck::max_rel_err(&[randn(3, 3, 3), randn(3, 3, 4)], |t, v| {
                let y = match f {
                    0 => t.add(v[0], v[1]).unwrap(),
                    1 => t.sub(v[0], v[1]).unwrap(),
                    _ => t.mul(v[0], v[1]).unwrap(),
                };
                let w = t.leaf(randn(3, 3, 51));
                let p = t.mul(y, w).unwrap();
                t.sum_all(p).unwrap()
            });
            assert!(err < 1e-4, "{name} rel err {err}");
        }
    }

    #[test]
    fn gradcheck_activations() {
        for f in 0..5usize {
            let input = if f == 4 {
                // log needs positive input
                let mut t = randn(2, 5, 5);
                for v in t.data_mut() {
                    *v = v.abs() + 0.5;
                }
                t
            } else {
                randn_off_zero(2, 5, 6)
            };
            let err = fdcheck::max_rel_err(&[input], |t, v| {
                let y = match f {
                    0 => t.relu(v[0]).unwrap(),
                    1 => t.sigmoid(v[0]).unwrap(),
                    2 => t.tanh(v[0]).unwrap(),
                    3 => t.exp(v[0]).unwrap(),
                    _ => t.log(v[0]).unwrap(),
                };
                let w = t.leaf(randn(2, 5, 52));
                let p = t.mul(y, w).unwrap();
                t.sum_all(p).unwrap()
            });
            assert!(err < 1e-4, "activation {f} rel err {err}");
        }
    }

    #[test]
    fn gradcheck_softmax_and_instance_norm() {
        let err = fdcheck::max_rel_err(&[randn(3, 5, 8)], |t, v| {
            let y = t.softmax_rows(v[0]).unwrap();
            let w = t.leaf(randn(3, 5, 53));
            let p = t.mul(y, w).unwrap();
            t.sum_all(p).unwrap()
        });
        assert!(err < 1e-4, "softmax rel err {err}");

        let err = fdcheck::max_rel_err(&[randn(1, 8, 9)], |t, v| {
            let y = t.instance_norm(v[0]).unwrap();
            let w = t.leaf(randn(1, 8, 54));
            let p = t.mul(y, w).unwrap();
            t.sum_all(p).unwrap()
        });
        assert!(err < 1e-4, "instance_norm rel err {err}");
    }

    #[test]
    fn gradcheck_structure_ops() {
        let err = fdcheck::max_rel_err(&[randn(3, 2, 10), randn(3, 3, 11)], |t, v| {
            let y = t.concat_cols(&[v[0], v[1]]).unwrap();
            let w = t.leaf(randn(3, 5, 55));
            let p = t.mul(y, w).unwrap();
            t.sum_all(p).unwrap()
        });
        assert!(err < 1e-4, "concat_cols rel err {err}");

        let err = fdcheck::max_rel_err(&[randn(2, 4, 12), randn(3, 4, 13)], |t, v| {
            let y = t.concat_rows(&[v[0], v[1]]).unwrap();
            let w = t.leaf(randn(5, 4, 56));
            let p = t.mul(y, w).unwrap();
            t.sum_all(p).unwrap()
        });
        assert!(err < 1e-4, "concat_rows rel err {err}");

        let err = fdcheck::max_rel_err(&[randn(4, 3, 14)], |t, v| {
            let mean = t.row_mean(v[0]).unwrap();
            let max = t.row_max(v[0]).unwrap();
            let y = t.concat_cols(&[mean, max]).unwrap();
            let w = t.leaf(randn(1, 6, 57));
            let p = t.mul(y, w).unwrap();
            t.sum_all(p).unwrap()
        });
        assert!(err < 1e-4, "row_mean/row_max rel err {err}");

        let err = fdcheck::max_rel_err(&[randn(4, 3, 15)], |t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2]).unwrap();
            let w = t.leaf(randn(3, 3, 58));
            let p = t.mul(y, w).unwrap();
            t.sum_all(p).unwrap()
        });
        assert!(err < 1e-4, "gather_rows rel err {err}");

        let err = fdcheck::max_rel_err(&[randn(3, 4, 16)], |t, v| {
            let y = t.transpose(v[0]).unwrap();
            let w = t.leaf(randn(4, 3, 59));
            let p = t.mul(y, w).unwrap();
            t.sum_all(p).unwrap()
        });
        assert!(err < 1e-4, "transpose rel err {err}");
    }

    #[test]
    fn gradcheck_broadcast_and_graph_ops() {
        let err = fdcheck::max_rel_err(&[randn(3, 4, 17), randn(3, 1, 18)], |t, v| {
            let y = t.mul_colvec(v[0], v[1]).unwrap();
            let w = t.leaf(randn(3, 4, 60));
            let p = t.mul(y, w).unwrap();
            t.sum_all(p).unwrap()
        });
        assert!(err < 1e-4, "mul_colvec rel err {err}");

        let err = fdcheck::max_rel_err(&[randn(3, 4, 19), randn(1, 4, 20)], |t, v| {
            let y = t.add_rowvec(v[0], v[1]).unwrap();
            let w = t.leaf(randn(3, 4, 61));
            let p = t.mul(y, w).unwrap();
            t.sum_all(p).unwrap()
        });
        assert!(err < 1e-4, "add_rowvec rel err {err}");

        let adj = Rc::new(Adjacency::from_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap());
        let err = fdcheck::max_rel_err(&[randn(4, 3, 23)], |t, v| {
            let y = t.neighbor_mean(v[0], Rc::clone(&adj)).unwrap();
            let w = t.leaf(randn(4, 3, 62));
            let p = t.mul(y, w).unwrap();
            t.sum_all(p).unwrap()
        });
        assert!(err < 1e-4, "neighbor_mean rel err {err}");

        let err = fdcheck::max_rel_err(&[randn(2, 3, 24)], |t, v| {
            let y = t.scalar_mul(v[0], -1.7).unwrap();
            let w = t.leaf(randn(2, 3, 63));
            let p = t.mul(y, w).unwrap();
            t.sum_all(p).unwrap()
        });
        assert!(err < 1e-4, "scalar_mul rel err {err}");
    }
}
