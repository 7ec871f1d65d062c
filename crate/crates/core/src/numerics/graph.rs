//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes are only
//! ever appended, so node order is a topological order and `backward` walks
//! the node list in reverse.

use super::tensor::{gemm, Tensor};
use super::NumericsError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Log,
    Sqrt,
    Square,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Neg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Unary(NodeId, Unary),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    Sum(NodeId),
    Mean(NodeId),
    SumCols(NodeId),
    LogSumExpCols(NodeId),
    RowNormalize { x: NodeId, norms: Vec<f64> },
    GatherCols { x: NodeId, index: Vec<usize> },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, inv_std: Vec<f64>, batch_stats: bool },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(_, u) => match u {
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Sqrt => "sqrt",
                Unary::Square => "square",
                Unary::Sigmoid => "sigmoid",
                Unary::Tanh => "tanh",
                Unary::Relu => "relu",
                Unary::Softplus => "softplus",
                Unary::Neg => "neg",
            },
            Op::Clamp { .. } => "clamp",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::LogSumExpCols(..) => "log_sum_exp",
            Op::RowNormalize { .. } => "row_normalize",
            Op::GatherCols { .. } => "gather_cols",
            Op::BatchNorm { .. } => "batchnorm",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Batch statistics produced by a train-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub batch: usize,
}

/// How a batch normalization node obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

pub const BATCHNORM_EPS: f64 = 1e-5;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// A single-threaded computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated adjoint of a leaf created with [`Graph::param`].
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Constant input; never receives an adjoint.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, true)
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, parents: &[NodeId]) -> Result<NodeId, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op.name(), node: self.nodes.len() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(op, value, requires_grad))
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows(), v.cols())
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), NumericsError> {
        let (sa, sb) = (self.dims(a), self.dims(b));
        if sa != sb {
            return Err(NumericsError::ShapeMismatch { op, detail: format!("{:?} vs {:?}", sa, sb) });
        }
        Ok(())
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(NumericsError::ShapeMismatch { op: "matmul", detail: format!("{}x{} · {}x{}", m, k, k2, n) });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, &[a, b])
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_t",
                detail: format!("{}x{} · ({}x{})ᵀ", m, k, n, k2),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        self.push(Op::MatMulT(a, b), Tensor::new(vec![m, n], out)?, &[a, b])
    }

    // ── Elementwise binary ───────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), v, &[a, b])
    }

    fn check_row(&self, op: &'static str, a: NodeId, row: NodeId) -> Result<(usize, usize), NumericsError> {
        let (m, n) = self.dims(a);
        let (r, c) = self.dims(row);
        if r != 1 || c != n {
            return Err(NumericsError::ShapeMismatch { op, detail: format!("{}x{} with row {}x{}", m, n, r, c) });
        }
        Ok((m, n))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, NumericsError> {
        let (m, n) = self.check_row("add_row", a, row)?;
        let (av, rv) = (self.value(a).data(), self.value(row).data());
        let data = (0..m * n).map(|i| av[i] + rv[i % n]).collect();
        self.push(Op::AddRow(a, row), Tensor::new(vec![m, n], data)?, &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, NumericsError> {
        let (m, n) = self.check_row("mul_row", a, row)?;
        let (av, rv) = (self.value(a).data(), self.value(row).data());
        let data = (0..m * n).map(|i| av[i] * rv[i % n]).collect();
        self.push(Op::MulRow(a, row), Tensor::new(vec![m, n], data)?, &[a, row])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, NumericsError> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v, &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, NumericsError> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), v, &[a])
    }

    // ── Elementwise unary ────────────────────────────────────────────

    fn unary(&mut self, a: NodeId, u: Unary) -> Result<NodeId, NumericsError> {
        let f: fn(f64) -> f64 = match u {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Relu => |x| if x > 0.0 { x } else { 0.0 },
            Unary::Softplus => softplus,
            Unary::Neg => |x| -x,
        };
        let v = self.value(a).map(f);
        self.push(Op::Unary(a, u), v, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary(a, Unary::Log)
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary(a, Unary::Sqrt)
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary(a, Unary::Square)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary(a, Unary::Tanh)
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary(a, Unary::Relu)
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary(a, Unary::Softplus)
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary(a, Unary::Neg)
    }

    /// Clamps into `[lo, hi]`; the adjoint passes through inside the range.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, NumericsError> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp { x: a, lo, hi }, v, &[a])
    }

    // ── Structural ───────────────────────────────────────────────────

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let rows = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| NumericsError::ShapeMismatch { op: "concat_cols", detail: "no operands".into() })?;
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(NumericsError::ShapeMismatch { op: "concat_cols", detail: "row counts differ".into() });
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(vec![rows, total], data)?, parts)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let (m, n) = self.dims(a);
        if start + len > n {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("[{}, {}) of {} columns", start, start + len, n),
            });
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&v.row_slice(r)[start..start + len]);
        }
        self.push(Op::SliceCols { x: a, start }, Tensor::new(vec![m, len], data)?, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let cols = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| NumericsError::ShapeMismatch { op: "concat_rows", detail: "no operands".into() })?;
        if parts.iter().any(|&p| self.dims(p).1 != cols) {
            return Err(NumericsError::ShapeMismatch { op: "concat_rows", detail: "column counts differ".into() });
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::new(vec![rows, cols], data)?, parts)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let (m, n) = self.dims(a);
        if start + len > m {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("[{}, {}) of {} rows", start, start + len, m),
            });
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        self.push(Op::SliceRows { x: a, start }, Tensor::new(vec![len, n], data)?, &[a])
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a);
        let s = v.sum() / v.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s), &[a])
    }

    /// Row sums as an `m×1` column.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a);
        let data: Vec<f64> = (0..v.rows()).map(|r| v.row_slice(r).iter().sum()).collect();
        self.push(Op::SumCols(a), Tensor::new(vec![data.len(), 1], data)?, &[a])
    }

    /// Row-wise `log Σ exp`, as an `m×1` column.
    pub fn log_sum_exp_cols(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a);
        let data: Vec<f64> = (0..v.rows())
            .map(|r| {
                let row = v.row_slice(r);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(Op::LogSumExpCols(a), Tensor::new(vec![data.len(), 1], data)?, &[a])
    }

    /// Scales each row to unit Euclidean norm. Zero rows stay zero.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let norms: Vec<f64> = (0..m).map(|r| v.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let mut data = Vec::with_capacity(m * n);
        for (r, &nr) in norms.iter().enumerate() {
            let inv = if nr > 0.0 { 1.0 / nr } else { 0.0 };
            data.extend(v.row_slice(r).iter().map(|x| x * inv));
        }
        self.push(Op::RowNormalize { x: a, norms }, Tensor::new(vec![m, n], data)?, &[a])
    }

    /// Picks `k` columns per row: `out[r][j] = a[r][index[r*k + j]]`.
    pub fn gather_cols(&mut self, a: NodeId, index: Vec<usize>, k: usize) -> Result<NodeId, NumericsError> {
        let (m, n) = self.dims(a);
        if index.len() != m * k || index.iter().any(|&c| c >= n) {
            return Err(NumericsError::ShapeMismatch {
                op: "gather_cols",
                detail: format!("{} indices for {}x{} picking {}", index.len(), m, n, k),
            });
        }
        let v = self.value(a);
        let data = index.iter().enumerate().map(|(i, &c)| v.get(i / k.max(1), c)).collect();
        self.push(Op::GatherCols { x: a, index }, Tensor::new(vec![m, k], data)?, &[a])
    }

    // ── Normalization ────────────────────────────────────────────────

    /// Batch normalization over rows with per-column learnable scale and shift.
    ///
    /// In train mode the batch statistics are returned so the caller can fold
    /// them into running averages.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode<'_>,
    ) -> Result<(NodeId, Option<BatchStats>), NumericsError> {
        let (m, n) = self.check_row("batchnorm", x, gamma)?;
        self.check_row("batchnorm", x, beta)?;
        if m == 0 {
            return Err(NumericsError::ShapeMismatch { op: "batchnorm", detail: "empty batch".into() });
        }
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        mean[c] += xv[r * n + c];
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut var = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        let d = xv[r * n + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                (mean, var, true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != n || var.len() != n {
                    return Err(NumericsError::ShapeMismatch {
                        op: "batchnorm",
                        detail: format!("running stats of length {} for {} features", mean.len(), n),
                    });
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                xhat[r * n + c] = (xv[r * n + c] - mean[c]) * inv_std[c];
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = (0..m * n).map(|i| g[i % n] * xhat[i] + b[i % n]).collect();
        let xhat = Tensor::new(vec![m, n], xhat)?;
        let stats = batch_stats.then_some(BatchStats { mean, var, batch: m });
        let id = self.push(
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            Tensor::new(vec![m, n], out)?,
            &[x, gamma, beta],
        )?;
        Ok((id, stats))
    }

    // ── Reverse pass ─────────────────────────────────────────────────

    /// Propagates adjoints from a scalar root into every differentiable leaf.
    ///
    /// Leaf adjoints accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: NodeId) -> Result<(), NumericsError> {
        if self.value(root).len() != 1 {
            return Err(NumericsError::NonScalarRoot { shape: self.value(root).shape().to_vec() });
        }
        let mut adj: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<(), NumericsError> {
        let node = &self.nodes[i];
        let y = &node.value;
        let nodes = &self.nodes;
        let mut send = |id: NodeId, t: Tensor| {
            if !nodes[id.0].requires_grad {
                return;
            }
            match &mut adj[id.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |id: NodeId| &nodes[id.0].value;
        let wants = |id: NodeId| nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                    send(*a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                    send(*b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), false, &mut da, false);
                    send(*a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), true, av.data(), false, &mut db, false);
                    send(*b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), |gv, bv| gv * bv));
                send(*b, g.zip_map(val(*a), |gv, av| gv * av));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                send(*a, g.zip_map(bv, |gv, bv| gv / bv));
                // d(a/b)/db = -y/b
                let t = g.zip_map(y, |gv, yv| gv * yv);
                send(*b, t.zip_map(bv, |tv, bv| -tv / bv));
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                send(*row, column_sums(g));
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (val(*a), val(*row));
                let n = rv.len();
                let da: Vec<f64> = g.data().iter().enumerate().map(|(i, gv)| gv * rv.data()[i % n]).collect();
                send(*a, Tensor::new(av.shape().to_vec(), da)?);
                send(*row, column_sums(&g.zip_map(av, |gv, x| gv * x)));
            }
            Op::Scale(a, c) => send(*a, g.map(|v| v * c)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Unary(a, u) => {
                let x = val(*a);
                let dx = match u {
                    Unary::Exp => g.zip_map(y, |gv, yv| gv * yv),
                    Unary::Log => g.zip_map(x, |gv, xv| gv / xv),
                    Unary::Sqrt => g.zip_map(y, |gv, yv| 0.5 * gv / yv),
                    Unary::Square => g.zip_map(x, |gv, xv| 2.0 * gv * xv),
                    Unary::Sigmoid => g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)),
                    Unary::Tanh => g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)),
                    Unary::Relu => g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
                    Unary::Softplus => g.zip_map(x, |gv, xv| gv * sigmoid(xv)),
                    Unary::Neg => g.map(|gv| -gv),
                };
                send(*a, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                send(*x, g.zip_map(val(*x), |gv, xv| if xv >= lo && xv <= hi { gv } else { 0.0 }));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        send(p, Tensor::new(val(p).shape().to_vec(), d)?);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (m, n, w) = (xv.rows(), xv.cols(), g.cols());
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + w].copy_from_slice(g.row_slice(r));
                }
                send(*x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if wants(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        send(p, Tensor::new(val(p).shape().to_vec(), d)?);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let n = xv.cols();
                let mut d = vec![0.0; xv.len()];
                d[start * n..start * n + g.len()].copy_from_slice(g.data());
                send(*x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Sum(a) => send(*a, Tensor::filled(val(*a).shape(), g.data()[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                send(*a, Tensor::filled(val(*a).shape(), g.data()[0] / n));
            }
            Op::SumCols(a) => {
                let av = val(*a);
                let n = av.cols();
                let d = (0..av.len()).map(|i| g.data()[i / n]).collect();
                send(*a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::LogSumExpCols(a) => {
                let av = val(*a);
                let n = av.cols();
                let d = (0..av.len()).map(|i| g.data()[i / n] * (av.data()[i] - y.data()[i / n]).exp()).collect();
                send(*a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::RowNormalize { x, norms } => {
                let xv = val(*x);
                let n = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (r, &nr) in norms.iter().enumerate() {
                    if nr <= 0.0 {
                        continue;
                    }
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        d[r * n + c] = (gr[c] - yr[c] * dot) / nr;
                    }
                }
                send(*x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::GatherCols { x, index } => {
                let xv = val(*x);
                let (n, k) = (xv.cols(), g.cols());
                let mut d = vec![0.0; xv.len()];
                for (i, &c) in index.iter().enumerate() {
                    d[(i / k) * n + c] += g.data()[i];
                }
                send(*x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (m, n) = (xhat.rows(), xhat.cols());
                let gm = val(*gamma).data();
                send(*beta, column_sums(g));
                send(*gamma, column_sums(&g.zip_map(xhat, |gv, xh| gv * xh)));
                if wants(*x) {
                    let mut dx = vec![0.0; m * n];
                    if *batch_stats {
                        let mut sum_d = vec![0.0; n];
                        let mut sum_dx = vec![0.0; n];
                        for r in 0..m {
                            for c in 0..n {
                                let dxh = g.data()[r * n + c] * gm[c];
                                sum_d[c] += dxh;
                                sum_dx[c] += dxh * xhat.data()[r * n + c];
                            }
                        }
                        let mf = m as f64;
                        for r in 0..m {
                            for c in 0..n {
                                let dxh = g.data()[r * n + c] * gm[c];
                                dx[r * n + c] =
                                    inv_std[c] / mf * (mf * dxh - sum_d[c] - xhat.data()[r * n + c] * sum_dx[c]);
                            }
                        }
                    } else {
                        for r in 0..m {
                            for c in 0..n {
                                dx[r * n + c] = g.data()[r * n + c] * gm[c] * inv_std[c];
                            }
                        }
                    }
                    send(*x, Tensor::new(val(*x).shape().to_vec(), dx)?);
                }
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let n = g.cols();
    let mut s = vec![0.0; n];
    for r in 0..g.rows() {
        for (acc, v) in s.iter_mut().zip(g.row_slice(r)) {
            *acc += v;
        }
    }
    Tensor::row(&s)
}
