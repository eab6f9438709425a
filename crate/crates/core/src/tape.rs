//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every learnable computation in the crate is expressed as primitive
//! applications recorded on a [`Tape`]. Nodes are appended in topological
//! order (inputs always precede consumers), so the backward pass is a single
//! reverse sweep with gradient accumulation by node index. All reductions
//! run in fixed row-major order; replaying a tape reproduces every stored
//! output bitwise.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::tensor::Tensor;

/// Index of a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

/// Errors from tape construction or the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum DiffError {
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    Domain {
        op: &'static str,
        detail: String,
    },
    NonScalarLoss {
        shape: (usize, usize),
    },
}

impl core::fmt::Display for DiffError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DiffError::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            DiffError::Domain { op, detail } => write!(f, "{op}: domain error: {detail}"),
            DiffError::NonScalarLoss { shape } => {
                write!(f, "backward: loss must be 1x1, got {}x{}", shape.0, shape.1)
            }
        }
    }
}

impl core::error::Error for DiffError {}

/// Batch-norm statistics source for a node.
#[derive(Clone, Debug)]
pub(crate) enum BnStats {
    /// Training mode: column mean/population variance computed from the batch.
    Batch,
    /// Evaluation mode: externally supplied running statistics (1×c each).
    Given { mean: Tensor, var: Tensor },
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(ValueId, ValueId),
    Transpose(ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    /// Broadcast-add a 1×c row vector to every row.
    AddRow(ValueId, ValueId),
    /// Multiply by a 1×1 tape scalar.
    MulScalar(ValueId, ValueId),
    /// Multiply by a compile-time constant.
    Scale(ValueId, f64),
    Sigmoid(ValueId),
    Tanh(ValueId),
    Relu(ValueId),
    Exp(ValueId),
    Log(ValueId),
    Sqrt(ValueId),
    /// x·ln(x) with 0·ln(0) = 0.
    XLogX(ValueId),
    /// Inverted dropout with a stored 0/1 mask: out = x ⊙ mask / keep.
    Dropout {
        input: ValueId,
        mask: Tensor,
        keep: f64,
    },
    BatchNorm {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
        stats: BnStats,
    },
    /// Mean cross-entropy over rows of logits against integer labels.
    SoftmaxXent {
        logits: ValueId,
        labels: Vec<usize>,
    },
    /// r×c → r×1 (sum of each row).
    SumRowwise(ValueId),
    /// r×c → 1×c (sum of each column).
    SumColwise(ValueId),
    SumAll(ValueId),
    MeanAll(ValueId),
    ConcatRows(Vec<ValueId>),
    SliceRows {
        input: ValueId,
        start: usize,
        rows: usize,
    },
    ConcatCols(ValueId, ValueId),
    GatherRows {
        input: ValueId,
        index: Vec<usize>,
    },
    /// m×1 edge scores → n×n symmetric matrix, zero off the edge support.
    ScatterEdges {
        scores: ValueId,
        edges: Vec<(usize, usize)>,
        n: usize,
    },
    /// Elementwise population standard deviation across equally shaped inputs.
    CellStd(Vec<ValueId>),
}

impl Op {
    fn inputs(&self, buf: &mut Vec<ValueId>) {
        buf.clear();
        match self {
            Op::Leaf => {}
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b)
            | Op::ConcatCols(a, b) => {
                buf.push(*a);
                buf.push(*b);
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::XLogX(a)
            | Op::SumRowwise(a)
            | Op::SumColwise(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Dropout { input: a, .. }
            | Op::SliceRows { input: a, .. }
            | Op::GatherRows { input: a, .. }
            | Op::ScatterEdges { scores: a, .. }
            | Op::SoftmaxXent { logits: a, .. } => buf.push(*a),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                ..
            } => {
                buf.push(*input);
                buf.push(*gamma);
                buf.push(*beta);
            }
            Op::ConcatRows(parts) | Op::CellStd(parts) => buf.extend_from_slice(parts),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Column mean and population variance of a matrix (1×c each), computed by a
/// fixed sequential reduction. Also used by callers to update batch-norm
/// running statistics so both paths agree bitwise.
pub fn column_mean_var(x: &Tensor) -> (Tensor, Tensor) {
    let (r, c) = x.shape();
    let mut mean = Tensor::zeros(1, c);
    for i in 0..r {
        for j in 0..c {
            mean.data_mut()[j] += x.get(i, j);
        }
    }
    for j in 0..c {
        mean.data_mut()[j] /= r as f64;
    }
    let mut var = Tensor::zeros(1, c);
    for i in 0..r {
        for j in 0..c {
            let d = x.get(i, j) - mean.data()[j];
            var.data_mut()[j] += d * d;
        }
    }
    for j in 0..c {
        var.data_mut()[j] /= r as f64;
    }
    (mean, var)
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let (r, c) = logits.shape();
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        let row = logits.row(i);
        let mut m = row[0];
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut denom = 0.0;
        for j in 0..c {
            let e = fmath::exp(row[j] - m);
            out.set(i, j, e);
            denom += e;
        }
        for j in 0..c {
            out.set(i, j, out.get(i, j) / denom);
        }
    }
    out
}

fn eval_op<'a>(op: &Op, get: impl Fn(ValueId) -> &'a Tensor) -> Tensor {
    match op {
        Op::Leaf => unreachable!("leaf values are stored, not computed"),
        Op::MatMul(a, b) => get(*a).matmul(get(*b)),
        Op::Transpose(a) => get(*a).transpose(),
        Op::Add(a, b) => get(*a).zip_map(get(*b), |x, y| x + y),
        Op::Sub(a, b) => get(*a).zip_map(get(*b), |x, y| x - y),
        Op::Mul(a, b) => get(*a).zip_map(get(*b), |x, y| x * y),
        Op::AddRow(a, v) => {
            let (x, row) = (get(*a), get(*v));
            let mut out = x.clone();
            let (r, c) = x.shape();
            for i in 0..r {
                for j in 0..c {
                    out.set(i, j, x.get(i, j) + row.data()[j]);
                }
            }
            out
        }
        Op::MulScalar(a, s) => {
            let sv = get(*s).item();
            get(*a).map(|x| x * sv)
        }
        Op::Scale(a, c) => get(*a).map(|x| x * c),
        Op::Sigmoid(a) => get(*a).map(fmath::sigmoid),
        Op::Tanh(a) => get(*a).map(fmath::tanh),
        Op::Relu(a) => get(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Exp(a) => get(*a).map(fmath::exp),
        Op::Log(a) => get(*a).map(fmath::ln),
        Op::Sqrt(a) => get(*a).map(fmath::sqrt),
        Op::XLogX(a) => get(*a).map(fmath::xlogx),
        Op::Dropout { input, mask, keep } => {
            get(*input).zip_map(mask, |x, m| x * m / keep)
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            eps,
            stats,
        } => {
            let x = get(*input);
            let (g, b) = (get(*gamma), get(*beta));
            let (mean, var) = match stats {
                BnStats::Batch => column_mean_var(x),
                BnStats::Given { mean, var } => (mean.clone(), var.clone()),
            };
            let (r, c) = x.shape();
            let mut out = Tensor::zeros(r, c);
            for j in 0..c {
                let ivar = 1.0 / fmath::sqrt(var.data()[j] + eps);
                for i in 0..r {
                    let xhat = (x.get(i, j) - mean.data()[j]) * ivar;
                    out.set(i, j, xhat * g.data()[j] + b.data()[j]);
                }
            }
            out
        }
        Op::SoftmaxXent { logits, labels } => {
            let l = get(*logits);
            let (r, c) = l.shape();
            let mut total = 0.0;
            for i in 0..r {
                let row = l.row(i);
                let mut m = row[0];
                for &v in row {
                    if v > m {
                        m = v;
                    }
                }
                let mut denom = 0.0;
                for j in 0..c {
                    denom += fmath::exp(row[j] - m);
                }
                total += m + fmath::ln(denom) - row[labels[i]];
            }
            Tensor::scalar(total / r as f64)
        }
        Op::SumRowwise(a) => {
            let x = get(*a);
            let (r, c) = x.shape();
            let mut out = Tensor::zeros(r, 1);
            for i in 0..r {
                let mut acc = 0.0;
                for j in 0..c {
                    acc += x.get(i, j);
                }
                out.set(i, 0, acc);
            }
            out
        }
        Op::SumColwise(a) => {
            let x = get(*a);
            let (r, c) = x.shape();
            let mut out = Tensor::zeros(1, c);
            for i in 0..r {
                for j in 0..c {
                    out.data_mut()[j] += x.get(i, j);
                }
            }
            out
        }
        Op::SumAll(a) => Tensor::scalar(get(*a).sum()),
        Op::MeanAll(a) => {
            let x = get(*a);
            Tensor::scalar(x.sum() / x.numel() as f64)
        }
        Op::ConcatRows(parts) => {
            let cols = get(parts[0]).cols();
            let rows: usize = parts.iter().map(|&p| get(p).rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for &p in parts {
                data.extend_from_slice(get(p).data());
            }
            Tensor::new(rows, cols, data)
        }
        Op::SliceRows { input, start, rows } => {
            let x = get(*input);
            let c = x.cols();
            let data = x.data()[start * c..(start + rows) * c].to_vec();
            Tensor::new(*rows, c, data)
        }
        Op::ConcatCols(a, b) => {
            let (x, y) = (get(*a), get(*b));
            let (r, ca, cb) = (x.rows(), x.cols(), y.cols());
            let mut out = Tensor::zeros(r, ca + cb);
            for i in 0..r {
                for j in 0..ca {
                    out.set(i, j, x.get(i, j));
                }
                for j in 0..cb {
                    out.set(i, ca + j, y.get(i, j));
                }
            }
            out
        }
        Op::GatherRows { input, index } => {
            let x = get(*input);
            let c = x.cols();
            let mut data = Vec::with_capacity(index.len() * c);
            for &i in index {
                data.extend_from_slice(x.row(i));
            }
            Tensor::new(index.len(), c, data)
        }
        Op::ScatterEdges { scores, edges, n } => {
            let s = get(*scores);
            let mut out = Tensor::zeros(*n, *n);
            for (e, &(i, j)) in edges.iter().enumerate() {
                let v = s.data()[e];
                out.set(i, j, v);
                out.set(j, i, v);
            }
            out
        }
        Op::CellStd(parts) => {
            let first = get(parts[0]);
            let (r, c) = first.shape();
            let count = parts.len() as f64;
            let mut mean = Tensor::zeros(r, c);
            for &p in parts {
                mean.add_assign(get(p));
            }
            for v in mean.data_mut() {
                *v /= count;
            }
            let mut var = Tensor::zeros(r, c);
            for &p in parts {
                let x = get(p);
                for (k, v) in var.data_mut().iter_mut().enumerate() {
                    let d = x.data()[k] - mean.data()[k];
                    *v += d * d;
                }
            }
            var.map(|v| fmath::sqrt(v / count))
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`ValueId`].
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor> {
        self.slots.get_mut(id.0).and_then(|s| s.take())
    }
}

/// A linear record of primitive applications.
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

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> ValueId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    /// Record a non-learnable input (no gradient tracked through it).
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push_leaf(value, false)
    }

    /// Record a learnable parameter leaf.
    pub fn param(&mut self, value: Tensor) -> ValueId {
        self.push_leaf(value, true)
    }

    fn push(&mut self, op: Op) -> ValueId {
        let value = eval_op(&op, |id| &self.nodes[id.0].value);
        let mut inputs = Vec::new();
        op.inputs(&mut inputs);
        let needs_grad = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn shape(&self, id: ValueId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: ValueId,
        b: ValueId,
    ) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch {
                op,
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, DiffError> {
        if self.shape(a).1 != self.shape(b).0 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        Ok(self.push(Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: ValueId) -> ValueId {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, DiffError> {
        self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, DiffError> {
        self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, DiffError> {
        self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, a: ValueId, row: ValueId) -> Result<ValueId, DiffError> {
        let (rs, cs) = self.shape(row);
        if rs != 1 || cs != self.shape(a).1 {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                left: self.shape(a),
                right: (rs, cs),
            });
        }
        Ok(self.push(Op::AddRow(a, row)))
    }

    pub fn mul_scalar(&mut self, a: ValueId, s: ValueId) -> Result<ValueId, DiffError> {
        if self.shape(s) != (1, 1) {
            return Err(DiffError::ShapeMismatch {
                op: "mul_scalar",
                left: self.shape(a),
                right: self.shape(s),
            });
        }
        Ok(self.push(Op::MulScalar(a, s)))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        self.push(Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        self.push(Op::Relu(a))
    }

    pub fn exp(&mut self, a: ValueId) -> ValueId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: ValueId) -> Result<ValueId, DiffError> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(DiffError::Domain {
                op: "log",
                detail: String::from("input contains non-positive entries"),
            });
        }
        Ok(self.push(Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: ValueId) -> Result<ValueId, DiffError> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(DiffError::Domain {
                op: "sqrt",
                detail: String::from("input contains negative entries"),
            });
        }
        Ok(self.push(Op::Sqrt(a)))
    }

    /// x·ln(x), entrywise, with 0·ln(0) = 0. Input must be non-negative.
    pub fn xlogx(&mut self, a: ValueId) -> Result<ValueId, DiffError> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(DiffError::Domain {
                op: "xlogx",
                detail: String::from("input contains negative entries"),
            });
        }
        Ok(self.push(Op::XLogX(a)))
    }

    /// Inverted dropout with a caller-supplied 0/1 mask.
    pub fn dropout(
        &mut self,
        input: ValueId,
        mask: Tensor,
        keep: f64,
    ) -> Result<ValueId, DiffError> {
        if mask.shape() != self.shape(input) {
            return Err(DiffError::ShapeMismatch {
                op: "dropout",
                left: self.shape(input),
                right: mask.shape(),
            });
        }
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(DiffError::Domain {
                op: "dropout",
                detail: format!("keep probability {keep} outside (0, 1]"),
            });
        }
        Ok(self.push(Op::Dropout { input, mask, keep }))
    }

    /// Batch normalization over rows (per-column statistics), training mode.
    pub fn batchnorm_train(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId, DiffError> {
        self.check_bn_shapes(input, gamma, beta)?;
        Ok(self.push(Op::BatchNorm {
            input,
            gamma,
            beta,
            eps,
            stats: BnStats::Batch,
        }))
    }

    /// Batch normalization with fixed (running) statistics, evaluation mode.
    pub fn batchnorm_eval(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Tensor,
        var: Tensor,
        eps: f64,
    ) -> Result<ValueId, DiffError> {
        self.check_bn_shapes(input, gamma, beta)?;
        if mean.shape() != (1, self.shape(input).1) || var.shape() != mean.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "batchnorm",
                left: self.shape(input),
                right: mean.shape(),
            });
        }
        Ok(self.push(Op::BatchNorm {
            input,
            gamma,
            beta,
            eps,
            stats: BnStats::Given { mean, var },
        }))
    }

    fn check_bn_shapes(
        &self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
    ) -> Result<(), DiffError> {
        let c = self.shape(input).1;
        for id in [gamma, beta] {
            if self.shape(id) != (1, c) {
                return Err(DiffError::ShapeMismatch {
                    op: "batchnorm",
                    left: self.shape(input),
                    right: self.shape(id),
                });
            }
        }
        Ok(())
    }

    /// Mean softmax cross-entropy over rows.
    pub fn softmax_xent(
        &mut self,
        logits: ValueId,
        labels: Vec<usize>,
    ) -> Result<ValueId, DiffError> {
        let (r, c) = self.shape(logits);
        if labels.len() != r {
            return Err(DiffError::ShapeMismatch {
                op: "softmax_xent",
                left: (r, c),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(DiffError::Domain {
                op: "softmax_xent",
                detail: format!("label {bad} out of range for {c} classes"),
            });
        }
        Ok(self.push(Op::SoftmaxXent { logits, labels }))
    }

    pub fn sum_rowwise(&mut self, a: ValueId) -> ValueId {
        self.push(Op::SumRowwise(a))
    }

    pub fn sum_colwise(&mut self, a: ValueId) -> ValueId {
        self.push(Op::SumColwise(a))
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        self.push(Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        self.push(Op::MeanAll(a))
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Domain {
                op: "concat_rows",
                detail: String::from("empty input list"),
            });
        }
        let c = self.shape(parts[0]).1;
        for &p in parts {
            if self.shape(p).1 != c {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]),
                    right: self.shape(p),
                });
            }
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(
        &mut self,
        input: ValueId,
        start: usize,
        rows: usize,
    ) -> Result<ValueId, DiffError> {
        let (r, _) = self.shape(input);
        if start + rows > r {
            return Err(DiffError::Domain {
                op: "slice_rows",
                detail: format!("slice {start}..{} out of {r} rows", start + rows),
            });
        }
        Ok(self.push(Op::SliceRows { input, start, rows }))
    }

    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, DiffError> {
        if self.shape(a).0 != self.shape(b).0 {
            return Err(DiffError::ShapeMismatch {
                op: "concat_cols",
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        Ok(self.push(Op::ConcatCols(a, b)))
    }

    pub fn gather_rows(
        &mut self,
        input: ValueId,
        index: Vec<usize>,
    ) -> Result<ValueId, DiffError> {
        let (r, _) = self.shape(input);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(DiffError::Domain {
                op: "gather_rows",
                detail: format!("row index {bad} out of {r} rows"),
            });
        }
        Ok(self.push(Op::GatherRows { input, index }))
    }

    /// Scatter m×1 per-edge scores into an n×n symmetric matrix.
    /// Edges must be strictly upper-triangular pairs.
    pub fn scatter_edges(
        &mut self,
        scores: ValueId,
        edges: Vec<(usize, usize)>,
        n: usize,
    ) -> Result<ValueId, DiffError> {
        if self.shape(scores) != (edges.len(), 1) {
            return Err(DiffError::ShapeMismatch {
                op: "scatter_edges",
                left: self.shape(scores),
                right: (edges.len(), 1),
            });
        }
        if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= j || j >= n) {
            return Err(DiffError::Domain {
                op: "scatter_edges",
                detail: format!("edge ({i},{j}) not strictly upper-triangular in n={n}"),
            });
        }
        Ok(self.push(Op::ScatterEdges { scores, edges, n }))
    }

    /// Per-cell population standard deviation across equally shaped values.
    pub fn cell_std(&mut self, parts: &[ValueId]) -> Result<ValueId, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Domain {
                op: "cell_std",
                detail: String::from("empty input list"),
            });
        }
        for &p in parts {
            self.same_shape("cell_std", parts[0], p)?;
        }
        Ok(self.push(Op::CellStd(parts.to_vec())))
    }

    /// Recompute every node from its inputs, returning the fresh values.
    /// Bitwise equality with the stored values is a crate invariant.
    pub fn replay(&self) -> Vec<Tensor> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => eval_op(op, |id| &values[id.0]),
            };
            values.push(v);
        }
        values
    }

    /// Reverse sweep from a scalar loss; returns gradients for every node
    /// reachable from a `param` leaf.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients, DiffError> {
        let loss_shape = self.shape(loss);
        if loss_shape != (1, 1) {
            return Err(DiffError::NonScalarLoss { shape: loss_shape });
        }
        let mut slots: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if slots[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let (before, rest) = slots.split_at_mut(i);
            let g = rest[0].as_ref().expect("grad present");
            self.propagate(i, g, before);
        }
        Ok(Gradients { slots })
    }

    /// Add this node's contribution to each differentiable input's slot.
    fn propagate(&self, idx: usize, g: &Tensor, slots: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let needs = |id: ValueId| self.nodes[id.0].needs_grad;
        let mut acc = |id: ValueId, delta: Tensor| {
            match &mut slots[id.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul(&self.value(*b).transpose()));
                }
                if needs(*b) {
                    acc(*b, self.value(*a).transpose().matmul(g));
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    acc(*a, g.transpose());
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if needs(*b) {
                    acc(*b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::AddRow(a, v) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*v) {
                    let (r, c) = g.shape();
                    let mut dv = Tensor::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            dv.data_mut()[j] += g.get(i, j);
                        }
                    }
                    acc(*v, dv);
                }
            }
            Op::MulScalar(a, s) => {
                if needs(*a) {
                    let sv = self.value(*s).item();
                    acc(*a, g.map(|x| x * sv));
                }
                if needs(*s) {
                    let ds = g.zip_map(self.value(*a), |gv, av| gv * av).sum();
                    acc(*s, Tensor::scalar(ds));
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    acc(*a, g.map(|x| x * c));
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    acc(*a, g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)));
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    acc(*a, g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y)));
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    acc(
                        *a,
                        g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
                    );
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    acc(*a, g.zip_map(&node.value, |gv, y| gv * y));
                }
            }
            Op::Log(a) => {
                if needs(*a) {
                    acc(*a, g.zip_map(self.value(*a), |gv, x| gv / x));
                }
            }
            Op::Sqrt(a) => {
                // Subgradient 0 at the origin so constant-zero cells stay silent.
                if needs(*a) {
                    acc(
                        *a,
                        g.zip_map(&node.value, |gv, y| if y > 0.0 { gv / (2.0 * y) } else { 0.0 }),
                    );
                }
            }
            Op::XLogX(a) => {
                if needs(*a) {
                    acc(
                        *a,
                        g.zip_map(self.value(*a), |gv, x| {
                            if x > 0.0 {
                                gv * (fmath::ln(x) + 1.0)
                            } else {
                                0.0
                            }
                        }),
                    );
                }
            }
            Op::Dropout { input, mask, keep } => {
                if needs(*input) {
                    acc(*input, g.zip_map(mask, |gv, m| gv * m / keep));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                eps,
                stats,
            } => {
                self.backward_batchnorm(*input, *gamma, *beta, *eps, stats, g, &mut acc, needs)
            }
            Op::SoftmaxXent { logits, labels } => {
                if needs(*logits) {
                    let l = self.value(*logits);
                    let (r, c) = l.shape();
                    let mut probs = softmax_rows(l);
                    let scale = g.item() / r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            let y = if labels[i] == j { 1.0 } else { 0.0 };
                            let p = probs.get(i, j);
                            probs.set(i, j, (p - y) * scale);
                        }
                    }
                    acc(*logits, probs);
                }
            }
            Op::SumRowwise(a) => {
                if needs(*a) {
                    let (r, c) = self.value(*a).shape();
                    acc(*a, Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
                }
            }
            Op::SumColwise(a) => {
                if needs(*a) {
                    let (r, c) = self.value(*a).shape();
                    acc(*a, Tensor::from_fn(r, c, |_, j| g.data()[j]));
                }
            }
            Op::SumAll(a) => {
                if needs(*a) {
                    let (r, c) = self.value(*a).shape();
                    acc(*a, Tensor::full(r, c, g.item()));
                }
            }
            Op::MeanAll(a) => {
                if needs(*a) {
                    let (r, c) = self.value(*a).shape();
                    acc(*a, Tensor::full(r, c, g.item() / (r * c) as f64));
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                let c = g.cols();
                for &p in parts {
                    let pr = self.value(p).rows();
                    if needs(p) {
                        let data = g.data()[start * c..(start + pr) * c].to_vec();
                        acc(p, Tensor::new(pr, c, data));
                    }
                    start += pr;
                }
            }
            Op::SliceRows { input, start, rows } => {
                if needs(*input) {
                    let (r, c) = self.value(*input).shape();
                    let mut d = Tensor::zeros(r, c);
                    d.data_mut()[start * c..(start + rows) * c].copy_from_slice(g.data());
                    acc(*input, d);
                }
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = self.value(*a).shape();
                let cb = self.value(*b).cols();
                if needs(*a) {
                    acc(*a, Tensor::from_fn(r, ca, |i, j| g.get(i, j)));
                }
                if needs(*b) {
                    acc(*b, Tensor::from_fn(r, cb, |i, j| g.get(i, ca + j)));
                }
            }
            Op::GatherRows { input, index } => {
                if needs(*input) {
                    let (r, c) = self.value(*input).shape();
                    let mut d = Tensor::zeros(r, c);
                    for (out_i, &src) in index.iter().enumerate() {
                        for j in 0..c {
                            let cur = d.get(src, j);
                            d.set(src, j, cur + g.get(out_i, j));
                        }
                    }
                    acc(*input, d);
                }
            }
            Op::ScatterEdges { scores, edges, .. } => {
                if needs(*scores) {
                    let mut d = Tensor::zeros(edges.len(), 1);
                    for (e, &(i, j)) in edges.iter().enumerate() {
                        d.set(e, 0, g.get(i, j) + g.get(j, i));
                    }
                    acc(*scores, d);
                }
            }
            Op::CellStd(parts) => {
                let count = parts.len() as f64;
                let std = &node.value;
                let (r, c) = std.shape();
                let mut mean = Tensor::zeros(r, c);
                for &p in parts {
                    mean.add_assign(self.value(p));
                }
                for v in mean.data_mut() {
                    *v /= count;
                }
                for &p in parts {
                    if !needs(p) {
                        continue;
                    }
                    let x = self.value(p);
                    let mut d = Tensor::zeros(r, c);
                    for k in 0..r * c {
                        let s = std.data()[k];
                        d.data_mut()[k] = if s > 0.0 {
                            g.data()[k] * (x.data()[k] - mean.data()[k]) / (count * s)
                        } else {
                            0.0
                        };
                    }
                    acc(p, d);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_batchnorm(
        &self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
        stats: &BnStats,
        g: &Tensor,
        acc: &mut impl FnMut(ValueId, Tensor),
        needs: impl Fn(ValueId) -> bool,
    ) {
        let x = self.value(input);
        let gam = self.value(gamma);
        let (r, c) = x.shape();
        let (mean, var) = match stats {
            BnStats::Batch => column_mean_var(x),
            BnStats::Given { mean, var } => (mean.clone(), var.clone()),
        };

        if needs(gamma) || needs(beta) {
            let mut dgamma = Tensor::zeros(1, c);
            let mut dbeta = Tensor::zeros(1, c);
            for j in 0..c {
                let ivar = 1.0 / fmath::sqrt(var.data()[j] + eps);
                for i in 0..r {
                    let xhat = (x.get(i, j) - mean.data()[j]) * ivar;
                    dgamma.data_mut()[j] += g.get(i, j) * xhat;
                    dbeta.data_mut()[j] += g.get(i, j);
                }
            }
            if needs(gamma) {
                acc(gamma, dgamma);
            }
            if needs(beta) {
                acc(beta, dbeta);
            }
        }

        if !needs(input) {
            return;
        }
        let mut dx = Tensor::zeros(r, c);
        match stats {
            BnStats::Given { .. } => {
                // Statistics are constants: dx = g · γ / sqrt(var + eps).
                for j in 0..c {
                    let ivar = 1.0 / fmath::sqrt(var.data()[j] + eps);
                    let k = gam.data()[j] * ivar;
                    for i in 0..r {
                        dx.set(i, j, g.get(i, j) * k);
                    }
                }
            }
            BnStats::Batch => {
                for j in 0..c {
                    let mu = mean.data()[j];
                    let ivar = 1.0 / fmath::sqrt(var.data()[j] + eps);
                    let gj = gam.data()[j];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xc = 0.0;
                    let mut sum_xc = 0.0;
                    for i in 0..r {
                        let dxhat = g.get(i, j) * gj;
                        let xc = x.get(i, j) - mu;
                        sum_dxhat += dxhat;
                        sum_dxhat_xc += dxhat * xc;
                        sum_xc += xc;
                    }
                    let dvar = sum_dxhat_xc * (-0.5) * ivar * ivar * ivar;
                    let dmu = -ivar * sum_dxhat + dvar * (-2.0 / r as f64) * sum_xc;
                    for i in 0..r {
                        let dxhat = g.get(i, j) * gj;
                        let xc = x.get(i, j) - mu;
                        dx.set(
                            i,
                            j,
                            dxhat * ivar + dvar * 2.0 * xc / r as f64 + dmu / r as f64,
                        );
                    }
                }
            }
        }
        acc(input, dx);
    }
}
