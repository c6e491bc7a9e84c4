//! Eager reverse-mode differentiation over a linear tape.
//!
//! Every builder method runs the forward computation immediately, checks the
//! result for non-finite values, and records the operation so `backward` can
//! replay the tape in reverse. Node ids index into the tape; inputs always
//! precede outputs, so reverse insertion order is a reverse topological order.

use crate::error::{Result, TceError};
use crate::ops;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum OpKind {
    Const,
    Param,
    MatMul,
    Transpose,
    Add,
    AddRow,
    Sub,
    Mul,
    Scale(f64),
    Dot,
    Concat,
    ConcatCols,
    Slice { lo: usize, hi: usize },
    Row(usize),
    StackRows,
    Sigmoid,
    Tanh,
    Relu,
    Log,
    SoftmaxVec { mask: Option<Vec<bool>> },
    SoftmaxRows { key_mask: Option<Vec<bool>> },
    MaxRows { mask: Option<Vec<bool>> },
    LayerNormRows { eps: f64 },
    BatchNormTrain { eps: f64 },
    BatchNormEval { eps: f64, mean: Vec<f64>, var: Vec<f64> },
    Embed { indices: Vec<usize> },
    SumAll,
    MeanAll,
    RowL2Normalize,
    StraightThrough,
    HingeRankLoss { n_hard: usize },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Const => "const",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Dot => "dot",
            OpKind::Concat => "concat",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Slice { .. } => "slice",
            OpKind::Row(_) => "row",
            OpKind::StackRows => "stack_rows",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Log => "log",
            OpKind::SoftmaxVec { .. } => "softmax",
            OpKind::SoftmaxRows { .. } => "softmax_rows",
            OpKind::MaxRows { .. } => "max_rows",
            OpKind::LayerNormRows { .. } => "layernorm",
            OpKind::BatchNormTrain { .. } => "batchnorm",
            OpKind::BatchNormEval { .. } => "batchnorm_eval",
            OpKind::Embed { .. } => "embed",
            OpKind::SumAll => "sum",
            OpKind::MeanAll => "mean",
            OpKind::RowL2Normalize => "l2_normalize",
            OpKind::StraightThrough => "straight_through",
            OpKind::HingeRankLoss { .. } => "ranking_loss",
        }
    }
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    BatchStats { mean: Vec<f64>, var: Vec<f64> },
    Hinges(Vec<(usize, usize)>),
}

struct Node {
    kind: OpKind,
    inputs: Vec<NodeId>,
    value: Tensor,
    aux: Aux,
}

/// Pending update to a pair of batch-norm running buffers, collected during
/// a train-mode forward pass. The graph never mutates the store itself.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gradients keyed by parameter name, as produced by `Graph::backward`.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_or_zeros(&self, name: &str, shape: &[usize]) -> Tensor {
        self.map.get(name).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    /// Per-parameter L2 norms, largest first. Used in failure diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> =
            self.map.iter().map(|(k, t)| (k.clone(), t.l2_norm())).collect();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        v
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    param_ids: BTreeMap<String, NodeId>,
    bn_updates: Vec<BnUpdate>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_ids: BTreeMap::new(), bn_updates: Vec::new() }
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

    /// Running-stat updates collected from train-mode batch norm nodes.
    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>, value: Tensor, aux: Aux) -> Result<NodeId> {
        value.check_finite(kind.name())?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { kind, inputs, value, aux });
        Ok(id)
    }

    fn shape_err(op: &'static str, detail: String) -> TceError {
        TceError::Shape { op, detail }
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(OpKind::Const, vec![], value, Aux::None)
    }

    /// Leaf for a named trainable parameter. One node per name per graph;
    /// repeated requests return the cached id so gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        value.check_finite(&format!("param {name}"))?;
        let id = self.push(OpKind::Param, vec![], value, Aux::None)?;
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// Matrix/vector product. Accepts `[m,k]x[k,n]`, `[m,k]x[k]` and `[k]x[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let (m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k1], [k2, n]) if k1 == k2 => (*m, *k1, *n, vec![*m, *n]),
            ([m, k1], [k2]) if k1 == k2 => (*m, *k1, 1, vec![*m]),
            ([k1], [k2, n]) if k1 == k2 => (1, *k1, *n, vec![*n]),
            _ => {
                return Err(Self::shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
            }
        };
        let data = ops::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(OpKind::MatMul, vec![a, b], Tensor::new(out_shape, data)?, Aux::None)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Self::shape_err("transpose", format!("{:?}", t.shape())));
        }
        let (r, c) = (t.rows(), t.cols());
        let data = ops::transpose(t.data(), r, c);
        self.push(OpKind::Transpose, vec![a], Tensor::new(vec![c, r], data)?, Aux::None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, OpKind::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, OpKind::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, OpKind::Mul, |x, y| x * y)
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        kind: OpKind,
        f: fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Self::shape_err(
                kind.name(),
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(kind, vec![a, b], Tensor::new(shape, data)?, Aux::None)
    }

    /// `[m,n]` plus a length-`n` vector broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, r: NodeId) -> Result<NodeId> {
        let (sa, sr) = (self.value(a).shape().to_vec(), self.value(r).shape().to_vec());
        if sa.len() != 2 || sr.len() != 1 || sa[1] != sr[0] {
            return Err(Self::shape_err("add_row", format!("{:?} + {:?}", sa, sr)));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let mut data = self.value(a).data().to_vec();
        let rv = self.value(r).data();
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] += rv[j];
            }
        }
        self.push(OpKind::AddRow, vec![a, r], Tensor::new(sa, data)?, Aux::None)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|v| v * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(OpKind::Scale(c), vec![a], Tensor::new(shape, data)?, Aux::None)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || ta.shape() != tb.shape() {
            return Err(Self::shape_err("dot", format!("{:?} . {:?}", ta.shape(), tb.shape())));
        }
        let v = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        self.push(OpKind::Dot, vec![a, b], Tensor::scalar(v), Aux::None)
    }

    // ── shape manipulation ─────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat", "no inputs".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(Self::shape_err("concat", format!("rank-{} input", t.rank())));
            }
            data.extend_from_slice(t.data());
        }
        self.push(OpKind::Concat, parts.to_vec(), Tensor::vector(data), Aux::None)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat_cols", "no inputs".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(Self::shape_err("concat_cols", format!("{:?}", t.shape())));
            }
            total += t.cols();
        }
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..rows {
                data[i * total + off..i * total + off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        self.push(OpKind::ConcatCols, parts.to_vec(), Tensor::new(vec![rows, total], data)?, Aux::None)
    }

    pub fn slice(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 1 || hi > t.numel() || lo >= hi {
            return Err(Self::shape_err("slice", format!("[{lo}..{hi}) of {:?}", t.shape())));
        }
        let data = t.data()[lo..hi].to_vec();
        self.push(OpKind::Slice { lo, hi }, vec![a], Tensor::vector(data), Aux::None)
    }

    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 || i >= t.rows() {
            return Err(Self::shape_err("row", format!("row {i} of {:?}", t.shape())));
        }
        let data = t.row(i).to_vec();
        self.push(OpKind::Row(i), vec![a], Tensor::vector(data), Aux::None)
    }

    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Self::shape_err("stack_rows", "no inputs".into()));
        }
        let d = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let t = self.value(r);
            if t.rank() != 1 || t.numel() != d {
                return Err(Self::shape_err("stack_rows", format!("{:?}", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        self.push(OpKind::StackRows, rows.to_vec(), Tensor::new(vec![rows.len(), d], data)?, Aux::None)
    }

    // ── activations ────────────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, OpKind::Sigmoid, ops::sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, OpKind::Tanh, f64::tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, OpKind::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, OpKind::Log, f64::ln)
    }

    fn unary(&mut self, a: NodeId, kind: OpKind, f: fn(f64) -> f64) -> Result<NodeId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|v| f(*v)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(kind, vec![a], Tensor::new(shape, data)?, Aux::None)
    }

    // ── normalization and attention pieces ─────────────────────────────

    pub fn softmax_vec(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 1 {
            return Err(Self::shape_err("softmax", format!("{:?}", t.shape())));
        }
        if let Some(m) = &mask {
            if m.len() != t.numel() {
                return Err(Self::shape_err("softmax", "mask length".into()));
            }
        }
        let data = ops::softmax_masked(t.data(), mask.as_deref())?;
        self.push(OpKind::SoftmaxVec { mask }, vec![a], Tensor::vector(data), Aux::None)
    }

    /// Row-wise softmax of `[m,n]` with an optional mask over the n keys.
    pub fn softmax_rows(&mut self, a: NodeId, key_mask: Option<Vec<bool>>) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Self::shape_err("softmax_rows", format!("{:?}", t.shape())));
        }
        if let Some(m) = &key_mask {
            if m.len() != t.cols() {
                return Err(Self::shape_err("softmax_rows", "mask length".into()));
            }
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let s = ops::softmax_masked(t.row(i), key_mask.as_deref())?;
            data[i * cols..(i + 1) * cols].copy_from_slice(&s);
        }
        self.push(OpKind::SoftmaxRows { key_mask }, vec![a], Tensor::new(vec![rows, cols], data)?, Aux::None)
    }

    /// Column-wise max over (optionally masked) rows of `[m,n]` -> `[n]`.
    pub fn max_rows(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Self::shape_err("max_rows", format!("{:?}", t.shape())));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let live: Vec<usize> = (0..rows).filter(|&i| mask.as_ref().is_none_or(|m| m[i])).collect();
        if live.is_empty() {
            return Err(TceError::AllMasked);
        }
        let mut data = vec![f64::NEG_INFINITY; cols];
        for &i in &live {
            for (j, best) in data.iter_mut().enumerate() {
                if t.at2(i, j) > *best {
                    *best = t.at2(i, j);
                }
            }
        }
        self.push(OpKind::MaxRows { mask }, vec![a], Tensor::vector(data), Aux::None)
    }

    pub fn layernorm_rows(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let t = self.value(a);
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            s => return Err(Self::shape_err("layernorm", format!("{:?}", s))),
        };
        let data = ops::layernorm_rows(t.data(), rows, cols, eps);
        let shape = t.shape().to_vec();
        self.push(OpKind::LayerNormRows { eps }, vec![a], Tensor::new(shape, data)?, Aux::None)
    }

    /// Train-mode batch norm over `[B,d]` input. Batch statistics are used for
    /// normalization and recorded as a pending running-buffer update under
    /// `track_prefix` (unbiased variance, matching the running-stat convention).
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        track_prefix: Option<&str>,
    ) -> Result<NodeId> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Self::shape_err("batchnorm", format!("{:?}", t.shape())));
        }
        let (rows, cols) = (t.rows(), t.cols());
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Self::shape_err("batchnorm", "gamma/beta length".into()));
        }
        let (mean, var) = ops::batch_stats(t.data(), rows, cols);
        let data = ops::batchnorm_apply(
            t.data(),
            rows,
            cols,
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        if let Some(prefix) = track_prefix {
            let scale = if rows > 1 { rows as f64 / (rows as f64 - 1.0) } else { 1.0 };
            self.bn_updates.push(BnUpdate {
                prefix: prefix.to_string(),
                mean: mean.clone(),
                var: var.iter().map(|v| v * scale).collect(),
            });
        }
        self.push(
            OpKind::BatchNormTrain { eps },
            vec![x, gamma, beta],
            Tensor::new(vec![rows, cols], data)?,
            Aux::BatchStats { mean, var },
        )
    }

    /// Inference-mode batch norm: normalizes with frozen running statistics,
    /// so the output for a row is independent of batch composition.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<NodeId> {
        let t = self.value(x);
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            s => return Err(Self::shape_err("batchnorm_eval", format!("{:?}", s))),
        };
        if running_mean.numel() != cols || running_var.numel() != cols {
            return Err(Self::shape_err("batchnorm_eval", "running stat length".into()));
        }
        let data = ops::batchnorm_apply(
            t.data(),
            rows,
            cols,
            running_mean.data(),
            running_var.data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let shape = t.shape().to_vec();
        self.push(
            OpKind::BatchNormEval {
                eps,
                mean: running_mean.data().to_vec(),
                var: running_var.data().to_vec(),
            },
            vec![x, gamma, beta],
            Tensor::new(shape, data)?,
            Aux::None,
        )
    }

    /// Row lookup into an embedding matrix: `[V,d]` gathered at `indices` -> `[n,d]`.
    pub fn embed(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Self::shape_err("embed", format!("{:?}", t.shape())));
        }
        if indices.is_empty() {
            return Err(TceError::EmptyQuery);
        }
        let (v, d) = (t.rows(), t.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Self::shape_err("embed", format!("index {bad} out of vocab {v}")));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        self.push(
            OpKind::Embed { indices: indices.to_vec() },
            vec![table],
            Tensor::new(vec![indices.len(), d], data)?,
            Aux::None,
        )
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).data().iter().sum();
        self.push(OpKind::SumAll, vec![a], Tensor::scalar(v), Aux::None)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let v = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(OpKind::MeanAll, vec![a], Tensor::scalar(v), Aux::None)
    }

    /// Normalizes each row of `[m,d]` to unit L2 norm. Zero rows are an error.
    pub fn row_l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Self::shape_err("l2_normalize", format!("{:?}", t.shape())));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TceError::ZeroNorm);
            }
            for j in 0..cols {
                data[i * cols + j] = t.at2(i, j) / norm;
            }
        }
        self.push(OpKind::RowL2Normalize, vec![a], Tensor::new(vec![rows, cols], data)?, Aux::None)
    }

    // ── discrete selection ─────────────────────────────────────────────

    /// Straight-through discretization: the forward value is the exact one-hot
    /// of the argmax (ties -> lowest index); the backward pass treats the op
    /// as identity, so upstream receives the soft distribution's gradient.
    /// Returns the node and the selected index.
    pub fn straight_through(&mut self, soft: NodeId) -> Result<(NodeId, usize)> {
        let t = self.value(soft);
        if t.rank() != 1 {
            return Err(Self::shape_err("straight_through", format!("{:?}", t.shape())));
        }
        let mut best = 0;
        for (i, &v) in t.data().iter().enumerate() {
            if v > t.data()[best] {
                best = i;
            }
        }
        let mut data = vec![0.0; t.numel()];
        data[best] = 1.0;
        let id = self.push(OpKind::StraightThrough, vec![soft], Tensor::vector(data), Aux::None)?;
        Ok((id, best))
    }

    /// Batch-hard margin ranking loss over a `[B,B]` similarity matrix whose
    /// diagonal holds the positive pairs. For each row the `n_hard` highest
    /// off-diagonal entries (ties -> lower column) are the negative set;
    /// `eligible`, when given, further restricts which columns may serve as
    /// negatives (row-major `B*B` flags).
    pub fn hinge_rank_loss(
        &mut self,
        s: NodeId,
        delta: f64,
        n_hard: usize,
        eligible: Option<Vec<bool>>,
    ) -> Result<NodeId> {
        let t = self.value(s);
        if t.rank() != 2 || t.rows() != t.cols() {
            return Err(Self::shape_err("ranking_loss", format!("{:?}", t.shape())));
        }
        let b = t.rows();
        if let Some(e) = &eligible {
            if e.len() != b * b {
                return Err(Self::shape_err("ranking_loss", "eligibility mask size".into()));
            }
        }
        if n_hard == 0 {
            return Err(Self::shape_err("ranking_loss", "n_hard must be >= 1".into()));
        }
        let mut active = Vec::new();
        let mut loss = 0.0;
        for i in 0..b {
            let negs = hard_negatives(t.data(), b, i, n_hard, eligible.as_deref())?;
            for j in negs {
                let h = delta + t.at2(i, j) - t.at2(i, i);
                if h > 0.0 {
                    loss += h;
                    active.push((i, j));
                }
            }
        }
        loss /= n_hard as f64;
        self.push(OpKind::HingeRankLoss { n_hard }, vec![s], Tensor::scalar(loss), Aux::Hinges(active))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Returns one gradient tensor per
    /// parameter leaf reachable from the loss; callers treat absent names as
    /// zero. Gradients sum over all uses of a node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(TceError::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let deltas = self.input_grads(node, &g);
            for (input, delta) in deltas {
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a += d;
                        }
                    }
                    slot => *slot = Some(delta),
                }
            }
            if matches!(node.kind, OpKind::Param) {
                // leaf: keep the gradient for collection below
                grads[id] = Some(g);
            }
        }

        let mut out = Gradients::default();
        for (name, id) in &self.param_ids {
            if let Some(g) = &grads[id.0] {
                let shape = self.value(*id).shape().to_vec();
                out.map.insert(name.clone(), Tensor::new(shape, g.clone())?);
            }
        }
        Ok(out)
    }

    fn input_grads(&self, node: &Node, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let input = |i: usize| &self.nodes[node.inputs[i].0].value;
        match &node.kind {
            OpKind::Const | OpKind::Param => vec![],
            OpKind::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k) = if a.rank() == 2 { (a.rows(), a.cols()) } else { (1, a.numel()) };
                let n = if b.rank() == 2 { b.cols() } else { 1 };
                // dA = g * B^T, dB = A^T * g
                let bt = ops::transpose(b.data(), k, n);
                let da = ops::matmul(g, &bt, m, n, k);
                let at = ops::transpose(a.data(), m, k);
                let db = ops::matmul(&at, g, k, m, n);
                vec![(node.inputs[0], da), (node.inputs[1], db)]
            }
            OpKind::Transpose => {
                let t = &node.value;
                vec![(node.inputs[0], ops::transpose(g, t.rows(), t.cols()))]
            }
            OpKind::Add => {
                vec![(node.inputs[0], g.to_vec()), (node.inputs[1], g.to_vec())]
            }
            OpKind::AddRow => {
                let (rows, cols) = (node.value.rows(), node.value.cols());
                let mut dr = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dr[j] += g[i * cols + j];
                    }
                }
                vec![(node.inputs[0], g.to_vec()), (node.inputs[1], dr)]
            }
            OpKind::Sub => {
                vec![
                    (node.inputs[0], g.to_vec()),
                    (node.inputs[1], g.iter().map(|v| -v).collect()),
                ]
            }
            OpKind::Mul => {
                let (a, b) = (input(0), input(1));
                vec![
                    (node.inputs[0], g.iter().zip(b.data()).map(|(x, y)| x * y).collect()),
                    (node.inputs[1], g.iter().zip(a.data()).map(|(x, y)| x * y).collect()),
                ]
            }
            OpKind::Scale(c) => {
                vec![(node.inputs[0], g.iter().map(|v| v * c).collect())]
            }
            OpKind::Dot => {
                let (a, b) = (input(0), input(1));
                let s = g[0];
                vec![
                    (node.inputs[0], b.data().iter().map(|v| v * s).collect()),
                    (node.inputs[1], a.data().iter().map(|v| v * s).collect()),
                ]
            }
            OpKind::Concat => {
                let mut out = Vec::new();
                let mut off = 0;
                for &inp in &node.inputs {
                    let len = self.nodes[inp.0].value.numel();
                    out.push((inp, g[off..off + len].to_vec()));
                    off += len;
                }
                out
            }
            OpKind::ConcatCols => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut out = Vec::new();
                let mut off = 0;
                for &inp in &node.inputs {
                    let c = self.nodes[inp.0].value.cols();
                    let mut d = vec![0.0; rows * c];
                    for i in 0..rows {
                        d[i * c..(i + 1) * c]
                            .copy_from_slice(&g[i * total + off..i * total + off + c]);
                    }
                    out.push((inp, d));
                    off += c;
                }
                out
            }
            OpKind::Slice { lo, hi } => {
                let mut d = vec![0.0; input(0).numel()];
                d[*lo..*hi].copy_from_slice(g);
                vec![(node.inputs[0], d)]
            }
            OpKind::Row(i) => {
                let t = input(0);
                let mut d = vec![0.0; t.numel()];
                let c = t.cols();
                d[i * c..(i + 1) * c].copy_from_slice(g);
                vec![(node.inputs[0], d)]
            }
            OpKind::StackRows => {
                let d = node.value.cols();
                node.inputs
                    .iter()
                    .enumerate()
                    .map(|(i, &inp)| (inp, g[i * d..(i + 1) * d].to_vec()))
                    .collect()
            }
            OpKind::Sigmoid => {
                let y = node.value.data();
                vec![(node.inputs[0], g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect())]
            }
            OpKind::Tanh => {
                let y = node.value.data();
                vec![(node.inputs[0], g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect())]
            }
            OpKind::Relu => {
                let x = input(0).data();
                vec![(
                    node.inputs[0],
                    g.iter().zip(x).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect(),
                )]
            }
            OpKind::Log => {
                let x = input(0).data();
                vec![(node.inputs[0], g.iter().zip(x).map(|(gi, xi)| gi / xi).collect())]
            }
            OpKind::SoftmaxVec { mask } => {
                let y = node.value.data();
                vec![(node.inputs[0], ops::softmax_backward(y, g, mask.as_deref()))]
            }
            OpKind::SoftmaxRows { key_mask } => {
                let (rows, cols) = (node.value.rows(), node.value.cols());
                let mut d = vec![0.0; rows * cols];
                for i in 0..rows {
                    let dy = ops::softmax_backward(
                        node.value.row(i),
                        &g[i * cols..(i + 1) * cols],
                        key_mask.as_deref(),
                    );
                    d[i * cols..(i + 1) * cols].copy_from_slice(&dy);
                }
                vec![(node.inputs[0], d)]
            }
            OpKind::MaxRows { mask } => {
                let t = input(0);
                let (rows, cols) = (t.rows(), t.cols());
                let mut d = vec![0.0; rows * cols];
                for j in 0..cols {
                    // first row attaining the max wins the subgradient
                    let mut best: Option<usize> = None;
                    for i in 0..rows {
                        if mask.as_ref().is_none_or(|m| m[i])
                            && (best.is_none() || t.at2(i, j) > t.at2(best.unwrap(), j))
                        {
                            best = Some(i);
                        }
                    }
                    if let Some(i) = best {
                        d[i * cols + j] = g[j];
                    }
                }
                vec![(node.inputs[0], d)]
            }
            OpKind::LayerNormRows { eps } => {
                let t = input(0);
                let (rows, cols) = match t.shape() {
                    [r, c] => (*r, *c),
                    [c] => (1, *c),
                    _ => unreachable!(),
                };
                vec![(node.inputs[0], ops::layernorm_rows_backward(t.data(), g, rows, cols, *eps))]
            }
            OpKind::BatchNormTrain { eps } => {
                let (mean, var) = match &node.aux {
                    Aux::BatchStats { mean, var } => (mean, var),
                    _ => unreachable!(),
                };
                let x = input(0);
                let gamma = input(1);
                let (rows, cols) = (x.rows(), x.cols());
                let (dx, dgamma, dbeta) = ops::batchnorm_train_backward(
                    x.data(),
                    g,
                    rows,
                    cols,
                    mean,
                    var,
                    gamma.data(),
                    *eps,
                );
                vec![
                    (node.inputs[0], dx),
                    (node.inputs[1], dgamma),
                    (node.inputs[2], dbeta),
                ]
            }
            OpKind::BatchNormEval { eps, mean, var } => {
                let x = input(0);
                let gamma = input(1);
                let (rows, cols) = match x.shape() {
                    [r, c] => (*r, *c),
                    [c] => (1, *c),
                    _ => unreachable!(),
                };
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for c in 0..cols {
                    let inv = 1.0 / (var[c] + eps).sqrt();
                    for r in 0..rows {
                        let xhat = (x.data()[r * cols + c] - mean[c]) * inv;
                        dx[r * cols + c] = g[r * cols + c] * gamma.data()[c] * inv;
                        dgamma[c] += g[r * cols + c] * xhat;
                        dbeta[c] += g[r * cols + c];
                    }
                }
                vec![
                    (node.inputs[0], dx),
                    (node.inputs[1], dgamma),
                    (node.inputs[2], dbeta),
                ]
            }
            OpKind::Embed { indices } => {
                let t = input(0);
                let d = t.cols();
                let mut de = vec![0.0; t.numel()];
                for (row, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        de[idx * d + j] += g[row * d + j];
                    }
                }
                vec![(node.inputs[0], de)]
            }
            OpKind::SumAll => {
                let n = input(0).numel();
                vec![(node.inputs[0], vec![g[0]; n])]
            }
            OpKind::MeanAll => {
                let n = input(0).numel();
                vec![(node.inputs[0], vec![g[0] / n as f64; n])]
            }
            OpKind::RowL2Normalize => {
                let x = input(0);
                let y = &node.value;
                let (rows, cols) = (x.rows(), x.cols());
                let mut d = vec![0.0; rows * cols];
                for i in 0..rows {
                    let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ydotg: f64 = y.row(i).iter().zip(&g[i * cols..(i + 1) * cols]).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        d[i * cols + j] = (g[i * cols + j] - y.at2(i, j) * ydotg) / norm;
                    }
                }
                vec![(node.inputs[0], d)]
            }
            OpKind::StraightThrough => {
                // identity backward: the hard selection borrows the soft path's gradient
                vec![(node.inputs[0], g.to_vec())]
            }
            OpKind::HingeRankLoss { n_hard, .. } => {
                let active = match &node.aux {
                    Aux::Hinges(a) => a,
                    _ => unreachable!(),
                };
                let b = input(0).rows();
                let mut ds = vec![0.0; b * b];
                let w = g[0] / *n_hard as f64;
                for &(i, j) in active {
                    ds[i * b + j] += w;
                    ds[i * b + i] -= w;
                }
                vec![(node.inputs[0], ds)]
            }
        }
    }
}

/// Top-`n_hard` off-diagonal columns of row `i` by descending score, ties
/// broken toward the lower column index. Shared by the loss node and the
/// pure selection API in `joint`.
pub(crate) fn hard_negatives(
    s: &[f64],
    b: usize,
    i: usize,
    n_hard: usize,
    eligible: Option<&[bool]>,
) -> Result<Vec<usize>> {
    let mut negs: Vec<usize> = (0..b)
        .filter(|&j| j != i && eligible.is_none_or(|e| e[i * b + j]))
        .collect();
    if negs.is_empty() {
        return Err(TceError::NoNegatives);
    }
    negs.sort_by(|&p, &q| {
        s[i * b + q]
            .partial_cmp(&s[i * b + p])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(p.cmp(&q))
    });
    negs.truncate(n_hard);
    Ok(negs)
}
