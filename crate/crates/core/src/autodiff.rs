//! Reverse-mode differentiation over a recorded tape of dense tensor ops.
//!
//! Graphs are built define-by-run: each builder method evaluates its op
//! immediately, so shape errors surface at the call site. The recorded
//! tape can be replayed with new leaf values through [`Tape::forward`],
//! which is what the finite-difference checker relies on.
//!
//! Leaves are either keyed (parameters or any input whose gradient is
//! wanted) or anonymous constants. [`Tape::backward`] accumulates into a
//! per-key gradient map; calling it twice without [`Tape::zero_grad`]
//! doubles every gradient.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::DiffError;
use crate::tensor::Tensor;

/// Gradients keyed by leaf name, in deterministic order.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    Mean,
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { key: Option<String> },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Neg(NodeId),
    Sum(NodeId),
    MeanAxis { input: NodeId, axis: usize },
    L2NormalizeRows(NodeId),
    Lookup { table: NodeId, indices: Arc<Vec<usize>> },
    MaskedSoftmaxRows { input: NodeId, bias: Option<Arc<Tensor>> },
    Scale(NodeId, f64),
    Reshape { input: NodeId, shape: Vec<usize> },
    Aggregate {
        input: NodeId,
        neighbors: Arc<Vec<Vec<usize>>>,
        mode: Aggregator,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add-bias",
            Op::Mul(..) => "mul-elementwise",
            Op::Concat { .. } => "concat",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Neg(..) => "neg",
            Op::Sum(..) => "sum",
            Op::MeanAxis { .. } => "mean-over-axis",
            Op::L2NormalizeRows(..) => "l2-normalize",
            Op::Lookup { .. } => "embedding-lookup",
            Op::MaskedSoftmaxRows { .. } => "masked-softmax-row",
            Op::Scale(..) => "scale-by-scalar",
            Op::Reshape { .. } => "reshape",
            Op::Aggregate { .. } => "neighbor-aggregate",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Transpose(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Neg(a)
            | Op::Sum(a)
            | Op::L2NormalizeRows(a)
            | Op::Scale(a, _) => vec![*a],
            Op::MeanAxis { input, .. }
            | Op::MaskedSoftmaxRows { input, .. }
            | Op::Reshape { input, .. }
            | Op::Aggregate { input, .. } => vec![*input],
            Op::Lookup { table, .. } => vec![*table],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    /// argmax indices for max aggregation, row-major over the output.
    aux: Vec<usize>,
    needs_grad: bool,
}

/// A recorded computation graph. Node ids are topologically ordered.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    keyed: BTreeMap<String, NodeId>,
    grads: Gradients,
}

fn shape_err(node: usize, op: &'static str, detail: impl Into<String>) -> DiffError {
    DiffError::Shape {
        node,
        op,
        detail: detail.into(),
    }
}

fn require_2d(node: usize, op: &'static str, t: &Tensor) -> Result<(), DiffError> {
    if t.is_2d() {
        Ok(())
    } else {
        Err(shape_err(node, op, format!("expected rank 2, got {:?}", t.shape())))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn matmul_kernel(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a^T · b` without materializing the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a · b^T` without materializing the transpose.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row_slice(i);
        for j in 0..n {
            let brow = b.row_slice(j);
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    debug_assert_eq!(k, b.cols());
    Tensor::matrix(m, n, out)
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Evaluates one op on already-computed input values.
fn eval_op(node: usize, op: &Op, nodes: &[Node]) -> Result<(Tensor, Vec<usize>), DiffError> {
    let val = |id: &NodeId| &nodes[id.0].value;
    let name = op.name();
    let out = match op {
        Op::Leaf { .. } => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => {
            let (a, b) = (val(a), val(b));
            require_2d(node, name, a)?;
            require_2d(node, name, b)?;
            if a.cols() != b.rows() {
                return Err(shape_err(
                    node,
                    name,
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            matmul_kernel(a, b)
        }
        Op::Transpose(a) => {
            let a = val(a);
            require_2d(node, name, a)?;
            a.transpose()
        }
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (x, y) = (val(a), val(b));
            if x.shape() != y.shape() {
                return Err(shape_err(
                    node,
                    name,
                    format!("{:?} vs {:?}", x.shape(), y.shape()),
                ));
            }
            if matches!(op, Op::Add(..)) {
                elementwise(x, y, |p, q| p + q)
            } else {
                elementwise(x, y, |p, q| p * q)
            }
        }
        Op::AddBias(a, b) => {
            let (x, bias) = (val(a), val(b));
            require_2d(node, name, x)?;
            if bias.numel() != x.cols() {
                return Err(shape_err(
                    node,
                    name,
                    format!("bias {:?} for matrix {:?}", bias.shape(), x.shape()),
                ));
            }
            let mut out = x.clone();
            for r in 0..out.rows() {
                for (o, b) in out.row_slice_mut(r).iter_mut().zip(bias.data()) {
                    *o += b;
                }
            }
            out
        }
        Op::Concat { parts, axis } => {
            if parts.is_empty() {
                return Err(shape_err(node, name, "no inputs"));
            }
            for p in parts {
                require_2d(node, name, val(p))?;
            }
            let first = val(&parts[0]);
            match axis {
                0 => {
                    let cols = first.cols();
                    let mut data = Vec::new();
                    let mut rows = 0;
                    for p in parts {
                        let t = val(p);
                        if t.cols() != cols {
                            return Err(shape_err(node, name, "column counts differ"));
                        }
                        rows += t.rows();
                        data.extend_from_slice(t.data());
                    }
                    Tensor::matrix(rows, cols, data)
                }
                1 => {
                    let rows = first.rows();
                    if parts.iter().any(|p| val(p).rows() != rows) {
                        return Err(shape_err(node, name, "row counts differ"));
                    }
                    let cols: usize = parts.iter().map(|p| val(p).cols()).sum();
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for p in parts {
                            data.extend_from_slice(val(p).row_slice(r));
                        }
                    }
                    Tensor::matrix(rows, cols, data)
                }
                _ => return Err(shape_err(node, name, format!("axis {axis}"))),
            }
        }
        Op::Relu(a) => val(a).map(|x| x.max(0.0)),
        Op::Sigmoid(a) => val(a).map(sigmoid),
        Op::Softplus(a) => val(a).map(softplus),
        Op::Exp(a) => val(a).map(f64::exp),
        Op::Log(a) => val(a).map(f64::ln),
        Op::Neg(a) => val(a).map(|x| -x),
        Op::Scale(a, c) => {
            let c = *c;
            val(a).map(|x| c * x)
        }
        Op::Sum(a) => Tensor::scalar(val(a).sum()),
        Op::MeanAxis { input, axis } => {
            let x = val(input);
            require_2d(node, name, x)?;
            let (r, c) = (x.rows(), x.cols());
            match axis {
                0 => {
                    if r == 0 {
                        return Err(shape_err(node, name, "mean over zero rows"));
                    }
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for (o, v) in out.iter_mut().zip(x.row_slice(i)) {
                            *o += v;
                        }
                    }
                    out.iter_mut().for_each(|o| *o /= r as f64);
                    Tensor::matrix(1, c, out)
                }
                1 => {
                    if c == 0 {
                        return Err(shape_err(node, name, "mean over zero columns"));
                    }
                    let out = (0..r)
                        .map(|i| x.row_slice(i).iter().sum::<f64>() / c as f64)
                        .collect();
                    Tensor::matrix(r, 1, out)
                }
                _ => return Err(shape_err(node, name, format!("axis {axis}"))),
            }
        }
        Op::L2NormalizeRows(a) => {
            let x = val(a);
            require_2d(node, name, x)?;
            let mut out = x.clone();
            for r in 0..out.rows() {
                let row = out.row_slice_mut(r);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    row.iter_mut().for_each(|v| *v = 0.0);
                } else {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
            out
        }
        Op::Lookup { table, indices } => {
            let t = val(table);
            require_2d(node, name, t)?;
            let cols = t.cols();
            let mut data = Vec::with_capacity(indices.len() * cols);
            for &i in indices.iter() {
                if i >= t.rows() {
                    return Err(shape_err(
                        node,
                        name,
                        format!("row {i} out of range for {:?}", t.shape()),
                    ));
                }
                data.extend_from_slice(t.row_slice(i));
            }
            Tensor::matrix(indices.len(), cols, data)
        }
        Op::MaskedSoftmaxRows { input, bias } => {
            let x = val(input);
            require_2d(node, name, x)?;
            if let Some(b) = bias {
                if b.shape() != x.shape() {
                    return Err(shape_err(
                        node,
                        name,
                        format!("bias {:?} for logits {:?}", b.shape(), x.shape()),
                    ));
                }
            }
            let mut out = Tensor::zeros(x.shape());
            for r in 0..x.rows() {
                let logits: Vec<f64> = match bias {
                    Some(b) => x
                        .row_slice(r)
                        .iter()
                        .zip(b.row_slice(r))
                        .map(|(l, m)| l + m)
                        .collect(),
                    None => x.row_slice(r).to_vec(),
                };
                let max = logits
                    .iter()
                    .copied()
                    .filter(|v| v.is_finite())
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let orow = out.row_slice_mut(r);
                let mut total = 0.0;
                for (o, &l) in orow.iter_mut().zip(&logits) {
                    if l.is_finite() {
                        *o = (l - max).exp();
                        total += *o;
                    }
                }
                orow.iter_mut().for_each(|o| *o /= total);
            }
            out
        }
        Op::Reshape { input, shape } => val(input)
            .clone()
            .reshaped(shape.clone())
            .map_err(|e| shape_err(node, name, e.to_string()))?,
        Op::Aggregate {
            input,
            neighbors,
            mode,
        } => {
            let x = val(input);
            require_2d(node, name, x)?;
            let cols = x.cols();
            let mut out = Tensor::zeros(&[neighbors.len(), cols]);
            let mut argmax = Vec::new();
            if *mode == Aggregator::Max {
                argmax = vec![usize::MAX; neighbors.len() * cols];
            }
            for (r, nbrs) in neighbors.iter().enumerate() {
                if nbrs.iter().any(|&n| n >= x.rows()) {
                    return Err(shape_err(node, name, format!("neighbor of row {r} out of range")));
                }
                if nbrs.is_empty() {
                    continue;
                }
                let orow = out.row_slice_mut(r);
                match mode {
                    Aggregator::Mean => {
                        for &n in nbrs {
                            for (o, v) in orow.iter_mut().zip(x.row_slice(n)) {
                                *o += v;
                            }
                        }
                        let k = nbrs.len() as f64;
                        orow.iter_mut().for_each(|o| *o /= k);
                    }
                    Aggregator::Max => {
                        for (j, o) in orow.iter_mut().enumerate() {
                            let mut best = nbrs[0];
                            for &n in &nbrs[1..] {
                                if x.get(n, j) > x.get(best, j) {
                                    best = n;
                                }
                            }
                            *o = x.get(best, j);
                            argmax[r * cols + j] = best;
                        }
                    }
                }
            }
            return Ok((out, argmax));
        }
    };
    Ok((out, Vec::new()))
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

    /// A keyed leaf; its gradient is reported by [`Tape::backward`].
    /// Re-binding an existing key returns the original node.
    pub fn param(&mut self, key: impl Into<String>, value: Tensor) -> NodeId {
        let key = key.into();
        if let Some(&id) = self.keyed.get(&key) {
            return id;
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf {
                key: Some(key.clone()),
            },
            value,
            aux: Vec::new(),
            needs_grad: true,
        });
        self.keyed.insert(key, id);
        id
    }

    /// An anonymous leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf { key: None },
            value,
            aux: Vec::new(),
            needs_grad: false,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&self, key: &str) -> Option<NodeId> {
        self.keyed.get(key).copied()
    }

    pub fn leaf_keys(&self) -> impl Iterator<Item = &str> {
        self.keyed.keys().map(String::as_str)
    }

    fn push(&mut self, op: Op) -> Result<NodeId, DiffError> {
        let index = self.nodes.len();
        let (value, aux) = eval_op(index, &op, &self.nodes)?;
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        #[cfg(debug_assertions)]
        {
            let finite_in = op.inputs().iter().all(|i| self.nodes[i.0].value.is_finite());
            debug_assert!(
                !finite_in || value.is_finite(),
                "node {index} ({}) produced non-finite output from finite inputs",
                op.name()
            );
        }
        self.nodes.push(Node {
            op,
            value,
            aux,
            needs_grad,
        });
        Ok(NodeId(index))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Transpose(a))
    }

    /// `x · w^T`, the usual dense layer with `w` stored as `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, DiffError> {
        let wt = self.transpose(w)?;
        self.matmul(x, wt)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Add(a, b))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::AddBias(a, bias))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Mul(a, b))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, DiffError> {
        self.push(Op::Concat {
            parts: parts.to_vec(),
            axis,
        })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Softplus(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Log(a))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        self.push(Op::Scale(a, c))
    }

    /// Sum of all entries as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Sum(a))
    }

    /// Mean over all entries as a `[1, 1]` scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        self.push(Op::MeanAxis { input: a, axis })
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::L2NormalizeRows(a))
    }

    /// Gathers rows of `table`. Indices may repeat.
    pub fn lookup(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId, DiffError> {
        self.push(Op::Lookup {
            table,
            indices: Arc::new(indices),
        })
    }

    /// Row-wise softmax of `a + bias`. Entries where the sum is not finite
    /// are masked out; a row with nothing left yields zeros.
    pub fn masked_softmax_rows(
        &mut self,
        a: NodeId,
        bias: Option<Arc<Tensor>>,
    ) -> Result<NodeId, DiffError> {
        self.push(Op::MaskedSoftmaxRows { input: a, bias })
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, DiffError> {
        self.push(Op::Reshape { input: a, shape })
    }

    /// Output row `r` aggregates rows `neighbors[r]` of `a`; empty lists give zeros.
    pub fn aggregate(
        &mut self,
        a: NodeId,
        neighbors: Arc<Vec<Vec<usize>>>,
        mode: Aggregator,
    ) -> Result<NodeId, DiffError> {
        self.push(Op::Aggregate {
            input: a,
            neighbors,
            mode,
        })
    }

    /// Replays the tape. Keyed leaves named in `feeds` take the fed value
    /// (shapes must match); all other leaves keep their bound value.
    /// Returns the values of every keyed leaf and the final node.
    pub fn forward(
        &mut self,
        feeds: &BTreeMap<String, Tensor>,
    ) -> Result<BTreeMap<String, Tensor>, DiffError> {
        for (key, value) in feeds {
            let id = *self
                .keyed
                .get(key)
                .ok_or_else(|| DiffError::UnknownLeaf(key.clone()))?;
            if self.nodes[id.0].value.shape() != value.shape() {
                return Err(shape_err(
                    id.0,
                    "leaf",
                    format!(
                        "fed {:?}, bound {:?}",
                        value.shape(),
                        self.nodes[id.0].value.shape()
                    ),
                ));
            }
            self.nodes[id.0].value = value.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let (value, aux) = eval_op(i, &self.nodes[i].op, &self.nodes)?;
            self.nodes[i].value = value;
            self.nodes[i].aux = aux;
        }
        let mut out: BTreeMap<String, Tensor> = self
            .keyed
            .iter()
            .map(|(k, id)| (k.clone(), self.nodes[id.0].value.clone()))
            .collect();
        if let Some(last) = self.nodes.last() {
            out.insert("output".to_string(), last.value.clone());
        }
        Ok(out)
    }

    /// Backpropagates from a scalar loss and accumulates into the tape's
    /// gradient map. Returns the accumulated gradients of all keyed leaves
    /// reachable from the loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients, DiffError> {
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarLoss {
                node: loss.0,
                shape,
            });
        }
        let seed = Tensor::filled(&shape, 1.0);
        self.backward_with_seed(loss, &seed)
    }

    /// Vector-Jacobian product: backpropagates `seed` (shaped like `node`).
    pub fn backward_with_seed(
        &mut self,
        node: NodeId,
        seed: &Tensor,
    ) -> Result<Gradients, DiffError> {
        if seed.shape() != self.value(node).shape() {
            return Err(shape_err(
                node.0,
                "backward",
                format!("seed {:?} for {:?}", seed.shape(), self.value(node).shape()),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; node.0 + 1];
        adj[node.0] = Some(seed.clone());
        for i in (0..=node.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let n = &self.nodes[i];
            if !n.needs_grad {
                continue;
            }
            if let Op::Leaf { key: Some(key) } = &n.op {
                match self.grads.get_mut(key) {
                    Some(acc) => acc.axpy(1.0, &g),
                    None => {
                        self.grads.insert(key.clone(), g);
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        let reached: Gradients = self
            .keyed
            .iter()
            .filter(|(_, id)| id.0 <= node.0)
            .filter_map(|(k, _)| self.grads.get(k).map(|g| (k.clone(), g.clone())))
            .collect();
        Ok(reached)
    }

    /// Accumulated gradients since the last reset.
    pub fn gradients(&self) -> &Gradients {
        &self.grads
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let val = |id: NodeId| &nodes[id.0].value;
        let wants = |id: NodeId| nodes[id.0].needs_grad;
        let send = |adj: &mut [Option<Tensor>], id: NodeId, contrib: Tensor| {
            if !nodes[id.0].needs_grad {
                return;
            }
            match &mut adj[id.0] {
                Some(acc) => acc.axpy(1.0, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let node = &nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    send(adj, *a, matmul_nt(g, val(*b)));
                }
                if wants(*b) {
                    send(adj, *b, matmul_tn(val(*a), g));
                }
            }
            Op::Transpose(a) => send(adj, *a, g.transpose()),
            Op::Add(a, b) => {
                send(adj, *a, g.clone());
                send(adj, *b, g.clone());
            }
            Op::AddBias(a, b) => {
                send(adj, *a, g.clone());
                if wants(*b) {
                    let mut db = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row_slice(r)) {
                            *d += v;
                        }
                    }
                    let shape = val(*b).shape().to_vec();
                    send(adj, *b, Tensor::new(shape, db).expect("bias shape"));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(adj, *a, elementwise(g, val(*b), |p, q| p * q));
                }
                if wants(*b) {
                    send(adj, *b, elementwise(g, val(*a), |p, q| p * q));
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let (pr, pc) = (pv.rows(), pv.cols());
                    if wants(p) {
                        let mut data = Vec::with_capacity(pr * pc);
                        if *axis == 0 {
                            for r in 0..pr {
                                data.extend_from_slice(g.row_slice(offset + r));
                            }
                        } else {
                            for r in 0..pr {
                                data.extend_from_slice(&g.row_slice(r)[offset..offset + pc]);
                            }
                        }
                        send(adj, p, Tensor::matrix(pr, pc, data));
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Relu(a) => {
                send(adj, *a, elementwise(g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }))
            }
            Op::Sigmoid(a) => send(adj, *a, elementwise(g, y, |gv, s| gv * s * (1.0 - s))),
            Op::Softplus(a) => send(adj, *a, elementwise(g, val(*a), |gv, x| gv * sigmoid(x))),
            Op::Exp(a) => send(adj, *a, elementwise(g, y, |gv, e| gv * e)),
            Op::Log(a) => send(adj, *a, elementwise(g, val(*a), |gv, x| gv / x)),
            Op::Neg(a) => send(adj, *a, g.map(|v| -v)),
            Op::Scale(a, c) => {
                let c = *c;
                send(adj, *a, g.map(|v| c * v))
            }
            Op::Sum(a) => send(adj, *a, Tensor::filled(val(*a).shape(), g.item())),
            Op::MeanAxis { input, axis } => {
                let x = val(*input);
                let (r, c) = (x.rows(), x.cols());
                let mut d = Tensor::zeros(x.shape());
                for i in 0..r {
                    for j in 0..c {
                        let v = if *axis == 0 {
                            g.get(0, j) / r as f64
                        } else {
                            g.get(i, 0) / c as f64
                        };
                        d.set(i, j, v);
                    }
                }
                send(adj, *input, d);
            }
            Op::L2NormalizeRows(a) => {
                let x = val(*a);
                let mut d = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let xr = x.row_slice(r);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < 1e-12 {
                        continue;
                    }
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (k, out) in d.row_slice_mut(r).iter_mut().enumerate() {
                        *out = (gr[k] - yr[k] * dot) / norm;
                    }
                }
                send(adj, *a, d);
            }
            Op::Lookup { table, indices } => {
                if !wants(*table) {
                    return;
                }
                // Scatter straight into the table's adjoint; tables are large
                // and looked up many times per tape.
                let slot = adj[table.0].get_or_insert_with(|| Tensor::zeros(val(*table).shape()));
                for (r, &idx) in indices.iter().enumerate() {
                    for (o, v) in slot.row_slice_mut(idx).iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
            }
            Op::MaskedSoftmaxRows { input, .. } => {
                let mut d = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (k, out) in d.row_slice_mut(r).iter_mut().enumerate() {
                        *out = yr[k] * (gr[k] - dot);
                    }
                }
                send(adj, *input, d);
            }
            Op::Reshape { input, .. } => {
                let shape = val(*input).shape().to_vec();
                send(adj, *input, g.clone().reshaped(shape).expect("reshape back"));
            }
            Op::Aggregate {
                input,
                neighbors,
                mode,
            } => {
                let x = val(*input);
                let cols = x.cols();
                let mut d = Tensor::zeros(x.shape());
                for (r, nbrs) in neighbors.iter().enumerate() {
                    if nbrs.is_empty() {
                        continue;
                    }
                    let gr = g.row_slice(r);
                    match mode {
                        Aggregator::Mean => {
                            let k = nbrs.len() as f64;
                            for &n in nbrs {
                                for (o, v) in d.row_slice_mut(n).iter_mut().zip(gr) {
                                    *o += v / k;
                                }
                            }
                        }
                        Aggregator::Max => {
                            for (j, gv) in gr.iter().enumerate() {
                                let src = node.aux[r * cols + j];
                                let cur = d.get(src, j);
                                d.set(src, j, cur + gv);
                            }
                        }
                    }
                }
                send(adj, *input, d);
            }
        }
    }
}

/// Central-difference check of the gradient of scalar `loss` with respect
/// to the keyed leaf `key`. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(FD_FLOOR, |analytic| + |numeric|)`.
///
/// The floor keeps coordinates whose true gradient is near zero from
/// comparing two roundoff residues: at step 1e-6 the numeric estimate of an
/// O(1) loss carries about 1e-10 of cancellation noise.
///
/// The tape's accumulated gradients and leaf values are restored afterwards.
pub const FD_FLOOR: f64 = 1e-5;

pub fn finite_difference_check(
    tape: &mut Tape,
    loss: NodeId,
    key: &str,
    epsilon: f64,
) -> Result<f64, DiffError> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let leaf = tape
        .leaf(key)
        .ok_or_else(|| DiffError::UnknownLeaf(key.to_string()))?;
    let saved_grads = std::mem::take(&mut tape.grads);
    let analytic = match tape.backward(loss) {
        Ok(g) => g
            .get(key)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(leaf).shape())),
        Err(e) => {
            tape.grads = saved_grads;
            return Err(e);
        }
    };
    tape.grads = saved_grads;

    let base = tape.value(leaf).clone();
    let mut worst: f64 = 0.0;
    let mut feeds = BTreeMap::new();
    for k in 0..base.numel() {
        let mut plus = base.clone();
        plus.data_mut()[k] += epsilon;
        feeds.insert(key.to_string(), plus);
        tape.forward(&feeds)?;
        let lp = tape.value(loss).item();

        let mut minus = base.clone();
        minus.data_mut()[k] -= epsilon;
        feeds.insert(key.to_string(), minus);
        tape.forward(&feeds)?;
        let lm = tape.value(loss).item();

        let numeric = (lp - lm) / (2.0 * epsilon);
        let a = analytic.data()[k];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(FD_FLOOR);
        worst = worst.max(rel);
    }
    feeds.insert(key.to_string(), base);
    tape.forward(&feeds)?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape, key: &str, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
        t.param(key, Tensor::matrix(rows, cols, data))
    }

    #[test]
    fn relu_and_sigmoid_forward() {
        let mut t = Tape::new();
        let x = leaf(&mut t, "x", 1, 3, vec![-1.0, 0.0, 2.0]);
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = leaf(&mut t, "z", 1, 1, vec![0.0]);
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.value(s).item(), 0.5);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.5];
        let b = vec![2.0, -1.0, 0.25];
        let mut expected = [0.0; 2];
        for i in 0..2 {
            for k in 0..3 {
                expected[i] += a[i * 3 + k] * b[k];
            }
        }
        let mut t = Tape::new();
        let na = leaf(&mut t, "a", 2, 3, a);
        let nb = leaf(&mut t, "b", 3, 1, b);
        let c = t.matmul(na, nb).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 1]);
        assert_eq!(t.value(c).data(), &expected);
    }

    #[test]
    fn matmul_shape_error_names_node() {
        let mut t = Tape::new();
        let a = leaf(&mut t, "a", 2, 3, vec![0.0; 6]);
        let b = leaf(&mut t, "b", 2, 3, vec![0.0; 6]);
        let err = t.matmul(a, b).unwrap_err();
        match err {
            DiffError::Shape { node, op, .. } => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sigmoid_and_relu_derivatives() {
        let mut t = Tape::new();
        let x = leaf(&mut t, "x", 1, 1, vec![0.0]);
        let s = t.sigmoid(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g["x"].item(), 0.25);

        let mut t = Tape::new();
        let x = leaf(&mut t, "x", 1, 1, vec![-1.0]);
        let r = t.relu(x).unwrap();
        let g = t.backward(r).unwrap();
        assert_eq!(g["x"].item(), 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = leaf(&mut t, "x", 1, 2, vec![1.0, 2.0]);
        assert!(matches!(
            t.backward(x),
            Err(DiffError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_twice_doubles() {
        let mut t = Tape::new();
        let x = leaf(&mut t, "x", 1, 2, vec![1.0, 2.0]);
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y).unwrap();
        let g1 = t.backward(s).unwrap()["x"].clone();
        let g2 = t.backward(s).unwrap()["x"].clone();
        assert_eq!(g2.data(), &[2.0 * g1.data()[0], 2.0 * g1.data()[1]]);
        t.zero_grad();
        let g3 = t.backward(s).unwrap()["x"].clone();
        assert_eq!(g3, g1);
    }

    #[test]
    fn softmax_all_masked_row_is_zero() {
        let mut t = Tape::new();
        let x = leaf(&mut t, "x", 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let bias = Tensor::matrix(2, 2, vec![0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        let y = t.masked_softmax_rows(x, Some(Arc::new(bias))).unwrap();
        let v = t.value(y);
        assert!((v.get(0, 0) + v.get(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(v.row_slice(1), &[0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_small_row_is_zero() {
        let mut t = Tape::new();
        let x = leaf(&mut t, "x", 2, 2, vec![3.0, 4.0, 1e-14, 0.0]);
        let y = t.l2_normalize_rows(x).unwrap();
        assert_eq!(t.value(y).row_slice(0), &[0.6, 0.8]);
        assert_eq!(t.value(y).row_slice(1), &[0.0, 0.0]);
    }

    #[test]
    fn linear_map_gradient_is_exact() {
        let mut t = Tape::new();
        let w = leaf(&mut t, "w", 2, 3, vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4]);
        let x = t.constant(Tensor::matrix(3, 1, vec![1.5, -0.5, 2.0]));
        let y = t.matmul(w, x).unwrap();
        let loss = t.sum(y).unwrap();
        let err = finite_difference_check(&mut t, loss, "w", 1e-6).unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn forward_replay_uses_feeds() {
        let mut t = Tape::new();
        let x = leaf(&mut t, "x", 1, 2, vec![1.0, 2.0]);
        let y = t.scale(x, 3.0).unwrap();
        let s = t.sum(y).unwrap();
        assert_eq!(t.value(s).item(), 9.0);
        let mut feeds = BTreeMap::new();
        feeds.insert("x".to_string(), Tensor::row(vec![0.0, 1.0]));
        let out = t.forward(&feeds).unwrap();
        assert_eq!(out["output"].item(), 3.0);
        feeds.insert("nope".to_string(), Tensor::row(vec![0.0]));
        assert!(t.forward(&feeds).is_err());
    }
}
