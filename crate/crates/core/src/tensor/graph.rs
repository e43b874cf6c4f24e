//! Define-by-run reverse-mode differentiation graph.
//!
//! A `Graph` is rebuilt for every forward pass: each operation appends a
//! node holding its operand ids, the forward result, and enough context
//! to run its backward rule. Nodes are stored in insertion order, which
//! is a topological order by construction, so `backward` is a single
//! reverse sweep that visits each node exactly once.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Gradients keyed by parameter name, in deterministic (sorted) order.
pub type GradMap = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    ScaleConst { a: NodeId, c: f64 },
    MulScalar { a: NodeId, s: NodeId },
    Exp { a: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, width: usize },
    TakeRow { a: NodeId, row: usize },
    MeanPoolRows { a: NodeId, count: usize },
    EmbedRows { table: NodeId, ids: Vec<usize> },
    RelativeBias { table: NodeId, head: usize, len: usize, max_dist: usize },
    SoftmaxRows { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Gelu { a: NodeId },
    Dropout { a: NodeId, mask: Vec<f64> },
    L2NormRows { a: NodeId },
    CrossEntropyRows { logits: NodeId, targets: Vec<usize> },
    Sum { a: NodeId },
}

struct Node {
    op: Op,
    tensor: Tensor,
    /// Parameter name when this leaf mirrors a named model parameter.
    param: Option<String>,
}

/// Operation tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // i-k-j order keeps the inner loop contiguous over both b and out.
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (t, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn push(&mut self, op: Op, tensor: Tensor) -> NodeId {
        debug_assert!(tensor.all_finite(), "non-finite forward value");
        self.nodes.push(Node {
            op,
            tensor,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tensor.requires_grad)
    }

    fn result(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, operands: &[NodeId]) -> NodeId {
        let mut t = Tensor::from_vec(shape, data).expect("internal shape bug");
        t.requires_grad = self.any_requires(operands);
        self.push(op, t)
    }

    // -- leaves ----------------------------------------------------------

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(Op::Leaf, t)
    }

    /// Named trainable parameter; its gradient appears in the map
    /// returned by [`Graph::backward`].
    pub fn param(&mut self, name: &str, t: &Tensor) -> NodeId {
        let mut t = t.clone();
        t.requires_grad = true;
        t.grad = None;
        let id = self.push(Op::Leaf, t);
        self.nodes[id.0].param = Some(name.to_string());
        id
    }

    // -- elementwise and linear ops ---------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.result(Op::Add { a, b }, shape, data, &[a, b]))
    }

    /// Adds a length-n bias vector to every row of an m-by-n matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[bias.0].tensor);
        let n = ta.cols();
        if !ta.is_matrix() || tb.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let shape = ta.shape().to_vec();
        Ok(self.result(Op::AddRow { a, bias }, shape, data, &[a, bias]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.result(Op::Mul { a, b }, shape, data, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = &self.nodes[a.0].tensor;
        let data = ta.data().iter().map(|x| x * c).collect();
        let shape = ta.shape().to_vec();
        self.result(Op::ScaleConst { a, c }, shape, data, &[a])
    }

    /// Multiplies every entry of `a` by the single-element node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let ts = &self.nodes[s.0].tensor;
        if ts.numel() != 1 {
            return Err(Error::Contract(format!(
                "mul_scalar needs a 1-element scale, got shape {:?}",
                ts.shape()
            )));
        }
        let sv = ts.data()[0];
        let ta = &self.nodes[a.0].tensor;
        let data = ta.data().iter().map(|x| x * sv).collect();
        let shape = ta.shape().to_vec();
        Ok(self.result(Op::MulScalar { a, s }, shape, data, &[a, s]))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].tensor;
        let data = ta.data().iter().map(|x| x.exp()).collect();
        let shape = ta.shape().to_vec();
        self.result(Op::Exp { a }, shape, data, &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = vec![0.0; m * n];
        matmul_raw(ta.data(), tb.data(), m, k, n, &mut data);
        Ok(self.result(Op::MatMul { a, b }, vec![m, n], data, &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].tensor;
        if !ta.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                left: ta.shape().to_vec(),
                right: vec![],
            });
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        Ok(self.result(Op::Transpose { a }, vec![n, m], data, &[a]))
    }

    // -- structural ops ----------------------------------------------------

    /// Stacks matrices with equal column counts, top to bottom.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.nodes[parts[0].0].tensor.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].tensor;
            if !t.is_matrix() || t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, cols],
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let op = Op::ConcatRows {
            parts: parts.to_vec(),
        };
        Ok(self.result(op, vec![rows, cols], data, parts))
    }

    /// Stacks matrices with equal row counts, left to right.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.nodes[parts[0].0].tensor.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.nodes[p.0].tensor;
            if !t.is_matrix() || t.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![rows],
                    right: t.shape().to_vec(),
                });
            }
            widths.push(t.cols());
        }
        let cols: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = &self.nodes[p.0].tensor;
            for i in 0..rows {
                data[i * cols + offset..i * cols + offset + w]
                    .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let op = Op::ConcatCols {
            parts: parts.to_vec(),
        };
        Ok(self.result(op, vec![rows, cols], data, parts))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let ta = &self.nodes[a.0].tensor;
        if !ta.is_matrix() || start + width > ta.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: ta.shape().to_vec(),
                right: vec![start, width],
            });
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&ta.data()[i * n + start..i * n + start + width]);
        }
        Ok(self.result(Op::SliceCols { a, start, width }, vec![m, width], data, &[a]))
    }

    pub fn take_row(&mut self, a: NodeId, row: usize) -> Result<NodeId> {
        let ta = &self.nodes[a.0].tensor;
        if !ta.is_matrix() || row >= ta.rows() {
            return Err(Error::ShapeMismatch {
                op: "take_row",
                left: ta.shape().to_vec(),
                right: vec![row],
            });
        }
        let n = ta.cols();
        let data = ta.data()[row * n..(row + 1) * n].to_vec();
        Ok(self.result(Op::TakeRow { a, row }, vec![1, n], data, &[a]))
    }

    /// Mean of the first `count` rows; `count` must be at least 1.
    pub fn mean_pool_rows(&mut self, a: NodeId, count: usize) -> Result<NodeId> {
        let ta = &self.nodes[a.0].tensor;
        if !ta.is_matrix() || count == 0 || count > ta.rows() {
            return Err(Error::ShapeMismatch {
                op: "mean_pool_rows",
                left: ta.shape().to_vec(),
                right: vec![count],
            });
        }
        let n = ta.cols();
        let mut data = vec![0.0; n];
        for i in 0..count {
            for j in 0..n {
                data[j] += ta.data()[i * n + j];
            }
        }
        for v in &mut data {
            *v /= count as f64;
        }
        Ok(self.result(Op::MeanPoolRows { a, count }, vec![1, n], data, &[a]))
    }

    /// Gathers rows of an embedding table by token id.
    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tt = &self.nodes[table.0].tensor;
        let (v, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::VocabId { id: bad, size: v });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let op = Op::EmbedRows {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.result(op, vec![ids.len(), d], data, &[table]))
    }

    /// Expands one head's row of a clipped relative-distance table into
    /// a len-by-len additive attention bias:
    /// `bias[i][j] = table[head][clip(j - i, -k, k) + k]`.
    pub fn relative_bias(
        &mut self,
        table: NodeId,
        head: usize,
        len: usize,
        max_dist: usize,
    ) -> Result<NodeId> {
        let tt = &self.nodes[table.0].tensor;
        let width = 2 * max_dist + 1;
        if !tt.is_matrix() || head >= tt.rows() || tt.cols() != width || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "relative_bias",
                left: tt.shape().to_vec(),
                right: vec![head, len, width],
            });
        }
        let row = &tt.data()[head * width..(head + 1) * width];
        let k = max_dist as i64;
        let mut data = Vec::with_capacity(len * len);
        for i in 0..len as i64 {
            for j in 0..len as i64 {
                let d = (j - i).clamp(-k, k) + k;
                data.push(row[d as usize]);
            }
        }
        let op = Op::RelativeBias {
            table,
            head,
            len,
            max_dist,
        };
        Ok(self.result(op, vec![len, len], data, &[table]))
    }

    // -- nonlinearities ------------------------------------------------------

    /// Row-wise softmax with per-row max subtraction for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].tensor;
        if !ta.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows",
                left: ta.shape().to_vec(),
                right: vec![],
            });
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &ta.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
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
        Ok(self.result(Op::SoftmaxRows { a }, vec![m, n], data, &[a]))
    }

    /// Row-wise standardization followed by learned gain and shift.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].tensor,
            &self.nodes[gain.0].tensor,
            &self.nodes[bias.0].tensor,
        );
        let d = tx.cols();
        if !tx.is_matrix() || tg.numel() != d || tb.numel() != d || eps <= 0.0 {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let m = tx.rows();
        let mut data = vec![0.0; m * d];
        for i in 0..m {
            let row = &tx.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std * tg.data()[j] + tb.data()[j];
            }
        }
        Ok(self.result(
            Op::LayerNorm { x, gain, bias, eps },
            vec![m, d],
            data,
            &[x, gain, bias],
        ))
    }

    /// Exact GELU, `x * Phi(x)` with the erf-based normal CDF.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].tensor;
        let data = ta.data().iter().map(|&x| x * std_normal_cdf(x)).collect();
        let shape = ta.shape().to_vec();
        self.result(Op::Gelu { a }, shape, data, &[a])
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors
    /// by 1/(1-rate). Identity in eval mode and at rate 0.
    pub fn dropout(&mut self, a: NodeId, rate: f64, training: bool, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let ta = &self.nodes[a.0].tensor;
        let mask: Vec<f64> = (0..ta.numel())
            .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
            .collect();
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = ta.shape().to_vec();
        Ok(self.result(Op::Dropout { a, mask }, shape, data, &[a]))
    }

    /// Scales every row to unit L2 norm; rows with norm below 1e-12 are
    /// rejected rather than clamped.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].tensor;
        if !ta.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "l2_normalize_rows",
                left: ta.shape().to_vec(),
                right: vec![],
            });
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &ta.data()[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_FLOOR {
                return Err(Error::DegenerateVector { norm });
            }
            for j in 0..n {
                data[i * n + j] = row[j] / norm;
            }
        }
        Ok(self.result(Op::L2NormRows { a }, vec![m, n], data, &[a]))
    }

    /// Mean cross-entropy of each row's softmax against its target index.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let tl = &self.nodes[logits.0].tensor;
        let (m, n) = (tl.rows(), tl.cols());
        if !tl.is_matrix() || targets.len() != m {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_rows",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Contract(format!(
                "cross-entropy target {bad} out of range 0..{n}"
            )));
        }
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &tl.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            loss -= row[t] - lse;
        }
        loss /= m as f64;
        let op = Op::CrossEntropyRows {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.result(op, vec![1], vec![loss], &[logits]))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.nodes[a.0].tensor.data().iter().sum();
        self.result(Op::Sum { a }, vec![1], vec![total], &[a])
    }

    // -- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// node with `requires_grad`; named parameters are returned as a map,
    /// with zeros for parameters the loss does not reach.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradMap> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].tensor.shape()
            )));
        }
        for node in &mut self.nodes {
            if node.tensor.requires_grad {
                node.tensor.grad = Some(vec![0.0; node.tensor.numel()]);
            }
        }
        if self.nodes[loss.0].tensor.requires_grad {
            self.nodes[loss.0].tensor.grad = Some(vec![1.0]);
        }

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].tensor.requires_grad {
                continue;
            }
            let grad = match &self.nodes[idx].tensor.grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            self.apply_backward(idx, &op, &grad);
        }

        let mut map = GradMap::new();
        for node in &self.nodes {
            if let Some(name) = &node.param {
                let g = node
                    .tensor
                    .grad
                    .clone()
                    .unwrap_or_else(|| vec![0.0; node.tensor.numel()]);
                map.insert(name.clone(), g);
            }
        }
        Ok(map)
    }

    fn accumulate(&mut self, target: NodeId, contribution: &[f64]) {
        let t = &mut self.nodes[target.0].tensor;
        if !t.requires_grad {
            return;
        }
        let g = t.grad.as_mut().expect("grad buffer allocated");
        for (gi, ci) in g.iter_mut().zip(contribution) {
            *gi += ci;
        }
    }

    fn accumulate_at(&mut self, target: NodeId, index: usize, contribution: f64) {
        let t = &mut self.nodes[target.0].tensor;
        if !t.requires_grad {
            return;
        }
        t.grad.as_mut().expect("grad buffer allocated")[index] += contribution;
    }

    fn apply_backward(&mut self, idx: usize, op: &Op, grad: &[f64]) {
        match op {
            Op::Leaf => {}

            Op::Add { a, b } => {
                self.accumulate(*a, grad);
                self.accumulate(*b, grad);
            }

            Op::AddRow { a, bias } => {
                self.accumulate(*a, grad);
                let n = self.nodes[bias.0].tensor.numel();
                let mut db = vec![0.0; n];
                for row in grad.chunks(n) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                self.accumulate(*bias, &db);
            }

            Op::Mul { a, b } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[b.0].tensor.data())
                    .map(|(g, v)| g * v)
                    .collect();
                let db: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[a.0].tensor.data())
                    .map(|(g, v)| g * v)
                    .collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }

            Op::ScaleConst { a, c } => {
                let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.accumulate(*a, &da);
            }

            Op::MulScalar { a, s } => {
                let sv = self.nodes[s.0].tensor.data()[0];
                let da: Vec<f64> = grad.iter().map(|g| g * sv).collect();
                let ds: f64 = grad
                    .iter()
                    .zip(self.nodes[a.0].tensor.data())
                    .map(|(g, v)| g * v)
                    .sum();
                self.accumulate(*a, &da);
                self.accumulate(*s, &[ds]);
            }

            Op::Exp { a } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[idx].tensor.data())
                    .map(|(g, y)| g * y)
                    .collect();
                self.accumulate(*a, &da);
            }

            Op::MatMul { a, b } => {
                let ta = &self.nodes[a.0].tensor;
                let tb = &self.nodes[b.0].tensor;
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = dC . B^T
                if self.nodes[a.0].tensor.requires_grad {
                    let mut da = vec![0.0; m * k];
                    let b_data = self.nodes[b.0].tensor.data();
                    for i in 0..m {
                        for t in 0..k {
                            let mut s = 0.0;
                            let g_row = &grad[i * n..(i + 1) * n];
                            let b_row = &b_data[t * n..(t + 1) * n];
                            for j in 0..n {
                                s += g_row[j] * b_row[j];
                            }
                            da[i * k + t] = s;
                        }
                    }
                    self.accumulate(*a, &da);
                }
                // dB = A^T . dC
                if self.nodes[b.0].tensor.requires_grad {
                    let mut db = vec![0.0; k * n];
                    let a_data = self.nodes[a.0].tensor.data();
                    for i in 0..m {
                        let g_row = &grad[i * n..(i + 1) * n];
                        for t in 0..k {
                            let av = a_data[i * k + t];
                            if av == 0.0 {
                                continue;
                            }
                            let db_row = &mut db[t * n..(t + 1) * n];
                            for j in 0..n {
                                db_row[j] += av * g_row[j];
                            }
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }

            Op::Transpose { a } => {
                let (n, m) = {
                    let t = &self.nodes[idx].tensor;
                    (t.rows(), t.cols())
                };
                let mut da = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = grad[i * m + j];
                    }
                }
                self.accumulate(*a, &da);
            }

            Op::ConcatRows { parts } => {
                let cols = self.nodes[idx].tensor.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.nodes[p.0].tensor.rows();
                    let chunk = &grad[offset * cols..(offset + rows) * cols];
                    self.accumulate(p, chunk);
                    offset += rows;
                }
            }

            Op::ConcatCols { parts } => {
                let t = &self.nodes[idx].tensor;
                let (rows, cols) = (t.rows(), t.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].tensor.cols();
                    let mut dp = vec![0.0; rows * w];
                    for i in 0..rows {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&grad[i * cols + offset..i * cols + offset + w]);
                    }
                    self.accumulate(p, &dp);
                    offset += w;
                }
            }

            Op::SliceCols { a, start, width } => {
                let ta = &self.nodes[a.0].tensor;
                let (m, n) = (ta.rows(), ta.cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + width]
                        .copy_from_slice(&grad[i * width..(i + 1) * width]);
                }
                self.accumulate(*a, &da);
            }

            Op::TakeRow { a, row } => {
                let n = self.nodes[a.0].tensor.cols();
                let m = self.nodes[a.0].tensor.rows();
                let mut da = vec![0.0; m * n];
                da[row * n..(row + 1) * n].copy_from_slice(grad);
                self.accumulate(*a, &da);
            }

            Op::MeanPoolRows { a, count } => {
                let ta = &self.nodes[a.0].tensor;
                let (m, n) = (ta.rows(), ta.cols());
                let inv = 1.0 / *count as f64;
                let mut da = vec![0.0; m * n];
                for i in 0..*count {
                    for j in 0..n {
                        da[i * n + j] = grad[j] * inv;
                    }
                }
                self.accumulate(*a, &da);
            }

            Op::EmbedRows { table, ids } => {
                let d = self.nodes[table.0].tensor.cols();
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        self.accumulate_at(*table, id * d + j, grad[i * d + j]);
                    }
                }
            }

            Op::RelativeBias {
                table,
                head,
                len,
                max_dist,
            } => {
                let width = 2 * max_dist + 1;
                let k = *max_dist as i64;
                for i in 0..*len as i64 {
                    for j in 0..*len as i64 {
                        let d = ((j - i).clamp(-k, k) + k) as usize;
                        let g = grad[(i as usize) * len + j as usize];
                        self.accumulate_at(*table, head * width + d, g);
                    }
                }
            }

            Op::SoftmaxRows { a } => {
                let t = &self.nodes[idx].tensor;
                let (m, n) = (t.rows(), t.cols());
                let y = t.data();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &grad[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        da[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(*a, &da);
            }

            Op::LayerNorm { x, gain, bias, eps } => {
                let tx = &self.nodes[x.0].tensor;
                let (m, d) = (tx.rows(), tx.cols());
                let x_data = tx.data().to_vec();
                let gain_data = self.nodes[gain.0].tensor.data().to_vec();
                let mut dx = vec![0.0; m * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let df = d as f64;
                for i in 0..m {
                    let row = &x_data[i * d..(i + 1) * d];
                    let g_row = &grad[i * d..(i + 1) * d];
                    let mean = row.iter().sum::<f64>() / df;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dgain[j] += g_row[j] * xhat[j];
                        dbias[j] += g_row[j];
                        dxhat[j] = g_row[j] * gain_data[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[i * d + j] =
                            inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dgain);
                self.accumulate(*bias, &dbias);
            }

            Op::Gelu { a } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[a.0].tensor.data())
                    .map(|(g, &x)| g * (std_normal_cdf(x) + x * std_normal_pdf(x)))
                    .collect();
                self.accumulate(*a, &da);
            }

            Op::Dropout { a, mask } => {
                let da: Vec<f64> = grad.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(*a, &da);
            }

            Op::L2NormRows { a } => {
                let ta = &self.nodes[a.0].tensor;
                let (m, n) = (ta.rows(), ta.cols());
                let y = self.nodes[idx].tensor.data();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let row = &ta.data()[i * n..(i + 1) * n];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &grad[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        da[i * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(*a, &da);
            }

            Op::CrossEntropyRows { logits, targets } => {
                let tl = &self.nodes[logits.0].tensor;
                let (m, n) = (tl.rows(), tl.cols());
                let g = grad[0] / m as f64;
                let mut dl = vec![0.0; m * n];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &tl.data()[i * n..(i + 1) * n];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for j in 0..n {
                        let p = exps[j] / sum;
                        dl[i * n + j] = g * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(*logits, &dl);
            }

            Op::Sum { a } => {
                let da = vec![grad[0]; self.nodes[a.0].tensor.numel()];
                self.accumulate(*a, &da);
            }
        }
    }
}
