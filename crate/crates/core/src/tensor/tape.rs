//! Define-by-run gradient tape.
//!
//! Operations append nodes to a [`Tape`]; every node owns its output value.
//! [`Tape::backward`] walks the node list in reverse, so each node is
//! visited exactly once and inputs always precede their consumers. Gradient
//! buffers are only ever allocated for nodes with `requires_grad`, which is
//! what keeps frozen parameters untouched.
//!
//! Supported broadcasting is trailing-dimension only: for the elementwise
//! binary ops the right operand may be a strict suffix of the left shape
//! (e.g. a `[seq, d]` activation plus a `[d]` bias). Anything else needs an
//! explicit `reshape`.

use std::collections::BTreeMap;

use super::{Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize, len: usize },
    Reshape { x: Var },
    Relu { x: Var },
    MaxWithZero { x: Var },
    Gelu { x: Var },
    Tanh { x: Var },
    SoftmaxLastDim { x: Var },
    LayerNormLastDim { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    L2Norm { x: Var },
    Dot { a: Var, b: Var },
    Exp { x: Var },
    Log { x: Var },
    Log1p { x: Var },
    EmbedLookup { table: Var, ids: Vec<usize> },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat_lastdim",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Relu { .. } => "relu",
            Op::MaxWithZero { .. } => "max_with_zero",
            Op::Gelu { .. } => "gelu",
            Op::Tanh { .. } => "tanh",
            Op::SoftmaxLastDim { .. } => "softmax_lastdim",
            Op::LayerNormLastDim { .. } => "layernorm_lastdim",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::L2Norm { .. } => "l2_norm",
            Op::Dot { .. } => "dot",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Log1p { .. } => "log1p",
            Op::EmbedLookup { .. } => "embed_lookup",
        }
    }
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

const LAYERNORM_EPS: f64 = 1e-12;
const GELU_COEF: f64 = 0.044715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

/// Records a computation and replays it in reverse for gradients.
///
/// A tape and the vars it issued are confined to one thread; independent
/// tapes may run in parallel threads freely.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    strict: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// New tape in strict mode: every recorded value is checked finite.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            strict: true,
            backward_done: false,
        }
    }

    pub fn with_strict(strict: bool) -> Self {
        Tape {
            strict,
            ..Tape::new()
        }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Per-op-kind node counts, for inspecting a recorded graph.
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for node in &self.nodes {
            *counts.entry(node.op.kind()).or_insert(0) += 1;
        }
        counts
    }

    /// Snapshot a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<Var, TensorError> {
        self.push(
            tensor.data().to_vec(),
            tensor.shape().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    /// Leaf from raw values; `requires_grad` as given.
    pub fn leaf_values(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    /// Non-trainable leaf (masks, selectors, hyperparameter values).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var, TensorError> {
        self.leaf_values(data, shape, false)
    }

    /// Non-trainable scalar leaf of shape `[1]`.
    pub fn scalar(&mut self, value: f64) -> Result<Var, TensorError> {
        self.constant(vec![value], vec![1])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, if one reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Extract a node's value as an owned [`Tensor`].
    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].data.clone(), self.nodes[v.0].shape.clone())
            .expect("tape nodes always hold consistent shapes")
    }

    /// Clear all gradients so another backward pass may run.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    fn push(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var, TensorError> {
        if self.strict && data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.kind() });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var(id))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn last_dim(&self, v: Var) -> usize {
        *self.nodes[v.0].shape.last().expect("shapes are non-empty")
    }

    // ── Forward operations ──────────────────────────────────────────────

    /// 2-D matrix product `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let row = &db[p * n..(p + 1) * n];
                for (j, bv) in row.iter().enumerate() {
                    out[i * n + j] += av * bv;
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        self.push(out, vec![m, n], rg, Op::Matmul { a, b })
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(out, vec![c, r], rg, Op::Transpose { x })
    }

    fn broadcast_check(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(usize, usize), TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let suffix_ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..];
        if !suffix_ok {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok((self.nodes[a.0].data.len(), self.nodes[b.0].data.len()))
    }

    /// Elementwise sum; `b` may be a trailing-dimension broadcast of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (na, nb) = self.broadcast_check("add", a, b)?;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let out = (0..na).map(|i| da[i] + db[i % nb]).collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, rg, Op::Add { a, b })
    }

    /// `a - b`, composed as `a + (-1) * b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    /// Elementwise product; same broadcast rule as `add`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (na, nb) = self.broadcast_check("mul", a, b)?;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let out = (0..na).map(|i| da[i] * db[i % nb]).collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, rg, Op::Mul { a, b })
    }

    /// Elementwise quotient; same broadcast rule as `add`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (na, nb) = self.broadcast_check("div", a, b)?;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let out = (0..na).map(|i| da[i] / db[i % nb]).collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, rg, Op::Div { a, b })
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let out = self.nodes[x.0].data.iter().map(|v| v * factor).collect();
        let rg = self.any_grad(&[x]);
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, rg, Op::Scale { x, factor })
    }

    /// Concatenate along the last dimension. All parts must agree on the
    /// leading dimensions.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat_lastdim",
                message: "no inputs".into(),
            });
        }
        let lead = {
            let s = &self.nodes[parts[0].0].shape;
            s[..s.len() - 1].to_vec()
        };
        let mut total_last = 0;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_lastdim",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: s.clone(),
                });
            }
            total_last += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total_last);
        for r in 0..rows {
            for &p in parts {
                let last = self.last_dim(p);
                out.extend_from_slice(&self.nodes[p.0].data[r * last..(r + 1) * last]);
            }
        }
        let mut shape = lead;
        shape.push(total_last);
        let rg = self.any_grad(parts);
        self.push(
            out,
            shape,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    /// Slice `[start, start+len)` of the last dimension.
    pub fn slice_lastdim(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let last = self.last_dim(x);
        if len == 0 || start + len > last {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                message: format!("range {start}..{} out of last dim {last}", start + len),
            });
        }
        let s = &self.nodes[x.0].shape;
        let rows: usize = s[..s.len() - 1].iter().product();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            let base = r * last + start;
            out.extend_from_slice(&self.nodes[x.0].data[base..base + len]);
        }
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(len);
        let rg = self.any_grad(&[x]);
        self.push(out, shape, rg, Op::Slice { x, start, len })
    }

    /// Reinterpret the value under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != self.nodes[x.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.any_grad(&[x]);
        self.push(data, shape, rg, Op::Reshape { x })
    }

    /// Elementwise `max(x, 0)`. Subgradient at the kink is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let rg = self.any_grad(&[x]);
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, rg, Op::Relu { x })
    }

    /// Hinge clamp `max(x, 0)`; same math as `relu`, recorded under its own
    /// kind so loss graphs stay legible when inspected.
    pub fn max_with_zero(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let rg = self.any_grad(&[x]);
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, rg, Op::MaxWithZero { x })
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let c = sqrt_2_over_pi();
        let out = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (c * (v + GELU_COEF * v * v * v)).tanh()))
            .collect();
        let rg = self.any_grad(&[x]);
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, rg, Op::Gelu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        let rg = self.any_grad(&[x]);
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, rg, Op::Tanh { x })
    }

    /// Row-wise softmax over the last dimension, max-shifted for stability.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var, TensorError> {
        let cols = self.last_dim(x);
        let data = &self.nodes[x.0].data;
        let mut out = vec![0.0; data.len()];
        for (row_out, row) in out.chunks_mut(cols).zip(data.chunks(cols)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row) {
                *o = (v - max).exp();
                denom += *o;
            }
            for o in row_out.iter_mut() {
                *o /= denom;
            }
        }
        let rg = self.any_grad(&[x]);
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, rg, Op::SoftmaxLastDim { x })
    }

    /// Row-wise normalization over the last dimension to mean 0, variance 1.
    /// No affine parameters; apply `mul`/`add` with scale and shift tensors
    /// on top when they are wanted.
    pub fn layernorm_lastdim(&mut self, x: Var) -> Result<Var, TensorError> {
        let cols = self.last_dim(x);
        let data = &self.nodes[x.0].data;
        let mut out = vec![0.0; data.len()];
        for (row_out, row) in out.chunks_mut(cols).zip(data.chunks(cols)) {
            let (mu, sigma) = row_moments(row);
            for (o, &v) in row_out.iter_mut().zip(row) {
                *o = (v - mu) / sigma;
            }
        }
        let rg = self.any_grad(&[x]);
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, rg, Op::LayerNormLastDim { x })
    }

    /// Full reduction to a scalar sum.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(vec![total], vec![1], rg, Op::Sum { x })
    }

    /// Full reduction to a scalar mean.
    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.nodes[x.0].data.len() as f64;
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(vec![total / n], vec![1], rg, Op::Mean { x })
    }

    /// Euclidean norm of the flattened value. The gradient at zero is
    /// defined to be all-zeros.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var, TensorError> {
        let norm = self.nodes[x.0]
            .data
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let rg = self.any_grad(&[x]);
        self.push(vec![norm], vec![1], rg, Op::L2Norm { x })
    }

    /// Flat inner product of two identically shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let value = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.any_grad(&[a, b]);
        self.push(vec![value], vec![1], rg, Op::Dot { a, b })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.nodes[x.0].data.iter().map(|v| v.exp()).collect();
        let rg = self.any_grad(&[x]);
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, rg, Op::Exp { x })
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.nodes[x.0].data.iter().map(|v| v.ln()).collect();
        let rg = self.any_grad(&[x]);
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, rg, Op::Log { x })
    }

    /// `ln(1 + x)` without losing tiny `x` to the addition's rounding.
    pub fn log1p(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.nodes[x.0].data.iter().map(|v| v.ln_1p()).collect();
        let rg = self.any_grad(&[x]);
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, rg, Op::Log1p { x })
    }

    /// Gather rows of a `[rows, dim]` table: `out[t] = table[ids[t]]`.
    /// Indices are data, not differentiable inputs; gradients scatter-add
    /// back into the table.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let s = &self.nodes[table.0].shape;
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embed_lookup",
                lhs: s.clone(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, dim) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "embed_lookup",
                message: "empty id list".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "embed_lookup",
                message: format!("id {bad} out of range for table with {rows} rows"),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&self.nodes[table.0].data[id * dim..(id + 1) * dim]);
        }
        let rg = self.any_grad(&[table]);
        self.push(
            out,
            vec![ids.len(), dim],
            rg,
            Op::EmbedLookup {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Afterwards `grad(v)` holds
    /// `d loss / d v` for every requires-grad node reachable from the loss;
    /// frozen nodes never receive gradient storage.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let d_out = self.grads[id].clone().expect("checked above");
            self.backward_op(id, &op, &d_out);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn backward_op(&mut self, out_id: usize, op: &Op, d_out: &[f64]) {
        match *op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = {
                    let s = &self.nodes[a.0].shape;
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    // dA = dOut @ B^T
                    let db = &self.nodes[b.0].data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = d_out[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += g * db[p * n + j];
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T @ dOut
                    let dat = &self.nodes[a.0].data;
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = dat[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * d_out[i * n + j];
                            }
                        }
                    }
                    self.accumulate(b, &db);
                }
            }

            Op::Transpose { x } => {
                let (r, c) = {
                    let s = &self.nodes[x.0].shape;
                    (s[0], s[1])
                };
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = d_out[j * r + i];
                    }
                }
                self.accumulate(x, &dx);
            }

            Op::Add { a, b } => {
                self.accumulate(a, d_out);
                if self.nodes[b.0].requires_grad {
                    let nb = self.nodes[b.0].data.len();
                    let mut dbv = vec![0.0; nb];
                    for (i, &g) in d_out.iter().enumerate() {
                        dbv[i % nb] += g;
                    }
                    self.accumulate(b, &dbv);
                }
            }

            Op::Mul { a, b } => {
                let nb = self.nodes[b.0].data.len();
                if self.nodes[a.0].requires_grad {
                    let db = &self.nodes[b.0].data;
                    let da: Vec<f64> = d_out
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| g * db[i % nb])
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let da_data = &self.nodes[a.0].data;
                    let mut dbv = vec![0.0; nb];
                    for (i, &g) in d_out.iter().enumerate() {
                        dbv[i % nb] += g * da_data[i];
                    }
                    self.accumulate(b, &dbv);
                }
            }

            Op::Div { a, b } => {
                let nb = self.nodes[b.0].data.len();
                if self.nodes[a.0].requires_grad {
                    let db = &self.nodes[b.0].data;
                    let da: Vec<f64> = d_out
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| g / db[i % nb])
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let da_data = &self.nodes[a.0].data;
                    let db = &self.nodes[b.0].data;
                    let mut dbv = vec![0.0; nb];
                    for (i, &g) in d_out.iter().enumerate() {
                        let bv = db[i % nb];
                        dbv[i % nb] += -g * da_data[i] / (bv * bv);
                    }
                    self.accumulate(b, &dbv);
                }
            }

            Op::Scale { x, factor } => {
                let dx: Vec<f64> = d_out.iter().map(|g| g * factor).collect();
                self.accumulate(x, &dx);
            }

            Op::Concat { ref parts } => {
                let out_last = self.last_dim(Var(out_id));
                let rows = d_out.len() / out_last;
                let mut offset = 0;
                for &p in parts {
                    let last = self.last_dim(p);
                    if self.nodes[p.0].requires_grad {
                        let mut dp = Vec::with_capacity(rows * last);
                        for r in 0..rows {
                            let base = r * out_last + offset;
                            dp.extend_from_slice(&d_out[base..base + last]);
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += last;
                }
            }

            Op::Slice { x, start, len } => {
                let last = self.last_dim(x);
                let rows = self.nodes[x.0].data.len() / last;
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                for r in 0..rows {
                    let base = r * last + start;
                    dx[base..base + len].copy_from_slice(&d_out[r * len..(r + 1) * len]);
                }
                self.accumulate(x, &dx);
            }

            Op::Reshape { x } => {
                self.accumulate(x, d_out);
            }

            Op::Relu { x } | Op::MaxWithZero { x } => {
                let dx: Vec<f64> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(d_out)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(x, &dx);
            }

            Op::Gelu { x } => {
                let c = sqrt_2_over_pi();
                let dx: Vec<f64> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(d_out)
                    .map(|(&v, &g)| {
                        let u = c * (v + GELU_COEF * v * v * v);
                        let t = u.tanh();
                        let du = c * (1.0 + 3.0 * GELU_COEF * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(x, &dx);
            }

            Op::Tanh { x } => {
                let dx: Vec<f64> = self.nodes[out_id]
                    .data
                    .iter()
                    .zip(d_out)
                    .map(|(&y, &g)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(x, &dx);
            }

            Op::SoftmaxLastDim { x } => {
                let cols = self.last_dim(x);
                let y = &self.nodes[out_id].data;
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / cols {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &d_out[r * cols..(r + 1) * cols];
                    let inner: f64 = ys.iter().zip(gs).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = ys[j] * (gs[j] - inner);
                    }
                }
                self.accumulate(x, &dx);
            }

            Op::LayerNormLastDim { x } => {
                let cols = self.last_dim(x);
                let xs = &self.nodes[x.0].data;
                let ys = &self.nodes[out_id].data;
                let mut dx = vec![0.0; xs.len()];
                for r in 0..xs.len() / cols {
                    let row_x = &xs[r * cols..(r + 1) * cols];
                    let row_y = &ys[r * cols..(r + 1) * cols];
                    let row_g = &d_out[r * cols..(r + 1) * cols];
                    let (_, sigma) = row_moments(row_x);
                    let mean_g: f64 = row_g.iter().sum::<f64>() / cols as f64;
                    let mean_gy: f64 = row_g
                        .iter()
                        .zip(row_y)
                        .map(|(g, y)| g * y)
                        .sum::<f64>()
                        / cols as f64;
                    for j in 0..cols {
                        dx[r * cols + j] = (row_g[j] - mean_g - row_y[j] * mean_gy) / sigma;
                    }
                }
                self.accumulate(x, &dx);
            }

            Op::Sum { x } => {
                let dx = vec![d_out[0]; self.nodes[x.0].data.len()];
                self.accumulate(x, &dx);
            }

            Op::Mean { x } => {
                let n = self.nodes[x.0].data.len();
                let dx = vec![d_out[0] / n as f64; n];
                self.accumulate(x, &dx);
            }

            Op::L2Norm { x } => {
                let norm = self.nodes[out_id].data[0];
                let dx: Vec<f64> = if norm == 0.0 {
                    vec![0.0; self.nodes[x.0].data.len()]
                } else {
                    self.nodes[x.0]
                        .data
                        .iter()
                        .map(|&v| d_out[0] * v / norm)
                        .collect()
                };
                self.accumulate(x, &dx);
            }

            Op::Dot { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> =
                        self.nodes[b.0].data.iter().map(|&v| d_out[0] * v).collect();
                    self.accumulate(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> =
                        self.nodes[a.0].data.iter().map(|&v| d_out[0] * v).collect();
                    self.accumulate(b, &db);
                }
            }

            Op::Exp { x } => {
                let dx: Vec<f64> = self.nodes[out_id]
                    .data
                    .iter()
                    .zip(d_out)
                    .map(|(&y, &g)| g * y)
                    .collect();
                self.accumulate(x, &dx);
            }

            Op::Log { x } => {
                let dx: Vec<f64> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(d_out)
                    .map(|(&v, &g)| g / v)
                    .collect();
                self.accumulate(x, &dx);
            }

            Op::Log1p { x } => {
                let dx: Vec<f64> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(d_out)
                    .map(|(&v, &g)| g / (1.0 + v))
                    .collect();
                self.accumulate(x, &dx);
            }

            Op::EmbedLookup { table, ref ids } => {
                if self.nodes[table.0].requires_grad {
                    let dim = self.nodes[table.0].shape[1];
                    let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            dt[id * dim + j] += d_out[t * dim + j];
                        }
                    }
                    self.accumulate(table, &dt);
                }
            }
        }
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, (var + LAYERNORM_EPS).sqrt())
}
