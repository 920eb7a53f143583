//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive as it executes; `backward` walks the
//! tape in reverse and produces a gradient for each trainable leaf reachable
//! from the loss. The graph is rebuilt per forward pass.
//!
//! Numeric conventions: values are stored in f32; every reduction (matrix
//! products, row sums, means, variances) accumulates in f64 before rounding
//! back. GELU uses the tanh approximation, applied consistently in forward,
//! backward, and the f64 replay used for finite-difference checks.

use crate::error::{DctError, DctResult};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { trainable: bool },
    Matmul(usize, usize),
    Add(usize, usize),
    /// rhs has a shape that is a suffix of lhs's shape and is added to every
    /// leading chunk (bias add).
    AddBroadcast(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Gelu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Transpose(usize),
    ConcatRows(Vec<usize>),
    SliceRows { input: usize, start: usize, len: usize },
    ConcatCols(Vec<usize>),
    SliceCols { input: usize, start: usize, len: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a node, if the loss reached it. Frozen leaves and
    /// unreachable nodes have no entry.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

// ── f64 matmul kernels ──────────────────────────────────────────────

/// out[m×n] += A[m×k] · B[k×n], accumulated in f64.
fn mm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let aip = aip as f64;
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j] as f64;
            }
        }
    }
}

/// out[m×n] += X[m×p] · Yᵀ where Y is [n×p].
fn mm_nt(x: &[f32], y: &[f32], m: usize, p: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let xrow = &x[i * p..(i + 1) * p];
        for j in 0..n {
            let yrow = &y[j * p..(j + 1) * p];
            let mut acc = 0.0f64;
            for q in 0..p {
                acc += xrow[q] as f64 * yrow[q] as f64;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[m×n] += Xᵀ · Y where X is [p×m] and Y is [p×n].
fn mm_tn(x: &[f32], y: &[f32], p: usize, m: usize, n: usize, out: &mut [f64]) {
    for q in 0..p {
        let xrow = &x[q * m..(q + 1) * m];
        let yrow = &y[q * n..(q + 1) * n];
        for i in 0..m {
            let xqi = xrow[i] as f64;
            if xqi == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += xqi * yrow[j] as f64;
            }
        }
    }
}

fn acc_into_f32(acc: &[f64], out: &mut [f32]) {
    for (o, &a) in out.iter_mut().zip(acc) {
        *o = (*o as f64 + a) as f32;
    }
}

// ── scalar math shared by f32 forward and f64 replay ────────────────

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_f64(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows_f64(input: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &input[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
}

fn layer_norm_f64(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    rows: usize,
    dim: usize,
    eps: f64,
    out: &mut [f64],
) {
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let orow = &mut out[r * dim..(r + 1) * dim];
        for j in 0..dim {
            orow[j] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
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

    /// Register a parameter tensor. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(Op::Leaf { trainable }, value, trainable)
    }

    /// Register a non-differentiable input (frozen leaf).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn is_trainable_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.id].op, Op::Leaf { trainable: true })
    }

    /// Ids of all trainable leaves, in registration order.
    pub fn trainable_leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { trainable: true }))
            .map(|(id, _)| Var { id })
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var { id: self.nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> DctResult<()> {
        if v.id >= self.nodes.len() {
            return Err(DctError::InvalidNode { id: v.id });
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn finish(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, rg: bool, name: &'static str) -> DctResult<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(DctError::NonFinite { op: name });
        }
        Ok(self.push(op, Tensor::from_parts(shape, data), rg))
    }

    // ── primitives ───────────────────────────────────────────────────

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> DctResult<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(DctError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut acc = vec![0.0f64; m * n];
        mm_nn(ta.data(), tb.data(), m, k, n, &mut acc);
        let data: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
        let rg = self.rg(a) || self.rg(b);
        self.finish(Op::Matmul(a.id, b.id), vec![m, n], data, rg, "matmul")
    }

    /// Elementwise addition. When `b`'s shape is a strict suffix of `a`'s,
    /// `b` is broadcast over the leading dimensions (bias add).
    pub fn add(&mut self, a: Var, b: Var) -> DctResult<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        if ta.shape() == tb.shape() {
            let data: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            return self.finish(Op::Add(a.id, b.id), ta.shape().to_vec(), data, rg, "add");
        }
        let bs = tb.shape();
        let as_ = ta.shape();
        let suffix = bs.len() < as_.len() && as_[as_.len() - bs.len()..] == *bs;
        if !suffix {
            return Err(DctError::ShapeMismatch {
                op: "add",
                left: as_.to_vec(),
                right: bs.to_vec(),
            });
        }
        let chunk = tb.numel();
        let mut data = ta.data().to_vec();
        for c in data.chunks_mut(chunk) {
            for (x, y) in c.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let shape = as_.to_vec();
        self.finish(Op::AddBroadcast(a.id, b.id), shape, data, rg, "add")
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> DctResult<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(DctError::ShapeMismatch {
                op: "mul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.finish(Op::Mul(a.id, b.id), shape, data, rg, "mul")
    }

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> DctResult<Var> {
        self.check(a)?;
        let ta = self.value(a);
        let data: Vec<f32> = ta.data().iter().map(|&x| (x as f64 * factor) as f32).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.finish(Op::Scale(a.id, factor), shape, data, rg, "scale")
    }

    /// Row-wise softmax of a 2-D tensor, stabilized by per-row max
    /// subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> DctResult<Var> {
        self.check(a)?;
        let ta = self.value(a);
        if !ta.is_matrix() {
            return Err(DctError::DimMismatch {
                op: "softmax_rows",
                detail: format!("expected 2-D input, got shape {:?}", ta.shape()),
            });
        }
        let (rows, cols) = (ta.rows(), ta.cols());
        let input = ta.to_f64();
        let mut out = vec![0.0f64; rows * cols];
        softmax_rows_f64(&input, rows, cols, &mut out);
        let data: Vec<f32> = out.iter().map(|&v| v as f32).collect();
        let rg = self.rg(a);
        self.finish(Op::SoftmaxRows(a.id), vec![rows, cols], data, rg, "softmax_rows")
    }

    /// Per-row layer normalization of a 2-D tensor with affine parameters
    /// `gamma`, `beta` of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> DctResult<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let dim = tx.shape().last().copied().unwrap_or(0);
        if !tx.is_matrix() || tg.numel() != dim || tb.numel() != dim {
            return Err(DctError::DimMismatch {
                op: "layer_norm",
                detail: format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    tx.shape(),
                    tg.shape(),
                    tb.shape()
                ),
            });
        }
        let rows = tx.rows();
        let xin = tx.to_f64();
        let g64 = tg.to_f64();
        let b64 = tb.to_f64();
        let mut out = vec![0.0f64; rows * dim];
        layer_norm_f64(&xin, &g64, &b64, rows, dim, eps, &mut out);
        let data: Vec<f32> = out.iter().map(|&v| v as f32).collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.finish(
            Op::LayerNorm { x: x.id, gamma: gamma.id, beta: beta.id, eps },
            vec![rows, dim],
            data,
            rg,
            "layer_norm",
        )
    }

    /// Elementwise GELU (tanh approximation).
    pub fn gelu(&mut self, a: Var) -> DctResult<Var> {
        self.check(a)?;
        let ta = self.value(a);
        let data: Vec<f32> = ta.data().iter().map(|&x| gelu_f64(x as f64) as f32).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.finish(Op::Gelu(a.id), shape, data, rg, "gelu")
    }

    pub fn exp(&mut self, a: Var) -> DctResult<Var> {
        self.check(a)?;
        let ta = self.value(a);
        let data: Vec<f32> = ta.data().iter().map(|&x| (x as f64).exp() as f32).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.finish(Op::Exp(a.id), shape, data, rg, "exp")
    }

    pub fn log(&mut self, a: Var) -> DctResult<Var> {
        self.check(a)?;
        let ta = self.value(a);
        let data: Vec<f32> = ta.data().iter().map(|&x| (x as f64).ln() as f32).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.finish(Op::Log(a.id), shape, data, rg, "log")
    }

    /// Sum of all elements, as a `[1]` tensor. f64 accumulation.
    pub fn sum(&mut self, a: Var) -> DctResult<Var> {
        self.check(a)?;
        let total: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(a);
        self.finish(Op::Sum(a.id), vec![1], vec![total as f32], rg, "sum")
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> DctResult<Var> {
        self.check(a)?;
        let ta = self.value(a);
        let n = ta.numel().max(1);
        let total: f64 = ta.data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(a);
        self.finish(Op::Mean(a.id), vec![1], vec![(total / n as f64) as f32], rg, "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> DctResult<Var> {
        self.check(a)?;
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(DctError::ShapeDataMismatch {
                expected: shape.iter().product(),
                got: ta.numel(),
            });
        }
        let data = ta.data().to_vec();
        let rg = self.rg(a);
        self.finish(Op::Reshape(a.id), shape, data, rg, "reshape")
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> DctResult<Var> {
        self.check(a)?;
        let ta = self.value(a);
        if !ta.is_matrix() {
            return Err(DctError::DimMismatch {
                op: "transpose",
                detail: format!("expected 2-D input, got shape {:?}", ta.shape()),
            });
        }
        let (r, c) = (ta.rows(), ta.cols());
        let src = ta.data();
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.finish(Op::Transpose(a.id), vec![c, r], data, rg, "transpose")
    }

    /// Stack 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> DctResult<Var> {
        if parts.is_empty() {
            return Err(DctError::DimMismatch { op: "concat_rows", detail: "no inputs".into() });
        }
        for &p in parts {
            self.check(p)?;
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.cols() != cols {
                return Err(DctError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let ids = parts.iter().map(|p| p.id).collect();
        self.finish(Op::ConcatRows(ids), vec![rows, cols], data, rg, "concat_rows")
    }

    /// Contiguous row range of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> DctResult<Var> {
        self.check(a)?;
        let ta = self.value(a);
        if !ta.is_matrix() || start + len > ta.rows() {
            return Err(DctError::SliceOutOfBounds {
                op: "slice_rows",
                start,
                len,
                bound: ta.rows(),
            });
        }
        let cols = ta.cols();
        let data = ta.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a);
        self.finish(Op::SliceRows { input: a.id, start, len }, vec![len, cols], data, rg, "slice_rows")
    }

    /// Stack 2-D tensors with equal row counts along the column axis
    /// (head merge).
    pub fn concat_cols(&mut self, parts: &[Var]) -> DctResult<Var> {
        if parts.is_empty() {
            return Err(DctError::DimMismatch { op: "concat_cols", detail: "no inputs".into() });
        }
        for &p in parts {
            self.check(p)?;
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.rows() != rows {
                return Err(DctError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            cols += t.cols();
        }
        let mut data = vec![0.0f32; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let pc = t.cols();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + pc]
                    .copy_from_slice(&t.data()[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let ids = parts.iter().map(|p| p.id).collect();
        self.finish(Op::ConcatCols(ids), vec![rows, cols], data, rg, "concat_cols")
    }

    /// Contiguous column range of a 2-D tensor (head split).
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> DctResult<Var> {
        self.check(a)?;
        let ta = self.value(a);
        if !ta.is_matrix() || start + len > ta.cols() {
            return Err(DctError::SliceOutOfBounds {
                op: "slice_cols",
                start,
                len,
                bound: ta.cols(),
            });
        }
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(a);
        self.finish(Op::SliceCols { input: a.id, start, len }, vec![rows, len], data, rg, "slice_cols")
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// trainable leaf that reaches it. Frozen leaves get no gradient storage.
    pub fn backward(&self, loss: Var) -> DctResult<Gradients> {
        self.check(loss)?;
        let loss_node = &self.nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(DctError::NonScalarLoss { shape: loss_node.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if !loss_node.requires_grad {
            // Loss does not depend on any trainable leaf; nothing to do.
            return Ok(Gradients { grads: vec![None; self.nodes.len()] });
        }
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let grad = grads[id].take().unwrap();
            self.backprop_node(id, &grad, &mut grads);
            // Leaves keep their gradient; interior nodes can drop theirs once
            // propagated, but we retain leaf grads only to bound memory.
            if matches!(self.nodes[id].op, Op::Leaf { .. }) {
                grads[id] = Some(grad);
            }
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| Tensor::from_parts(self.nodes[id].value.shape().to_vec(), data))
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], id: usize, update: impl FnOnce(&mut [f32])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let slot = &mut grads[id];
        if slot.is_none() {
            *slot = Some(vec![0.0f32; self.nodes[id].value.numel()]);
        }
        update(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, id: usize, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[*a].requires_grad {
                    let mut acc = vec![0.0f64; m * k];
                    mm_nt(dy, tb.data(), m, n, k, &mut acc);
                    self.accumulate(grads, *a, |g| acc_into_f32(&acc, g));
                }
                if self.nodes[*b].requires_grad {
                    let mut acc = vec![0.0f64; k * n];
                    mm_tn(ta.data(), dy, m, k, n, &mut acc);
                    self.accumulate(grads, *b, |g| acc_into_f32(&acc, g));
                }
            }
            Op::Add(a, b) => {
                for &input in &[*a, *b] {
                    self.accumulate(grads, input, |g| {
                        for (gi, &d) in g.iter_mut().zip(dy) {
                            *gi += d;
                        }
                    });
                }
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, |g| {
                    for (gi, &d) in g.iter_mut().zip(dy) {
                        *gi += d;
                    }
                });
                if self.nodes[*b].requires_grad {
                    let chunk = self.nodes[*b].value.numel();
                    let mut acc = vec![0.0f64; chunk];
                    for c in dy.chunks(chunk) {
                        for (ai, &d) in acc.iter_mut().zip(c) {
                            *ai += d as f64;
                        }
                    }
                    self.accumulate(grads, *b, |g| acc_into_f32(&acc, g));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    let vb = tb.data();
                    self.accumulate(grads, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += dy[i] * vb[i];
                        }
                    });
                }
                if self.nodes[*b].requires_grad {
                    let va = ta.data();
                    self.accumulate(grads, *b, |g| {
                        for i in 0..g.len() {
                            g[i] += dy[i] * va[i];
                        }
                    });
                }
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                self.accumulate(grads, *a, |g| {
                    for (gi, &d) in g.iter_mut().zip(dy) {
                        *gi = (*gi as f64 + d as f64 * f) as f32;
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                self.accumulate(grads, *a, |g| {
                    for (r, drow) in dy.chunks(cols).enumerate() {
                        let yrow = &y[r * cols..(r + 1) * cols];
                        let dot: f64 = drow
                            .iter()
                            .zip(yrow)
                            .map(|(&d, &p)| d as f64 * p as f64)
                            .sum();
                        let grow = &mut g[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            grow[j] = (grow[j] as f64 + yrow[j] as f64 * (drow[j] as f64 - dot)) as f32;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = &self.nodes[*x].value;
                let tg = &self.nodes[*gamma].value;
                let (rows, dim) = (tx.rows(), tx.cols());
                let xv = tx.data();
                let gv = tg.data();
                let mut dgamma = vec![0.0f64; dim];
                let mut dbeta = vec![0.0f64; dim];
                let mut dx = vec![0.0f64; rows * dim];
                for r in 0..rows {
                    let xrow = &xv[r * dim..(r + 1) * dim];
                    let drow = &dy[r * dim..(r + 1) * dim];
                    let mean = xrow.iter().map(|&v| v as f64).sum::<f64>() / dim as f64;
                    let var = xrow
                        .iter()
                        .map(|&v| {
                            let d = v as f64 - mean;
                            d * d
                        })
                        .sum::<f64>()
                        / dim as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat_j = (x_j - mean) * inv
                    let mut m1 = 0.0f64; // mean of gamma*dy
                    let mut m2 = 0.0f64; // mean of gamma*dy*xhat
                    for j in 0..dim {
                        let xhat = (xrow[j] as f64 - mean) * inv;
                        let gd = gv[j] as f64 * drow[j] as f64;
                        m1 += gd;
                        m2 += gd * xhat;
                        dgamma[j] += drow[j] as f64 * xhat;
                        dbeta[j] += drow[j] as f64;
                    }
                    m1 /= dim as f64;
                    m2 /= dim as f64;
                    for j in 0..dim {
                        let xhat = (xrow[j] as f64 - mean) * inv;
                        let gd = gv[j] as f64 * drow[j] as f64;
                        dx[r * dim + j] = (gd - m1 - xhat * m2) * inv;
                    }
                }
                self.accumulate(grads, *x, |g| acc_into_f32(&dx, g));
                self.accumulate(grads, *gamma, |g| acc_into_f32(&dgamma, g));
                self.accumulate(grads, *beta, |g| acc_into_f32(&dbeta, g));
            }
            Op::Gelu(a) => {
                let xv = self.nodes[*a].value.data();
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] = (g[i] as f64 + dy[i] as f64 * gelu_grad_f64(xv[i] as f64)) as f32;
                    }
                });
            }
            Op::Exp(a) => {
                let yv = node.value.data();
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * yv[i];
                    }
                });
            }
            Op::Log(a) => {
                let xv = self.nodes[*a].value.data();
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] = (g[i] as f64 + dy[i] as f64 / xv[i] as f64) as f32;
                    }
                });
            }
            Op::Sum(a) => {
                let d = dy[0];
                self.accumulate(grads, *a, |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel().max(1) as f64;
                let d = (dy[0] as f64 / n) as f32;
                self.accumulate(grads, *a, |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |g| {
                    for (gi, &d) in g.iter_mut().zip(dy) {
                        *gi += d;
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                // node value is [r=cols(a), c=rows(a)]; route back transposed
                self.accumulate(grads, *a, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j * r + i] += dy[i * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let cols = node.value.cols();
                let mut row_offset = 0;
                for &p in parts {
                    let pr = self.nodes[p].value.rows();
                    let seg = &dy[row_offset * cols..(row_offset + pr) * cols];
                    self.accumulate(grads, p, |g| {
                        for (gi, &d) in g.iter_mut().zip(seg) {
                            *gi += d;
                        }
                    });
                    row_offset += pr;
                }
            }
            Op::SliceRows { input, start, .. } => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                self.accumulate(grads, *input, |g| {
                    let base = start * cols;
                    for i in 0..rows * cols {
                        g[base + i] += dy[i];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let cols = node.value.cols();
                let mut col_offset = 0;
                for &p in parts {
                    let pc = self.nodes[p].value.cols();
                    let off = col_offset;
                    self.accumulate(grads, p, |g| {
                        for r in 0..rows {
                            for j in 0..pc {
                                g[r * pc + j] += dy[r * cols + off + j];
                            }
                        }
                    });
                    col_offset += pc;
                }
            }
            Op::SliceCols { input, start, len } => {
                let in_cols = self.nodes[*input].value.cols();
                let rows = node.value.rows();
                let (s, l) = (*start, *len);
                self.accumulate(grads, *input, |g| {
                    for r in 0..rows {
                        for j in 0..l {
                            g[r * in_cols + s + j] += dy[r * l + j];
                        }
                    }
                });
            }
        }
    }

    // ── f64 replay ───────────────────────────────────────────────────

    /// Re-evaluate the recorded graph up to `target` entirely in f64,
    /// optionally overriding leaf values. Constants (including masks built
    /// from recorded values) are kept as recorded, so data-dependent
    /// selections stay fixed — exactly the semantics a finite-difference
    /// probe of the recorded loss needs.
    pub fn replay_f64(&self, target: Var, overrides: &[(Var, &[f64])]) -> DctResult<f64> {
        self.check(target)?;
        if self.nodes[target.id].value.numel() != 1 {
            return Err(DctError::NonScalarLoss {
                shape: self.nodes[target.id].value.shape().to_vec(),
            });
        }
        let mut values: Vec<Option<Vec<f64>>> = vec![None; target.id + 1];
        for id in 0..=target.id {
            let node = &self.nodes[id];
            let val = match &node.op {
                Op::Leaf { .. } => {
                    if let Some((_, data)) = overrides.iter().find(|(v, _)| v.id == id) {
                        if data.len() != node.value.numel() {
                            return Err(DctError::ShapeDataMismatch {
                                expected: node.value.numel(),
                                got: data.len(),
                            });
                        }
                        data.to_vec()
                    } else {
                        node.value.to_f64()
                    }
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let av = values[*a].as_ref().unwrap();
                    let bv = values[*b].as_ref().unwrap();
                    let mut out = vec![0.0f64; m * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                out[i * n + j] += aip * bv[p * n + j];
                            }
                        }
                    }
                    out
                }
                Op::Add(a, b) => values[*a]
                    .as_ref()
                    .unwrap()
                    .iter()
                    .zip(values[*b].as_ref().unwrap())
                    .map(|(x, y)| x + y)
                    .collect(),
                Op::AddBroadcast(a, b) => {
                    let bv = values[*b].as_ref().unwrap().clone();
                    let mut out = values[*a].as_ref().unwrap().clone();
                    for c in out.chunks_mut(bv.len()) {
                        for (x, y) in c.iter_mut().zip(&bv) {
                            *x += y;
                        }
                    }
                    out
                }
                Op::Mul(a, b) => values[*a]
                    .as_ref()
                    .unwrap()
                    .iter()
                    .zip(values[*b].as_ref().unwrap())
                    .map(|(x, y)| x * y)
                    .collect(),
                Op::Scale(a, f) => values[*a].as_ref().unwrap().iter().map(|&x| x * f).collect(),
                Op::SoftmaxRows(a) => {
                    let t = &self.nodes[*a].value;
                    let (rows, cols) = (t.rows(), t.cols());
                    let mut out = vec![0.0f64; rows * cols];
                    softmax_rows_f64(values[*a].as_ref().unwrap(), rows, cols, &mut out);
                    out
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let t = &self.nodes[*x].value;
                    let (rows, dim) = (t.rows(), t.cols());
                    let mut out = vec![0.0f64; rows * dim];
                    let gv = values[*gamma].as_ref().unwrap().clone();
                    let bv = values[*beta].as_ref().unwrap().clone();
                    layer_norm_f64(values[*x].as_ref().unwrap(), &gv, &bv, rows, dim, *eps, &mut out);
                    out
                }
                Op::Gelu(a) => values[*a].as_ref().unwrap().iter().map(|&x| gelu_f64(x)).collect(),
                Op::Exp(a) => values[*a].as_ref().unwrap().iter().map(|&x| x.exp()).collect(),
                Op::Log(a) => values[*a].as_ref().unwrap().iter().map(|&x| x.ln()).collect(),
                Op::Sum(a) => vec![values[*a].as_ref().unwrap().iter().sum()],
                Op::Mean(a) => {
                    let v = values[*a].as_ref().unwrap();
                    vec![v.iter().sum::<f64>() / v.len().max(1) as f64]
                }
                Op::Reshape(a) => values[*a].as_ref().unwrap().clone(),
                Op::Transpose(a) => {
                    let t = &self.nodes[*a].value;
                    let (r, c) = (t.rows(), t.cols());
                    let v = values[*a].as_ref().unwrap();
                    let mut out = vec![0.0f64; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j * r + i] = v[i * c + j];
                        }
                    }
                    out
                }
                Op::ConcatRows(parts) => {
                    let mut out = Vec::with_capacity(node.value.numel());
                    for &p in parts {
                        out.extend_from_slice(values[p].as_ref().unwrap());
                    }
                    out
                }
                Op::SliceRows { input, start, len } => {
                    let cols = self.nodes[*input].value.cols();
                    values[*input].as_ref().unwrap()[start * cols..(start + len) * cols].to_vec()
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let cols = node.value.cols();
                    let mut out = vec![0.0f64; rows * cols];
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.nodes[p].value.cols();
                        let v = values[p].as_ref().unwrap();
                        for r in 0..rows {
                            out[r * cols + offset..r * cols + offset + pc]
                                .copy_from_slice(&v[r * pc..(r + 1) * pc]);
                        }
                        offset += pc;
                    }
                    out
                }
                Op::SliceCols { input, start, len } => {
                    let in_cols = self.nodes[*input].value.cols();
                    let rows = node.value.rows();
                    let v = values[*input].as_ref().unwrap();
                    let mut out = Vec::with_capacity(rows * len);
                    for r in 0..rows {
                        out.extend_from_slice(&v[r * in_cols + start..r * in_cols + start + len]);
                    }
                    out
                }
            };
            values[id] = Some(val);
        }
        Ok(values[target.id].as_ref().unwrap()[0])
    }
}

/// Compare `backward` gradients against central finite differences of the
/// recorded loss, probed through the f64 replay. Returns the worst relative
/// error over all elements of all trainable leaves, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`. Frozen leaves are excluded.
pub fn finite_diff_check(
    graph: &Graph,
    loss: Var,
    grads: &Gradients,
    step: f64,
) -> DctResult<f64> {
    let mut worst = 0.0f64;
    for leaf in graph.trainable_leaves() {
        if leaf.id > loss.id {
            continue;
        }
        let base = graph.value(leaf).to_f64();
        let analytic = grads.get(leaf);
        for j in 0..base.len() {
            let mut plus = base.clone();
            plus[j] += step;
            let mut minus = base.clone();
            minus[j] -= step;
            let fp = graph.replay_f64(loss, &[(leaf, &plus)])?;
            let fm = graph.replay_f64(loss, &[(leaf, &minus)])?;
            let numeric = (fp - fm) / (plus[j] - minus[j]);
            let a = analytic.map_or(0.0, |t| t.data()[j] as f64);
            let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut StdRng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::from_parts(shape, data)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = g.constant(Tensor::from_rows(&[vec![3.0, -1.5], vec![2.0, 7.0]]).unwrap());
        let out = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(out), g.value(m));
    }

    #[test]
    fn matmul_hand_checked() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, vec![5, 4]);
        let b = rand_tensor(&mut rng, vec![4, 3]);
        // independent triple-loop oracle in f64
        let mut expect = vec![0.0f64; 5 * 3];
        for i in 0..5 {
            for j in 0..3 {
                for k in 0..4 {
                    expect[i * 3 + j] += a.get2(i, k) as f64 * b.get2(k, j) as f64;
                }
            }
        }
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let out = g.matmul(va, vb).unwrap();
        for (got, want) in g.value(out).data().iter().zip(&expect) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(DctError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_symmetric_row() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_magnitude_is_stable() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y).data();
        assert!(v[0] > 0.999_999);
        assert!(v[1] < 1e-6);
        assert!(v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn softmax_matches_f64_oracle() {
        let logits = [1.0f64, 2.0, 3.0];
        let sum: f64 = logits.iter().map(|v| v.exp()).sum();
        let expect: Vec<f64> = logits.iter().map(|v| v.exp() / sum).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&expect) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in proptest::collection::vec(
                proptest::collection::vec(-1000.0f32..1000.0, 4),
                1..6,
            )
        ) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_rows(&rows).unwrap());
            let y = g.softmax_rows(x).unwrap();
            let t = g.value(y);
            for r in 0..t.rows() {
                let s: f64 = (0..t.cols()).map(|c| t.get2(r, c) as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
                for c in 0..t.cols() {
                    prop_assert!(t.get2(r, c) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![3.0; 4]]).unwrap());
        let gamma = g.constant(Tensor::filled(vec![4], 1.0));
        let beta = g.constant(Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_zero_gamma_yields_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap());
        let gamma = g.constant(Tensor::zeros(vec![3]));
        let beta = g.constant(Tensor::filled(vec![3], 0.25));
        let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn layer_norm_matches_f64_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, vec![3, 8]);
        let gamma = rand_tensor(&mut rng, vec![8]);
        let beta = rand_tensor(&mut rng, vec![8]);
        // direct 64-bit mean/variance oracle
        let mut expect = vec![0.0f64; 24];
        for r in 0..3 {
            let row: Vec<f64> = (0..8).map(|j| x.get2(r, j) as f64).collect();
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            for j in 0..8 {
                expect[r * 8 + j] = (row[j] - mean) / (var + 1e-6).sqrt() * gamma.data()[j] as f64
                    + beta.data()[j] as f64;
            }
        }
        let mut g = Graph::new();
        let (vx, vg, vb) = (g.constant(x), g.constant(gamma), g.constant(beta));
        let y = g.layer_norm(vx, vg, vb, 1e-6).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&expect) {
            assert!((*got as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_dim_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 4]));
        let gamma = g.constant(Tensor::zeros(vec![3]));
        let beta = g.constant(Tensor::zeros(vec![4]));
        assert!(matches!(
            g.layer_norm(x, gamma, beta, 1e-6),
            Err(DctError::DimMismatch { .. })
        ));
    }

    #[test]
    fn gelu_fixed_points_and_asymptotes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![0.0, 20.0, -20.0]).unwrap());
        let y = g.gelu(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 20.0).abs() < 1e-5);
        assert!(v[2].abs() < 1e-6);
    }

    #[test]
    fn gelu_gradient_matches_central_difference() {
        // finite-difference oracle at x = 0.5
        let h = 1e-4f64;
        let fd = (gelu_f64(0.5 + h) - gelu_f64(0.5 - h)) / (2.0 * h);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.5), true);
        let y = g.gelu(x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        let got = grads.get(x).unwrap().data()[0] as f64;
        assert!((got - fd).abs() < 1e-4, "gelu grad {got} vs fd {fd}");
    }

    #[test]
    fn backward_linear_case_outer_product() {
        // loss = sum(W·x): grad(W) = [x, x] rows (outer product with ones)
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), true);
        let x = g.constant(Tensor::from_rows(&[vec![5.0], vec![-2.0]]).unwrap());
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[5.0, -2.0, 5.0, -2.0]);
    }

    #[test]
    fn backward_through_softmax_log_matches_fd() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&mut rng, vec![3, 3]), true);
        let p = g.softmax_rows(x).unwrap();
        let lp = g.log(p).unwrap();
        let loss = g.mean(lp).unwrap();
        let grads = g.backward(loss).unwrap();
        let worst = finite_diff_check(&g, loss, &grads, 1e-3).unwrap();
        assert!(worst < 1e-3, "worst rel err {worst}");
    }

    #[test]
    fn backward_disjoint_subgraph_has_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0), true);
        let b = g.leaf(Tensor::scalar(5.0), true);
        let a2 = g.mul(a, a).unwrap();
        let loss = g.sum(a2).unwrap();
        let _unused = g.mul(b, b).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 2]), true);
        assert!(matches!(g.backward(a), Err(DctError::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_rejects_foreign_node() {
        let g = Graph::new();
        assert!(matches!(
            g.backward(Var { id: 3 }),
            Err(DctError::InvalidNode { id: 3 })
        ));
    }

    #[test]
    fn frozen_leaves_get_no_gradient_storage() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(1.5), false);
        let y = g.mul(w, w).unwrap();
        // loss has no trainable ancestor: backward yields an empty map
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
    }

    #[test]
    fn quadratic_finite_diff_is_tight() {
        // f(theta) = 0.5 * ||theta||^2; replay is exact in f64 so the
        // central difference is exact for quadratics up to roundoff.
        let mut g = Graph::new();
        let theta = g.leaf(Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap(), true);
        let sq = g.mul(theta, theta).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        let grads = g.backward(loss).unwrap();
        let worst = finite_diff_check(&g, loss, &grads, 1e-3).unwrap();
        assert!(worst < 1e-6, "worst rel err {worst}");
    }

    #[test]
    fn finite_diff_excludes_frozen_parameters() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(2.0), true);
        let frozen = g.leaf(Tensor::scalar(3.0), false);
        let prod = g.mul(w, frozen).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(frozen).is_none());
        // the check runs only over w and passes
        let worst = finite_diff_check(&g, loss, &grads, 1e-3).unwrap();
        assert!(worst < 1e-6);
    }

    /// Per-primitive gradient checks on randomized small tensors.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(42);
        type Build = fn(&mut Graph, &mut StdRng) -> (Var, Var);

        fn rt(rng: &mut StdRng, shape: Vec<usize>) -> Tensor {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.9f32..0.9)).collect();
            Tensor::from_parts(shape, data)
        }

        let cases: Vec<(&str, Build)> = vec![
            ("matmul", |g, rng| {
                let a = g.leaf(rt(rng, vec![3, 4]), true);
                let b = g.leaf(rt(rng, vec![4, 2]), true);
                let y = g.matmul(a, b).unwrap();
                let l = g.sum(y).unwrap();
                (a, l)
            }),
            ("add_broadcast", |g, rng| {
                let a = g.leaf(rt(rng, vec![3, 4]), true);
                let b = g.leaf(rt(rng, vec![4]), true);
                let y = g.add(a, b).unwrap();
                let yy = g.mul(y, y).unwrap();
                let l = g.sum(yy).unwrap();
                (a, l)
            }),
            ("mul", |g, rng| {
                let a = g.leaf(rt(rng, vec![2, 3]), true);
                let b = g.leaf(rt(rng, vec![2, 3]), true);
                let y = g.mul(a, b).unwrap();
                let l = g.mean(y).unwrap();
                (a, l)
            }),
            ("scale", |g, rng| {
                let a = g.leaf(rt(rng, vec![5]), true);
                let y = g.scale(a, -1.7).unwrap();
                let yy = g.mul(y, y).unwrap();
                let l = g.sum(yy).unwrap();
                (a, l)
            }),
            ("softmax_rows", |g, rng| {
                let a = g.leaf(rt(rng, vec![3, 4]), true);
                let p = g.softmax_rows(a).unwrap();
                let w = g.leaf(rt(rng, vec![3, 4]), false);
                let pw = g.mul(p, w).unwrap();
                let l = g.sum(pw).unwrap();
                (a, l)
            }),
            ("layer_norm", |g, rng| {
                let x = g.leaf(rt(rng, vec![3, 6]), true);
                let gamma = g.leaf(rt(rng, vec![6]), true);
                let beta = g.leaf(rt(rng, vec![6]), true);
                let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
                let w = g.leaf(rt(rng, vec![3, 6]), false);
                let yw = g.mul(y, w).unwrap();
                let l = g.sum(yw).unwrap();
                (x, l)
            }),
            ("gelu", |g, rng| {
                let a = g.leaf(rt(rng, vec![2, 5]), true);
                let y = g.gelu(a).unwrap();
                let l = g.sum(y).unwrap();
                (a, l)
            }),
            ("exp", |g, rng| {
                let a = g.leaf(rt(rng, vec![4]), true);
                let y = g.exp(a).unwrap();
                let l = g.sum(y).unwrap();
                (a, l)
            }),
            ("log", |g, rng| {
                let data: Vec<f32> = (0..4).map(|_| rng.gen_range(0.2f32..2.0)).collect();
                let a = g.leaf(Tensor::from_parts(vec![4], data), true);
                let y = g.log(a).unwrap();
                let l = g.sum(y).unwrap();
                (a, l)
            }),
            ("mean_reshape_transpose", |g, rng| {
                let a = g.leaf(rt(rng, vec![3, 4]), true);
                let t = g.transpose(a).unwrap();
                let r = g.reshape(t, vec![2, 6]).unwrap();
                let rr = g.mul(r, r).unwrap();
                let l = g.mean(rr).unwrap();
                (a, l)
            }),
            ("concat_slice", |g, rng| {
                let a = g.leaf(rt(rng, vec![2, 3]), true);
                let b = g.leaf(rt(rng, vec![1, 3]), true);
                let cat = g.concat_rows(&[a, b]).unwrap();
                let top = g.slice_rows(cat, 1, 2).unwrap();
                let c1 = g.slice_cols(top, 0, 2).unwrap();
                let c2 = g.slice_cols(top, 2, 1).unwrap();
                let back = g.concat_cols(&[c2, c1]).unwrap();
                let sq = g.mul(back, back).unwrap();
                let l = g.sum(sq).unwrap();
                (a, l)
            }),
        ];

        for (name, build) in cases {
            let mut g = Graph::new();
            let (_, loss) = build(&mut g, &mut rng);
            let grads = g.backward(loss).unwrap();
            let worst = finite_diff_check(&g, loss, &grads, 1e-3).unwrap();
            assert!(worst < 1e-3, "{name}: worst rel err {worst}");
        }
    }

    #[test]
    fn fused_expression_matches_staged_chain_rule() {
        // d/dA mean(gelu(A·B)) computed by the graph equals the manual
        // composition of per-op vector-Jacobian products.
        let mut rng = StdRng::seed_from_u64(9);
        let at = rand_tensor(&mut rng, vec![3, 4]);
        let bt = rand_tensor(&mut rng, vec![4, 2]);

        let mut g = Graph::new();
        let a = g.leaf(at.clone(), true);
        let b = g.constant(bt.clone());
        let y = g.matmul(a, b).unwrap();
        let z = g.gelu(y).unwrap();
        let loss = g.mean(z).unwrap();
        let grads = g.backward(loss).unwrap();
        let fused = grads.get(a).unwrap().clone();

        // staged: dz = 1/numel; dy = dz * gelu'(y); dA = dy · B^T
        let n = 6.0f64;
        let mut dy = vec![0.0f64; 6];
        for i in 0..6 {
            let mut yv = 0.0f64;
            let (r, c) = (i / 2, i % 2);
            for k in 0..4 {
                yv += at.get2(r, k) as f64 * bt.get2(k, c) as f64;
            }
            let y32 = yv as f32;
            dy[i] = (1.0 / n) * gelu_grad_f64(y32 as f64);
        }
        for i in 0..3 {
            for k in 0..4 {
                let mut acc = 0.0f64;
                for c in 0..2 {
                    acc += dy[i * 2 + c] * bt.get2(k, c) as f64;
                }
                let got = fused.get2(i, k) as f64;
                assert!((got - acc).abs() < 1e-6, "staged {acc} vs fused {got}");
            }
        }
    }
}
