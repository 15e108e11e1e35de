//! Define-by-run reverse-mode differentiation tape.
//!
//! A [`Graph`] is an append-only sequence of operation records; inputs of a
//! node always precede it, so backward is a single reverse sweep that visits
//! each node once. Graphs are rebuilt per forward pass and are single
//! threaded; independent graphs may run on independent threads.
//!
//! Primitives: matrix multiply, add (with broadcast of a 1-D bias over the
//! leading batch dimension), elementwise multiply, scalar scale, relu,
//! sigmoid, concatenate/slice along the feature axis, row softmax, natural
//! log, sum, mean, and a fused mean cross-entropy from logits. No other
//! broadcasting; callers reshape explicitly. Every output is checked finite.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    Relu(VarId),
    Sigmoid(VarId),
    Concat(Vec<VarId>),
    Slice { input: VarId, start: usize, len: usize },
    Softmax(VarId),
    Log(VarId),
    Sum(VarId),
    Mean(VarId),
    CrossEntropy { logits: VarId, labels: Vec<usize> },
}

struct Node {
    op: Op,
    tensor: Tensor,
    needs_grad: bool,
}

/// Operation kinds accepted by [`Graph::forward_primitive`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    MatMul,
    Add,
    Mul,
    Relu,
    Sigmoid,
    Concat,
    Slice { start: usize, len: usize },
    Softmax,
    Log,
    Sum,
    Mean,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Register an input tensor. Only leaves flagged here before the forward
    /// pass receive gradients from [`Graph::backward`].
    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> VarId {
        self.push(Op::Leaf { requires_grad }, tensor, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor) -> VarId {
        self.leaf(tensor, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient of the last backward root w.r.t. a flagged leaf.
    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    fn push(&mut self, op: Op, tensor: Tensor, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            tensor,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn finite_checked(op: &'static str, values: Vec<f64>) -> Result<Vec<f64>> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(values)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    // ── Primitives ──────────────────────────────────────────────────────

    /// `a[p×q] @ b[q×r] -> [p×r]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (p, q, r) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; p * r];
        matmul_nn_into(ta.values(), tb.values(), p, q, r, &mut out);
        let out = Self::finite_checked("matmul", out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(p, r, out)?, needs))
    }

    /// Elementwise add; a 1-D `b` broadcasts across the rows of a 2-D `a`.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        let out = if ta.shape() == tb.shape() {
            ta.values()
                .iter()
                .zip(tb.values())
                .map(|(x, y)| x + y)
                .collect()
        } else if ta.shape().len() == 2 && tb.shape().len() == 1 && ta.shape()[1] == tb.shape()[0] {
            let cols = tb.shape()[0];
            ta.values()
                .iter()
                .enumerate()
                .map(|(i, x)| x + tb.values()[i % cols])
                .collect()
        } else {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", ta.shape(), tb.shape()),
            ));
        };
        let out = Self::finite_checked("add", out)?;
        let shape = ta.shape().to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), Tensor::new(shape, out)?, needs))
    }

    /// Elementwise multiply; shapes must match exactly.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out: Vec<f64> = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| x * y)
            .collect();
        let out = Self::finite_checked("mul", out)?;
        let shape = ta.shape().to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), Tensor::new(shape, out)?, needs))
    }

    /// Multiply every entry by a constant.
    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let ta = &self.nodes[a.0].tensor;
        let out = Self::finite_checked("scale", ta.values().iter().map(|x| x * c).collect())?;
        let shape = ta.shape().to_vec();
        let needs = self.needs(&[a]);
        Ok(self.push(Op::Scale(a, c), Tensor::new(shape, out)?, needs))
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        let ta = &self.nodes[a.0].tensor;
        let out: Vec<f64> = ta.values().iter().map(|&x| x.max(0.0)).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(&[a]);
        Ok(self.push(Op::Relu(a), Tensor::new(shape, out)?, needs))
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        let ta = &self.nodes[a.0].tensor;
        let out: Vec<f64> = ta.values().iter().map(|&x| sigmoid(x)).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(&[a]);
        Ok(self.push(Op::Sigmoid(a), Tensor::new(shape, out)?, needs))
    }

    /// Concatenate along the feature axis: 1-D tensors end to end, 2-D
    /// tensors column-wise (equal row counts required).
    pub fn concat(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs".to_string()));
        }
        let rank = self.nodes[parts[0].0].tensor.shape().len();
        let tensor = if rank == 1 {
            let mut out = Vec::new();
            for p in parts {
                let t = &self.nodes[p.0].tensor;
                if t.shape().len() != 1 {
                    return Err(Error::shape("concat", format!("mixed ranks, {:?}", t.shape())));
                }
                out.extend_from_slice(t.values());
            }
            Tensor::vector(&out)?
        } else {
            let rows = self.nodes[parts[0].0].tensor.shape()[0];
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = &self.nodes[p.0].tensor;
                if t.shape().len() != 2 || t.shape()[0] != rows {
                    return Err(Error::shape(
                        "concat",
                        format!("expected [{rows} x _], got {:?}", t.shape()),
                    ));
                }
                widths.push(t.shape()[1]);
            }
            let total: usize = widths.iter().sum();
            let mut out = vec![0.0; rows * total];
            for r in 0..rows {
                let mut col = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    let t = &self.nodes[p.0].tensor;
                    out[r * total + col..r * total + col + w].copy_from_slice(t.row(r));
                    col += w;
                }
            }
            Tensor::matrix(rows, total, out)?
        };
        let needs = self.needs(parts);
        Ok(self.push(Op::Concat(parts.to_vec()), tensor, needs))
    }

    /// Take `len` features starting at `start` along the feature axis.
    pub fn slice(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let ta = &self.nodes[a.0].tensor;
        let cols = ta.last_dim();
        if start + len > cols || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) of width {cols}", start + len),
            ));
        }
        let tensor = if ta.shape().len() == 1 {
            Tensor::vector(&ta.values()[start..start + len])?
        } else {
            let rows = ta.shape()[0];
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&ta.row(r)[start..start + len]);
            }
            Tensor::matrix(rows, len, out)?
        };
        let needs = self.needs(&[a]);
        Ok(self.push(Op::Slice { input: a, start, len }, tensor, needs))
    }

    /// Softmax over the feature axis of each row.
    pub fn softmax(&mut self, a: VarId) -> Result<VarId> {
        let ta = &self.nodes[a.0].tensor;
        let (rows, cols) = (ta.rows(), ta.last_dim());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_row(&ta.values()[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        let shape = ta.shape().to_vec();
        let needs = self.needs(&[a]);
        Ok(self.push(Op::Softmax(a), Tensor::new(shape, out)?, needs))
    }

    /// Natural log; rejects non-positive entries.
    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        let ta = &self.nodes[a.0].tensor;
        if ta.values().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite { op: "log" });
        }
        let out: Vec<f64> = ta.values().iter().map(|v| v.ln()).collect();
        let out = Self::finite_checked("log", out)?;
        let shape = ta.shape().to_vec();
        let needs = self.needs(&[a]);
        Ok(self.push(Op::Log(a), Tensor::new(shape, out)?, needs))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let total: f64 = self.nodes[a.0].tensor.values().iter().sum();
        let out = Self::finite_checked("sum", vec![total])?;
        let needs = self.needs(&[a]);
        Ok(self.push(Op::Sum(a), Tensor::new(vec![1], out)?, needs))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        let t = &self.nodes[a.0].tensor;
        let total: f64 = t.values().iter().sum();
        let out = Self::finite_checked("mean", vec![total / t.numel() as f64])?;
        let needs = self.needs(&[a]);
        Ok(self.push(Op::Mean(a), Tensor::new(vec![1], out)?, needs))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, from raw logits.
    ///
    /// Computed via log-sum-exp, so extreme logits stay finite.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let t = &self.nodes[logits.0].tensor;
        let (rows, cols) = (t.rows(), t.last_dim());
        if labels.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &t.values()[r * cols..(r + 1) * cols];
            total += log_sum_exp(row) - row[y];
        }
        let out = Self::finite_checked("cross_entropy", vec![total / rows as f64])?;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            Tensor::new(vec![1], out)?,
            needs,
        ))
    }

    /// Dispatch a primitive by kind; the typed methods above are preferred.
    pub fn forward_primitive(&mut self, kind: PrimitiveKind, inputs: &[VarId]) -> Result<VarId> {
        let want = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::shape(
                    "forward_primitive",
                    format!("{kind:?} wants {n} inputs, got {}", inputs.len()),
                ))
            }
        };
        match kind {
            PrimitiveKind::MatMul => {
                want(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            PrimitiveKind::Add => {
                want(2)?;
                self.add(inputs[0], inputs[1])
            }
            PrimitiveKind::Mul => {
                want(2)?;
                self.mul(inputs[0], inputs[1])
            }
            PrimitiveKind::Relu => {
                want(1)?;
                self.relu(inputs[0])
            }
            PrimitiveKind::Sigmoid => {
                want(1)?;
                self.sigmoid(inputs[0])
            }
            PrimitiveKind::Concat => self.concat(inputs),
            PrimitiveKind::Slice { start, len } => {
                want(1)?;
                self.slice(inputs[0], start, len)
            }
            PrimitiveKind::Softmax => {
                want(1)?;
                self.softmax(inputs[0])
            }
            PrimitiveKind::Log => {
                want(1)?;
                self.log(inputs[0])
            }
            PrimitiveKind::Sum => {
                want(1)?;
                self.sum(inputs[0])
            }
            PrimitiveKind::Mean => {
                want(1)?;
                self.mean(inputs[0])
            }
        }
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Fills the gradient slot of every
    /// flagged leaf (zeros when the root does not depend on it); non-flagged
    /// leaves are untouched.
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        if !self.nodes[root.0].tensor.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].tensor.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            // Leaves keep their slot for the final write-back below.
            if matches!(self.nodes[id].op, Op::Leaf { .. }) {
                grads[id] = Some(gout);
                continue;
            }
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.propagate(id, &gout, &mut grads);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if let Op::Leaf { requires_grad: true } = node.op {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.tensor.numel()]);
                node.tensor.set_grad(Some(g));
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, gout: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let nodes = &self.nodes;
        let needs = |v: VarId| nodes[v.0].needs_grad;
        let mut accum = |v: VarId, contribution: &mut dyn FnMut(&mut [f64])| {
            if !needs(v) {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].tensor.numel()]);
            contribution(buf);
        };

        match &nodes[id].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].tensor, &nodes[b.0].tensor);
                let (p, q, r) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                accum(*a, &mut |buf| {
                    // da += gout @ b^T
                    matmul_nt_into(gout, tb.values(), p, r, q, buf);
                });
                accum(*b, &mut |buf| {
                    // db += a^T @ gout
                    matmul_tn_into(ta.values(), gout, q, p, r, buf);
                });
            }
            Op::Add(a, b) => {
                let (ta, tb) = (&nodes[a.0].tensor, &nodes[b.0].tensor);
                accum(*a, &mut |buf| {
                    for (g, o) in buf.iter_mut().zip(gout) {
                        *g += o;
                    }
                });
                if ta.shape() == tb.shape() {
                    accum(*b, &mut |buf| {
                        for (g, o) in buf.iter_mut().zip(gout) {
                            *g += o;
                        }
                    });
                } else {
                    // 1-D bias broadcast over rows: sum the row axis out.
                    let cols = tb.shape()[0];
                    accum(*b, &mut |buf| {
                        for (i, o) in gout.iter().enumerate() {
                            buf[i % cols] += o;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].tensor, &nodes[b.0].tensor);
                accum(*a, &mut |buf| {
                    for ((g, o), y) in buf.iter_mut().zip(gout).zip(tb.values()) {
                        *g += o * y;
                    }
                });
                accum(*b, &mut |buf| {
                    for ((g, o), x) in buf.iter_mut().zip(gout).zip(ta.values()) {
                        *g += o * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                accum(*a, &mut |buf| {
                    for (g, o) in buf.iter_mut().zip(gout) {
                        *g += o * c;
                    }
                });
            }
            Op::Relu(a) => {
                let ta = &nodes[a.0].tensor;
                accum(*a, &mut |buf| {
                    for ((g, o), x) in buf.iter_mut().zip(gout).zip(ta.values()) {
                        if *x > 0.0 {
                            *g += o;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let s = nodes[id].tensor.values();
                accum(*a, &mut |buf| {
                    for ((g, o), y) in buf.iter_mut().zip(gout).zip(s) {
                        *g += o * y * (1.0 - y);
                    }
                });
            }
            Op::Concat(parts) => {
                let rank = nodes[parts[0].0].tensor.shape().len();
                if rank == 1 {
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].tensor.numel();
                        accum(*p, &mut |buf| {
                            for (g, o) in buf.iter_mut().zip(&gout[offset..offset + w]) {
                                *g += o;
                            }
                        });
                        offset += w;
                    }
                } else {
                    let rows = nodes[parts[0].0].tensor.shape()[0];
                    let total = nodes[id].tensor.shape()[1];
                    let mut col = 0;
                    for p in parts {
                        let w = nodes[p.0].tensor.shape()[1];
                        accum(*p, &mut |buf| {
                            for r in 0..rows {
                                let src = &gout[r * total + col..r * total + col + w];
                                for (g, o) in buf[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *g += o;
                                }
                            }
                        });
                        col += w;
                    }
                }
            }
            Op::Slice { input, start, len } => {
                let t = &nodes[input.0].tensor;
                let (rows, cols) = (t.rows(), t.last_dim());
                let (start, len) = (*start, *len);
                accum(*input, &mut |buf| {
                    for r in 0..rows {
                        for j in 0..len {
                            buf[r * cols + start + j] += gout[r * len + j];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let s = nodes[id].tensor.values();
                let (rows, cols) = (nodes[id].tensor.rows(), nodes[id].tensor.last_dim());
                accum(*a, &mut |buf| {
                    for r in 0..rows {
                        let srow = &s[r * cols..(r + 1) * cols];
                        let grow = &gout[r * cols..(r + 1) * cols];
                        let dot: f64 = srow.iter().zip(grow).map(|(si, gi)| si * gi).sum();
                        for j in 0..cols {
                            buf[r * cols + j] += srow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::Log(a) => {
                let ta = &nodes[a.0].tensor;
                accum(*a, &mut |buf| {
                    for ((g, o), x) in buf.iter_mut().zip(gout).zip(ta.values()) {
                        *g += o / x;
                    }
                });
            }
            Op::Sum(a) => {
                let o = gout[0];
                accum(*a, &mut |buf| {
                    for g in buf.iter_mut() {
                        *g += o;
                    }
                });
            }
            Op::Mean(a) => {
                let n = nodes[a.0].tensor.numel() as f64;
                let o = gout[0] / n;
                accum(*a, &mut |buf| {
                    for g in buf.iter_mut() {
                        *g += o;
                    }
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let t = &nodes[logits.0].tensor;
                let (rows, cols) = (t.rows(), t.last_dim());
                let o = gout[0] / rows as f64;
                accum(*logits, &mut |buf| {
                    let mut probs = vec![0.0; cols];
                    for (r, &y) in labels.iter().enumerate() {
                        softmax_row(&t.values()[r * cols..(r + 1) * cols], &mut probs);
                        for j in 0..cols {
                            let indicator = if j == y { 1.0 } else { 0.0 };
                            buf[r * cols + j] += o * (probs[j] - indicator);
                        }
                    }
                });
            }
        }
    }
}

// ── Kernels and numeric helpers ─────────────────────────────────────────

fn matmul_nn_into(a: &[f64], b: &[f64], p: usize, q: usize, r: usize, out: &mut [f64]) {
    for i in 0..p {
        for t in 0..q {
            let aval = a[i * q + t];
            if aval == 0.0 {
                continue;
            }
            let brow = &b[t * r..(t + 1) * r];
            let orow = &mut out[i * r..(i + 1) * r];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aval * bv;
            }
        }
    }
}

/// `out[p×q] += a[p×r] @ b[q×r]^T`
fn matmul_nt_into(a: &[f64], b: &[f64], p: usize, r: usize, q: usize, out: &mut [f64]) {
    for i in 0..p {
        let arow = &a[i * r..(i + 1) * r];
        for j in 0..q {
            let brow = &b[j * r..(j + 1) * r];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * q + j] += acc;
        }
    }
}

/// `out[q×r] += a[p×q]^T @ b[p×r]`
fn matmul_tn_into(a: &[f64], b: &[f64], q: usize, p: usize, r: usize, out: &mut [f64]) {
    for t in 0..p {
        let brow = &b[t * r..(t + 1) * r];
        for i in 0..q {
            let aval = a[t * q + i];
            if aval == 0.0 {
                continue;
            }
            let orow = &mut out[i * r..(i + 1) * r];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aval * bv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Per-row `-log softmax(logits)[label]`, computed outside any graph.
pub fn row_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (rows, cols) = (logits.rows(), logits.last_dim());
    if labels.len() != rows {
        return Err(Error::shape(
            "row_cross_entropy",
            format!("{} labels for {rows} rows", labels.len()),
        ));
    }
    let mut out = Vec::with_capacity(rows);
    for (r, &y) in labels.iter().enumerate() {
        if y >= cols {
            return Err(Error::validation(format!(
                "label {y} out of range for {cols} classes"
            )));
        }
        let row = &logits.values()[r * cols..(r + 1) * cols];
        out.push(log_sum_exp(row) - row[y]);
    }
    Ok(out)
}

/// Row argmax with ties broken toward the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
