//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! A [`Graph`] owns every intermediate value. Ops append nodes in creation
//! order, so the node list is already a topological order and `backward`
//! simply walks it in reverse. Recording is an explicit choice: a graph made
//! with [`Graph::inference`] evaluates the same ops but keeps nothing for
//! differentiation and refuses `backward`.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{self, axis_split, gelu_grad_scalar, gelu_scalar, Tensor};
use rand::Rng;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Column {
        x: Var,
        col: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    WeightedSqDist {
        x: Var,
        anchor: Vec<f64>,
        weight: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph: ops keep what `backward` needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A graph-free evaluation scope.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. `requires_grad` is ignored outside recording.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.recording,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`; the natural form for `h·Wᵀ` with `W` stored output-major.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if ta.rank() != 2 || tr.rank() != 1 || ta.cols() != tr.len() {
            return Err(Error::shape("add_row", ta.shape(), tr.shape()));
        }
        let n = tr.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tr.data()[i % n])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Sums scalar nodes left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("add_all of no terms".into()))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if d == 0 {
            return Err(Error::InvalidDimension("layer norm over d = 0".into()));
        }
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", tx.shape(), self.shape(p)));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.len() / d;
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(out, op, &[x, gain, bias]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// `−log softmax(logits)[target]` for a rank-1 logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 1 {
            return Err(Error::InvalidDimension(format!(
                "cross_entropy expects a vector, got {:?}",
                t.shape()
            )));
        }
        if target >= t.len() {
            return Err(Error::IndexOutOfRange {
                index: target,
                len: t.len(),
                context: "cross_entropy target",
            });
        }
        let probs = tensor::softmax(t, 0)?.into_data();
        let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[target];
        let op = Op::CrossEntropy {
            logits,
            target,
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Row lookup into an embedding table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::InvalidDimension("gather_rows needs a matrix".into()));
        }
        if ids.is_empty() {
            return Err(Error::InvalidDimension("gather_rows of no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    len: t.rows(),
                    context: "gather_rows id",
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), t.cols()], data)?;
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(out, op, &[table]))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of no parts".into()))?;
        let rows = self.value(first).rows();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", self.shape(first), s));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows `start..end` of a matrix or elements of a vector.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        if start >= end || end > n {
            return Err(Error::IndexOutOfRange {
                index: end,
                len: n,
                context: "slice_rows",
            });
        }
        let stride = t.len() / n;
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::new(shape, t.data()[start * stride..end * stride].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Column `col` of a matrix, as a vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || col >= t.cols() {
            return Err(Error::IndexOutOfRange {
                index: col,
                len: t.cols(),
                context: "column",
            });
        }
        let data = (0..t.rows()).map(|r| t.at(r, col)).collect();
        let out = Tensor::vector(data);
        Ok(self.push(out, Op::Column { x, col }, &[x]))
    }

    /// Inverted dropout. Identity when `rate == 0` or outside recording.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut SeededRng) -> Var {
        if rate <= 0.0 || !self.recording {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// `Σ_i weight_i · (x_i − anchor_i)²` with constant anchor and weights.
    pub fn weighted_sq_dist(&mut self, x: Var, anchor: &Tensor, weight: &Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != anchor.shape() {
            return Err(Error::shape("weighted_sq_dist", t.shape(), anchor.shape()));
        }
        if t.shape() != weight.shape() {
            return Err(Error::shape("weighted_sq_dist", t.shape(), weight.shape()));
        }
        let mut acc = 0.0;
        for ((v, a), w) in t.data().iter().zip(anchor.data()).zip(weight.data()) {
            acc += w * (v - a) * (v - a);
        }
        let op = Op::WeightedSqDist {
            x,
            anchor: anchor.data().to_vec(),
            weight: weight.data().to_vec(),
        };
        Ok(self.push(Tensor::scalar(acc), op, &[x]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::Contract("backward on a non-recording graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        contrib(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let gt = || Tensor::new(node.value.shape().to_vec(), g.to_vec());
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let gt = gt()?;
                if self.requires_grad(*a) {
                    let da = tensor::matmul_nt(&gt, self.value(*b))?;
                    self.accumulate(grads, *a, |s| add_into(s, da.data()));
                }
                if self.requires_grad(*b) {
                    let db = tensor::matmul_tn(self.value(*a), &gt)?;
                    self.accumulate(grads, *b, |s| add_into(s, db.data()));
                }
            }
            Op::MatMulNt(a, b) => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                let gt = gt()?;
                if self.requires_grad(*a) {
                    let da = tensor::matmul(&gt, self.value(*b))?;
                    self.accumulate(grads, *a, |s| add_into(s, da.data()));
                }
                if self.requires_grad(*b) {
                    let db = tensor::matmul_tn(&gt, self.value(*a))?;
                    self.accumulate(grads, *b, |s| add_into(s, db.data()));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| {
                    for (o, v) in s.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *row, |s| {
                    let n = s.len();
                    for (i, v) in g.iter().enumerate() {
                        s[i % n] += v;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |s| {
                    for (o, v) in s.iter_mut().zip(g) {
                        *o += c * v;
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |s| {
                    for o in s.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                self.accumulate(grads, *x, |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let mut dot = 0.0;
                            for j in 0..n {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..n {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).len();
                let rows = inv_std.len();
                let gv = self.value(*gain).data();
                self.accumulate(grads, *gain, |s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j];
                        }
                    }
                });
                self.accumulate(grads, *x, |s| {
                    let inv_d = 1.0 / d as f64;
                    for r in 0..rows {
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for j in 0..d {
                            let dy = g[r * d + j] * gv[j];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dy = g[r * d + j] * gv[j];
                            s[r * d + j] += inv_std[r]
                                * (dy - inv_d * sum_dy - xhat[r * d + j] * inv_d * sum_dy_xhat);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu_grad_scalar(xv[i]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                self.accumulate(grads, *logits, |s| {
                    for (i, p) in probs.iter().enumerate() {
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        s[i] += g[0] * (p - onehot);
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = node.value.cols();
                self.accumulate(grads, *table, |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |s| {
                        for r in 0..rows {
                            for j in 0..w {
                                s[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let stride = node.value.len() / node.value.shape()[0];
                let base = start * stride;
                self.accumulate(grads, *x, |s| {
                    for (i, v) in g.iter().enumerate() {
                        s[base + i] += v;
                    }
                });
            }
            Op::Column { x, col } => {
                let cols = self.value(*x).cols();
                self.accumulate(grads, *x, |s| {
                    for (r, v) in g.iter().enumerate() {
                        s[r * cols + col] += v;
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * mask[i];
                    }
                });
            }
            Op::WeightedSqDist { x, anchor, weight } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * 2.0 * weight[i] * (xv[i] - anchor[i]);
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients from one `backward` call, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require gradients or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get_tensor(&self, graph: &Graph, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::new(graph.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }
}
