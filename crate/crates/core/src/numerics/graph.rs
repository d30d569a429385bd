//! Dynamic tape for reverse-mode differentiation.
//!
//! Every forward op appends a node; node indices are assigned in creation
//! order, so the tape is a topological order by construction and `backward`
//! is a single reverse sweep.

use super::kernels::{axpy, dot, matmul_acc, matmul_at_acc, matmul_bt_acc, softmax_in_place, weighted_log_sum_exp};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One block of rows attending to one block of keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Absolute position of the first query row, used by the causal mask.
    pub q_offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnSpec {
    pub heads: usize,
    pub causal: bool,
    pub segments: Vec<AttnSegment>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize },
    StackRows(Vec<Var>),
    MaskedMeanPool { h: Var, mask: Vec<bool>, count: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: Option<usize>, probs: Vec<f64>, count: usize },
    Cosine { zx: Var, zy: Var, tau: f64, nx: Vec<f64>, ny: Vec<f64> },
    Contrastive { sims: Var, q: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Differentiation graph owned by a single forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::contract(format!(
            "{op} expects a 2-d tensor, got shape {other:?}"
        ))),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf: receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a trainable leaf by the last `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(ta, "matmul")?;
        let (k2, n) = matrix_dims(tb, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = matrix_dims(ta, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta.shape(), tb.shape()));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    /// Broadcast-add a length-`n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.len() != n {
            return Err(dim_err("add_row", ta.shape(), tr.shape()));
        }
        let mut out = ta.data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, r) in chunk.iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(a, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta.shape(), tb.shape()));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * c).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, c), rg)
    }

    /// Multiply by a fixed elementwise factor (dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if factor.len() != ta.len() {
            return Err(dim_err("mul_const", ta.shape(), &[factor.len()]));
        }
        let out = ta.data().iter().zip(&factor).map(|(x, f)| x * f).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulConst(a, factor), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Relu(a), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = tx.data().to_vec();
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for j in 0..n {
                    buf[j] = out[base + j * inner];
                }
                softmax_in_place(&mut buf);
                for j in 0..n {
                    out[base + j * inner] = buf[j];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax { x, outer, n, inner },
            rg,
        ))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        for p in [gain, bias] {
            if self.value(p).len() != n {
                return Err(dim_err("layer_norm", tx.shape(), self.value(p).shape()));
            }
        }
        let rows = tx.rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; tx.len()];
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            rg,
        ))
    }

    /// Scaled dot-product multi-head attention over row segments.
    ///
    /// `q`, `k`, `v` are matrices whose columns are split evenly across heads.
    /// Query rows not covered by any segment produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rq, d) = matrix_dims(tq, "attention")?;
        let (rk, dk) = matrix_dims(tk, "attention")?;
        if dk != d || tv.shape() != tk.shape() {
            return Err(dim_err("attention", tq.shape(), tk.shape()));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::contract(format!(
                "width {d} not divisible by {} heads",
                spec.heads
            )));
        }
        for s in &spec.segments {
            if s.q_start + s.q_len > rq || s.k_start + s.k_len > rk || s.k_len == 0 {
                return Err(Error::contract(format!("attention segment {s:?} out of range")));
            }
        }
        let h = spec.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![0.0; rq * d];
        let total: usize = spec.segments.iter().map(|s| s.q_len * s.k_len * h).sum();
        let mut probs = vec![0.0; total];
        let mut off = 0;
        for s in &spec.segments {
            for head in 0..h {
                let c0 = head * dh;
                for i in 0..s.q_len {
                    let limit = visible(&spec, s, i);
                    let qi = &qd[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                    let p = &mut probs[off + i * s.k_len..off + i * s.k_len + limit];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &kd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                        *pj = dot(qi, kj) * scale;
                    }
                    softmax_in_place(p);
                    let orow = &mut out[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                        axpy(pj, vj, orow);
                    }
                }
                off += s.q_len * s.k_len;
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(vec![rq, d], out),
            Op::Attention { q, k, v, spec, probs },
            rg,
        ))
    }

    /// Gather rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, d) = matrix_dims(tt, "embedding")?;
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::contract(format!(
                    "embedding id {id} out of range for table of {rows} rows"
                )));
            }
            out.extend_from_slice(tt.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = matrix_dims(tx, "slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::contract(format!(
                "row slice {start}..{} out of range for {rows} rows",
                start + len
            )));
        }
        let out = tx.data()[start * d..(start + len) * d].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![len, d], out),
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// Concatenate matrices (or vectors, as single rows) along the row axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("stack_rows with no inputs"))?;
        let d = self.value(*first).cols();
        let mut out = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != d || tp.shape().len() > 2 {
                return Err(dim_err("stack_rows", self.value(*first).shape(), tp.shape()));
            }
            out.extend_from_slice(tp.data());
        }
        let rows = out.len() / d;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, d], out),
            Op::StackRows(parts.to_vec()),
            rg,
        ))
    }

    /// Mean over the rows of `h` whose mask entry is true. Returns a length-`d` vector.
    pub fn masked_mean_pool(&mut self, h: Var, mask: &[bool]) -> Result<Var> {
        let th = self.value(h);
        let (t, d) = matrix_dims(th, "masked_mean_pool")?;
        if mask.len() != t {
            return Err(dim_err("masked_mean_pool", th.shape(), &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyPool);
        }
        let mut out = vec![0.0; d];
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            axpy(1.0, th.row(r), &mut out);
        }
        for o in &mut out {
            *o /= count as f64;
        }
        let rg = self.rg(&[h]);
        Ok(self.push(
            Tensor::from_parts(vec![d], out),
            Op::MaskedMeanPool { h, mask: mask.to_vec(), count },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.data().iter().sum::<f64>() / tx.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::Mean(x), rg)
    }

    /// Token-mean of `-log softmax(logits)[target]` over the last axis.
    ///
    /// Rows whose target equals `ignore` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let tl = self.value(logits);
        let v = tl.cols();
        let rows = tl.rows();
        if targets.len() != rows {
            return Err(dim_err("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; rows * v];
        let mut loss = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t >= v {
                return Err(Error::contract(format!("target id {t} out of range for {v} classes")));
            }
            let p = &mut probs[r * v..(r + 1) * v];
            p.copy_from_slice(tl.row(r));
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(p);
            count += 1;
        }
        if count == 0 {
            return Err(Error::contract("cross entropy over a target batch with no real tokens"));
        }
        loss /= count as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        ))
    }

    /// `out[i][j] = cos(zx_i, zy_j) / tau`.
    pub fn cosine_similarity(&mut self, zx: Var, zy: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::contract(format!("temperature must be positive, got {tau}")));
        }
        let (tx, ty) = (self.value(zx), self.value(zy));
        let (n, d) = matrix_dims(tx, "cosine_similarity")?;
        let (m, d2) = matrix_dims(ty, "cosine_similarity")?;
        if d != d2 {
            return Err(dim_err("cosine_similarity", tx.shape(), ty.shape()));
        }
        let nx: Vec<f64> = (0..n).map(|i| super::kernels::norm(tx.row(i))).collect();
        let ny: Vec<f64> = (0..m).map(|j| super::kernels::norm(ty.row(j))).collect();
        if let Some(i) = nx.iter().position(|&v| v == 0.0) {
            return Err(Error::DegenerateVector(format!("z_x row {i} has zero norm")));
        }
        if let Some(j) = ny.iter().position(|&v| v == 0.0) {
            return Err(Error::DegenerateVector(format!("z_y row {j} has zero norm")));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = dot(tx.row(i), ty.row(j)) / (nx[i] * ny[j] * tau);
            }
        }
        let rg = self.rg(&[zx, zy]);
        Ok(self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::Cosine { zx, zy, tau, nx, ny },
            rg,
        ))
    }

    /// Mean over anchors `i` of `-ln(exp(s_ii) / Σ_j w_ij exp(s_ij))`.
    ///
    /// `weights` is the row-major `n×n` weight matrix; the diagonal must be 1.
    /// Entries with weight 0 are dropped from the denominator.
    pub fn weighted_contrastive(&mut self, sims: Var, weights: Vec<f64>) -> Result<Var> {
        let ts = self.value(sims);
        let (n, m) = matrix_dims(ts, "weighted_contrastive")?;
        if n != m || weights.len() != n * n {
            return Err(dim_err("weighted_contrastive", ts.shape(), &[weights.len()]));
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::contract("contrastive weights must be finite and nonnegative"));
        }
        let mut q = vec![0.0; n * n];
        let mut loss = 0.0;
        for i in 0..n {
            let row = ts.row(i);
            let w = &weights[i * n..(i + 1) * n];
            let lse = weighted_log_sum_exp(row, w);
            loss += lse - row[i];
            for j in 0..n {
                if w[j] > 0.0 {
                    q[i * n + j] = w[j] * (row[j] - lse).exp();
                }
            }
        }
        loss /= n as f64;
        let rg = self.rg(&[sims]);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![loss]),
            Op::Contrastive { sims, q },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root. Populates `grad` on every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for node in &mut self.nodes {
            node.grad = None;
        }
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].grad = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    matmul_bt_acc(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    matmul_at_acc(ta.data(), g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (out.shape()[0], out.shape()[1]);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = slot(nodes, grads, *v) {
                        axpy(1.0, g, gv);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gr) = slot(nodes, grads, *row) {
                    let n = gr.len();
                    for chunk in g.chunks(n) {
                        axpy(1.0, chunk, gr);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(db) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(da) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(*c, g, ga);
                }
            }
            Op::MulConst(a, f) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, gi), fi) in ga.iter_mut().zip(g).zip(f) {
                        *o += gi * fi;
                    }
                }
            }
            Op::Relu(a) => {
                let da = nodes[a.0].value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(da) {
                        if *x > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = out.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * n * inner + i;
                            let s: f64 = (0..*n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..*n {
                                let p = base + j * inner;
                                gx[p] += y[p] * (g[p] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = out.cols();
                let gvals = nodes[gain.0].value.data();
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for gr in g.chunks(n) {
                        axpy(1.0, gr, gb);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dxhat[j] = gr[j] * gvals[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh = dot(&dxhat, hr) / n as f64;
                        for j in 0..n {
                            gx[r * n + j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, g, grads);
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = slot(nodes, grads, *table) {
                    let d = out.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let d = out.cols();
                    axpy(1.0, g, &mut gx[start * d..start * d + g.len()]);
                }
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = slot(nodes, grads, *p) {
                        axpy(1.0, &g[off..off + len], gp);
                    }
                    off += len;
                }
            }
            Op::MaskedMeanPool { h, mask, count } => {
                if let Some(gh) = slot(nodes, grads, *h) {
                    let d = g.len();
                    let c = 1.0 / *count as f64;
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        axpy(c, g, &mut gh[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let c = g[0] / gx.len() as f64;
                    for o in gx.iter_mut() {
                        *o += c;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                if let Some(gl) = slot(nodes, grads, *logits) {
                    let v = nodes[logits.0].value.cols();
                    let c = g[0] / *count as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        axpy(c, &probs[r * v..(r + 1) * v], row);
                        row[t] -= c;
                    }
                }
            }
            Op::Cosine { zx, zy, tau, nx, ny } => {
                let (tx, ty) = (&nodes[zx.0].value, &nodes[zy.0].value);
                let (n, d) = (tx.shape()[0], tx.shape()[1]);
                let m = ty.shape()[0];
                let sims = out.data();
                // d s_ij / d x_i = (y_j/(|x||y|) - s_ij x_i/|x|^2) / tau, with s_ij*tau the cosine
                if let Some(gx) = slot(nodes, grads, *zx) {
                    for i in 0..n {
                        let xi = tx.row(i);
                        let gi = &mut gx[i * d..(i + 1) * d];
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let cos = sims[i * m + j] * tau;
                            axpy(gij / (nx[i] * ny[j] * tau), ty.row(j), gi);
                            axpy(-gij * cos / (nx[i] * nx[i] * tau), xi, gi);
                        }
                    }
                }
                if let Some(gy) = slot(nodes, grads, *zy) {
                    for j in 0..m {
                        let yj = ty.row(j);
                        let gj = &mut gy[j * d..(j + 1) * d];
                        for i in 0..n {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let cos = sims[i * m + j] * tau;
                            axpy(gij / (nx[i] * ny[j] * tau), tx.row(i), gj);
                            axpy(-gij * cos / (ny[j] * ny[j] * tau), yj, gj);
                        }
                    }
                }
            }
            Op::Contrastive { sims, q, .. } => {
                if let Some(gs) = slot(nodes, grads, *sims) {
                    let n = nodes[sims.0].value.shape()[0];
                    let c = g[0] / n as f64;
                    for i in 0..n {
                        for j in 0..n {
                            gs[i * n + j] += c * q[i * n + j];
                        }
                        gs[i * n + i] -= c;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let d = tq.cols();
        let h = spec.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut dq = nodes[q.0].requires_grad.then(|| vec![0.0; tq.len()]);
        let mut dk = nodes[k.0].requires_grad.then(|| vec![0.0; tk.len()]);
        let mut dv = nodes[v.0].requires_grad.then(|| vec![0.0; tv.len()]);
        let mut dp = Vec::new();
        let mut off = 0;
        for s in &spec.segments {
            for head in 0..h {
                let c0 = head * dh;
                for i in 0..s.q_len {
                    let limit = visible(spec, s, i);
                    let qrow = (s.q_start + i) * d + c0;
                    let gi = &g[qrow..qrow + dh];
                    let p = &probs[off + i * s.k_len..off + i * s.k_len + limit];
                    dp.clear();
                    dp.extend((0..limit).map(|j| {
                        let vrow = (s.k_start + j) * d + c0;
                        dot(gi, &vd[vrow..vrow + dh])
                    }));
                    if let Some(dv) = dv.as_mut() {
                        for (j, &pj) in p.iter().enumerate() {
                            let vrow = (s.k_start + j) * d + c0;
                            axpy(pj, gi, &mut dv[vrow..vrow + dh]);
                        }
                    }
                    let s_dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for (j, &pj) in p.iter().enumerate() {
                        let ds = pj * (dp[j] - s_dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (s.k_start + j) * d + c0;
                        if let Some(dq) = dq.as_mut() {
                            axpy(ds, &kd[krow..krow + dh], &mut dq[qrow..qrow + dh]);
                        }
                        if let Some(dk) = dk.as_mut() {
                            axpy(ds, &qd[qrow..qrow + dh], &mut dk[krow..krow + dh]);
                        }
                    }
                }
                off += s.q_len * s.k_len;
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(delta) = delta {
                let len = delta.len();
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
                axpy(1.0, &delta, slot);
            }
        }
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

/// Number of keys query row `i` of segment `s` may attend to.
fn visible(spec: &AttnSpec, s: &AttnSegment, i: usize) -> usize {
    if spec.causal {
        (s.q_offset + i + 1).min(s.k_len)
    } else {
        s.k_len
    }
}
