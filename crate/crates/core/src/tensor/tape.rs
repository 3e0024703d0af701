//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Ops append
//! nodes, so node order is a topological order and [`Tape::backward`] only
//! has to walk the node list in reverse. Nodes that do not depend on any
//! trainable leaf never receive a gradient buffer.

use super::kernels::{matmul_into, matmul_tn_into, transpose};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`, the linear-layer form with weights stored `out × in`.
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Rope {
        x: Var,
        n_heads: usize,
        seq_len: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const RMS_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;

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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        value.ensure_finite(name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, rg, op))
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("{what} expects a 2-D tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul of {:?} by {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        self.record("matmul", Tensor::from_parts(vec![m, n], out), &[a, b], Op::MatMul(a, b))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt of {:?} by transposed {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let bt = transpose(self.value(b).data(), n, k);
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, self.value(a).data(), &bt, m, k, n);
        self.record(
            "matmul_nt",
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Op::MatMulNt(a, b),
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.record("add", value, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.record("mul", value, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.record("scale", value, &[a], Op::Scale(a, c))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x / (1.0 + (-x).exp())).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.record("silu", value, &[a], Op::Silu(a))
    }

    /// Scales each row of `x` by the reciprocal root-mean-square of that row,
    /// then multiplies elementwise by `gain`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.cols();
        if tg.len() != d {
            return Err(Error::shape(format!(
                "rmsnorm gain of length {} for last dimension {d}",
                tg.len()
            )));
        }
        let rows = tx.rows();
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for ((o, &xv), &g) in out[r * d..(r + 1) * d].iter_mut().zip(row).zip(tg.data()) {
                *o = xv * inv * g;
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        self.record("rmsnorm", value, &[x, gain], Op::RmsNorm { x, gain, inv_rms })
    }

    /// Rotary position embedding. Rows of `x` are `batch × seq_len`
    /// positions; each head's feature pairs `(2i, 2i+1)` are rotated by
    /// `pos · base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, n_heads: usize, seq_len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = self.check_heads(x, n_heads, seq_len, "rope")?;
        let hd = d / n_heads;
        if hd % 2 != 0 {
            return Err(Error::shape(format!("rope needs an even head dimension, got {hd}")));
        }
        let table = rope_table(seq_len, hd);
        let mut out = tx.data().to_vec();
        rotate(&mut out, rows, d, hd, seq_len, &table, 1.0);
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        self.record("rope", value, &[x], Op::Rope { x, n_heads, seq_len })
    }

    fn check_heads(&self, x: Var, n_heads: usize, seq_len: usize, what: &str) -> Result<(usize, usize)> {
        let (rows, d) = self.matrix_dims(x, what)?;
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::shape(format!("{what}: {n_heads} heads do not divide width {d}")));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape(format!(
                "{what}: {rows} rows are not a whole number of length-{seq_len} sequences"
            )));
        }
        Ok((rows, d))
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    ///
    /// `q`, `k`, `v` are `(batch·seq_len) × d`; sequences never attend
    /// across each other and position `t` only sees positions `≤ t`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        seq_len: usize,
    ) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (rows, d) = self.check_heads(q, n_heads, seq_len, "attention")?;
        let hd = d / n_heads;
        let batch = rows / seq_len;
        let scale = 1.0 / (hd as f64).sqrt();
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let t = seq_len;
        let mut probs = vec![0.0; batch * n_heads * t * t];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..n_heads {
                let qh = gather_head(tq, b, h, t, d, hd);
                let kt = transpose(&gather_head(tk, b, h, t, d, hd), t, hd);
                let vh = gather_head(tv, b, h, t, d, hd);
                let p = &mut probs[(b * n_heads + h) * t * t..][..t * t];
                matmul_into(p, &qh, &kt, t, hd, t);
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    let mut max = f64::NEG_INFINITY;
                    for s in row[..=i].iter_mut() {
                        *s *= scale;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in row[..=i].iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    for s in row[..=i].iter_mut() {
                        *s /= z;
                    }
                    // Future positions get an exact zero weight.
                    row[i + 1..].fill(0.0);
                }
                let mut oh = vec![0.0; t * hd];
                matmul_into(&mut oh, p, &vh, t, t, hd);
                scatter_head(&mut out, &oh, b, h, t, d, hd);
            }
        }
        let value = Tensor::from_parts(vec![rows, d], out);
        self.record(
            "attention",
            value,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                seq_len,
                probs,
            },
        )
    }

    /// Row gather: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::shape("embedding lookup of zero ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_parts(vec![ids.len(), d], out);
        self.record(
            "embedding",
            value,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean negative log-likelihood over rows with a target; `None` rows
    /// are excluded from both the sum and the count.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, vocab) = self.matrix_dims(logits, "cross-entropy")?;
        if targets.len() != rows {
            return Err(Error::shape(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!("target id {bad} outside vocabulary of {vocab}")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::data("cross-entropy with no targets"));
        }
        let tl = self.value(logits);
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut z = 0.0;
            for (pv, &l) in p.iter_mut().zip(row) {
                *pv = (l - max).exp();
                z += *pv;
            }
            for pv in p.iter_mut() {
                *pv /= z;
            }
            if let Some(t) = *target {
                total += z.ln() - (row[t] - max);
            }
        }
        let value = Tensor::scalar(total / count as f64);
        self.record(
            "cross-entropy",
            value,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.record("sum", value, &[a], Op::Sum(a))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.value(v).shape().to_vec(), contrib));
            }
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose(tb.data(), k, n);
                    let mut da = vec![0.0; m * k];
                    matmul_into(&mut da, gd, &bt, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(&mut db, ta.data(), gd, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if self.requires_grad(*a) {
                    // dA = dC · B
                    let mut da = vec![0.0; m * k];
                    matmul_into(&mut da, gd, tb.data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    // dB = dCᵀ · A
                    let mut db = vec![0.0; n * k];
                    matmul_tn_into(&mut db, gd, ta.data(), m, n, k);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let da = gd.iter().zip(tb).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = gd.iter().zip(ta).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|g| g * c).collect());
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let da = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (self.value(*x), self.value(*gain).data());
                let d = tx.cols();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; tx.len()];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = tx.row(r);
                        let gr = &gd[r * d..(r + 1) * d];
                        let dot: f64 = gr.iter().zip(tg).zip(row).map(|((g, w), x)| g * w * x).sum();
                        let c = inv * inv * inv * dot / d as f64;
                        for (i, o) in dx[r * d..(r + 1) * d].iter_mut().enumerate() {
                            *o = inv * tg[i] * gr[i] - c * row[i];
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*gain) {
                    let mut dg = vec![0.0; d];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = tx.row(r);
                        for (i, o) in dg.iter_mut().enumerate() {
                            *o += gd[r * d + i] * row[i] * inv;
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
            }
            Op::Rope { x, n_heads, seq_len } => {
                let tx = self.value(*x);
                let (rows, d) = (tx.rows(), tx.cols());
                let hd = d / n_heads;
                let table = rope_table(*seq_len, hd);
                let mut dx = gd.to_vec();
                rotate(&mut dx, rows, d, hd, *seq_len, &table, -1.0);
                self.accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                seq_len,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let (rows, d) = (self.value(*q).rows(), self.value(*q).cols());
                let (nh, t) = (*n_heads, *seq_len);
                let hd = d / nh;
                let scale = 1.0 / (hd as f64).sqrt();
                let batch = rows / t;
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                for b in 0..batch {
                    for h in 0..nh {
                        let p = &probs[(b * nh + h) * t * t..][..t * t];
                        let go = gather_head(gd, b, h, t, d, hd);
                        let qh = gather_head(tq, b, h, t, d, hd);
                        let kh = gather_head(tk, b, h, t, d, hd);
                        let vt = transpose(&gather_head(tv, b, h, t, d, hd), t, hd);
                        // dV = Pᵀ · dO
                        let mut dvh = vec![0.0; t * hd];
                        matmul_tn_into(&mut dvh, p, &go, t, t, hd);
                        // dP = dO · Vᵀ, then the softmax Jacobian row by row.
                        let mut ds = vec![0.0; t * t];
                        matmul_into(&mut ds, &go, &vt, t, hd, t);
                        for i in 0..t {
                            let pr = &p[i * t..(i + 1) * t];
                            let dr = &mut ds[i * t..(i + 1) * t];
                            let weighted: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                            for j in 0..=i {
                                dr[j] = pr[j] * (dr[j] - weighted) * scale;
                            }
                            dr[i + 1..].fill(0.0);
                        }
                        let mut dqh = vec![0.0; t * hd];
                        matmul_into(&mut dqh, &ds, &kh, t, t, hd);
                        let mut dkh = vec![0.0; t * hd];
                        matmul_tn_into(&mut dkh, &ds, &qh, t, t, hd);
                        scatter_head(&mut dq, &dqh, b, h, t, d, hd);
                        scatter_head(&mut dk, &dkh, b, h, t, d, hd);
                        scatter_head(&mut dv, &dvh, b, h, t, d, hd);
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Embedding { table, ids } => {
                let shape = self.value(*table).shape();
                let d = shape[1];
                let mut dt = vec![0.0; shape[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &gv) in dt[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *o += gv;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).cols();
                let scale = gd[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    let row = &mut dl[r * vocab..(r + 1) * vocab];
                    for (o, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                        *o = p * scale;
                    }
                    row[t] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
        }
        Ok(())
    }
}

/// Copies head `h` of sequence `b` out of a `(batch·t) × d` buffer.
fn gather_head(src: &[f64], b: usize, h: usize, t: usize, d: usize, hd: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * hd);
    for i in 0..t {
        let start = (b * t + i) * d + h * hd;
        out.extend_from_slice(&src[start..start + hd]);
    }
    out
}

fn scatter_head(dst: &mut [f64], src: &[f64], b: usize, h: usize, t: usize, d: usize, hd: usize) {
    for i in 0..t {
        let start = (b * t + i) * d + h * hd;
        dst[start..start + hd].copy_from_slice(&src[i * hd..(i + 1) * hd]);
    }
}

/// `(cos, sin)` for every position and rotation pair.
fn rope_table(seq_len: usize, head_dim: usize) -> Vec<(f64, f64)> {
    let half = head_dim / 2;
    let mut table = Vec::with_capacity(seq_len * half);
    for pos in 0..seq_len {
        for i in 0..half {
            let freq = ROPE_BASE.powf(-((2 * i) as f64) / head_dim as f64);
            let angle = pos as f64 * freq;
            table.push((angle.cos(), angle.sin()));
        }
    }
    table
}

fn rotate(
    data: &mut [f64],
    rows: usize,
    d: usize,
    hd: usize,
    seq_len: usize,
    table: &[(f64, f64)],
    sign: f64,
) {
    let half = hd / 2;
    for r in 0..rows {
        let pos = r % seq_len;
        for h in 0..d / hd {
            for i in 0..half {
                let (c, s) = table[pos * half + i];
                let s = s * sign;
                let base = r * d + h * hd + 2 * i;
                let (x0, x1) = (data[base], data[base + 1]);
                data[base] = x0 * c - x1 * s;
                data[base + 1] = x0 * s + x1 * c;
            }
        }
    }
}
