//! Tape-based reverse-mode differentiation over 2-D `f64` tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order; [`Graph::backward`] walks that tape in reverse. Operations are
//! coarse (fused attention, fused cross-entropy) so a training step on the toy
//! transformer stays a few hundred nodes.

use std::collections::BTreeMap;

use super::ops::{bce_unchecked, sigmoid, softmax_in_place};
use super::param::Gradients;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        n_heads: usize,
        probs: Vec<f64>,
    },
    RowSoftmax(Var),
    MaskedSoftmax {
        x: Var,
        mask: Vec<bool>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScaleRowsBy {
        x: Var,
        weights: Var,
        rows: Vec<usize>,
        col: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        x: Var,
        targets: Vec<f64>,
    },
    Sum(Var),
    MeanRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(what: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what}: expected matrix, got {s:?}"))),
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A parameter leaf. Frozen parameters behave like constants.
    pub fn param(&mut self, name: &str, value: &Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            needs_grad: trainable,
            param: trainable.then(|| name.to_string()),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let out = ta.zip_map(tb, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scale(factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), &[a])
    }

    /// Row-wise RMS normalisation with a learned gain vector.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(x), "rms_norm")?;
        let g = self.value(gain);
        if g.numel() != d {
            return Err(shape_err("rms_norm gain", self.value(x), g));
        }
        let xv = self.value(x).data();
        let gv = g.data();
        let mut out = vec![0.0; n * d];
        let mut inv_rms = Vec::with_capacity(n);
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for c in 0..d {
                out[r * d + c] = row[c] * inv * gv[c];
            }
        }
        let out = Tensor::from_parts(vec![n, d], out);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = matrix_dims(self.value(table), "embedding")?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfRange { index: id, len: rows });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_parts(vec![ids.len(), d], out);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Multi-head causal scaled dot-product attention over rows laid out as
    /// consecutive sequences of `seq_len` tokens.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        n_heads: usize,
    ) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(q), "attention q")?;
        for other in [k, v] {
            if self.value(other).shape() != self.value(q).shape() {
                return Err(shape_err("attention", self.value(q), self.value(other)));
            }
        }
        if seq_len == 0 || n % seq_len != 0 || n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Shape(format!(
                "attention: {n} rows, seq_len {seq_len}, width {d}, heads {n_heads}"
            )));
        }
        let batches = n / seq_len;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batches * n_heads * seq_len * seq_len];
        let mut out = vec![0.0; n * d];
        for b in 0..batches {
            for h in 0..n_heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let ri = b * seq_len + i;
                    let base = ((b * n_heads + h) * seq_len + i) * seq_len;
                    let p = &mut probs[base..base + i + 1];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let rj = b * seq_len + j;
                        *pj = (0..dh)
                            .map(|c| qv[ri * d + off + c] * kv[rj * d + off + c])
                            .sum::<f64>()
                            * scale;
                    }
                    softmax_in_place(p);
                    for (j, &pj) in p.iter().enumerate() {
                        let rj = b * seq_len + j;
                        for c in 0..dh {
                            out[ri * d + off + c] += pj * vv[rj * d + off + c];
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![n, d], out);
        Ok(self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                n_heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(x), "row_softmax")?;
        let mut out = self.value(x).data().to_vec();
        for r in 0..n {
            softmax_in_place(&mut out[r * d..(r + 1) * d]);
        }
        let out = Tensor::from_parts(vec![n, d], out);
        Ok(self.push(out, Op::RowSoftmax(x), &[x]))
    }

    /// Softmax restricted to the masked entries of each row; other entries
    /// are exactly zero. Every row must keep at least one entry.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(x), "masked_softmax")?;
        if mask.len() != n * d {
            return Err(Error::Shape("masked_softmax mask length".into()));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let m = &mask[r * d..(r + 1) * d];
            let max = (0..d)
                .filter(|&c| m[c])
                .map(|c| xv[r * d + c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidArgument("masked_softmax: empty row mask".into()));
            }
            let mut total = 0.0;
            for c in (0..d).filter(|&c| m[c]) {
                let e = (xv[r * d + c] - max).exp();
                out[r * d + c] = e;
                total += e;
            }
            for c in (0..d).filter(|&c| m[c]) {
                out[r * d + c] /= total;
            }
        }
        let out = Tensor::from_parts(vec![n, d], out);
        Ok(self.push(
            out,
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(x), "gather_rows")?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::OutOfRange { index: r, len: n });
            }
            out.extend_from_slice(&xv[r * d..(r + 1) * d]);
        }
        let out = Tensor::from_parts(vec![rows.len(), d], out);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Inverse of [`Graph::gather_rows`]: an `n_rows`-row matrix with row
    /// `rows[j]` accumulating input row `j`.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], n_rows: usize) -> Result<Var> {
        let (m, d) = matrix_dims(self.value(x), "scatter_rows")?;
        if rows.len() != m {
            return Err(Error::Shape("scatter_rows index length".into()));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; n_rows * d];
        for (j, &r) in rows.iter().enumerate() {
            if r >= n_rows {
                return Err(Error::OutOfRange { index: r, len: n_rows });
            }
            for c in 0..d {
                out[r * d + c] += xv[j * d + c];
            }
        }
        let out = Tensor::from_parts(vec![n_rows, d], out);
        Ok(self.push(
            out,
            Op::ScatterRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Scales row `j` of `x` by `weights[rows[j], col]`.
    pub fn scale_rows_by(&mut self, x: Var, weights: Var, rows: &[usize], col: usize) -> Result<Var> {
        let (m, d) = matrix_dims(self.value(x), "scale_rows_by")?;
        let (wn, wc) = matrix_dims(self.value(weights), "scale_rows_by weights")?;
        if rows.len() != m || col >= wc || rows.iter().any(|&r| r >= wn) {
            return Err(Error::Shape("scale_rows_by indices".into()));
        }
        let xv = self.value(x).data();
        let wv = self.value(weights).data();
        let mut out = vec![0.0; m * d];
        for (j, &r) in rows.iter().enumerate() {
            let w = wv[r * wc + col];
            for c in 0..d {
                out[j * d + c] = xv[j * d + c] * w;
            }
        }
        let out = Tensor::from_parts(vec![m, d], out);
        Ok(self.push(
            out,
            Op::ScaleRowsBy {
                x,
                weights,
                rows: rows.to_vec(),
                col,
            },
            &[x, weights],
        ))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = matrix_dims(self.value(logits), "cross_entropy")?;
        if targets.len() != n || n == 0 {
            return Err(Error::Shape(format!(
                "cross_entropy: {n} rows, {} targets",
                targets.len()
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::OutOfRange { index: t, len: v });
            }
            let row = &mut probs[r * v..(r + 1) * v];
            let lse = super::ops::log_sum_exp(row);
            total += lse - row[t];
            softmax_in_place(row);
        }
        let loss = total / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy".into()));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against per-entry targets.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let xv = self.value(x).data();
        if targets.len() != xv.len() || xv.is_empty() {
            return Err(Error::Shape("bce_with_logits target length".into()));
        }
        let loss = xv
            .iter()
            .zip(targets)
            .map(|(&l, &t)| bce_unchecked(l, t))
            .sum::<f64>()
            / xv.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                x,
                targets: targets.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Column means: `[n, d] -> [1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(x), "mean_rows")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                out[c] += xv[r * d + c];
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        Ok(self.push(Tensor::from_parts(vec![1, d], out), Op::MeanRows(x), &[x]))
    }

    /// Reverse pass from a scalar loss; returns `∂loss/∂p` for every trainable
    /// parameter leaf that the loss reaches.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut out = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(name) = &node.param {
                accumulate_named(&mut out, name, g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.matmul_t(val(*b))?);
                }
                if self.wants(*b) {
                    acc(grads, *b, val(*a).t_matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.matmul(val(*b))?);
                }
                if self.wants(*b) {
                    acc(grads, *b, g.t_matmul(val(*a))?);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    acc(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, f) => acc(grads, *a, g.scale(*f)),
            Op::Reshape(a) => acc(grads, *a, g.clone().reshape(val(*a).shape())?),
            Op::Silu(a) => {
                let dx = val(*a).zip_map(g, |x, gy| {
                    let s = sigmoid(x);
                    gy * s * (1.0 + x * (1.0 - s))
                });
                acc(grads, *a, dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = val(*x);
                let (n, d) = (xv.rows(), xv.cols());
                let (xd, gd, gv) = (xv.data(), val(*gain).data(), g.data());
                let mut dx = vec![0.0; n * d];
                let mut dg = vec![0.0; d];
                for r in 0..n {
                    let inv = inv_rms[r];
                    let mut dot = 0.0;
                    for c in 0..d {
                        let normed = xd[r * d + c] * inv;
                        let dn = gv[r * d + c] * gd[c];
                        dg[c] += gv[r * d + c] * normed;
                        dot += dn * normed;
                    }
                    let mean = dot / d as f64;
                    for c in 0..d {
                        let normed = xd[r * d + c] * inv;
                        let dn = gv[r * d + c] * gd[c];
                        dx[r * d + c] = (dn - normed * mean) * inv;
                    }
                }
                if self.wants(*x) {
                    acc(grads, *x, Tensor::from_parts(vec![n, d], dx));
                }
                if self.wants(*gain) {
                    acc(grads, *gain, Tensor::from_parts(val(*gain).shape().to_vec(), dg));
                }
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g.data()[r * d + c];
                    }
                }
                acc(grads, *table, Tensor::from_parts(tv.shape().to_vec(), dt));
            }
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                n_heads,
                probs,
            } => {
                let (dq, dk, dv) =
                    attention_backward(val(*q), val(*k), val(*v), g, *seq_len, *n_heads, probs);
                if self.wants(*q) {
                    acc(grads, *q, dq);
                }
                if self.wants(*k) {
                    acc(grads, *k, dk);
                }
                if self.wants(*v) {
                    acc(grads, *v, dv);
                }
            }
            Op::RowSoftmax(x) => {
                let y = &node.value;
                acc(grads, *x, softmax_backward(y, g, None));
            }
            Op::MaskedSoftmax { x, mask } => {
                let y = &node.value;
                acc(grads, *x, softmax_backward(y, g, Some(mask)));
            }
            Op::GatherRows { x, rows } => {
                let xv = val(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (j, &r) in rows.iter().enumerate() {
                    for c in 0..d {
                        dx[r * d + c] += g.data()[j * d + c];
                    }
                }
                acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::ScatterRows { x, rows } => {
                let xv = val(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (j, &r) in rows.iter().enumerate() {
                    dx[j * d..(j + 1) * d].copy_from_slice(&g.data()[r * d..(r + 1) * d]);
                }
                acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::ScaleRowsBy {
                x,
                weights,
                rows,
                col,
            } => {
                let xv = val(*x);
                let wv = val(*weights);
                let (d, wc) = (xv.cols(), wv.cols());
                if self.wants(*x) {
                    let mut dx = vec![0.0; xv.numel()];
                    for (j, &r) in rows.iter().enumerate() {
                        let w = wv.data()[r * wc + col];
                        for c in 0..d {
                            dx[j * d + c] = g.data()[j * d + c] * w;
                        }
                    }
                    acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if self.wants(*weights) {
                    let mut dw = vec![0.0; wv.numel()];
                    for (j, &r) in rows.iter().enumerate() {
                        dw[r * wc + col] += (0..d)
                            .map(|c| g.data()[j * d + c] * xv.data()[j * d + c])
                            .sum::<f64>();
                    }
                    acc(grads, *weights, Tensor::from_parts(wv.shape().to_vec(), dw));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = val(*logits);
                let (n, v) = (lv.rows(), lv.cols());
                let scale = g.data()[0] / n as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * v + t] -= 1.0;
                }
                for x in d.iter_mut() {
                    *x *= scale;
                }
                acc(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), d));
            }
            Op::BceWithLogits { x, targets } => {
                let xv = val(*x);
                let scale = g.data()[0] / xv.numel() as f64;
                let d: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&l, &t)| (sigmoid(l) - t) * scale)
                    .collect();
                acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Sum(x) => {
                let xv = val(*x);
                acc(grads, *x, Tensor::full(xv.shape(), g.data()[0]));
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let (n, d) = (xv.rows(), xv.cols());
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    for c in 0..d {
                        dx[r * d + c] = g.data()[c] / n as f64;
                    }
                }
                acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_named(out: &mut Gradients, name: &str, g: Tensor) {
    match out.get_mut(name) {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => {
            out.insert(name.to_string(), g);
        }
    }
}

fn softmax_backward(y: &Tensor, g: &Tensor, mask: Option<&Vec<bool>>) -> Tensor {
    let (n, d) = (y.rows(), y.cols());
    let (yv, gv) = (y.data(), g.data());
    let mut dx = vec![0.0; n * d];
    for r in 0..n {
        let row = r * d..(r + 1) * d;
        let dot: f64 = yv[row.clone()].iter().zip(&gv[row.clone()]).map(|(a, b)| a * b).sum();
        for c in 0..d {
            let i = r * d + c;
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            dx[i] = yv[i] * (gv[i] - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &Tensor,
    seq_len: usize,
    n_heads: usize,
    probs: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (q.rows(), q.cols());
    let batches = n / seq_len;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qv, kv, vv, gv) = (q.data(), k.data(), v.data(), g.data());
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dp = vec![0.0; seq_len];
    for b in 0..batches {
        for h in 0..n_heads {
            let off = h * dh;
            for i in 0..seq_len {
                let ri = b * seq_len + i;
                let base = ((b * n_heads + h) * seq_len + i) * seq_len;
                let p = &probs[base..base + i + 1];
                let mut dot = 0.0;
                for j in 0..=i {
                    let rj = b * seq_len + j;
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += gv[ri * d + off + c] * vv[rj * d + off + c];
                        dv[rj * d + off + c] += p[j] * gv[ri * d + off + c];
                    }
                    dp[j] = s;
                    dot += s * p[j];
                }
                for j in 0..=i {
                    let rj = b * seq_len + j;
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq[ri * d + off + c] += ds * kv[rj * d + off + c];
                        dk[rj * d + off + c] += ds * qv[ri * d + off + c];
                    }
                }
            }
        }
    }
    let shape = vec![n, d];
    (
        Tensor::from_parts(shape.clone(), dq),
        Tensor::from_parts(shape.clone(), dk),
        Tensor::from_parts(shape, dv),
    )
}
