//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every node that depends on a trainable leaf.

use crate::error::{shape_err, Error, Result};
use crate::numcore::ops::{self, gemm, Orient};
use crate::numcore::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    SoftmaxRows(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterRows { parts: Vec<(Var, Vec<usize>)> },
    ScaleRows { x: Var, s: Var },
    Renorm { probs: Var, keep: Vec<Vec<usize>> },
    PickEntries { x: Var, at: Vec<(usize, usize)> },
    MeanRows(Var),
    WeightedSum { x: Var, coeffs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, total_w: f64, probs: Tensor },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. One graph per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` if `v` does not
    /// influence the root through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn first_bad_row(t: &Tensor) -> Option<usize> {
    let i = t.data().iter().position(|v| !v.is_finite())?;
    let w: usize = t.shape().iter().skip(1).product();
    Some(if w == 0 { 0 } else { i / w })
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(row) = first_bad_row(&value) {
            return Err(Error::NonFinite(format!("{name} output, row {row}")));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err!("add {:?} + {:?}", x.shape(), y.shape()));
        }
        let mut out = x.clone();
        out.add_assign(y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(shape_err!("bias of {} for {n} columns", b.len()));
        }
        let mut out = self.value(x).clone();
        for i in 0..m {
            for (o, bv) in out.row_mut(i).iter_mut().zip(self.value(bias).data()) {
                *o += bv;
            }
        }
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).scale(c);
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = ops::gelu(self.value(x));
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// `x_ij / rms(x_i) * gain_j` with `rms = sqrt(mean(x_i^2) + eps)`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).len() != n {
            return Err(shape_err!("rms_norm gain of {} for width {n}", self.value(gain).len()));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let mut out = Tensor::zeros(&[m, n]);
        let mut inv_rms = Vec::with_capacity(m);
        for i in 0..m {
            let row = xv.row(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = row[j] * r * g[j];
            }
        }
        self.push("rms_norm", out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(x))?;
        self.push("softmax_rows", out, Op::SoftmaxRows(x), &[x])
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Index(format!("token id {id} outside table of {v}")));
            }
            out.row_mut(i).copy_from_slice(self.value(table).row(id));
        }
        self.push("embedding", out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `(batch*seq) × d` with sequences stored contiguously;
    /// position `t` attends to positions `0..=t` of its own sequence.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, d) = self.value(q).dims2()?;
        if rows != batch * seq || self.value(k).shape() != [rows, d] || self.value(v).shape() != [rows, d] {
            return Err(shape_err!("attention operands for batch {batch} × seq {seq}"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err!("width {d} not divisible into {heads} heads"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = Tensor::zeros(&[rows, d]);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..seq {
                    let qt = &qv[(b * seq + t) * d + off..][..dh];
                    for (s, sc) in scores.iter_mut().enumerate().take(t + 1) {
                        let ks = &kv[(b * seq + s) * d + off..][..dh];
                        *sc = qt.iter().zip(ks).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    ops::softmax_in_place(&mut scores[..=t]);
                    let p = &mut probs[((b * heads + h) * seq + t) * seq..][..seq];
                    p[..=t].copy_from_slice(&scores[..=t]);
                    let o = &mut out.data_mut()[(b * seq + t) * d + off..][..dh];
                    for (s, &ps) in p.iter().enumerate().take(t + 1) {
                        let vs = &vv[(b * seq + s) * d + off..][..dh];
                        for (oe, ve) in o.iter_mut().zip(vs) {
                            *oe += ps * ve;
                        }
                    }
                }
            }
        }
        self.push("causal_attention", out, Op::Attention { q, k, v, batch, seq, heads, probs }, &[q, k, v])
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        let mut out = Tensor::zeros(&[rows.len(), n]);
        for (j, &r) in rows.iter().enumerate() {
            if r >= m {
                return Err(Error::Index(format!("row {r} of {m}")));
            }
            out.row_mut(j).copy_from_slice(xv.row(r));
        }
        self.push("gather_rows", out, Op::GatherRows { x, rows: rows.to_vec() }, &[x])
    }

    /// `n_rows × width` matrix whose rows are sums of the scattered part rows.
    pub fn scatter_rows(&mut self, n_rows: usize, width: usize, parts: Vec<(Var, Vec<usize>)>) -> Result<Var> {
        let mut out = Tensor::zeros(&[n_rows, width]);
        for (part, rows) in &parts {
            let pv = self.value(*part);
            if pv.shape() != [rows.len(), width] {
                return Err(shape_err!("scatter part {:?} for {} rows of width {width}", pv.shape(), rows.len()));
            }
            for (j, &r) in rows.iter().enumerate() {
                if r >= n_rows {
                    return Err(Error::Index(format!("scatter row {r} of {n_rows}")));
                }
                for (o, v) in out.row_mut(r).iter_mut().zip(pv.row(j)) {
                    *o += v;
                }
            }
        }
        let inputs: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        self.push("scatter_rows", out, Op::ScatterRows { parts }, &inputs)
    }

    /// Multiplies row `j` of `x` by `s[j]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, _) = self.value(x).dims2()?;
        if self.value(s).len() != m {
            return Err(shape_err!("{} row scales for {m} rows", self.value(s).len()));
        }
        let mut out = self.value(x).clone();
        for j in 0..m {
            let c = self.value(s).data()[j];
            out.row_mut(j).iter_mut().for_each(|v| *v *= c);
        }
        self.push("scale_rows", out, Op::ScaleRows { x, s }, &[x, s])
    }

    /// Renormalizes each row of a probability matrix over a kept index set:
    /// `w_ri = P_ri / sum_{j in keep_r} P_rj` for kept `i`, zero elsewhere.
    /// Rows with an empty keep set are all zero.
    pub fn renormalize(&mut self, probs: Var, keep: Vec<Vec<usize>>) -> Result<Var> {
        let pv = self.value(probs);
        let (m, n) = pv.dims2()?;
        if keep.len() != m {
            return Err(shape_err!("{} keep sets for {m} rows", keep.len()));
        }
        let mut out = Tensor::zeros(&[m, n]);
        for (r, ks) in keep.iter().enumerate() {
            let row = pv.row(r);
            if ks.iter().any(|&i| i >= n) {
                return Err(Error::Index(format!("renormalize index beyond {n} columns")));
            }
            let s: f64 = ks.iter().map(|&i| row[i]).sum();
            let o = out.row_mut(r);
            for &i in ks {
                o[i] = row[i] / s;
            }
        }
        self.push("renormalize", out, Op::Renorm { probs, keep }, &[probs])
    }

    /// Vector of the entries `x[r, c]` for each `(r, c)` in `at`.
    pub fn pick(&mut self, x: Var, at: Vec<(usize, usize)>) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        let mut vals = Vec::with_capacity(at.len());
        for &(r, c) in &at {
            if r >= m || c >= n {
                return Err(Error::Index(format!("pick ({r},{c}) in {m}x{n}")));
            }
            vals.push(xv.data()[r * n + c]);
        }
        let out = Tensor::new(vec![at.len()], vals)?;
        self.push("pick", out, Op::PickEntries { x, at }, &[x])
    }

    /// Column means of a matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if m == 0 {
            return Err(Error::Empty("mean over zero rows".into()));
        }
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(self.value(x).row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let out = Tensor::new(vec![n], out)?;
        self.push("mean_rows", out, Op::MeanRows(x), &[x])
    }

    /// Scalar `sum_k x_k * coeffs_k` over the flattened tensor.
    pub fn weighted_sum(&mut self, x: Var, coeffs: Vec<f64>) -> Result<Var> {
        if self.value(x).len() != coeffs.len() {
            return Err(shape_err!("{} coefficients for {} values", coeffs.len(), self.value(x).len()));
        }
        let s = self.value(x).data().iter().zip(&coeffs).map(|(a, b)| a * b).sum();
        self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum { x, coeffs }, &[x])
    }

    /// Weighted mean cross entropy of row-wise softmax(logits) against targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let loss = ops::weighted_cross_entropy(lv, targets, weights)?;
        let probs = ops::softmax_rows(lv)?;
        let total_w = weights.iter().sum();
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            total_w,
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Empty("sum of no terms".into()))?;
        let mut out = self.value(*first).clone();
        for v in &xs[1..] {
            if self.value(*v).shape() != out.shape() {
                return Err(shape_err!("sum of {:?} and {:?}", out.shape(), self.value(*v).shape()));
            }
            out.add_assign(self.value(*v));
        }
        self.push("sum", out, Op::Sum(xs.to_vec()), xs)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(shape_err!("backward from non-scalar of shape {:?}", self.value(root).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if first_bad_row(g).is_some() {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matmul operand");
                let n = self.value(*b).shape()[1];
                if wants(a) {
                    let da = slot(grads, *a, &[m, k]);
                    gemm(m, n, k, g.data(), Orient::Normal, self.value(*b).data(), Orient::Transposed, 1.0, da.data_mut());
                }
                if wants(b) {
                    let db = slot(grads, *b, &[k, n]);
                    gemm(k, m, n, self.value(*a).data(), Orient::Transposed, g.data(), Orient::Normal, 1.0, db.data_mut());
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        slot(grads, *v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if wants(x) {
                    slot(grads, *x, g.shape()).add_assign(g);
                }
                if wants(bias) {
                    let shape = self.value(*bias).shape().to_vec();
                    let db = slot(grads, *bias, &shape);
                    for i in 0..g.shape()[0] {
                        for (d, gv) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(x) {
                    let dx = slot(grads, *x, g.shape());
                    for (d, gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += c * gv;
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(x) {
                    let xv = self.value(*x).data();
                    let dx = slot(grads, *x, g.shape());
                    for ((d, gv), xi) in dx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        *d += gv * ops::gelu_derivative(*xi);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gn = self.value(*gain).data();
                let (m, n) = xv.dims2().expect("rms_norm operand");
                if wants(gain) {
                    let dg = slot(grads, *gain, &[n]);
                    for i in 0..m {
                        let (row, gr, r) = (xv.row(i), g.row(i), inv_rms[i]);
                        for j in 0..n {
                            dg.data_mut()[j] += gr[j] * row[j] * r;
                        }
                    }
                }
                if wants(x) {
                    let dx = slot(grads, *x, &[m, n]);
                    for i in 0..m {
                        let (row, gr, r) = (xv.row(i), g.row(i), inv_rms[i]);
                        let dot: f64 = (0..n).map(|j| gr[j] * gn[j] * row[j]).sum();
                        let c = r * r * r * dot / n as f64;
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d += r * gn[j] * gr[j] - row[j] * c;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if wants(x) {
                    let y = &node.value;
                    let dx = slot(grads, *x, g.shape());
                    for i in 0..y.shape()[0] {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(table) {
                    let shape = self.value(*table).shape().to_vec();
                    let dt = slot(grads, *table, &shape);
                    for (i, &id) in ids.iter().enumerate() {
                        for (d, gv) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                self.attention_backward(g, grads, (*q, *k, *v), (*batch, *seq, *heads), probs);
            }
            Op::GatherRows { x, rows } => {
                if wants(x) {
                    let shape = self.value(*x).shape().to_vec();
                    let dx = slot(grads, *x, &shape);
                    for (j, &r) in rows.iter().enumerate() {
                        for (d, gv) in dx.row_mut(r).iter_mut().zip(g.row(j)) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ScatterRows { parts } => {
                for (part, rows) in parts {
                    if wants(part) {
                        let shape = self.value(*part).shape().to_vec();
                        let dp = slot(grads, *part, &shape);
                        for (j, &r) in rows.iter().enumerate() {
                            for (d, gv) in dp.row_mut(j).iter_mut().zip(g.row(r)) {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let m = xv.shape()[0];
                if wants(x) {
                    let dx = slot(grads, *x, g.shape());
                    for j in 0..m {
                        let c = sv.data()[j];
                        for (d, gv) in dx.row_mut(j).iter_mut().zip(g.row(j)) {
                            *d += c * gv;
                        }
                    }
                }
                if wants(s) {
                    let ds = slot(grads, *s, &[m]);
                    for j in 0..m {
                        ds.data_mut()[j] += g.row(j).iter().zip(xv.row(j)).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Renorm { probs, keep } => {
                if wants(probs) {
                    let pv = self.value(*probs);
                    let w = &node.value;
                    let shape = pv.shape().to_vec();
                    let dp = slot(grads, *probs, &shape);
                    for (r, ks) in keep.iter().enumerate() {
                        if ks.is_empty() {
                            continue;
                        }
                        let s: f64 = ks.iter().map(|&i| pv.row(r)[i]).sum();
                        let gw: f64 = ks.iter().map(|&i| g.row(r)[i] * w.row(r)[i]).sum();
                        let gr = g.row(r).to_vec();
                        let drow = dp.row_mut(r);
                        for &j in ks {
                            drow[j] += (gr[j] - gw) / s;
                        }
                    }
                }
            }
            Op::PickEntries { x, at } => {
                if wants(x) {
                    let shape = self.value(*x).shape().to_vec();
                    let n = shape[1];
                    let dx = slot(grads, *x, &shape);
                    for (j, &(r, c)) in at.iter().enumerate() {
                        dx.data_mut()[r * n + c] += g.data()[j];
                    }
                }
            }
            Op::MeanRows(x) => {
                if wants(x) {
                    let shape = self.value(*x).shape().to_vec();
                    let m = shape[0] as f64;
                    let dx = slot(grads, *x, &shape);
                    for i in 0..shape[0] {
                        for (d, gv) in dx.row_mut(i).iter_mut().zip(g.data()) {
                            *d += gv / m;
                        }
                    }
                }
            }
            Op::WeightedSum { x, coeffs } => {
                if wants(x) {
                    let shape = self.value(*x).shape().to_vec();
                    let gs = g.item();
                    let dx = slot(grads, *x, &shape);
                    for (d, c) in dx.data_mut().iter_mut().zip(coeffs) {
                        *d += gs * c;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, total_w, probs } => {
                if wants(logits) {
                    let gs = g.item();
                    let shape = probs.shape().to_vec();
                    let dl = slot(grads, *logits, &shape);
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let c = gs * w / total_w;
                        let pr = probs.row(i);
                        let drow = dl.row_mut(i);
                        for (j, d) in drow.iter_mut().enumerate() {
                            *d += c * pr[j];
                        }
                        drow[t] -= c;
                    }
                }
            }
            Op::Sum(xs) => {
                for v in xs {
                    if wants(v) {
                        slot(grads, *v, g.shape()).add_assign(g);
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        (q, k, v): (Var, Var, Var),
        (batch, seq, heads): (usize, usize, usize),
        probs: &[f64],
    ) {
        let (rows, d) = self.value(q).dims2().expect("attention operand");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..seq {
                    let gt = &g.data()[(b * seq + t) * d + off..][..dh];
                    let p = &probs[((b * heads + h) * seq + t) * seq..][..seq];
                    for s in 0..=t {
                        let base = (b * seq + s) * d + off;
                        dp[s] = gt.iter().zip(&vv[base..base + dh]).map(|(x, y)| x * y).sum();
                        for (dve, ge) in dv[base..base + dh].iter_mut().zip(gt) {
                            *dve += p[s] * ge;
                        }
                    }
                    let dot: f64 = (0..=t).map(|s| p[s] * dp[s]).sum();
                    let tb = (b * seq + t) * d + off;
                    for s in 0..=t {
                        let ds = p[s] * (dp[s] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let sb = (b * seq + s) * d + off;
                        for e in 0..dh {
                            dq[tb + e] += ds * kv[sb + e];
                            dk[sb + e] += ds * qv[tb + e];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].needs_grad {
                let t = Tensor::new(vec![rows, d], buf).expect("attention grad shape");
                slot(grads, var, &[rows, d]).add_assign(&t);
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}
