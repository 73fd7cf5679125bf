//! Reverse-mode gradients over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in exact reverse order of recording and accumulates
//! adjoints additively, so a value consumed twice receives the sum of both
//! contributions. Only leaves registered with [`Tape::param`] are reported;
//! constants (frozen weights, inputs) get no gradient entry and adjoints are
//! not computed for nodes that cannot reach a parameter.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

const LAYER_NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Sqrt(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    CosineRows {
        a: Var,
        b: Var,
        row_norms: Vec<f64>,
        b_norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    attention_macs: u64,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Multiply-accumulates executed by [`Tape::attention_matmul`] so far.
    pub fn attention_macs(&self) -> u64 {
        self.attention_macs
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf. Names must be unique within one tape.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let name = name.into();
        if self.params.iter().any(|(n, _)| *n == name) {
            return Err(Error::Contract(format!("parameter {name:?} registered twice")));
        }
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name, v));
        Ok(v)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Matrix product whose multiply-accumulates count toward
    /// [`Tape::attention_macs`].
    pub fn attention_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.matmul(a, b)?;
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let n = self.value(b).cols();
        self.attention_macs += (m * k * n) as u64;
        Ok(out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `a[m×n] + bias[n]`, bias broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.cols();
        if bv.numel() != n {
            return Err(Error::dim("add_row_bias", format!("bias {:?} for width {n}", bv.shape())));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddRowBias(a, bias), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip("mul", self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddConst(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` of width n.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != n || b.numel() != n {
            return Err(Error::dim("layer_norm", format!("affine width vs {n}")));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().fold(0.0, |acc, &v| acc + v) / n as f64;
            let var = row.iter().fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&values)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "nothing to concatenate"))?;
        let m = self.value(*first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_parts(vec![m, total], data);
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", format!("cols {start}..{} of {n}", start + len)));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let out = Tensor::from_parts(vec![m, len], data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite("sqrt of a negative value"));
        }
        let out = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sqrt(a), rg))
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, n) = (lv.rows(), lv.cols());
        if labels.len() != m {
            return Err(Error::dim("cross_entropy", format!("{} labels for {m} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
            return Err(Error::Contract(format!("label {bad} out of range for {n} classes")));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite("cross_entropy logits"));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            total += log_sum_exp(row) - row[y];
            tensor::softmax_in_place(&mut probs[r * n..(r + 1) * n]);
        }
        let out = Tensor::scalar(total / m as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Cosine similarity of every row of `a[m×n]` with the vector `b[n]`,
    /// as an `[m]` tensor.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.cols();
        if bv.numel() != n {
            return Err(Error::dim("cosine_rows", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let b_norm = bv.norm();
        if b_norm == 0.0 {
            return Err(Error::ZeroNorm("cosine_rows reference"));
        }
        let mut row_norms = Vec::with_capacity(av.rows());
        let mut out = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let rn = tensor::norm(av.row(r));
            if rn == 0.0 {
                return Err(Error::ZeroNorm("cosine_rows input row"));
            }
            row_norms.push(rn);
            out.push(tensor::dot(av.row(r), bv.data()) / (rn * b_norm));
        }
        let out = Tensor::from_parts(vec![av.rows()], out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            Op::CosineRows {
                a,
                b,
                row_norms,
                b_norm,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every registered
    /// parameter. Parameters with no path to `loss` get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut adj);
            if matches!(node.op, Op::Leaf) {
                adj[idx] = Some(g);
            }
        }

        let mut grads = BTreeMap::new();
        for (name, v) in &self.params {
            let shape = self.value(*v).shape().to_vec();
            let g = match adj.get_mut(v.0).and_then(Option::take) {
                Some(data) => Tensor::from_parts(shape, data),
                None => Tensor::zeros(&shape),
            };
            grads.insert(name.clone(), g);
        }
        Ok(Gradients(grads))
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let acc = |adj: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>| match &mut adj[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let bt = tensor::transpose_data(bv.data(), k, n);
                    let mut da = vec![0.0; m * k];
                    tensor::matmul_into(g, &bt, &mut da, m, n, k);
                    acc(adj, *a, da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let at = tensor::transpose_data(av.data(), m, k);
                    let mut db = vec![0.0; k * n];
                    tensor::matmul_into(&at, g, &mut db, k, m, n);
                    acc(adj, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                acc(adj, *a, tensor::transpose_data(g, m, n));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(adj, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(adj, *b, g.to_vec());
                }
            }
            Op::AddRowBias(a, bias) => {
                if self.wants(*a) {
                    acc(adj, *a, g.to_vec());
                }
                if self.wants(*bias) {
                    let n = node.value.cols();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    acc(adj, *bias, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    acc(adj, *a, g.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.wants(*b) {
                    acc(adj, *b, g.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => acc(adj, *a, g.iter().map(|&x| x * c).collect()),
            Op::AddConst(a) => acc(adj, *a, g.to_vec()),
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut da = vec![0.0; y.len()];
                for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let inner = tensor::dot(yr, gr);
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - inner);
                    }
                }
                acc(adj, *a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let gam = self.value(*gamma).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let sum_dh = dh.iter().fold(0.0, |s, &v| s + v);
                        let sum_dh_h = tensor::dot(&dh, hr);
                        let scale = inv_std[r] / n as f64;
                        for c in 0..n {
                            dx[r * n + c] = scale * (n as f64 * dh[c] - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                    acc(adj, *x, dx);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                    acc(adj, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        for c in 0..n {
                            db[c] += gr[c];
                        }
                    }
                    acc(adj, *beta, db);
                }
            }
            Op::Gelu(a) => {
                let xs = self.value(*a).data();
                let da = xs
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                acc(adj, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        acc(adj, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(self.value(p).numel());
                        for row in g.chunks(total) {
                            dp.extend_from_slice(&row[col..col + w]);
                        }
                        acc(adj, p, dp);
                    }
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let n = node.value.cols();
                let mut da = vec![0.0; self.value(*a).numel()];
                da[start * n..start * n + g.len()].copy_from_slice(g);
                acc(adj, *a, da);
            }
            Op::SliceCols(a, start) => {
                let full = self.value(*a).cols();
                let w = node.value.cols();
                let mut da = vec![0.0; self.value(*a).numel()];
                for (r, gr) in g.chunks(w).enumerate() {
                    da[r * full + start..r * full + start + w].copy_from_slice(gr);
                }
                acc(adj, *a, da);
            }
            Op::Sum(a) => acc(adj, *a, vec![g[0]; self.value(*a).numel()]),
            Op::Sqrt(a) => {
                let da = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| if s == 0.0 { 0.0 } else { gv * 0.5 / s })
                    .collect();
                acc(adj, *a, da);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = self.value(*logits).cols();
                let scale = g[0] / labels.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|&p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dl[r * n + y] -= scale;
                }
                acc(adj, *logits, dl);
            }
            Op::CosineRows {
                a,
                b,
                row_norms,
                b_norm,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.cols();
                let cos = node.value.data();
                if self.wants(*a) {
                    let mut da = vec![0.0; av.numel()];
                    for r in 0..av.rows() {
                        let ar = av.row(r);
                        let rn = row_norms[r];
                        for c in 0..n {
                            da[r * n + c] =
                                g[r] * (bv.data()[c] / (rn * b_norm) - cos[r] * ar[c] / (rn * rn));
                        }
                    }
                    acc(adj, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n];
                    for r in 0..av.rows() {
                        let ar = av.row(r);
                        let rn = row_norms[r];
                        for c in 0..n {
                            db[c] += g[r]
                                * (ar[c] / (rn * b_norm) - cos[r] * bv.data()[c] / (b_norm * b_norm));
                        }
                    }
                    acc(adj, *b, db);
                }
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().fold(0.0, |acc, &v| acc + (v - max).exp()).ln()
}
