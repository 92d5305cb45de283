//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! Every operation appends a node to the [`Tape`]; nodes are only ever
//! appended, so tape order is a topological order and [`Tape::backward`]
//! walks it in reverse. Vectors are `1 x n` rows and scalars are `1 x 1`.

use std::sync::Arc;

use super::{AttentionMask, Tensor};
use crate::{ensure, Error, Result};

/// Handle to a node on a [`Tape`].
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
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Transpose(Var),
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64>, mask: Arc<AttentionMask>, scale: f64 },
    Sum(Var),
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf. Leaves the loss does not reach
    /// (including leaves reached only through a stop-gradient) get exact zeros.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

/// Recording of a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-10;

fn dims(t: &Tensor) -> Result<(usize, usize)> {
    ensure!(t.shape().len() == 2, "expected a 2-D tensor, got shape {:?}", t.shape());
    Ok((t.shape()[0], t.shape()[1]))
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("internal shape bookkeeping")
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax of a slice, with `-inf` entries mapping to exactly zero.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

/// Numerically stable log-softmax of a slice.
pub fn log_softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|&v| v - lse).collect()
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims(self.value(a))?;
        let (k2, m) = dims(self.value(b))?;
        ensure!(k == k2, "matmul shape mismatch: {n}x{k} by {k2}x{m}");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(mat(n, m, out), Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.value(a).shape() == self.value(b).shape(),
            "{what} shape mismatch: {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let shape = self.value(a).shape().to_vec();
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, add: bool) -> Result<Var> {
        let (n, m) = dims(self.value(a))?;
        ensure!(
            self.value(row).numel() == m,
            "row broadcast needs {m} elements, got shape {:?}",
            self.value(row).shape()
        );
        let r = self.value(row).data();
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(if add { av[i * m + j] + r[j] } else { av[i * m + j] * r[j] });
            }
        }
        let rg = self.rg(&[a, row]);
        let op = if add { Op::AddRow(a, row) } else { Op::MulRow(a, row) };
        Ok(self.push(mat(n, m, out), op, rg))
    }

    /// `a + row` with `row` broadcast over the rows of `a` (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, true)
    }

    /// `a * row` elementwise with `row` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, false)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| gelu(x)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Gelu(a), rg)
    }

    /// Per-row normalization to zero mean and unit variance, no affine part.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (n, m) = dims(self.value(a))?;
        let av = self.value(a).data();
        let mut out = vec![0.0; n * m];
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = &av[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..m {
                out[i * m + j] = (row[j] - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(mat(n, m, out), Op::LayerNorm { x: a, inv_std }, rg))
    }

    fn softmax_last(&mut self, a: Var, log: bool) -> Result<Var> {
        let (n, m) = dims(self.value(a))?;
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = &av[i * m..(i + 1) * m];
            ensure!(
                row.iter().any(|v| v.is_finite()),
                "softmax row {i} has no finite entry"
            );
            if log {
                out.extend(log_softmax_slice(row));
            } else {
                out.extend(softmax_slice(row));
            }
        }
        let rg = self.rg(&[a]);
        let op = if log { Op::LogSoftmax(a) } else { Op::Softmax(a) };
        Ok(self.push(mat(n, m, out), op, rg))
    }

    /// Softmax along `axis` of a 2-D tensor. `-inf` entries get probability 0.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => self.softmax_last(a, false),
            0 => {
                let t = self.transpose(a)?;
                let s = self.softmax_last(t, false)?;
                self.transpose(s)
            }
            _ => Err(Error::Contract(format!("softmax axis {axis} out of range for a 2-D tensor"))),
        }
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_last(a, true)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat_cols of nothing");
        let n = dims(self.value(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims(self.value(p))?;
            ensure!(r == n, "concat_cols row mismatch: {r} vs {n}");
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(mat(n, total, out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat_rows of nothing");
        let m = dims(self.value(parts[0]))?.1;
        let mut n = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = dims(self.value(p))?;
            ensure!(c == m, "concat_rows column mismatch: {c} vs {m}");
            n += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(mat(n, m, out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = dims(self.value(a))?;
        ensure!(start + len <= m, "slice_cols {start}..{} out of range for {m} columns", start + len);
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&av[i * m + start..i * m + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(mat(n, len, out), Op::SliceCols { x: a, start }, rg))
    }

    /// Gathers rows (embedding lookup when `a` is a table).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = dims(self.value(a))?;
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            ensure!(r < n, "row index {r} out of range for {n} rows");
            out.extend_from_slice(&av[r * m..(r + 1) * m]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(mat(rows.len(), m, out), Op::SelectRows { x: a, rows: rows.to_vec() }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = dims(self.value(a))?;
        let av = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = av[i * m + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(mat(m, n, out), Op::Transpose(a), rg))
    }

    /// Scaled dot-product attention restricted to visible keys.
    ///
    /// Masked logits are treated as `-inf`: they are skipped entirely, so an
    /// output row is bit-identical to attending over the visible keys alone.
    pub fn masked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &Arc<AttentionMask>,
        scale: f64,
    ) -> Result<Var> {
        let (n, d) = dims(self.value(q))?;
        let (m, dk) = dims(self.value(k))?;
        let (mv, dv) = dims(self.value(v))?;
        ensure!(d == dk, "attention query/key width mismatch: {d} vs {dk}");
        ensure!(m == mv, "attention key/value count mismatch: {m} vs {mv}");
        ensure!(
            mask.queries() == n && mask.keys() == m,
            "mask is {}x{}, attention is {n}x{m}",
            mask.queries(),
            mask.keys()
        );
        mask.validate()?;
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut probs = vec![0.0; n * m];
        let mut out = vec![0.0; n * dv];
        let mut scores = vec![0.0; m];
        for i in 0..n {
            let qi = &qv[i * d..(i + 1) * d];
            let row = mask.row(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..m {
                if row[j] {
                    let kj = &kv[j * d..(j + 1) * d];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                }
            }
            let mut z = 0.0;
            for j in 0..m {
                if row[j] {
                    let w = (scores[j] - max).exp();
                    probs[i * m + j] = w;
                    z += w;
                }
            }
            let orow = &mut out[i * dv..(i + 1) * dv];
            for j in 0..m {
                if row[j] {
                    let p = probs[i * m + j] / z;
                    probs[i * m + j] = p;
                    for (o, &x) in orow.iter_mut().zip(&vv[j * dv..(j + 1) * dv]) {
                        *o += p * x;
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        let op = Op::Attention { q, k, v, probs, mask: Arc::clone(mask), scale };
        Ok(self.push(mat(n, dv, out), op, rg))
    }

    /// Sum of all elements, as a `1 x 1` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// The stop-gradient operator: same value, no backward edge.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        ensure!(lv.numel() == 1, "backward needs a scalar loss, got shape {:?}", lv.shape());
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], var: Var, len: usize, f: impl FnOnce(&mut [f64])) {
            let slot = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            let numel = |v: &Var| self.nodes[v.0].value.numel();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::StopGradient => {}
                Op::MatMul(a, b) => {
                    let (n, k) = dims(self.value(*a))?;
                    let m = self.value(*b).cols();
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    if needs(a) {
                        acc(&mut grads, *a, n * k, |ga| {
                            for i in 0..n {
                                let grow = &g[i * m..(i + 1) * m];
                                for p in 0..k {
                                    let brow = &bv[p * m..(p + 1) * m];
                                    ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                                }
                            }
                        });
                    }
                    if needs(b) {
                        acc(&mut grads, *b, k * m, |gb| {
                            for i in 0..n {
                                let grow = &g[i * m..(i + 1) * m];
                                for p in 0..k {
                                    let aip = av[i * k + p];
                                    for (o, &x) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                        *o += aip * x;
                                    }
                                }
                            }
                        });
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if needs(a) {
                        acc(&mut grads, *a, g.len(), |ga| ga.iter_mut().zip(&g).for_each(|(o, x)| *o += x));
                    }
                    if needs(b) {
                        acc(&mut grads, *b, g.len(), |gb| gb.iter_mut().zip(&g).for_each(|(o, x)| *o += sign * x));
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    if needs(a) {
                        acc(&mut grads, *a, g.len(), |ga| {
                            for i in 0..g.len() {
                                ga[i] += g[i] * bv[i];
                            }
                        });
                    }
                    if needs(b) {
                        acc(&mut grads, *b, g.len(), |gb| {
                            for i in 0..g.len() {
                                gb[i] += g[i] * av[i];
                            }
                        });
                    }
                }
                Op::AddRow(a, r) | Op::MulRow(a, r) => {
                    let is_add = matches!(node.op, Op::AddRow(..));
                    let m = self.value(*r).numel();
                    let n = g.len() / m;
                    let av = self.value(*a).data();
                    let rv = self.value(*r).data();
                    if needs(a) {
                        acc(&mut grads, *a, g.len(), |ga| {
                            for i in 0..n {
                                for j in 0..m {
                                    ga[i * m + j] += if is_add { g[i * m + j] } else { g[i * m + j] * rv[j] };
                                }
                            }
                        });
                    }
                    if needs(r) {
                        acc(&mut grads, *r, m, |gr| {
                            for i in 0..n {
                                for j in 0..m {
                                    gr[j] += if is_add { g[i * m + j] } else { g[i * m + j] * av[i * m + j] };
                                }
                            }
                        });
                    }
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, *a, g.len(), |ga| ga.iter_mut().zip(&g).for_each(|(o, x)| *o += c * x));
                }
                Op::Gelu(a) => {
                    let av = self.value(*a).data();
                    acc(&mut grads, *a, g.len(), |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * gelu_grad(av[i]);
                        }
                    });
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = node.value.data();
                    let m = node.value.cols();
                    let n = g.len() / m;
                    acc(&mut grads, *x, g.len(), |gx| {
                        for i in 0..n {
                            let gr = &g[i * m..(i + 1) * m];
                            let yr = &y[i * m..(i + 1) * m];
                            let mean_g = gr.iter().sum::<f64>() / m as f64;
                            let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                            for j in 0..m {
                                gx[i * m + j] += inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                            }
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let m = node.value.cols();
                    let n = g.len() / m;
                    acc(&mut grads, *x, g.len(), |gx| {
                        for i in 0..n {
                            let gr = &g[i * m..(i + 1) * m];
                            let yr = &y[i * m..(i + 1) * m];
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..m {
                                gx[i * m + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.data();
                    let m = node.value.cols();
                    let n = g.len() / m;
                    acc(&mut grads, *x, g.len(), |gx| {
                        for i in 0..n {
                            let gr = &g[i * m..(i + 1) * m];
                            let total: f64 = gr.iter().sum();
                            for j in 0..m {
                                gx[i * m + j] += gr[j] - y[i * m + j].exp() * total;
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let n = node.value.rows();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if needs(p) {
                            acc(&mut grads, *p, n * w, |gp| {
                                for i in 0..n {
                                    for j in 0..w {
                                        gp[i * w + j] += g[i * total + offset + j];
                                    }
                                }
                            });
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = numel(p);
                        if needs(p) {
                            acc(&mut grads, *p, len, |gp| {
                                gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(o, x)| *o += x)
                            });
                        }
                        offset += len;
                    }
                }
                Op::SliceCols { x, start } => {
                    let w = node.value.cols();
                    let n = node.value.rows();
                    let m = self.value(*x).cols();
                    acc(&mut grads, *x, n * m, |gx| {
                        for i in 0..n {
                            for j in 0..w {
                                gx[i * m + start + j] += g[i * w + j];
                            }
                        }
                    });
                }
                Op::SelectRows { x, rows } => {
                    let m = node.value.cols();
                    let len = numel(x);
                    acc(&mut grads, *x, len, |gx| {
                        for (i, &r) in rows.iter().enumerate() {
                            for j in 0..m {
                                gx[r * m + j] += g[i * m + j];
                            }
                        }
                    });
                }
                Op::Transpose(x) => {
                    let (n, m) = dims(self.value(*x))?;
                    acc(&mut grads, *x, n * m, |gx| {
                        for i in 0..n {
                            for j in 0..m {
                                gx[i * m + j] += g[j * n + i];
                            }
                        }
                    });
                }
                Op::Attention { q, k, v, probs, mask, scale } => {
                    let (n, d) = dims(self.value(*q))?;
                    let m = self.value(*k).rows();
                    let dv = self.value(*v).cols();
                    let qv = self.value(*q).data();
                    let kv = self.value(*k).data();
                    let vv = self.value(*v).data();
                    let mut gq = vec![0.0; n * d];
                    let mut gk = vec![0.0; m * d];
                    let mut gv = vec![0.0; m * dv];
                    let mut dp = vec![0.0; m];
                    for i in 0..n {
                        let row = mask.row(i);
                        let gout = &g[i * dv..(i + 1) * dv];
                        let mut dot = 0.0;
                        for j in 0..m {
                            if row[j] {
                                let vj = &vv[j * dv..(j + 1) * dv];
                                dp[j] = gout.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot += dp[j] * probs[i * m + j];
                            }
                        }
                        for j in 0..m {
                            if !row[j] {
                                continue;
                            }
                            let p = probs[i * m + j];
                            let ds = p * (dp[j] - dot) * scale;
                            for (o, x) in gv[j * dv..(j + 1) * dv].iter_mut().zip(gout) {
                                *o += p * x;
                            }
                            for t in 0..d {
                                gq[i * d + t] += ds * kv[j * d + t];
                                gk[j * d + t] += ds * qv[i * d + t];
                            }
                        }
                    }
                    for (var, gvec) in [(*q, gq), (*k, gk), (*v, gv)] {
                        if needs(&var) {
                            let len = gvec.len();
                            acc(&mut grads, var, len, |gx| gx.iter_mut().zip(&gvec).for_each(|(o, x)| *o += x));
                        }
                    }
                }
                Op::Sum(a) => {
                    let len = numel(a);
                    acc(&mut grads, *a, len, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(data) => Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"),
                    None => Tensor::zeros(node.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}
