//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a linear tape: every operation appends a node whose inputs
//! were created earlier, so creation order is a topological order and the
//! backward pass is a single reverse sweep. All operations treat their
//! operands as matrices; rank-1 tensors behave as a single row.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to the row variance before the square root in layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanPoolTime(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    L1 {
        pred: Var,
        target: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// The computation tape. Confined to one worker; build one per sample.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

// a: m x k, b: k x n
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// a: m x k, b: n x k -> a * b^T
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// a: k x m, b: k x n -> a^T * b
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
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

    /// Registers an input. Non-finite inputs are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf input".into()));
        }
        Ok(self.push_raw(value, Op::Leaf, requires_grad))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node that requires grad, after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if dims(ta) != dims(tb) {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        Ok(dims(ta))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(Error::dim("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (n, k2) = dims(self.value(b));
        if k != k2 {
            return Err(Error::dim("matmul_t", self.value(a).shape(), self.value(b).shape()));
        }
        let out = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul_t", Tensor::matrix(m, n, out), Op::MatMulT(a, b), &[a, b])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push("add", Tensor::matrix(r, c, out), Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", Tensor::matrix(r, c, out), Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", Tensor::matrix(r, c, out), Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        if dims(self.value(row)) != (1, c) {
            return Err(Error::dim("add_row", self.value(a).shape(), self.value(row).shape()));
        }
        let rv = self.value(row).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        self.push("add_row", Tensor::matrix(r, c, out), Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        self.push("scale", Tensor::matrix(r, c, out), Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        let out = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        self.push("relu", Tensor::matrix(r, c, out), Op::Relu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(a).data().chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut sum = 0.0;
            for &x in row {
                let e = (x - max).exp();
                sum += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= sum;
            }
        }
        self.push("softmax_rows", Tensor::matrix(r, c, out), Op::SoftmaxRows(a), &[a])
    }

    /// Per-row normalization to zero mean and unit variance, then `gain` and `bias` (both `1 x c`).
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        for p in [gain, bias] {
            if dims(self.value(p)) != (1, c) {
                return Err(Error::dim(
                    "layer_norm_rows",
                    self.value(x).shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push(
            "layer_norm_rows",
            Tensor::matrix(r, c, out),
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Mean over the time (row) axis: `t x d -> 1 x d`.
    pub fn mean_pool_time(&mut self, x: Var) -> Result<Var> {
        let (t, d) = dims(self.value(x));
        let mut out = vec![0.0; d];
        for row in self.value(x).data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= t as f64;
        }
        self.push("mean_pool_time", Tensor::matrix(1, d, out), Op::MeanPoolTime(x), &[x])
    }

    /// Inverted dropout. With `train == false` (or `rate == 0`) this returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let (r, c) = dims(self.value(x));
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push("dropout", Tensor::matrix(r, c, out), Op::Dropout { x, mask }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let r = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(Error::dim(
                    "concat_cols",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            "concat_cols",
            Tensor::matrix(r, total, out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", self.value(x).shape(), &[start, end]));
        }
        let out: Vec<f64> = (0..r).flat_map(|i| self.value(x).row(i)[start..end].to_vec()).collect();
        self.push(
            "slice_cols",
            Tensor::matrix(r, end - start, out),
            Op::SliceCols { x, start },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `-log softmax(logits)[label]` for a single `1 x C` row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = dims(t);
        if r != 1 {
            return Err(Error::dim("cross_entropy", t.shape(), &[1, c]));
        }
        if c < 2 {
            return Err(Error::contract(format!("cross_entropy needs >= 2 classes, got {c}")));
        }
        if label >= c {
            return Err(Error::contract(format!("label {label} out of range for {c} classes")));
        }
        let z = t.data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let probs: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - z[label];
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, label, probs },
            &[logits],
        )
    }

    /// Mean absolute error over all entries.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("l1_loss", pred, target)?;
        let n = self.value(pred).numel() as f64;
        let s: f64 = self.zip_with(pred, target, |p, t| (p - t).abs()).iter().sum();
        self.push(
            "l1_loss",
            Tensor::scalar(s / n),
            Op::L1 { pred, target },
            &[pred, target],
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &gout, &mut grads);
            if gout.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at node {i}")));
            }
            accumulate(&mut self.nodes[i].grad, gout);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, delta: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = dims(ta);
                let n = tb.cols();
                if self.requires_grad(*a) {
                    send(*a, mm_nt(g, tb.data(), m, n, k));
                }
                if self.requires_grad(*b) {
                    send(*b, mm_tn(ta.data(), g, m, k, n));
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = dims(ta);
                let n = tb.rows();
                if self.requires_grad(*a) {
                    send(*a, mm(g, tb.data(), m, n, k));
                }
                if self.requires_grad(*b) {
                    send(*b, mm_tn(g, ta.data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::AddRow(a, row) => {
                send(*a, g.to_vec());
                let c = self.value(*row).cols();
                let mut dr = vec![0.0; c];
                for chunk in g.chunks(c) {
                    for (d, v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                send(*row, dr);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                send(*a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                send(*b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
            Op::Relu(a) => {
                let ta = self.value(*a);
                send(
                    *a,
                    g.iter()
                        .zip(ta.data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    dx.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                send(*a, dx);
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gv = self.value(*gain).data();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, hr), &is) in g.chunks(c).zip(xhat.chunks(c)).zip(inv_std) {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..c {
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let n = c as f64;
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        dx.push(is / n * (n * dh - sum_dh - hr[j] * sum_dh_h));
                    }
                }
                send(*x, dx);
                send(*gain, dg);
                send(*bias, db);
            }
            Op::MeanPoolTime(x) => {
                let t = self.value(*x).rows();
                let scale = 1.0 / t as f64;
                let row: Vec<f64> = g.iter().map(|v| v * scale).collect();
                send(*x, row.iter().copied().cycle().take(t * row.len()).collect());
            }
            Op::Dropout { x, mask } => send(*x, g.iter().zip(mask).map(|(a, b)| a * b).collect()),
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let d: Vec<f64> = g
                        .chunks(total)
                        .flat_map(|row| row[offset..offset + pc].iter().copied())
                        .collect();
                    send(p, d);
                    offset += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = dims(self.value(*x));
                let w = node.value.cols();
                let mut d = vec![0.0; r * c];
                for (i, row) in g.chunks(w).enumerate() {
                    d[i * c + start..i * c + start + w].copy_from_slice(row);
                }
                send(*x, d);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let d = probs
                    .iter()
                    .enumerate()
                    .map(|(j, p)| g[0] * (p - if j == *label { 1.0 } else { 0.0 }))
                    .collect();
                send(*logits, d);
            }
            Op::L1 { pred, target } => {
                let n = self.value(*pred).numel() as f64;
                let sign: Vec<f64> = self
                    .zip_with(*pred, *target, |p, t| {
                        if p > t {
                            1.0
                        } else if p < t {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .into_iter()
                    .map(|s| g[0] * s / n)
                    .collect();
                send(*target, sign.iter().map(|v| -v).collect());
                send(*pred, sign);
            }
        }
    }
}
