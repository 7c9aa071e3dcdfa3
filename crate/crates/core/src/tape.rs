//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A [`Tape`] records every operation of one forward computation. Values are
//! materialized eagerly; [`Tape::backward`] then walks the tape in reverse and
//! accumulates vector-Jacobian products into a [`Gradients`] table.

use crate::error::{Error, Result};
use crate::tensor::{self, gemm, require_matrix, upsample_taps, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// How the contrastive denominator is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastDenominator {
    /// Sum over classes outside the positive set only.
    #[default]
    NegativesOnly,
    /// Sum over all classes (standard InfoNCE). Not the default objective.
    AllClasses,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        stride: usize,
    },
    Upsample(Var),
    TakeRows {
        x: Var,
        index: Vec<usize>,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    Bce {
        p: Var,
        y: Vec<f64>,
    },
    Contrast {
        s: Var,
        // Per contributing row: its gradient weights, already scaled by 1/T'.
        weights: Vec<(usize, Vec<f64>)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Summary of a contrastive-loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ContrastStats {
    /// Timesteps that contributed to the average.
    pub counted: usize,
    /// Timesteps with an empty positive set.
    pub empty: usize,
    /// Timesteps whose positive set covered every class (no negatives).
    pub saturated: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("add", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds vector `b` (length = cols of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = vx.cols();
        if vb.len() != c {
            return Err(Error::dim("add_row", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bias) in row.iter_mut().zip(vb.data()) {
                *o += bias;
            }
        }
        Ok(self.derived(out, Op::AddRow(x, b), &[x, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("mul", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.derived(out, Op::Scale(x, s), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = tensor::sigmoid(self.value(x));
        self.derived(out, Op::Sigmoid(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu(v).0);
        self.derived(out, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = tensor::softmax_last(self.value(x));
        self.derived(out, Op::Softmax(x), &[x])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::dim(
                "layer_norm",
                vx.shape(),
                self.value(gain).shape(),
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vx.clone();
        let mut means = Vec::with_capacity(vx.rows());
        let mut rstds = Vec::with_capacity(vx.rows());
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            mean: means,
            rstd: rstds,
        };
        Ok(self.derived(out, op, &[x, gain, bias]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts
            .iter()
            .any(|p| self.value(*p).rows() != rows || self.value(*p).rank() != 2)
        {
            let shapes: Vec<usize> = parts.iter().flat_map(|p| self.shape(*p).to_vec()).collect();
            return Err(Error::dim("concat_cols", self.shape(parts[0]), &shapes));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = require_matrix("slice_cols", self.value(x))?;
        if len == 0 || start + len > cols {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        Ok(self.derived(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let out = tensor::conv1d(self.value(x), self.value(kernel), stride)?;
        Ok(self.derived(out, Op::Conv1d { x, kernel, stride }, &[x, kernel]))
    }

    pub fn upsample(&mut self, x: Var, target_len: usize) -> Result<Var> {
        let out = tensor::upsample_linear(self.value(x), target_len)?;
        Ok(self.derived(out, Op::Upsample(x), &[x]))
    }

    /// Gathers rows by index (indices may repeat).
    pub fn take_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        let (rows, c) = require_matrix("take_rows", vx)?;
        if index.is_empty() || index.iter().any(|&i| i >= rows) {
            return Err(Error::dim("take_rows", vx.shape(), &[index.len()]));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            data.extend_from_slice(vx.row(i));
        }
        let out = Tensor::matrix(index.len(), c, data)?;
        Ok(self.derived(out, Op::TakeRows { x, index }, &[x]))
    }

    /// Scales every row to unit L2 norm.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        let mut norms = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        self.derived(out, Op::RowNormalize { x, norms }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.derived(out, Op::Sum(x), &[x])
    }

    /// Σ wᵢ·xᵢ over scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|(v, w)| w * self.scalar(*v)).sum();
        let inputs: Vec<Var> = terms.iter().map(|(v, _)| *v).collect();
        self.derived(
            Tensor::scalar(total),
            Op::WeightedSum(terms.to_vec()),
            &inputs,
        )
    }

    /// `-(1/T) Σₜ Σ_c [y log p + (1 - y) log(1 - p)]` with `p` clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce(&mut self, p: Var, y: &Tensor) -> Result<Var> {
        let vp = self.value(p);
        if vp.shape() != y.shape() {
            return Err(Error::dim("bce", y.shape(), vp.shape()));
        }
        let t = vp.rows() as f64;
        let mut acc = 0.0;
        for (&pv, &yv) in vp.data().iter().zip(y.data()) {
            let pc = tensor::clamp_prob(pv);
            acc += yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln();
        }
        let out = Tensor::scalar(-acc / t);
        let op = Op::Bce {
            p,
            y: y.data().to_vec(),
        };
        Ok(self.derived(out, op, &[p]))
    }

    /// Multi-positive contrastive loss over a T×C similarity matrix (already temperature
    /// scaled). For each row with a non-empty positive set β that leaves at least one
    /// negative, the row term is `(1/|β|) Σ_{e∈β} -log(exp(s_e) / Σ_{c ∈ denom} exp(s_c))`;
    /// the result averages these terms over contributing rows.
    pub fn contrast(
        &mut self,
        s: Var,
        positives: &[Vec<usize>],
        denominator: ContrastDenominator,
    ) -> Result<(Var, ContrastStats)> {
        let vs = self.value(s);
        let (t, c) = require_matrix("contrast", vs)?;
        if positives.len() != t {
            return Err(Error::dim("contrast", vs.shape(), &[positives.len()]));
        }
        let mut stats = ContrastStats::default();
        let mut rows = Vec::new();
        let mut total = 0.0;
        for (r, beta) in positives.iter().enumerate() {
            if beta.is_empty() {
                stats.empty += 1;
                continue;
            }
            let mut is_pos = vec![false; c];
            for &e in beta {
                if e >= c {
                    return Err(Error::dim("contrast", vs.shape(), &[r, e]));
                }
                is_pos[e] = true;
            }
            let in_denom: Vec<bool> = match denominator {
                ContrastDenominator::NegativesOnly => is_pos.iter().map(|p| !p).collect(),
                ContrastDenominator::AllClasses => vec![true; c],
            };
            if !is_pos.iter().any(|p| !p) && denominator == ContrastDenominator::NegativesOnly {
                stats.saturated += 1;
                continue;
            }
            let row = vs.row(r);
            let max = row
                .iter()
                .zip(&in_denom)
                .filter(|(_, d)| **d)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row
                .iter()
                .zip(&in_denom)
                .filter(|(_, d)| **d)
                .map(|(v, _)| (v - max).exp())
                .sum();
            let lse = max + z.ln();
            let npos = beta.len() as f64;
            let mean_pos: f64 = beta.iter().map(|&e| row[e]).sum::<f64>() / npos;
            total += lse - mean_pos;
            let mut w = vec![0.0; c];
            for j in 0..c {
                if in_denom[j] {
                    w[j] += (row[j] - lse).exp();
                }
                if is_pos[j] {
                    w[j] -= 1.0 / npos;
                }
            }
            rows.push((r, w));
            stats.counted += 1;
        }
        let value = if stats.counted == 0 {
            0.0
        } else {
            total / stats.counted as f64
        };
        let norm = 1.0 / stats.counted.max(1) as f64;
        for (_, w) in &mut rows {
            for v in w.iter_mut() {
                *v *= norm;
            }
        }
        let op = Op::Contrast { s, weights: rows };
        Ok((self.derived(Tensor::scalar(value), op, &[s]), stats))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if wants(a) {
                    let buf = slot(grads, *a, va.shape());
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        vb.data(),
                        true,
                        buf.data_mut(),
                        true,
                    );
                }
                if wants(b) {
                    let buf = slot(grads, *b, vb.shape());
                    gemm(
                        k,
                        m,
                        n,
                        va.data(),
                        true,
                        g.data(),
                        false,
                        buf.data_mut(),
                        true,
                    );
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a·bᵀ with a: m×k, b: n×k
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if wants(a) {
                    let buf = slot(grads, *a, va.shape());
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        vb.data(),
                        false,
                        buf.data_mut(),
                        true,
                    );
                }
                if wants(b) {
                    let buf = slot(grads, *b, vb.shape());
                    gemm(
                        n,
                        m,
                        k,
                        g.data(),
                        true,
                        va.data(),
                        false,
                        buf.data_mut(),
                        true,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        slot(grads, *v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::AddRow(x, b) => {
                if wants(x) {
                    slot(grads, *x, g.shape()).add_assign(g);
                }
                if wants(b) {
                    let c = g.cols();
                    let buf = slot(grads, *b, self.shape(*b));
                    for row in g.data().chunks(c) {
                        for (o, v) in buf.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                if wants(a) {
                    let buf = slot(grads, *a, va.shape());
                    for ((o, gv), bv) in buf.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += gv * bv;
                    }
                }
                if wants(b) {
                    let buf = slot(grads, *b, vb.shape());
                    for ((o, gv), av) in buf.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(x, s) => {
                let buf = slot(grads, *x, g.shape());
                for (o, gv) in buf.data_mut().iter_mut().zip(g.data()) {
                    *o += gv * s;
                }
            }
            Op::Sigmoid(x) => {
                let input = self.value(*x);
                let buf = slot(grads, *x, g.shape());
                for ((o, gv), (&p, &xi)) in buf
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(out.data().iter().zip(input.data()))
                {
                    // Zero slope where the output is clamped.
                    let raw = if xi >= 0.0 {
                        1.0 / (1.0 + (-xi).exp())
                    } else {
                        let e = xi.exp();
                        e / (1.0 + e)
                    };
                    if raw == p {
                        *o += gv * p * (1.0 - p);
                    }
                }
            }
            Op::Gelu(x) => {
                let input = self.value(*x).clone();
                let buf = slot(grads, *x, g.shape());
                for ((o, gv), xi) in buf.data_mut().iter_mut().zip(g.data()).zip(input.data()) {
                    *o += gv * gelu(*xi).1;
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let buf = slot(grads, *x, g.shape());
                for ((o_row, g_row), y_row) in buf
                    .data_mut()
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(out.data().chunks(c))
                {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        o_row[j] += y_row[j] * (g_row[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let vx = self.value(*x).clone();
                let gv = self.value(*gain).clone();
                let c = vx.cols();
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx = vec![0.0; vx.len()];
                for r in 0..vx.rows() {
                    let xr = vx.row(r);
                    let gr = g.row(r);
                    let (mu, rs) = (mean[r], rstd[r]);
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mu) * rs).collect();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..c {
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        let dxh = gr[j] * gv.data()[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[j];
                    }
                    let n = c as f64;
                    for j in 0..c {
                        let dxh = gr[j] * gv.data()[j];
                        dx[r * c + j] = rs / n * (n * dxh - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                if wants(x) {
                    let buf = slot(grads, *x, vx.shape());
                    for (o, v) in buf.data_mut().iter_mut().zip(&dx) {
                        *o += v;
                    }
                }
                if wants(gain) {
                    let buf = slot(grads, *gain, gv.shape());
                    for (o, v) in buf.data_mut().iter_mut().zip(&dgain) {
                        *o += v;
                    }
                }
                if wants(bias) {
                    let buf = slot(grads, *bias, self.shape(*bias));
                    for (o, v) in buf.data_mut().iter_mut().zip(&dbias) {
                        *o += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if wants(p) {
                        let buf = slot(grads, *p, self.shape(*p));
                        for (r, row) in buf.data_mut().chunks_mut(w).enumerate() {
                            let src = &g.data()[r * total + offset..r * total + offset + w];
                            for (o, v) in row.iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let len = g.cols();
                let cols = self.value(*x).cols();
                let buf = slot(grads, *x, self.shape(*x));
                for (r, row) in g.data().chunks(len).enumerate() {
                    let dst = &mut buf.data_mut()[r * cols + start..r * cols + start + len];
                    for (o, v) in dst.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            Op::Conv1d { x, kernel, stride } => {
                let (vx, vk) = (self.value(*x), self.value(*kernel));
                let (t, d) = (vx.rows(), vx.cols());
                let (w, d_out) = (vk.shape()[0], vk.shape()[2]);
                let half = w / 2;
                let t_out = g.rows();
                let mut dx = if wants(x) {
                    Some(Tensor::zeros(vx.shape()))
                } else {
                    None
                };
                let mut dk = if wants(kernel) {
                    Some(Tensor::zeros(vk.shape()))
                } else {
                    None
                };
                for o in 0..t_out {
                    let go = &g.data()[o * d_out..(o + 1) * d_out];
                    for j in 0..w {
                        let src = (o * stride) as isize + j as isize - half as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let src = src as usize;
                        let kj = &vk.data()[j * d * d_out..(j + 1) * d * d_out];
                        if let Some(dx) = dx.as_mut() {
                            // dx[src] += K_j · g[o]
                            gemm(
                                d,
                                d_out,
                                1,
                                kj,
                                false,
                                go,
                                false,
                                &mut dx.data_mut()[src * d..(src + 1) * d],
                                true,
                            );
                        }
                        if let Some(dk) = dk.as_mut() {
                            // dK_j += x[src]ᵀ · g[o]
                            gemm(
                                d,
                                1,
                                d_out,
                                &vx.data()[src * d..(src + 1) * d],
                                false,
                                go,
                                false,
                                &mut dk.data_mut()[j * d * d_out..(j + 1) * d * d_out],
                                true,
                            );
                        }
                    }
                }
                if let Some(dx) = dx {
                    slot(grads, *x, vx.shape()).add_assign(&dx);
                }
                if let Some(dk) = dk {
                    slot(grads, *kernel, vk.shape()).add_assign(&dk);
                }
            }
            Op::Upsample(x) => {
                let t = self.value(*x).rows();
                let d = g.cols();
                let buf = slot(grads, *x, self.shape(*x));
                for (i, (lo, hi, frac)) in upsample_taps(t, g.rows()).into_iter().enumerate() {
                    for c in 0..d {
                        let gv = g.data()[i * d + c];
                        buf.data_mut()[lo * d + c] += (1.0 - frac) * gv;
                        if frac != 0.0 {
                            buf.data_mut()[hi * d + c] += frac * gv;
                        }
                    }
                }
            }
            Op::TakeRows { x, index } => {
                let c = g.cols();
                let buf = slot(grads, *x, self.shape(*x));
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        buf.data_mut()[i * c + j] += g.data()[r * c + j];
                    }
                }
            }
            Op::RowNormalize { x, norms } => {
                let c = g.cols();
                let buf = slot(grads, *x, self.shape(*x));
                for (r, n) in norms.iter().enumerate() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        buf.data_mut()[r * c + j] += (gr[j] - y[j] * dot) / n;
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                let buf = slot(grads, *x, self.shape(*x));
                for o in buf.data_mut() {
                    *o += gv;
                }
            }
            Op::WeightedSum(terms) => {
                let gv = g.data()[0];
                for (v, w) in terms {
                    if wants(v) {
                        slot(grads, *v, &[1]).data_mut()[0] += gv * w;
                    }
                }
            }
            Op::Bce { p, y } => {
                let vp = self.value(*p);
                let t = vp.rows() as f64;
                let gv = g.data()[0];
                let buf = slot(grads, *p, vp.shape());
                for ((o, &pv), &yv) in buf.data_mut().iter_mut().zip(vp.data()).zip(y) {
                    let pc = tensor::clamp_prob(pv);
                    if pc != pv {
                        continue;
                    }
                    *o += -gv / t * (yv / pc - (1.0 - yv) / (1.0 - pc));
                }
            }
            Op::Contrast { s, weights } => {
                let gv = g.data()[0];
                let c = g.len();
                let cols = self.value(*s).cols();
                debug_assert_eq!(c, 1);
                let buf = slot(grads, *s, self.shape(*s));
                for (r, w) in weights {
                    let row = &mut buf.data_mut()[r * cols..(r + 1) * cols];
                    for (b, wj) in row.iter_mut().zip(w) {
                        *b += gv * wj;
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

/// `(gelu(x), gelu'(x))` with the tanh approximation.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let th = inner.tanh();
    let value = 0.5 * x * (1.0 + th);
    let d_inner = C * (1.0 + 3.0 * A * x * x);
    let deriv = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner;
    (value, deriv)
}

/// Accumulated gradients from one [`Tape::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

/// Multi-head scaled dot-product attention: per head `softmax(q kᵀ / sqrt(d/heads)) v`,
/// heads concatenated back to width d. `q` is Tq×d, `k` and `v` are Tk×d.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (tq, d) = require_matrix("attention", tape.value(q))?;
    let dk = tape.value(k).cols();
    let tk = tape.value(k).rows();
    if dk != d || tape.value(v).cols() != d || tape.value(v).rows() != tk {
        return Err(Error::dim("attention", tape.shape(q), tape.shape(k)));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention width {d} is not divisible by {heads} heads"
        )));
    }
    let _ = tq;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * hd, hd)?,
                tape.slice_cols(k, h * hd, hd)?,
                tape.slice_cols(v, h * hd, hd)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores);
        outs.push(tape.matmul(weights, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}
