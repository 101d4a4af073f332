//! Reverse-mode differentiation over a per-forward tape.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves either own
//! their value or borrow it from a parameter store, so frozen weights are not
//! copied. Gradients are only propagated into nodes that transitively depend
//! on a leaf created with `requires_grad`.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{self, matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

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
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var },
    Gather { table: Var, ids: Vec<usize> },
    ColSlice { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Cosine { a: Var, b: Var },
    Bce { logit: Var, target: f64 },
    Mean(Vec<Var>),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that borrows its value; nothing is copied.
    pub fn leaf_ref(&mut self, value: &'p Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(Error::Dimension(format!("matmul_nt inner {k} vs {}", bv.cols())));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulNT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::Dimension(format!(
                "add of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::Dimension("mul shape mismatch".into()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::Dimension(format!("bias {} for width {c}", bv.len())));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v += c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddConst(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v).0).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(Error::Dimension("layer_norm affine width".into()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let (mean, rs) = tensor::moments(row, eps);
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax; with `causal`, entry (i, j) for j > i is masked out.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if n == 0 {
            return Err(Error::Dimension("softmax over an empty axis".into()));
        }
        let mut out = xv.clone();
        for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
            if causal {
                let keep = (i + 1).min(n);
                tensor::softmax_in_place(&mut row[..keep]);
                row[keep..].iter_mut().for_each(|v| *v = 0.0);
            } else {
                tensor::softmax_in_place(row);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, c) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= n {
                return Err(Error::Index(format!("row {id} of table with {n} rows")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::matrix(ids.len(), c, out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn col_slice(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start + width > c {
            return Err(Error::Dimension(format!("columns {start}..{} of {c}", start + width)));
        }
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&xv.row(i)[start..start + width]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(r, width, out), Op::ColSlice { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != r) {
            return Err(Error::Dimension("concat_cols row mismatch".into()));
        }
        let c: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(r, c, out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= xv.rows() {
                return Err(Error::Index(format!("row {r} of {}", xv.rows())));
            }
            out.extend_from_slice(xv.row(r));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(rows.len(), c, out),
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Column means: `r×c → 1×c`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if r == 0 {
            return Err(Error::Dimension("mean over zero rows".into()));
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(1, c, out), Op::MeanRows(x), rg))
    }

    /// Mean token cross-entropy; returns a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.cols();
        if lv.rows() != targets.len() || targets.is_empty() {
            return Err(Error::Dimension(format!(
                "{} logit rows for {} targets",
                lv.rows(),
                targets.len()
            )));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index(format!("target {t} outside vocabulary of {v}")));
            }
            let row = &mut probs[r * v..(r + 1) * v];
            loss += tensor::log_sum_exp(row) - row[t];
            tensor::softmax_in_place(row);
        }
        loss /= targets.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite cross-entropy".into()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::filled(&[1], loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Cosine similarity of two equal-length vectors; scalar node.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::Dimension("cosine length mismatch".into()));
        }
        let c = cosine(av.data(), bv.data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::filled(&[1], c), Op::Cosine { a, b }, rg))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `target ∈ [0,1]`.
    pub fn bce_with_logit(&mut self, logit: Var, target: f64) -> Var {
        let z = self.value(logit).data()[0];
        // softplus(z) - target * z, stable for both signs
        let loss = z.max(0.0) + (-z.abs()).exp().ln_1p() - target * z;
        let rg = self.rg(&[logit]);
        self.push(Tensor::filled(&[1], loss), Op::Bce { logit, target }, rg)
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Dimension("mean of nothing".into()));
        }
        let s: f64 = xs.iter().map(|x| self.value(*x).data()[0]).sum::<f64>() / xs.len() as f64;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::filled(&[1], s), Op::Mean(xs.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).len() != 1 {
            return Err(Error::Dimension("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Lazily creates a zeroed gradient slot and hands out a mutable buffer.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.value(v).shape().to_vec();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape)))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = G · Bᵀ
                    matmul_nt_into(g.data(), bv.data(), ga.data_mut(), m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = Aᵀ · G
                    matmul_tn_into(av.data(), g.data(), gb.data_mut(), m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = G · B
                    matmul_into(g.data(), bv.data(), ga.data_mut(), m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = Gᵀ · A
                    matmul_tn_into(g.data(), av.data(), gb.data_mut(), m, n, k);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d).unwrap());
                }
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if let Some(gb) = self.slot(grads, *b) {
                    let c = g.cols();
                    for row in g.data().chunks(c) {
                        for (o, v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                let mut d = g.clone();
                d.scale(*s);
                self.accumulate(grads, *x, d);
            }
            Op::AddConst(x) => self.accumulate(grads, *x, g.clone()),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gelu(v).1 * gv)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = g.cols();
                let rows = g.rows();
                let gv = self.value(*gain).data().to_vec();
                if let Some(gg) = self.slot(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg.data_mut()[j] += g.data()[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb.data_mut()[j] += g.data()[r * d + j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let n = d as f64;
                    for r in 0..rows {
                        let dy = &g.data()[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = dy[j] * gv[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[j];
                        }
                        let out = &mut gx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dxh = dy[j] * gv[j];
                            out[j] += rstd[r] * (dxh - sum_dxh / n - xh[j] * sum_dxh_xh / n);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                // masked entries have zero output, hence zero gradient
                let n = out.cols();
                let mut d = vec![0.0; out.len()];
                for (r, (yrow, grow)) in out.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gg)| y * gg).sum();
                    for j in 0..n {
                        d[r * n + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.slot(grads, *table) {
                    let c = g.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt.data_mut()[id * c..(id + 1) * c];
                        for (o, v) in dst.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ColSlice { x, start } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let w = g.cols();
                    let c = gx.cols();
                    for r in 0..g.rows() {
                        let dst = &mut gx.data_mut()[r * c + start..r * c + start + w];
                        for (o, v) in dst.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                let c = g.cols();
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(gp) = self.slot(grads, *p) {
                        for r in 0..g.rows() {
                            let src = &g.data()[r * c + offset..r * c + offset + w];
                            for (o, v) in gp.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SelectRows { x, rows } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let c = g.cols();
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut gx.data_mut()[r * c..(r + 1) * c];
                        for (o, v) in dst.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let (r, c) = (gx.rows(), gx.cols());
                    let inv = 1.0 / r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            gx.data_mut()[i * c + j] += g.data()[j] * inv;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.data()[0] / targets.len() as f64;
                let v = self.value(*logits).cols();
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * v + t] -= 1.0;
                }
                d.iter_mut().for_each(|x| *x *= scale);
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::new(shape, d).unwrap());
            }
            Op::Cosine { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let na = norm(av).max(1e-12);
                let nb = norm(bv).max(1e-12);
                let c = out.data()[0];
                let gs = g.data()[0];
                if self.requires_grad(*a) {
                    let d = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| gs * (y / (na * nb) - c * x / (na * na)))
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), d).unwrap());
                }
                if self.requires_grad(*b) {
                    let d = bv
                        .iter()
                        .zip(av)
                        .map(|(y, x)| gs * (x / (na * nb) - c * y / (nb * nb)))
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), d).unwrap());
                }
            }
            Op::Bce { logit, target } => {
                let z = self.value(*logit).data()[0];
                let s = 1.0 / (1.0 + (-z).exp());
                self.accumulate(grads, *logit, Tensor::filled(&[1], g.data()[0] * (s - target)));
            }
            Op::Mean(xs) => {
                let d = g.data()[0] / xs.len() as f64;
                for x in xs {
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::filled(&shape, d));
                }
            }
        }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; zero vectors are treated as having norm 1e-12.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a).max(1e-12) * norm(b).max(1e-12))
}
