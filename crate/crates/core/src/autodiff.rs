//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! execution order, so the node list is topologically sorted by construction.
//! [`Tape::backward`] walks it in reverse and accumulates adjoints.
//!
//! The operator set is closed: exactly what the attention blocks, the latent
//! projection and the classifier need. The only broadcast is row-vector bias
//! addition ([`Tape::add_row`]).

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mask::BoolMask;
use crate::tensor::{gemm, Tensor, View, ViewMut};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    AddRow,
    Mul,
    Scale,
    ConcatRows,
    SliceRows,
    MeanRows,
    Sum,
    Gelu,
    LayerNorm,
    Softmax,
    Attention,
    Gather,
    CrossEntropy,
}

/// Test hook: scales the adjoint contributions of one operator kind so that
/// gradient checks can be shown to catch a broken backward rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjointFault {
    pub op: OpKind,
    pub factor: f64,
}

enum Op {
    Leaf { param: Option<usize> },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    SliceRows { src: Var, start: usize },
    MeanRows(Var),
    Sum(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Softmax { x: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, weights: Tensor },
    Gather { table: Var, ids: Vec<Option<usize>> },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::Sum(_) => OpKind::Sum,
            Op::Gelu(_) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Attention { .. } => OpKind::Attention,
            Op::Gather { .. } => OpKind::Gather,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<AdjointFault>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

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

    pub fn inject_fault(&mut self, fault: AdjointFault) {
        self.fault = Some(fault);
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn op_kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    /// Saved post-softmax weights of an attention node, `heads·tq × tk`.
    pub fn attention_weights(&self, var: Var) -> Option<&Tensor> {
        match &self.nodes[var.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf { .. } => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::Transpose(a) | Op::Scale(a, _) | Op::MeanRows(a) | Op::Sum(a) | Op::Gelu(a) => {
                self.needs(*a)
            }
            Op::ConcatRows(parts) => parts.iter().any(|&p| self.needs(p)),
            Op::SliceRows { src, .. } => self.needs(*src),
            Op::LayerNorm { x, gamma, beta, .. } => {
                self.needs(*x) || self.needs(*gamma) || self.needs(*beta)
            }
            Op::Softmax { x } => self.needs(*x),
            Op::Attention { q, k, v, .. } => self.needs(*q) || self.needs(*k) || self.needs(*v),
            Op::Gather { table, .. } => self.needs(*table),
            Op::CrossEntropy { logits, .. } => self.needs(*logits),
        };
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Differentiable input that is not a model parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf { param: None },
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a shared parameter value without copying it.
    pub fn param(&mut self, id: usize, value: &Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value: Arc::clone(value),
            op: Op::Leaf { param: Some(id) },
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(var).require_matrix(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension { op: "matmul", lhs: vec![m, k], rhs: vec![k2, n] });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            View::dense(self.value(a).data(), k),
            View::dense(self.value(b).data(), n),
            0.0,
            ViewMut::dense(&mut out, n),
        );
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out), Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `a[m×n] + bias[1×n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix(a, "add_row")?;
        let (br, bc) = self.matrix(bias, "add_row")?;
        if br != 1 || bc != n {
            return Err(Error::Dimension { op: "add_row", lhs: vec![m, n], rhs: vec![br, bc] });
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= bv;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Stacks matrices along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Rank("concat_rows of nothing".into()));
        };
        if parts.len() == 1 {
            return Ok(first);
        }
        let (_, n) = self.matrix(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_rows")?;
            if c != n {
                return Err(Error::Dimension { op: "concat_rows", lhs: vec![rows, n], rhs: vec![r, c] });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::matrix(rows, n, out), Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix(src, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::Dimension { op: "slice_rows", lhs: vec![m, n], rhs: vec![start, len] });
        }
        let data = self.value(src).data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::matrix(len, n, data), Op::SliceRows { src, start }))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix(a, "mean_rows")?;
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        Ok(self.push(Tensor::matrix(1, n, out), Op::MeanRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            let x = *v;
            *v = 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh());
        }
        self.push(out, Op::Gelu(a))
    }

    /// Per-row standardization followed by the `gamma`/`beta` affine map.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.matrix(x, "layer_norm_rows")?;
        for p in [gamma, beta] {
            let s = self.value(p).shape();
            if s != [1, n] {
                return Err(Error::Dimension { op: "layer_norm_rows", lhs: vec![1, n], rhs: s.to_vec() });
            }
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for (r, row) in self.value(x).data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (h, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(n) {
            for ((o, gv), bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let xhat = Tensor::matrix(m, n, xhat);
        Ok(self.push(Tensor::matrix(m, n, out), Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Row-wise softmax. Masked-out entries are excluded from the
    /// normalization and come out exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&BoolMask>) -> Result<Var> {
        let (m, n) = self.matrix(x, "softmax_rows")?;
        if let Some(mask) = mask {
            mask.check(m, n)?;
        }
        let mut out = self.value(x).clone();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            softmax_in_place(row, mask.map(|mk| mk.row(r)));
        }
        Ok(self.push(out, Op::Softmax { x }))
    }

    /// Multi-head scaled dot-product attention without projections:
    /// per head `softmax(q_h k_hᵀ / √d_h) v_h`, heads concatenated column-wise.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &BoolMask) -> Result<Var> {
        let (tq, d) = self.matrix(q, "attention")?;
        let (tk, dk) = self.matrix(k, "attention")?;
        let (tv, dv) = self.matrix(v, "attention")?;
        if dk != d || dv != d || tv != tk {
            return Err(Error::Dimension { op: "attention", lhs: vec![tq, d], rhs: vec![tk, dk, tv, dv] });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        mask.check(tq, tk)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut weights = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for h in 0..heads {
            let w = &mut weights[h * tq * tk..(h + 1) * tq * tk];
            gemm(
                tq,
                dh,
                tk,
                scale,
                View::dense(qd, d).at(h * dh),
                View::transposed(kd, d).at(h * dh),
                0.0,
                ViewMut::dense(w, tk),
            );
            for (r, row) in w.chunks_mut(tk).enumerate() {
                softmax_in_place(row, Some(mask.row(r)));
            }
            gemm(
                tq,
                tk,
                dh,
                1.0,
                View::dense(w, tk),
                View::dense(vd, d).at(h * dh),
                0.0,
                ViewMut::dense(&mut out, d).at(h * dh),
            );
        }
        let weights = Tensor::matrix(heads * tq, tk, weights);
        Ok(self.push(Tensor::matrix(tq, d, out), Op::Attention { q, k, v, heads, weights }))
    }

    /// Row lookup; `None` produces a zero row that receives no gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let (vocab, n) = self.matrix(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Rank("gather_rows with no ids".into()));
        }
        let src = self.value(table).data();
        let mut out = vec![0.0; ids.len() * n];
        for (r, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= vocab {
                    return Err(Error::Vocabulary { id, position: r, vocab_size: vocab });
                }
                out[r * n..(r + 1) * n].copy_from_slice(&src[id * n..(id + 1) * n]);
            }
        }
        Ok(self.push(Tensor::matrix(ids.len(), n, out), Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Softmax cross-entropy of a `1×C` logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (r, c) = self.matrix(logits, "cross_entropy")?;
        if r != 1 || label >= c {
            return Err(Error::Dimension { op: "cross_entropy", lhs: vec![r, c], rhs: vec![label] });
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_in_place(&mut probs, None);
        let row = self.value(logits).data();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - row[label];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label, probs }))
    }

    /// Reverse sweep from a scalar. Leaves reachable or not all receive a
    /// gradient tensor of their own shape (zeros when unreachable).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf { .. }) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let factor = match self.fault {
                Some(f) if f.op == node.op.kind() => f.factor,
                _ => 1.0,
            };
            self.propagate(&node.op, &node.value, g, factor, &mut grads);
        }

        let mut params: BTreeMap<usize, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param } = node.op {
                if !node.needs_grad {
                    grads[i] = None;
                    continue;
                }
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros_like(&node.value));
                if let Some(id) = param {
                    match params.get_mut(&id) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            params.insert(id, g.clone());
                        }
                    }
                }
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Tensor, factor: f64, grads: &mut [Option<Tensor>]) {
        let send = |var: Var, mut contrib: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.needs(var) {
                return;
            }
            if factor != 1.0 {
                contrib.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
            match &mut grads[var.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, View::dense(g.data(), n), View::transposed(bv.data(), n), 0.0, ViewMut::dense(&mut da, k));
                    send(*a, Tensor::matrix(m, k, da), grads);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, View::transposed(av.data(), k), View::dense(g.data(), n), 0.0, ViewMut::dense(&mut db, n));
                    send(*b, Tensor::matrix(k, n, db), grads);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (g.rows(), g.cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[j * m + i] = g.data()[i * n + j];
                    }
                }
                send(*a, Tensor::matrix(n, m, da), grads);
            }
            Op::Add(a, b) => {
                if a == b {
                    let mut d = g;
                    d.data_mut().iter_mut().for_each(|v| *v *= 2.0);
                    send(*a, d, grads);
                } else {
                    send(*a, g.clone(), grads);
                    send(*b, g, grads);
                }
            }
            Op::AddRow(a, bias) => {
                let n = g.cols();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                send(*bias, Tensor::matrix(1, n, db), grads);
                send(*a, g, grads);
            }
            Op::Mul(a, b) => {
                let mut da = g.clone();
                for (d, v) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                    *d *= v;
                }
                let mut db = g;
                for (d, v) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *d *= v;
                }
                send(*a, da, grads);
                send(*b, db, grads);
            }
            Op::Scale(a, s) => {
                let mut d = g;
                d.data_mut().iter_mut().for_each(|v| *v *= s);
                send(*a, d, grads);
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut start = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let piece = g.data()[start * n..(start + r) * n].to_vec();
                    send(p, Tensor::matrix(r, n, piece), grads);
                    start += r;
                }
            }
            Op::SliceRows { src, start } => {
                let sv = self.value(*src);
                let n = sv.cols();
                let mut d = Tensor::zeros_like(sv);
                d.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                send(*src, d, grads);
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let (m, n) = (av.rows(), av.cols());
                let mut d = vec![0.0; m * n];
                for row in d.chunks_mut(n) {
                    for (o, v) in row.iter_mut().zip(g.data()) {
                        *o = v / m as f64;
                    }
                }
                send(*a, Tensor::matrix(m, n, d), grads);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                let mut d = Tensor::zeros_like(av);
                d.data_mut().iter_mut().for_each(|v| *v = g.item());
                send(*a, d, grads);
            }
            Op::Gelu(a) => {
                let mut d = g;
                for (dv, &x) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                    let dth = (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *dv *= 0.5 * (1.0 + th) + 0.5 * x * dth;
                }
                send(*a, d, grads);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (m, n) = (g.rows(), g.cols());
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = vec![0.0; m * n];
                let mut dxhat = vec![0.0; n];
                for r in 0..m {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let hr = &xhat.data()[r * n..(r + 1) * n];
                    for j in 0..n {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gam[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = inv_std[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
                send(*x, Tensor::matrix(m, n, dx), grads);
                send(*gamma, Tensor::matrix(1, n, dgamma), grads);
                send(*beta, Tensor::matrix(1, n, dbeta), grads);
            }
            Op::Softmax { x } => {
                let n = g.cols();
                let mut d = g;
                for (drow, yrow) in d.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (dv, y) in drow.iter_mut().zip(yrow) {
                        *dv = y * (*dv - dot);
                    }
                }
                send(*x, d, grads);
            }
            Op::Attention { q, k, v, heads, weights } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (tq, d) = (qv.rows(), qv.cols());
                let tk = kv.rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; tq * d];
                let mut dk = vec![0.0; tk * d];
                let mut dv = vec![0.0; tk * d];
                let mut ds = Tensor::zeros(tq, tk);
                for h in 0..*heads {
                    let p = &weights.data()[h * tq * tk..(h + 1) * tq * tk];
                    let gh = View::dense(g.data(), d).at(h * dh);
                    gemm(tk, tq, dh, 1.0, View::transposed(p, tk), gh, 1.0, ViewMut::dense(&mut dv, d).at(h * dh));
                    gemm(tq, dh, tk, 1.0, gh, View::transposed(vv.data(), d).at(h * dh), 0.0, ViewMut::dense(ds.data_mut(), tk));
                    for (srow, prow) in ds.data_mut().chunks_mut(tk).zip(p.chunks(tk)) {
                        let dot: f64 = srow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for (s, pv) in srow.iter_mut().zip(prow) {
                            *s = pv * (*s - dot);
                        }
                    }
                    gemm(tq, tk, dh, scale, View::dense(ds.data(), tk), View::dense(kv.data(), d).at(h * dh), 1.0, ViewMut::dense(&mut dq, d).at(h * dh));
                    gemm(tk, tq, dh, scale, View::transposed(ds.data(), tk), View::dense(qv.data(), d).at(h * dh), 1.0, ViewMut::dense(&mut dk, d).at(h * dh));
                }
                drop(ds);
                send(*q, Tensor::matrix(tq, d, dq), grads);
                send(*k, Tensor::matrix(tk, d, dk), grads);
                send(*v, Tensor::matrix(tk, d, dv), grads);
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let n = tv.cols();
                let mut d = Tensor::zeros_like(tv);
                for (r, id) in ids.iter().enumerate() {
                    if let Some(id) = *id {
                        for j in 0..n {
                            d.data_mut()[id * n + j] += g.data()[r * n + j];
                        }
                    }
                }
                send(*table, d, grads);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let mut d = probs.clone();
                d[*label] -= 1.0;
                d.iter_mut().for_each(|v| *v *= g.item());
                let c = d.len();
                send(*logits, Tensor::matrix(1, c, d), grads);
            }
        }
    }
}

/// Stabilized softmax over the live entries of `row`; dead entries become 0.
fn softmax_in_place(row: &mut [f64], live: Option<&[bool]>) {
    let is_live = |j: usize| live.is_none_or(|l| l[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if is_live(j) && v > max {
            max = v;
        }
    }
    let mut total = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if is_live(j) {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf node.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of a registered parameter, summed over all its registrations.
    pub fn param(&self, id: usize) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> BTreeMap<usize, Tensor> {
        self.params
    }
}
