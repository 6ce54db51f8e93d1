//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable op appends one node holding its output value and the
//! handles of its inputs. [`Tape::backward`] walks the nodes in reverse
//! insertion order, so a value consumed by several ops receives the sum of
//! their contributions.

use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// `x` for `x >= 0`, `slope * x` otherwise.
    LeakyRelu(f64),
    Sigmoid,
    /// `x` for `x > 0`, `alpha * (exp(x) - 1)` otherwise.
    Elu(f64),
    /// tanh approximation.
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulBt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Scale { x: Var, factor: f64 },
    MulConst { x: Var, mask: Tensor },
    RowScale { x: Var, s: Var },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { x: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    OuterSum { p: Var, q: Var },
    Act { x: Var, kind: Activation },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaskedSoftmax { x: Var },
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    Bce { scores: Var, labels: Vec<f64>, pos_weight: f64 },
    Sum { x: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulBt { .. } => "matmul_bt",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::MulConst { .. } => "mul_const",
            Op::RowScale { .. } => "row_scale",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::OuterSum { .. } => "outer_sum",
            Op::Act { kind, .. } => match kind {
                Activation::LeakyRelu(_) => "leaky_relu",
                Activation::Sigmoid => "sigmoid",
                Activation::Elu(_) => "elu",
                Activation::Gelu => "gelu",
            },
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::MaxPoolRows { .. } => "max_pool_rows",
            Op::Bce { .. } => "bce_loss",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn act_forward(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::LeakyRelu(s) => {
            if x >= 0.0 {
                x
            } else {
                s * x
            }
        }
        Activation::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        Activation::Elu(alpha) => {
            if x > 0.0 {
                x
            } else {
                alpha * x.exp_m1()
            }
        }
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }
    }
}

fn act_derivative(kind: Activation, x: f64, y: f64) -> f64 {
    match kind {
        Activation::LeakyRelu(s) => {
            if x >= 0.0 {
                1.0
            } else {
                s
            }
        }
        Activation::Sigmoid => y * (1.0 - y),
        Activation::Elu(alpha) => {
            if x > 0.0 {
                1.0
            } else {
                y + alpha
            }
        }
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            let inner = c * (x + 0.044715 * x * x * x);
            let th = inner.tanh();
            let d_inner = c * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
        }
    }
}

const BCE_CLAMP: f64 = 1e-12;

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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = self.op_requires_grad(&op);
        if self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul { a, b } | Op::MatMulBt { a, b } | Op::Add { a, b } => rg(a) || rg(b),
            Op::AddRow { x, row } => rg(x) || rg(row),
            Op::RowScale { x, s } => rg(x) || rg(s),
            Op::OuterSum { p, q } => rg(p) || rg(q),
            Op::ConcatCols { parts } | Op::ConcatRows { parts } => parts.iter().any(rg),
            Op::LayerNorm { x, gain, bias, .. } => rg(x) || rg(gain) || rg(bias),
            Op::Scale { x, .. }
            | Op::MulConst { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Act { x, .. }
            | Op::MaskedSoftmax { x }
            | Op::MaxPoolRows { x, .. }
            | Op::Sum { x } => rg(x),
            Op::Bce { scores, .. } => rg(scores),
        }
    }

    /// Fails with the first op whose output contained a NaN or infinity.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.first_non_finite {
            None => Ok(()),
            Some(node) => Err(Error::NonFinite {
                op: self.nodes[node].op.name(),
                node,
            }),
        }
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.leaf_shared(Arc::new(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf_shared(Arc::new(value), false)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        if self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(self.dim_err("matmul_bt", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt { a, b }))
    }

    /// `x W (+ b)`: `x` is `[m x p]`, `W` is `[p x q]`, `b` has `q` entries.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w).map_err(|e| match e {
            Error::Dimension { lhs, rhs, .. } => Error::Dimension {
                op: "linear_map",
                lhs,
                rhs,
            },
            other => other,
        })?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims2() != vb.dims2() {
            return Err(self.dim_err("add", a, b));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }))
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(row).len() != n {
            return Err(self.dim_err("add_row", x, row));
        }
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (v, b) in chunk.iter_mut().zip(r) {
                *v += b;
            }
        }
        let shape = if m == 1 { self.value(x).shape().to_vec() } else { vec![m, n] };
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow { x, row }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * factor).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale { x, factor })
    }

    /// Element-wise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        let v = self.value(x);
        if v.len() != mask.len() {
            return Err(Error::Dimension {
                op: "mul_const",
                lhs: v.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let data = v.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulConst { x, mask }))
    }

    /// Scales row `r` of `x` by `s[r]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(s).len() != m {
            return Err(self.dim_err("row_scale", x, s));
        }
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (r, chunk) in data.chunks_mut(n.max(1)).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= sv[r]);
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::RowScale { x, s }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows() != m) {
            return Err(self.dim_err("concat_cols", parts[0], *bad));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        Ok(self.push(Tensor::new(vec![m, total], data)?, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).cols() != n) {
            return Err(self.dim_err("concat_rows", parts[0], *bad));
        }
        let mut data = Vec::new();
        let mut m = 0;
        for p in parts {
            m += self.value(*p).rows();
            data.extend_from_slice(self.value(*p).data());
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Rows of `x` selected by `idx` (repeats allowed; embedding lookup).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::precondition(
                "gather_rows",
                format!("row {bad} out of range for {m} rows"),
            ));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.value(x).row_slice(i));
        }
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], data)?,
            Op::GatherRows { x, idx: idx.to_vec() },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if start + len > n {
            return Err(Error::precondition(
                "slice_cols",
                format!("columns {start}..{} out of range for {n}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&self.value(x).row_slice(r)[start..start + len]);
        }
        Ok(self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols { x, start }))
    }

    /// `out[i][j] = p[i] + q[j]`.
    pub fn outer_sum(&mut self, p: Var, q: Var) -> Var {
        let pv = self.value(p).data();
        let qv = self.value(q).data();
        let (m, n) = (pv.len(), qv.len());
        let mut data = Vec::with_capacity(m * n);
        for &a in pv {
            data.extend(qv.iter().map(|b| a + b));
        }
        let t = Tensor::new(vec![m, n], data).expect("outer shape");
        self.push(t, Op::OuterSum { p, q })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| act_forward(kind, a)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Act { x, kind })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(self.dim_err("layer_norm", x, gain));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in xv.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * inv;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
        ))
    }

    /// Softmax along each row over the entries whose mask is `true`; masked
    /// entries are exactly zero. `mask` has one entry per element of `x`.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let v = self.value(x);
        let (m, n) = v.dims2();
        if mask.len() != v.len() {
            return Err(Error::Dimension {
                op: "masked_softmax",
                lhs: v.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &v.data()[r * n..(r + 1) * n];
            let keep = &mask[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, k)| **k)
                .map(|(s, _)| *s)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::precondition(
                    "masked_softmax",
                    format!("row {r} has no unmasked entry"),
                ));
            }
            let dst = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if keep[j] {
                    dst[j] = (row[j] - max).exp();
                    total += dst[j];
                }
            }
            dst.iter_mut().for_each(|e| *e /= total);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::MaskedSoftmax { x }))
    }

    /// Column-wise max over rows. Ties go to the lowest row index.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (m, n) = v.dims2();
        if m == 0 || v.is_empty() {
            return Err(Error::precondition("max_pool_rows", "no rows to pool"));
        }
        let mut argmax = vec![0usize; n];
        let mut out = v.row_slice(0).to_vec();
        for r in 1..m {
            for (j, val) in v.row_slice(r).iter().enumerate() {
                if *val > out[j] {
                    out[j] = *val;
                    argmax[j] = r;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MaxPoolRows { x, argmax }))
    }

    /// Mean binary cross-entropy, `-[w y log p + (1 - y) log(1 - p)]`, with
    /// probabilities clamped at 1e-12 inside the logs.
    pub fn bce_loss(&mut self, scores: Var, labels: &[f64], pos_weight: f64) -> Result<Var> {
        let v = self.value(scores);
        if v.len() != labels.len() || labels.is_empty() {
            return Err(Error::Dimension {
                op: "bce_loss",
                lhs: v.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let n = labels.len() as f64;
        let total: f64 = v
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                -(pos_weight * y * p.max(BCE_CLAMP).ln() + (1.0 - y) * (1.0 - p).max(BCE_CLAMP).ln())
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Bce {
                scores,
                labels: labels.to_vec(),
                pos_weight,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::precondition(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                if self.requires_grad(*a) {
                    let bv = self.nodes[b.0].value.clone();
                    let ga = self.grad_slot(grads, *a);
                    gemm(m, n, k, gd, false, bv.data(), true, ga, true);
                }
                if self.requires_grad(*b) {
                    let av = self.nodes[a.0].value.clone();
                    let gb = self.grad_slot(grads, *b);
                    gemm(k, m, n, av.data(), true, gd, false, gb, true);
                }
            }
            Op::MatMulBt { a, b } => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).rows();
                if self.requires_grad(*a) {
                    let bv = self.nodes[b.0].value.clone();
                    let ga = self.grad_slot(grads, *a);
                    gemm(m, n, k, gd, false, bv.data(), false, ga, true);
                }
                if self.requires_grad(*b) {
                    let av = self.nodes[a.0].value.clone();
                    let gb = self.grad_slot(grads, *b);
                    gemm(n, m, k, gd, true, av.data(), false, gb, true);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        axpy(self.grad_slot(grads, v), gd, 1.0);
                    }
                }
            }
            Op::AddRow { x, row } => {
                let n = out.cols();
                if self.requires_grad(*x) {
                    axpy(self.grad_slot(grads, *x), gd, 1.0);
                }
                if self.requires_grad(*row) {
                    let gr = self.grad_slot(grads, *row);
                    for chunk in gd.chunks(n.max(1)) {
                        axpy(gr, chunk, 1.0);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.requires_grad(*x) {
                    axpy(self.grad_slot(grads, *x), gd, *factor);
                }
            }
            Op::MulConst { x, mask } => {
                if self.requires_grad(*x) {
                    let gx = self.grad_slot(grads, *x);
                    for ((dst, gv), mv) in gx.iter_mut().zip(gd).zip(mask.data()) {
                        *dst += gv * mv;
                    }
                }
            }
            Op::RowScale { x, s } => {
                let n = out.cols();
                let xv = self.nodes[x.0].value.clone();
                let sv = self.nodes[s.0].value.clone();
                if self.requires_grad(*x) {
                    let gx = self.grad_slot(grads, *x);
                    for (r, (dst, gr)) in gx.chunks_mut(n).zip(gd.chunks(n)).enumerate() {
                        axpy(dst, gr, sv.data()[r]);
                    }
                }
                if self.requires_grad(*s) {
                    let gs = self.grad_slot(grads, *s);
                    for (r, (xr, gr)) in xv.data().chunks(n).zip(gd.chunks(n)).enumerate() {
                        gs[r] += dot(xr, gr);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        let gp = self.grad_slot(grads, *p);
                        for (dst, src) in gp.chunks_mut(w).zip(gd.chunks(total)) {
                            axpy(dst, &src[offset..offset + w], 1.0);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.requires_grad(*p) {
                        axpy(self.grad_slot(grads, *p), &gd[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, idx } => {
                if self.requires_grad(*x) {
                    let n = out.cols();
                    let gx = self.grad_slot(grads, *x);
                    for (k, &r) in idx.iter().enumerate() {
                        axpy(&mut gx[r * n..(r + 1) * n], &gd[k * n..(k + 1) * n], 1.0);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.requires_grad(*x) {
                    let len = out.cols();
                    let n = self.value(*x).cols();
                    let gx = self.grad_slot(grads, *x);
                    for (dst, src) in gx.chunks_mut(n).zip(gd.chunks(len)) {
                        axpy(&mut dst[*start..*start + len], src, 1.0);
                    }
                }
            }
            Op::OuterSum { p, q } => {
                let n = out.cols();
                if self.requires_grad(*p) {
                    let gp = self.grad_slot(grads, *p);
                    for (r, row) in gd.chunks(n).enumerate() {
                        gp[r] += row.iter().sum::<f64>();
                    }
                }
                if self.requires_grad(*q) {
                    let gq = self.grad_slot(grads, *q);
                    for row in gd.chunks(n) {
                        axpy(gq, row, 1.0);
                    }
                }
            }
            Op::Act { x, kind } => {
                if self.requires_grad(*x) {
                    let xv = self.nodes[x.0].value.clone();
                    let gx = self.grad_slot(grads, *x);
                    for (((dst, gv), xi), yi) in gx.iter_mut().zip(gd).zip(xv.data()).zip(out.data()) {
                        *dst += gv * act_derivative(*kind, *xi, *yi);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = out.cols();
                let gv = self.nodes[gain.0].value.clone();
                if self.requires_grad(*gain) {
                    let gg = self.grad_slot(grads, *gain);
                    for (gr, xr) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let gb = self.grad_slot(grads, *bias);
                    for gr in gd.chunks(n) {
                        axpy(gb, gr, 1.0);
                    }
                }
                if self.requires_grad(*x) {
                    let gx = self.grad_slot(grads, *x);
                    let nf = n as f64;
                    for (r, (gr, xr)) in gd.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let gxh: Vec<f64> = gr.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let sum_g: f64 = gxh.iter().sum();
                        let sum_gx: f64 = gxh.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let dst = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            dst[j] += inv_std[r] / nf * (nf * gxh[j] - sum_g - xr[j] * sum_gx);
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                if self.requires_grad(*x) {
                    let n = out.cols();
                    let gx = self.grad_slot(grads, *x);
                    for (r, (yr, gr)) in out.data().chunks(n).zip(gd.chunks(n)).enumerate() {
                        let inner = dot(yr, gr);
                        let dst = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            dst[j] += yr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::MaxPoolRows { x, argmax } => {
                if self.requires_grad(*x) {
                    let n = out.cols();
                    let gx = self.grad_slot(grads, *x);
                    for (j, &r) in argmax.iter().enumerate() {
                        gx[r * n + j] += gd[j];
                    }
                }
            }
            Op::Bce { scores, labels, pos_weight } => {
                if self.requires_grad(*scores) {
                    let sv = self.nodes[scores.0].value.clone();
                    let n = labels.len() as f64;
                    let gs = self.grad_slot(grads, *scores);
                    for ((dst, &p), &y) in gs.iter_mut().zip(sv.data()).zip(labels) {
                        let mut d = 0.0;
                        if p > BCE_CLAMP {
                            d -= pos_weight * y / p;
                        }
                        if 1.0 - p > BCE_CLAMP {
                            d += (1.0 - y) / (1.0 - p);
                        }
                        *dst += gd[0] * d / n;
                    }
                }
            }
            Op::Sum { x } => {
                if self.requires_grad(*x) {
                    self.grad_slot(grads, *x).iter_mut().for_each(|v| *v += gd[0]);
                }
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
            .data_mut()
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 2.0]]));
        let w = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let y = tape.linear(x, w, None).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.constant(t(&[&[1.0, 1.0]]));
        let w = tape.constant(t(&[&[2.0], &[3.0]]));
        let b = tape.constant(Tensor::row(vec![1.0]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.linear(x, w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn masked_softmax_examples() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![3], vec![5.0, 5.0, 5.0]).unwrap());
        let y = tape.masked_softmax(s, &[true; 3]).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = tape.constant(Tensor::new(vec![2], vec![0.0, 100.0]).unwrap());
        let y = tape.masked_softmax(s, &[true, false]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_all_masked_is_error() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.masked_softmax(s, &[false, false]),
            Err(Error::Precondition { .. })
        ));
    }

    #[test]
    fn activation_examples() {
        assert_eq!(act_forward(Activation::LeakyRelu(0.01), 0.0), 0.0);
        assert_eq!(act_forward(Activation::Sigmoid, 0.0), 0.5);
        assert!((act_forward(Activation::LeakyRelu(0.2), -1.0) + 0.2).abs() < 1e-15);
        // 1/(1+e^-20) and e^-20/(1+e^-20), reference values from a 40-digit evaluation.
        let hi = act_forward(Activation::Sigmoid, 20.0);
        let lo = act_forward(Activation::Sigmoid, -20.0);
        assert!(hi < 1.0 && lo > 0.0);
        assert!((hi - 0.999_999_997_938_846_4).abs() < 1e-15);
        assert!(((lo - 2.061_153_618_190_203_6e-9) / lo).abs() < 1e-14);
        assert_eq!(act_forward(Activation::Sigmoid, 800.0), 1.0);
        assert!(act_forward(Activation::Sigmoid, -800.0) >= 0.0);
    }

    #[test]
    fn max_pool_examples_and_tie_break() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.0, 5.0], &[3.0, 2.0]]));
        let y = tape.max_pool_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);

        let x1 = tape.constant(t(&[&[4.0, -1.0]]));
        let y1 = tape.max_pool_rows(x1).unwrap();
        assert_eq!(tape.value(y1).data(), &[4.0, -1.0]);

        let tied = tape.leaf(t(&[&[2.0], &[2.0], &[2.0]]));
        let p = tape.max_pool_rows(tied).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(tied).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_rejects_empty() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(tape.max_pool_rows(x).is_err());
    }

    #[test]
    fn leaf_used_twice_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.5, -2.0]));
        let a = tape.scale(x, 3.0);
        let b = tape.scale(x, -0.5);
        let s = tape.add(a, b).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.5, 2.5]);
    }

    #[test]
    fn bce_closed_form() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::row(vec![0.5]));
        let l = tape.bce_loss(p, &[1.0], 1.0).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let p = tape.leaf(Tensor::row(vec![1.0, 0.0]));
        let l = tape.bce_loss(p, &[1.0, 0.0], 1.0).unwrap();
        assert!(tape.value(l).data()[0] < 1e-6);
        let g = tape.backward(l).unwrap();
        assert!(g.get(p).unwrap().all_finite());
    }

    #[test]
    fn non_finite_is_reported_with_op() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1e200]));
        let y = tape.matmul(x, x).unwrap();
        let _ = tape.matmul(y, y).unwrap();
        let err = tape.ensure_finite().unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }
}
