//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records one forward pass. Parameter leaves borrow their storage,
//! so building a graph over a model copies no weights. Only nodes that depend
//! on a gradient-requiring leaf are differentiated.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Index of a parameter tensor in a [`crate::nn::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Row gather: output row `i` concatenates `group` source rows
/// `src[i*group .. (i+1)*group]`; `None` contributes a zero block.
#[derive(Clone, Debug)]
pub struct RowGather {
    pub group: usize,
    pub src: Vec<Option<u32>>,
}

impl RowGather {
    pub fn new(group: usize, src: Vec<Option<u32>>) -> Self {
        assert!(group > 0 && src.len() % group == 0);
        Self { group, src }
    }

    /// One-to-one row permutation.
    pub fn permutation(order: &[usize]) -> Self {
        Self::new(1, order.iter().map(|&i| Some(i as u32)).collect())
    }

    pub fn out_rows(&self) -> usize {
        self.src.len() / self.group
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let c = x.cols();
        let mut out = Matrix::zeros(self.out_rows(), c * self.group);
        for (slot, src) in self.src.iter().enumerate() {
            if let Some(s) = src {
                let (row, part) = (slot / self.group, slot % self.group);
                out.row_mut(row)[part * c..(part + 1) * c].copy_from_slice(x.row(*s as usize));
            }
        }
        out
    }

    fn scatter_add(&self, grad_out: &Matrix, into: &mut Matrix) {
        let c = into.cols();
        for (slot, src) in self.src.iter().enumerate() {
            if let Some(s) = src {
                let (row, part) = (slot / self.group, slot % self.group);
                let g = &grad_out.row(row)[part * c..(part + 1) * c];
                for (d, v) in into.row_mut(*s as usize).iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRowBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Gather(Var, Arc<RowGather>),
    GatherElems {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    SliceBlock {
        x: Var,
        r0: usize,
        c0: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Arc<Vec<usize>>,
        weight: f64,
    },
    SmoothL1 {
        pred: Var,
        target: Arc<Matrix>,
        rows: Arc<Vec<usize>>,
        weight: f64,
    },
    BceWithLogits {
        logits: Var,
        targets: Arc<Vec<f64>>,
        weight: f64,
    },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
    // LayerNorm: normalized input; CrossEntropy: softmax probabilities.
    aux: Option<Matrix>,
    // LayerNorm: per-row inverse standard deviation.
    aux_vec: Vec<f64>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_K * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Gradients for every parameter leaf that required one.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Accumulates `other` into `self` in parameter order.
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.by_param {
            match self.by_param.get_mut(&id) {
                Some(acc) => acc.add_assign(&g).expect("gradient shapes agree per parameter"),
                None => {
                    self.by_param.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_param.values_mut() {
            *g = g.scale(s);
        }
    }

    pub fn insert(&mut self, id: ParamId, g: Matrix) {
        self.by_param.insert(id, g);
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.push_full(Cow::Owned(value), op, requires_grad, None, None, Vec::new())
    }

    fn push_full(
        &mut self,
        value: Cow<'a, Matrix>,
        op: Op,
        requires_grad: bool,
        param: Option<ParamId>,
        aux: Option<Matrix>,
        aux_vec: Vec<f64>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
            aux,
            aux_vec,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed parameter leaf; gradients are collected under `id` when `trainable`.
    pub fn param(&mut self, id: ParamId, value: &'a Matrix, trainable: bool) -> Var {
        self.push_full(Cow::Borrowed(value), Op::Leaf, trainable, Some(id), None, Vec::new())
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn constant_ref(&mut self, value: &'a Matrix) -> Var {
        self.push_full(Cow::Borrowed(value), Op::Leaf, false, None, None, Vec::new())
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a 1×C row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for input {:?}", bv.shape(), xv.shape()),
            ));
        }
        let mut out = xv.clone();
        let b = bv.row(0).to_vec();
        for i in 0..out.rows() {
            for (o, bb) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRowBroadcast(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN must survive: `f64::max` would turn it into 0
        let out = self.value(x).map(|v| if v <= 0.0 { 0.0 } else { v });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Per-row layer normalization with 1×C `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gamma).shape() != (1, c) || self.value(beta).shape() != (1, c) {
            return Err(Error::shape("layer_norm", format!("affine params for width {c}")));
        }
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for i in 0..xhat.rows() {
            let row = xhat.row_mut(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut out = xhat.clone();
        for i in 0..out.rows() {
            for ((o, gg), bb) in out.row_mut(i).iter_mut().zip(&g).zip(&b) {
                *o = *o * gg + bb;
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push_full(
            Cow::Owned(out),
            Op::LayerNorm { x, gamma, beta },
            rg,
            None,
            Some(xhat),
            inv_std,
        ))
    }

    pub fn gather(&mut self, x: Var, index: &Arc<RowGather>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = index.src.iter().flatten().find(|&&s| s as usize >= xv.rows()) {
            return Err(Error::shape(
                "gather",
                format!("row {bad} out of range for {} rows", xv.rows()),
            ));
        }
        let out = index.apply(xv);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather(x, Arc::clone(index)), rg))
    }

    /// Output (rows×cols) with entry `n` taken from flat element `index[n]` of `x`.
    pub fn gather_elems(
        &mut self,
        x: Var,
        index: &Arc<Vec<usize>>,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        if index.len() != rows * cols || index.iter().any(|&i| i >= xv.len()) {
            return Err(Error::shape("gather_elems", "index does not fit source or output"));
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let out = Matrix::from_parts(rows, cols, data);
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::GatherElems {
                x,
                index: Arc::clone(index),
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Var> {
        let xv = self.value(x);
        if r0 + nr > xv.rows() || c0 + nc > xv.cols() || nr == 0 || nc == 0 {
            return Err(Error::shape(
                "slice",
                format!("block {r0}+{nr} x {c0}+{nc} of {:?}", xv.shape()),
            ));
        }
        let out = xv.block(r0, nr, c0, nc);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceBlock { x, r0, c0 }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let rows = data.len() / cols;
        let rg = self.rg(parts);
        Ok(self.push(
            Matrix::from_parts(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// `weight · Σ_i −ln softmax(logits_i)[targets_i]` as a 1×1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<usize>>, weight: f64) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() || targets.iter().any(|&t| t >= lv.cols()) {
            return Err(Error::shape("cross_entropy", "targets do not match logits"));
        }
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push_full(
            Cow::Owned(Matrix::from_parts(1, 1, vec![weight * loss])),
            Op::CrossEntropy {
                logits,
                targets,
                weight,
            },
            rg,
            None,
            Some(probs),
            Vec::new(),
        ))
    }

    /// `weight · Σ_{i∈rows} Σ_j smoothL1(pred_ij − target_ij)` (transition at 1).
    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: Arc<Matrix>,
        rows: Arc<Vec<usize>>,
        weight: f64,
    ) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || rows.iter().any(|&r| r >= pv.rows()) {
            return Err(Error::shape("smooth_l1", "prediction and target disagree"));
        }
        let mut loss = 0.0;
        for &r in rows.iter() {
            for (p, t) in pv.row(r).iter().zip(target.row(r)) {
                loss += smooth_l1(p - t);
            }
        }
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Matrix::from_parts(1, 1, vec![weight * loss]),
            Op::SmoothL1 {
                pred,
                target,
                rows,
                weight,
            },
            rg,
        ))
    }

    /// `weight · Σ BCE(sigmoid(logits_i), targets_i)` over an n×1 column.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Vec<f64>>, weight: f64) -> Result<Var> {
        let lv = self.value(logits);
        if lv.cols() != 1 || lv.rows() != targets.len() {
            return Err(Error::shape("bce_with_logits", "expects an n×1 logit column"));
        }
        let loss: f64 = lv
            .data()
            .iter()
            .zip(targets.iter())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Matrix::from_parts(1, 1, vec![weight * loss]),
            Op::BceWithLogits {
                logits,
                targets,
                weight,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape("backward", "loss must be 1x1"));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Some(id) = node.param {
                match out.by_param.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        out.by_param.insert(id, g);
                    }
                }
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<'a>, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g)?)?;
                }
            }
            Op::MatMulNT(a, b) => {
                // y = a·bᵀ: da = g·b, db = gᵀ·a
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddRowBroadcast(x, bias) => {
                if self.wants(*bias) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (s, v) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb)?;
                }
                self.accumulate(grads, *x, g.clone())?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s))?,
            Op::Gelu(x) => {
                let gx = g.zip_map(self.value(*x), "gelu", |gv, xv| gv * gelu_grad(xv))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in gx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xhat = node.aux.as_ref().expect("layer norm cache");
                let c = xhat.cols();
                let gam = self.value(*gamma).row(0);
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = Matrix::zeros(1, c);
                    let mut gbeta = Matrix::zeros(1, c);
                    for i in 0..g.rows() {
                        for j in 0..c {
                            gg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                            gbeta.data_mut()[j] += g.get(i, j);
                        }
                    }
                    self.accumulate(grads, *gamma, gg)?;
                    self.accumulate(grads, *beta, gbeta)?;
                }
                if self.wants(*x) {
                    let mut gx = Matrix::zeros(g.rows(), c);
                    for i in 0..g.rows() {
                        let is = node.aux_vec[i];
                        let xr = xhat.row(i);
                        let dxhat: Vec<f64> = g.row(i).iter().zip(gam).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = is / c as f64 * (c as f64 * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::Gather(x, index) => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                index.scatter_add(g, &mut gx);
                self.accumulate(grads, *x, gx)?;
            }
            Op::GatherElems { x, index } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for (n, &i) in index.iter().enumerate() {
                    gx.data_mut()[i] += g.data()[n];
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::SliceBlock { x, r0, c0 } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    gx.row_mut(r0 + i)[*c0..c0 + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        self.accumulate(grads, *p, g.block(0, g.rows(), off, w))?;
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = self.value(*p).rows();
                    if self.wants(*p) {
                        self.accumulate(grads, *p, g.block(off, h, 0, g.cols()))?;
                    }
                    off += h;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weight,
            } => {
                let probs = node.aux.as_ref().expect("softmax cache");
                let s = g.get(0, 0) * weight;
                let mut gl = probs.scale(s);
                for (i, &t) in targets.iter().enumerate() {
                    let v = gl.get(i, t) - s;
                    gl.set(i, t, v);
                }
                self.accumulate(grads, *logits, gl)?;
            }
            Op::SmoothL1 {
                pred,
                target,
                rows,
                weight,
            } => {
                let pv = self.value(*pred);
                let s = g.get(0, 0) * weight;
                let mut gp = Matrix::zeros(pv.rows(), pv.cols());
                for &r in rows.iter() {
                    for j in 0..pv.cols() {
                        let d = pv.get(r, j) - target.get(r, j);
                        let cur = gp.get(r, j);
                        gp.set(r, j, cur + s * smooth_l1_grad(d));
                    }
                }
                self.accumulate(grads, *pred, gp)?;
            }
            Op::BceWithLogits {
                logits,
                targets,
                weight,
            } => {
                let lv = self.value(*logits);
                let s = g.get(0, 0) * weight;
                let data = lv
                    .data()
                    .iter()
                    .zip(targets.iter())
                    .map(|(&x, &t)| s * (1.0 / (1.0 + (-x).exp()) - t))
                    .collect();
                self.accumulate(grads, *logits, Matrix::from_parts(lv.rows(), 1, data))?;
            }
        }
        Ok(())
    }
}
