//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive in execution order. Because a node can
//! only reference nodes created before it, the tape order is already a
//! topological order and [`Graph::backward`] walks it once in reverse.
//!
//! Parameters enter the tape through [`Graph::param`], which copies the
//! current value out of a [`ParamStore`]. Their gradients come back in the
//! returned [`Gradients`] and are folded into the store with
//! [`ParamStore::accumulate`].
//!
//! All primitives work on rank-2 tensors (`[rows, cols]`); rank-0/1 inputs are
//! read as a single row.

mod kernels;

use std::collections::HashMap;

use crate::error::{GpnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub(crate) use kernels::gemm;
use kernels::{attention_backward, attention_forward, log_softmax_row, softmax_row, AttnLayout};

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogClamped(Var),
    MeanRows(Var, usize),
    RepeatRows(Var, usize),
    Sum(Var),
    WeightedPick(Var, Vec<(usize, usize, f64)>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Transpose(Var),
    Gather(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LogClamped(_) => "log",
            Op::MeanRows(..) => "mean_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::Sum(_) => "sum",
            Op::WeightedPick(..) => "weighted_pick",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Transpose(_) => "transpose",
            Op::Gather(..) => "gather",
            Op::Attention { .. } => "attention",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The recorded computation. One graph per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> GpnError {
    GpnError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Signs of the inputs of every differentiable ReLU, in recording order.
    /// Two passes with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad)
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|&x| x > 0.0))
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (used for inputs under test).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a parameter. Repeated calls for the same id return the same
    /// node, so every use contributes to one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.bound.insert(id, v);
        v
    }

    /// Same value as `v`, cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (ta.dims2(), tb.dims2());
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() || ta.len() != tb.len() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("hadamard", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[r, c] + row[c]` broadcast over rows (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (rows, cols) = ta.dims2();
        if tr.len() != cols {
            return Err(shape_err("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            for (x, b) in data[r * cols..(r + 1) * cols].iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// `ln(max(x, PROB_FLOOR))`.
    pub fn log_clamped(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(PROB_FLOOR).ln(), Op::LogClamped(a))
    }

    fn rowwise(&mut self, a: Var, f: fn(&[f64], &mut [f64]), op: Op) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.dims2();
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            f(t.row_slice(r), &mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::matrix(rows, cols, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, op, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise(a, softmax_row, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise(a, log_softmax_row, Op::LogSoftmax(a))
    }

    /// Mean of each consecutive block of `group` rows: `[g·group, c] -> [g, c]`.
    pub fn mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.dims2();
        if group == 0 || rows % group != 0 {
            return Err(GpnError::shape(
                "mean_rows",
                format!("{} rows not divisible into groups of {group}", rows),
            ));
        }
        // Shifted by the block's first row, so identical rows average to
        // exactly that row.
        let out_rows = rows / group;
        let mut out = vec![0.0; out_rows * cols];
        for blk in 0..out_rows {
            let first = t.row_slice(blk * group);
            let dst = &mut out[blk * cols..(blk + 1) * cols];
            for r in blk * group + 1..(blk + 1) * group {
                for ((o, x), f) in dst.iter_mut().zip(t.row_slice(r)).zip(first) {
                    *o += x - f;
                }
            }
            for (o, f) in dst.iter_mut().zip(first) {
                *o = f + *o / group as f64;
            }
        }
        let value = Tensor::matrix(out_rows, cols, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MeanRows(a, group), rg))
    }

    /// Repeat every row `times` times in place: `[g, c] -> [g·times, c]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.dims2();
        let mut out = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                out.extend_from_slice(t.row_slice(r));
            }
        }
        let value = Tensor::matrix(rows * times, cols, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::RepeatRows(a, times), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Scalar `Σ w · a[row, col]` over the given entries. Cross-entropy style
    /// losses are built from this on top of log-probabilities.
    pub fn weighted_pick(&mut self, a: Var, entries: Vec<(usize, usize, f64)>) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.dims2();
        let mut s = 0.0;
        for &(r, c, w) in &entries {
            if r >= rows || c >= cols {
                return Err(GpnError::shape(
                    "weighted_pick",
                    format!("entry ({r}, {c}) outside {:?}", t.shape()),
                ));
            }
            s += w * t.at(r, c);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedPick(a, entries), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::matrix(rows, total, out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.dims2();
        if start > end || end > cols {
            return Err(GpnError::shape(
                "slice_cols",
                format!("{start}..{end} of {:?}", t.shape()),
            ));
        }
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let value = Tensor::matrix(rows, end - start, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start, end), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Embedding lookup: rows of `table` selected by `indices`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let rows = t.rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(GpnError::OutOfRange {
                what: "gather",
                index: bad,
                len: rows,
            });
        }
        let value = t.select_rows(indices);
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::Gather(table, indices.to_vec()), rg))
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences of `seq` rows. `q`, `k`, `v` are `[batch·seq, d]` with
    /// `d` divisible by `heads`; heads occupy contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(GpnError::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        let (rows, d) = tq.dims2();
        if seq == 0 || heads == 0 || rows % seq != 0 || d % heads != 0 {
            return Err(GpnError::shape(
                "attention",
                format!("{:?} with seq {seq}, heads {heads}", tq.shape()),
            ));
        }
        let layout = AttnLayout {
            batch: rows / seq,
            seq,
            heads,
            head_dim: d / heads,
        };
        let (out, probs) = attention_forward(tq.data(), tk.data(), tv.data(), layout);
        let value = Tensor::matrix(rows, d, out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, layout, probs }, rg))
    }

    /// Attention probabilities saved by an attention node, `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.dims2();
        let mut out = vec![0.0; t.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = t.row_slice(r);
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::matrix(rows, cols, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LayerNorm { input: a, inv_std }, rg))
    }

    /// `x · w + b` with `w: [in, out]`, `b: [out]` (bias optional).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(GpnError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &g, &mut grads);
        }
        let mut params = Vec::new();
        let mut leaves = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        params.push((id, g));
                    }
                }
                Op::Leaf if node.requires_grad => {
                    if let Some(g) = grads[i].take() {
                        leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                _ => {}
            }
        }
        Ok(Gradients { params, leaves })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (val(*a).dims2(), val(*b).dims2());
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(*b).data(), true, &mut da, false);
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), true, g, false, &mut db, false);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.to_vec());
                if wants(*row) {
                    let cols = val(*row).len();
                    let mut db = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        db.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                    acc(*row, db);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a).data())
                    .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                    .collect(),
            ),
            Op::Sigmoid(a) => acc(*a, g.iter().zip(y).map(|(d, s)| d * s * (1.0 - s)).collect()),
            Op::Tanh(a) => acc(*a, g.iter().zip(y).map(|(d, t)| d * (1.0 - t * t)).collect()),
            Op::LogClamped(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a).data())
                    .map(|(d, &x)| if x > PROB_FLOOR { d / x } else { 0.0 })
                    .collect(),
            ),
            Op::Softmax(a) => {
                let cols = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in dxr.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LogSoftmax(a) => {
                let cols = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let total: f64 = gr.iter().sum();
                    for ((d, gi), yi) in dxr.iter_mut().zip(gr).zip(yr) {
                        *d = gi - yi.exp() * total;
                    }
                }
                acc(*a, dx);
            }
            Op::MeanRows(a, group) => {
                let cols = node.value.cols();
                let inv = 1.0 / *group as f64;
                let rows = val(*a).rows();
                let mut dx = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let src = &g[(r / group) * cols..(r / group + 1) * cols];
                    dx.extend(src.iter().map(|x| x * inv));
                }
                acc(*a, dx);
            }
            Op::RepeatRows(a, times) => {
                let cols = node.value.cols();
                let mut dx = vec![0.0; val(*a).len()];
                for (r, chunk) in g.chunks(cols).enumerate() {
                    let dst = &mut dx[(r / times) * cols..(r / times + 1) * cols];
                    dst.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                }
                acc(*a, dx);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::WeightedPick(a, entries) => {
                let cols = val(*a).cols();
                let mut dx = vec![0.0; val(*a).len()];
                for &(r, c, w) in entries {
                    dx[r * cols + c] += w * g[0];
                }
                acc(*a, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut dx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dx.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, dx);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let cols = val(*a).cols();
                let w = end - start;
                let mut dx = vec![0.0; val(*a).len()];
                for (r, chunk) in g.chunks(w).enumerate() {
                    dx[r * cols + start..r * cols + end].copy_from_slice(chunk);
                }
                acc(*a, dx);
            }
            Op::Transpose(a) => {
                let (r, c) = node.value.dims2();
                let t = Tensor::matrix(r, c, g.to_vec()).expect("grad shape").transpose();
                acc(*a, t.into_data());
            }
            Op::Gather(table, indices) => {
                let cols = node.value.cols();
                let mut dx = vec![0.0; val(*table).len()];
                for (row, &i) in indices.iter().enumerate() {
                    let dst = &mut dx[i * cols..(i + 1) * cols];
                    dst.iter_mut()
                        .zip(&g[row * cols..(row + 1) * cols])
                        .for_each(|(d, x)| *d += x);
                }
                acc(*table, dx);
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (dq, dk, dv) =
                    attention_backward(val(*q).data(), val(*k).data(), val(*v).data(), probs, g, *layout);
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::LayerNorm { input, inv_std } => {
                let cols = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for (r, inv) in inv_std.iter().enumerate() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let mean_g = gr.iter().sum::<f64>() / cols as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = inv * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                acc(*input, dx);
            }
        }
    }
}

/// Result of one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Vec<f64>)>,
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Graph::input`].
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients, one entry per parameter node on the tape.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }
}
