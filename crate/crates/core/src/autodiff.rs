//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward evaluation. Each method
//! pushes a node holding the computed value and enough saved state to run its
//! vector-Jacobian product later. [`Tape::backward`] walks the tape in reverse
//! and returns the gradient of a scalar loss with respect to every node that
//! depends on a parameter.
//!
//! One tape per sample: tapes are cheap, single-threaded and never shared,
//! which keeps the forward pass bitwise deterministic.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
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
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddConst(Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Log(Var),
    Logit(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Arc<Vec<usize>>),
    OuterAdd(Var, Var),
    Normalize { x: Var, alpha: f64, std: f64 },
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    RowNormalize { x: Var, row_sums: Vec<f64> },
    Sum(Var),
    Mean(Var),
    StraightThrough(Var),
    MixMasks { weights: Var, masks: Arc<Vec<Tensor>> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph for one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Config(format!("shape mismatch in `{op}`: {detail}"))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Population mean/std below which a normalization input counts as constant.
fn is_degenerate(mean: f64, std: f64) -> bool {
    std <= 1e-12 * mean.abs().max(1.0)
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    fn check_row(&self, op: &str, x: Var, row: Var) -> Result<()> {
        let (xs, rs) = (self.value(x), self.value(row));
        if rs.len() != xs.cols() {
            return Err(shape_err(op, format!("row {:?} vs matrix {:?}", rs.shape(), xs.shape())));
        }
        Ok(())
    }

    /// `x + 1 * row`: adds a `1 x C` row to every row of an `R x C` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", x, row)?;
        let c = self.value(x).cols();
        let r = self.value(row).data().to_vec();
        let mut value = self.value(x).clone();
        for (k, v) in value.data_mut().iter_mut().enumerate() {
            *v += r[k % c];
        }
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(value, Op::AddRow(x, row), needs))
    }

    /// Scales every row of `x` elementwise by a `1 x C` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", x, row)?;
        let c = self.value(x).cols();
        let r = self.value(row).data().to_vec();
        let mut value = self.value(x).clone();
        for (k, v) in value.data_mut().iter_mut().enumerate() {
            *v *= r[k % c];
        }
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(value, Op::MulRow(x, row), needs))
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(shape_err("add_const", format!("{:?} vs {:?}", self.value(x).shape(), c.shape())));
        }
        let value = self.value(x).zip_map(c, |a, b| a + b);
        let needs = self.needs(x);
        Ok(self.push(value, Op::AddConst(x), needs))
    }

    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(shape_err("mul_const", format!("{:?} vs {:?}", self.value(x).shape(), c.shape())));
        }
        let value = self.value(x).zip_map(&c, |a, b| a * b);
        let needs = self.needs(x);
        Ok(self.push(value, Op::MulConst(x, c), needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(shape_err("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let value = va.matmul(vb);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let needs = self.needs(x);
        self.push(value, Op::Transpose(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// `ln(x / (1 - x))`, the inverse of the sigmoid.
    pub fn logit(&mut self, x: Var) -> Var {
        self.unary(x, |v| (v / (1.0 - v)).ln(), Op::Logit(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        let rows = self.value(*first).rows();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(shape_err(
                "concat_cols",
                format!("row count {} vs {}", self.value(*bad).rows(), rows),
            ));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(Tensor::matrix(rows, total, data), Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let v = self.value(x);
        if start + width > v.cols() || width == 0 {
            return Err(shape_err(
                "slice_cols",
                format!("columns {start}..{} of {:?}", start + width, v.shape()),
            ));
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + width]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(rows, width, data), Op::SliceCols(x, start), needs))
    }

    /// `out.flat[k] = x.flat[indices[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, indices: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != indices.len() {
            return Err(shape_err("gather", format!("{} indices into shape {shape:?}", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
            return Err(shape_err("gather", format!("index {bad} out of {} values", v.len())));
        }
        let data = indices.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Gather(x, indices), needs))
    }

    /// `out[i][j] = a[i] + b[j]` for column vectors `a` (N) and `b` (M).
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != 1 && va.rows() != 1 || vb.cols() != 1 && vb.rows() != 1 {
            return Err(shape_err("outer_add", format!("{:?} (+) {:?}", va.shape(), vb.shape())));
        }
        let (n, m) = (va.len(), vb.len());
        let mut data = Vec::with_capacity(n * m);
        for &x in va.data() {
            for &y in vb.data() {
                data.push(x + y);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(n, m, data), Op::OuterAdd(a, b), needs))
    }

    /// Shifts and scales all entries to mean 0 and population std `alpha`.
    /// A constant input maps to all zeros.
    pub fn normalize(&mut self, x: Var, alpha: f64) -> Var {
        let v = self.value(x);
        let n = v.len() as f64;
        let mean = v.mean();
        let var = v.data().iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let (value, std) = if is_degenerate(mean, std) {
            (Tensor::zeros(v.shape()), 0.0)
        } else {
            (v.map(|a| alpha * (a - mean) / std), std)
        };
        let needs = self.needs(x);
        self.push(value, Op::Normalize { x, alpha, std }, needs)
    }

    /// Per-row standardization (LayerNorm without the affine part).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = v.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, a) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (a - mean) * inv;
            }
            inv_std.push(inv);
        }
        let needs = self.needs(x);
        self.push(Tensor::matrix(rows, cols, out), Op::LayerNormRows { x, inv_std }, needs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = v.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for (o, a) in o.iter_mut().zip(row) {
                *o = (a - max).exp();
                total += *o;
            }
            o.iter_mut().for_each(|e| *e /= total);
        }
        let needs = self.needs(x);
        self.push(Tensor::matrix(rows, cols, out), Op::SoftmaxRows(x), needs)
    }

    /// Divides each row by its sum; rows summing to zero stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = vec![0.0; rows * cols];
        let mut row_sums = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = v.row(r);
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                for (o, a) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                    *o = a / s;
                }
            }
            row_sums.push(s);
        }
        let needs = self.needs(x);
        self.push(Tensor::matrix(rows, cols, out), Op::RowNormalize { x, row_sums }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Straight-through estimator: the forward value is `hard`, the backward
    /// pass routes the incoming gradient unchanged into `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.value(soft).shape() {
            return Err(shape_err(
                "straight_through",
                format!("{:?} vs {:?}", hard.shape(), self.value(soft).shape()),
            ));
        }
        let needs = self.needs(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), needs))
    }

    /// `out[i][j] = sum_l weights[i][l] * masks[l][i][j]`.
    pub fn mix_masks(&mut self, weights: Var, masks: Arc<Vec<Tensor>>) -> Result<Var> {
        let w = self.value(weights);
        let first = masks.first().ok_or_else(|| shape_err("mix_masks", "empty mask list".into()))?;
        let (n, m) = (first.rows(), first.cols());
        if w.cols() != masks.len() || w.rows() != n {
            return Err(shape_err(
                "mix_masks",
                format!("weights {:?} for {} masks of {n}x{m}", w.shape(), masks.len()),
            ));
        }
        let mut out = vec![0.0; n * m];
        for (l, mask) in masks.iter().enumerate() {
            for i in 0..n {
                let wil = w.get(i, l);
                if wil == 0.0 {
                    continue;
                }
                for (o, s) in out[i * m..(i + 1) * m].iter_mut().zip(mask.row(i)) {
                    *o += wil * s;
                }
            }
        }
        let needs = self.needs(weights);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MixMasks { weights, masks }, needs))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "backward from node {} but the tape only holds {} nodes (forward not evaluated)",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                acc(*b, g.zip_map(self.value(*a), |gv, av| gv * av));
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                let rs = self.value(*row).shape().to_vec();
                let colsum = column_sums(g);
                acc(*row, Tensor::new(rs, colsum).expect("row shape"));
            }
            Op::MulRow(x, row) => {
                let r = self.value(*row);
                let c = g.cols();
                let mut gx = g.clone();
                for (k, v) in gx.data_mut().iter_mut().enumerate() {
                    *v *= r.data()[k % c];
                }
                acc(*x, gx);
                let prod = g.zip_map(self.value(*x), |a, b| a * b);
                acc(*row, Tensor::new(r.shape().to_vec(), column_sums(&prod)).expect("row shape"));
            }
            Op::AddConst(x) => acc(*x, g.clone()),
            Op::MulConst(x, c) => acc(*x, g.zip_map(c, |a, b| a * b)),
            Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(self.value(*b)));
                acc(*b, self.value(*a).t_matmul(g));
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::Sigmoid(x) => acc(*x, g.zip_map(y, |gv, s| gv * s * (1.0 - s))),
            Op::Tanh(x) => acc(*x, g.zip_map(y, |gv, t| gv * (1.0 - t * t))),
            Op::Relu(x) => acc(*x, g.zip_map(self.value(*x), |gv, a| if a > 0.0 { gv } else { 0.0 })),
            Op::Abs(x) => acc(
                *x,
                g.zip_map(self.value(*x), |gv, a| {
                    if a > 0.0 {
                        gv
                    } else if a < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Log(x) => acc(*x, g.zip_map(self.value(*x), |gv, a| gv / a)),
            Op::Logit(x) => acc(*x, g.zip_map(self.value(*x), |gv, a| gv / (a * (1.0 - a)))),
            Op::Clamp(x, lo, hi) => acc(
                *x,
                g.zip_map(self.value(*x), |gv, a| if a >= *lo && a <= *hi { gv } else { 0.0 }),
            ),
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&g.row(r)[start..start + w]);
                    }
                    acc(*p, Tensor::matrix(rows, w, data));
                    start += w;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    for c in 0..w {
                        gx.set(r, start + c, g.get(r, c));
                    }
                }
                acc(*x, gx);
            }
            Op::Gather(x, indices) => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let d = gx.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    d[i] += g.data()[k];
                }
                acc(*x, gx);
            }
            Op::OuterAdd(a, b) => {
                let (n, m) = (g.rows(), g.cols());
                let mut ga = vec![0.0; n];
                let mut gb = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        let v = g.get(i, j);
                        ga[i] += v;
                        gb[j] += v;
                    }
                }
                acc(*a, Tensor::new(self.value(*a).shape().to_vec(), ga).expect("shape"));
                acc(*b, Tensor::new(self.value(*b).shape().to_vec(), gb).expect("shape"));
            }
            Op::Normalize { x, alpha, std } => {
                if *std == 0.0 {
                    return;
                }
                // y = alpha * xhat, xhat = (x - mean) / std.
                let n = g.len() as f64;
                let g_mean = g.mean();
                let gx_hat_mean =
                    g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv / alpha).sum::<f64>() / n;
                let scale = alpha / std;
                acc(
                    *x,
                    g.zip_map(y, |gv, yv| scale * (gv - g_mean - (yv / alpha) * gx_hat_mean)),
                );
            }
            Op::LayerNormRows { x, inv_std } => {
                let (rows, cols) = (g.rows(), g.cols());
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let gm = gr.iter().sum::<f64>() / cols as f64;
                    let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        gx[r * cols + c] = inv_std[r] * (gr[c] - gm - yr[c] * gym);
                    }
                }
                acc(*x, Tensor::matrix(rows, cols, gx));
            }
            Op::SoftmaxRows(x) => {
                let (rows, cols) = (g.rows(), g.cols());
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*x, Tensor::matrix(rows, cols, gx));
            }
            Op::RowNormalize { x, row_sums } => {
                let (rows, cols) = (g.rows(), g.cols());
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let s = row_sums[r];
                    if s == 0.0 {
                        continue;
                    }
                    let gr = g.row(r);
                    let dot: f64 = gr.iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = (gr[c] - dot) / s;
                    }
                }
                acc(*x, Tensor::matrix(rows, cols, gx));
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.value(*x).shape(), g.item())),
            Op::Mean(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::full(xv.shape(), g.item() / xv.len() as f64));
            }
            Op::StraightThrough(soft) => acc(*soft, g.clone()),
            Op::MixMasks { weights, masks } => {
                let (n, l_count) = (g.rows(), masks.len());
                let mut gw = vec![0.0; n * l_count];
                for (l, mask) in masks.iter().enumerate() {
                    for i in 0..n {
                        gw[i * l_count + l] =
                            g.row(i).iter().zip(mask.row(i)).map(|(a, b)| a * b).sum();
                    }
                }
                acc(*weights, Tensor::matrix(n, l_count, gw));
            }
        }
    }
}

fn column_sums(g: &Tensor) -> Vec<f64> {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for (k, v) in g.data().iter().enumerate() {
        out[k % c] += v;
    }
    out
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to an arbitrary node, if it lies on a path to the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients keyed by parameter.
    pub fn params(&self, tape: &Tape) -> BTreeMap<ParamId, Tensor> {
        let mut out = BTreeMap::new();
        for (&id, &v) in &tape.param_vars {
            if let Some(g) = self.wrt(v) {
                out.insert(id, g.clone());
            }
        }
        out
    }

    /// Adds `scale * grad` into every parameter's gradient buffer.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore, scale: f64) {
        for (id, mut g) in self.params(tape) {
            g.scale_assign(scale);
            store.get_mut(id).gradient.add_assign(&g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values.iter().map(|(n, t)| store.add(*n, t.clone()).unwrap()).collect();
        (store, ids)
    }

    #[test]
    fn identity_and_activations_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]));
        let y = tape.scale(x, 1.0);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);

        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        let t = tape.tanh(z);
        let gtu = tape.mul(t, s).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);
        assert_eq!(tape.value(gtu).item(), 0.0);
    }

    #[test]
    fn scalar_gradients() {
        let (store, ids) = store_with(&[("p", Tensor::scalar(3.0))]);
        let mut tape = Tape::new();
        let p = tape.param(&store, ids[0]);
        let g = tape.backward(p).unwrap();
        assert_eq!(g.wrt(p).unwrap().item(), 1.0);

        let mut tape = Tape::new();
        let p = tape.param(&store, ids[0]);
        let sq = tape.mul(p, p).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.params(&tape)[&ids[0]].item(), 6.0);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::State(_))));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("`add`"), "{err}");
    }

    #[test]
    fn normalize_constant_input_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 3], 0.1));
        let y = tape.normalize(x, 1.0);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn row_normalize_zero_rows_stay_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 3.0]]));
        let y = tape.row_normalize(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.25, 0.75]);
    }

    #[test]
    fn straight_through_forward_is_hard() {
        let (store, ids) = store_with(&[("w", Tensor::matrix(1, 2, vec![0.3, 0.7]))]);
        let mut tape = Tape::new();
        let w = tape.param(&store, ids[0]);
        let st = tape.straight_through(Tensor::matrix(1, 2, vec![0.0, 1.0]), w).unwrap();
        assert_eq!(tape.value(st).data(), &[0.0, 1.0]);
        let coef = tape.constant(Tensor::matrix(1, 2, vec![2.0, 5.0]));
        let prod = tape.mul(st, coef).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.params(&tape)[&ids[0]].data(), &[2.0, 5.0]);
    }

    #[test]
    fn param_leaf_is_reused() {
        let (store, ids) = store_with(&[("w", Tensor::scalar(2.0))]);
        let mut tape = Tape::new();
        let a = tape.param(&store, ids[0]);
        let b = tape.param(&store, ids[0]);
        assert_eq!(a, b);
    }
}
