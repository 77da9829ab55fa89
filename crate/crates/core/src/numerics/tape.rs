//! Define-by-run reverse-mode tape over whole matrices.
//!
//! The op set is closed: every node a [`Tape`] can record has a backward
//! rule, and shape errors surface when the node is recorded rather than
//! during [`Tape::backward`]. Index arguments of gather/scatter are
//! constants, so no gradient flows through the choice of rows.

use std::collections::BTreeMap;

use super::matrix::{dot, Matrix};
use super::stable::{gelu, gelu_derivative, softmax_in_place};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamKey;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Kinds of nodes the tape can hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulTransposed,
    Add,
    AddRow,
    Scale,
    Gelu,
    Relu,
    SoftmaxRows,
    LayerNorm,
    RowScale,
    GatherRows,
    ScatterRows,
    EntropyRows,
    CrossEntropy,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulTransposed(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Relu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    RowScale {
        x: usize,
        weights: usize,
        col: usize,
    },
    GatherRows(usize, Vec<usize>),
    ScatterRows(usize, Vec<usize>),
    EntropyRows(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Matrix,
    },
    Sum(usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulTransposed(..) => OpKind::MatMulTransposed,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Relu(_) => OpKind::Relu,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::RowScale { .. } => OpKind::RowScale,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::ScatterRows(..) => OpKind::ScatterRows,
            Op::EntropyRows(_) => OpKind::EntropyRows,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(_) => OpKind::Sum,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    param: Option<ParamKey>,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Gradients of a scalar with respect to the trainable leaves, keyed by
/// parameter. A key registered more than once accumulates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamKey, Matrix>,
}

impl Gradients {
    pub fn get(&self, key: &ParamKey) -> Option<&Matrix> {
        self.map.get(key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Matrix)> {
        self.map.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.map.keys()
    }

    /// Adds `scale · other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (k, g) in &other.map {
            match self.map.get_mut(k) {
                Some(acc) => {
                    for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *a += scale * b;
                    }
                }
                None => {
                    self.map.insert(*k, g.scale(scale));
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Matrix::is_finite)
    }
}

#[derive(Debug, Default)]
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient is reported under `key`.
    pub fn param(&mut self, key: ParamKey, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(key);
        v
    }

    /// Registers `value` as a parameter when `trainable`, else as a constant.
    pub fn leaf(&mut self, key: ParamKey, value: &Matrix, trainable: bool) -> Var {
        if trainable {
            self.param(key, value.clone())
        } else {
            self.constant(value.clone())
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_transposed(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::MatMulTransposed(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    /// Adds the `1×cols` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(shape_err(
                "add_row",
                format!("{:?} + row {:?}", x.shape(), r.shape()),
            ));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (d, s) in value.row_mut(i).iter_mut().zip(r.as_slice()) {
                *d += s;
            }
        }
        let rg = self.rg(a.0) || self.rg(row.0);
        Ok(self.push(value, Op::AddRow(a.0, row.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a.0);
        self.push(value, Op::Scale(a.0, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a.0);
        self.push(value, Op::Gelu(a.0), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a.0);
        self.push(value, Op::Relu(a.0), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        if value.cols() == 0 {
            return Err(Error::EmptyLogits);
        }
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i));
        }
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::SoftmaxRows(a.0), rg))
    }

    /// Row-wise layer normalization with `1×cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let s = self.value(v).shape();
            if s != (1, cols) {
                return Err(shape_err("layer_norm", format!("{name} {s:?} for width {cols}")));
            }
        }
        if cols == 0 {
            return Err(shape_err("layer_norm", "zero width"));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut normalized = Matrix::zeros(xv.rows(), cols);
        let mut value = Matrix::zeros(xv.rows(), cols);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                normalized[(i, j)] = h;
                value[(i, j)] = h * g.as_slice()[j] + b.as_slice()[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(bias.0);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// `out[t, :] = weights[t, col] · x[t, :]`.
    pub fn row_scale(&mut self, x: Var, weights: Var, col: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weights));
        if wv.rows() != xv.rows() || col >= wv.cols() {
            return Err(shape_err(
                "row_scale",
                format!("{:?} by column {col} of {:?}", xv.shape(), wv.shape()),
            ));
        }
        let mut value = xv.clone();
        for t in 0..value.rows() {
            let w = wv[(t, col)];
            for v in value.row_mut(t) {
                *v *= w;
            }
        }
        let rg = self.rg(x.0) || self.rg(weights.0);
        Ok(self.push(value, Op::RowScale { x: x.0, weights: weights.0, col }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.rows()) {
            return Err(shape_err("gather_rows", format!("row {bad} of {}", xv.rows())));
        }
        let mut value = Matrix::zeros(indices.len(), xv.cols());
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).copy_from_slice(xv.row(i));
        }
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::GatherRows(x.0, indices.to_vec()), rg))
    }

    /// Places row `r` of `x` at row `indices[r]` of a zero `rows×cols` matrix.
    pub fn scatter_rows(&mut self, x: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let xv = self.value(x);
        if indices.len() != xv.rows() {
            return Err(shape_err(
                "scatter_rows",
                format!("{} indices for {} rows", indices.len(), xv.rows()),
            ));
        }
        let mut seen = vec![false; rows];
        for &i in indices {
            if i >= rows || seen[i] {
                return Err(shape_err("scatter_rows", format!("bad target row {i}")));
            }
            seen[i] = true;
        }
        let mut value = Matrix::zeros(rows, xv.cols());
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(i).copy_from_slice(xv.row(r));
        }
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::ScatterRows(x.0, indices.to_vec()), rg))
    }

    /// Entropy of each row of a probability matrix, as a `rows×1` column.
    pub fn entropy_rows(&mut self, p: Var) -> Result<Var> {
        let pv = self.value(p);
        let mut value = Matrix::zeros(pv.rows(), 1);
        for i in 0..pv.rows() {
            value[(i, 0)] = super::stable::entropy(pv.row(i))?;
        }
        let rg = self.rg(p.0);
        Ok(self.push(value, Op::EntropyRows(p.0), rg))
    }

    /// Mean cross-entropy of row-wise logits against integer labels (`1×1`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() || lv.rows() == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), lv.rows()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= lv.cols()) {
            return Err(shape_err("cross_entropy", format!("label {bad} of {}", lv.cols())));
        }
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (i, &c) in labels.iter().enumerate() {
            let row = lv.row(i);
            let lse = super::stable::log_sum_exp(row)?;
            loss += lse - row[c];
            softmax_in_place(probs.row_mut(i));
        }
        let value = Matrix::filled(1, 1, loss / labels.len() as f64);
        let rg = self.rg(logits.0);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a.0);
        self.push(value, Op::Sum(a.0), rg)
    }

    /// Reverse pass from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Reverse pass seeded with `seed` instead of 1.
    pub fn backward_scaled(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Tape(format!(
                "loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, seed));
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    if let Some(key) = node.param {
                        match out.map.get_mut(&key) {
                            Some(acc) => acc.add_assign(&g)?,
                            None => {
                                out.map.insert(key, g);
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let da = g.matmul_transposed(&self.nodes[*b].value)?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.rg(*b) {
                        let db = self.nodes[*a].value.transposed_matmul(&g)?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::MatMulTransposed(a, b) => {
                    if self.rg(*a) {
                        let da = g.matmul(&self.nodes[*b].value)?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.rg(*b) {
                        let db = g.transposed_matmul(&self.nodes[*a].value)?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) && self.rg(*b) {
                        accumulate(&mut grads, *a, g.clone())?;
                        accumulate(&mut grads, *b, g)?;
                    } else if self.rg(*a) {
                        accumulate(&mut grads, *a, g)?;
                    } else if self.rg(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let mut dr = Matrix::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (d, s) in dr.as_mut_slice().iter_mut().zip(g.row(i)) {
                                *d += s;
                            }
                        }
                        accumulate(&mut grads, *row, dr)?;
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g)?;
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s))?,
                Op::Gelu(a) => {
                    let x = &self.nodes[*a].value;
                    let mut d = g;
                    for (dv, &xv) in d.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        *dv *= gelu_derivative(xv);
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let mut d = g;
                    for (dv, &xv) in d.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        if xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = g;
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let inner = dot(d.row(i), yr);
                        for (dv, &p) in d.row_mut(i).iter_mut().zip(yr) {
                            *dv = p * (*dv - inner);
                        }
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let gv = &self.nodes[*gain].value;
                    let cols = g.cols();
                    if self.rg(*gain) {
                        let mut dg = Matrix::zeros(1, cols);
                        for i in 0..g.rows() {
                            for j in 0..cols {
                                dg.as_mut_slice()[j] += g[(i, j)] * normalized[(i, j)];
                            }
                        }
                        accumulate(&mut grads, *gain, dg)?;
                    }
                    if self.rg(*bias) {
                        let mut db = Matrix::zeros(1, cols);
                        for i in 0..g.rows() {
                            for (d, s) in db.as_mut_slice().iter_mut().zip(g.row(i)) {
                                *d += s;
                            }
                        }
                        accumulate(&mut grads, *bias, db)?;
                    }
                    if self.rg(*x) {
                        let mut dx = Matrix::zeros(g.rows(), cols);
                        let n = cols as f64;
                        for i in 0..g.rows() {
                            let dh: Vec<f64> =
                                (0..cols).map(|j| g[(i, j)] * gv.as_slice()[j]).collect();
                            let mean_dh = dh.iter().sum::<f64>() / n;
                            let mean_dh_h =
                                dh.iter().zip(normalized.row(i)).map(|(a, b)| a * b).sum::<f64>() / n;
                            for j in 0..cols {
                                dx[(i, j)] = inv_std[i]
                                    * (dh[j] - mean_dh - normalized[(i, j)] * mean_dh_h);
                            }
                        }
                        accumulate(&mut grads, *x, dx)?;
                    }
                }
                Op::RowScale { x, weights, col } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*weights].value;
                    if self.rg(*weights) {
                        let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                        for t in 0..xv.rows() {
                            dw[(t, *col)] = dot(g.row(t), xv.row(t));
                        }
                        accumulate(&mut grads, *weights, dw)?;
                    }
                    if self.rg(*x) {
                        let mut dx = g;
                        for t in 0..dx.rows() {
                            let w = wv[(t, *col)];
                            for v in dx.row_mut(t) {
                                *v *= w;
                            }
                        }
                        accumulate(&mut grads, *x, dx)?;
                    }
                }
                Op::GatherRows(x, indices) => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        for (d, s) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::ScatterRows(x, indices) => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        dx.row_mut(r).copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::EntropyRows(p) => {
                    let pv = &self.nodes[*p].value;
                    let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                    for i in 0..pv.rows() {
                        let gi = g[(i, 0)];
                        for j in 0..pv.cols() {
                            let pj = pv[(i, j)].max(f64::MIN_POSITIVE);
                            dp[(i, j)] = -gi * (pj.ln() + 1.0);
                        }
                    }
                    accumulate(&mut grads, *p, dp)?;
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let s = g[(0, 0)] / labels.len() as f64;
                    let mut d = probs.scale(s);
                    for (i, &c) in labels.iter().enumerate() {
                        d[(i, c)] -= s;
                    }
                    accumulate(&mut grads, *logits, d)?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g[(0, 0)]))?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: usize, g: Matrix) -> Result<()> {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
