use std::collections::BTreeMap;

use super::params::{ParamId, ParamStore};
use super::BN_EPS;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Negative slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Reduction / normalization axis of a matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Along axis 0: one result per column.
    Rows,
    /// Along axis 1: one result per row.
    Cols,
}

/// How a batch-norm node obtains its statistics.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchNormMode {
    /// Statistics of the current batch; gradients flow through them.
    Batch,
    /// Fixed (running) statistics.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Transpose(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    LeakyRelu(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var, Axis),
    LogSoftmax(Var, Axis),
    L2Normalize(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, Axis),
    Concat(Vec<Var>, Axis),
    SelectRows(Var, Vec<usize>),
    Gather(Var, Vec<(usize, usize)>),
    PairwiseSqDist(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        // per-column mean and 1/sqrt(var + eps)
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Map(Var, fn(f64) -> f64),
}

struct Node {
    op: Op,
    value: Tensor,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Adjoints of the trainable leaves, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.map.insert(id, grad);
    }
}

/// Define-by-run tape. Values are computed when an operation is recorded.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{op} expects a matrix, got shape {:?}",
            t.shape()
        )))
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(t) => {
            for (a, d) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, op: &'static str, kind: Op, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = match &kind {
            Op::Leaf => false,
            other => inputs(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op: kind,
            value,
            param: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a stored parameter. Trainable entries become gradient leaves;
    /// buffers become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.nodes.push(Node {
            op: Op::Leaf,
            value: store.get(id).clone(),
            param: trainable.then_some(id),
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter as a constant regardless of its flag.
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", Op::MatMul(a, b), out)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let out = zip_map(ta, tb, f);
        self.push(name, op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `[r, c] + [1, c]`, broadcasting the row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        require_matrix("add_row", ta)?;
        if !tr.is_matrix() || tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(mismatch("add_row", ta, tr));
        }
        let c = ta.cols();
        let mut out = ta.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tr.data()[i % c];
        }
        self.push("add_row", Op::AddRow(a, row), out)
    }

    /// `[r, c] * [r, 1]`, scaling each row of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        require_matrix("mul_col", ta)?;
        if !tc.is_matrix() || tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(mismatch("mul_col", ta, tc));
        }
        let c = ta.cols();
        let mut out = ta.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= tc.data()[i / c];
        }
        self.push("mul_col", Op::MulCol(a, col), out)
    }

    /// `x · w + b` with `b` a `1 × out` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let mut out = self.value(x).matmul(self.value(w))?;
        let tb = self.value(b);
        if !tb.is_matrix() || tb.rows() != 1 || tb.cols() != out.cols() {
            return Err(mismatch("affine", &out, tb));
        }
        let c = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % c];
        }
        self.push("affine", Op::Affine(x, w, b), out)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * k);
        self.push("scale", Op::Scale(a, k), out)
    }

    pub fn shift(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + k);
        self.push("shift", Op::Shift(a), out)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        require_matrix("transpose", self.value(a))?;
        let out = self.value(a).transpose();
        self.push("transpose", Op::Transpose(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(crate::tensor::sigmoid);
        self.push("sigmoid", Op::Sigmoid(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", Op::Exp(a), out)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push("log", Op::Log(a), out)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
        self.push("leaky_relu", Op::LeakyRelu(a), out)
    }

    /// Elementwise `a^p`; inputs must be positive unless `p` is a
    /// non-negative integer.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v.powf(p));
        self.push("powf", Op::Powf(a, p), out)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push("clamp", Op::Clamp(a, lo, hi), out)
    }

    /// Elementwise custom function with a user-supplied derivative.
    pub fn map(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push("map", Op::Map(a, df), out)
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        require_matrix("softmax", self.value(a))?;
        let out = softmax_values(self.value(a), axis, false);
        self.push("softmax", Op::Softmax(a, axis), out)
    }

    pub fn log_softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        require_matrix("log_softmax", self.value(a))?;
        let out = softmax_values(self.value(a), axis, true);
        self.push("log_softmax", Op::LogSoftmax(a, axis), out)
    }

    /// Row-wise ℓ2 normalization. Rows with norm below 1e-12 map to zero
    /// and pass no gradient.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("l2_normalize", ta)?;
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = crate::tensor::norm(row);
            if n < 1e-12 {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        self.push("l2_normalize", Op::L2Normalize(a), out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Op::Mean(a), Tensor::scalar(s))
    }

    /// Sum along an axis, keeping it as size 1.
    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let t = self.value(a);
        require_matrix("sum_axis", t)?;
        let (r, c) = (t.rows(), t.cols());
        let out = match axis {
            Axis::Rows => {
                let mut s = vec![0.0; c];
                for i in 0..r {
                    for (acc, v) in s.iter_mut().zip(t.row(i)) {
                        *acc += v;
                    }
                }
                Tensor::row_vector(&s)
            }
            Axis::Cols => {
                let s: Vec<f64> = (0..r).map(|i| t.row(i).iter().sum()).collect();
                Tensor::column_vector(&s)
            }
        };
        self.push("sum_axis", Op::SumAxis(a, axis), out)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let t0 = self.value(*first);
        require_matrix("concat", t0)?;
        let out = match axis {
            Axis::Rows => {
                let c = t0.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let t = self.value(*p);
                    if !t.is_matrix() || t.cols() != c {
                        return Err(mismatch("concat", t0, t));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, c, data)?
            }
            Axis::Cols => {
                let r = t0.rows();
                let mut cols = 0;
                for p in parts {
                    let t = self.value(*p);
                    if !t.is_matrix() || t.rows() != r {
                        return Err(mismatch("concat", t0, t));
                    }
                    cols += t.cols();
                }
                let mut data = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for p in parts {
                        data.extend_from_slice(self.value(*p).row(i));
                    }
                }
                Tensor::matrix(r, cols, data)?
            }
        };
        self.push("concat", Op::Concat(parts.to_vec(), axis), out)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        require_matrix("select_rows", self.value(a))?;
        let out = self.value(a).select_rows(rows)?;
        self.push("select_rows", Op::SelectRows(a, rows.to_vec()), out)
    }

    /// Picks `(row, col)` entries into an `n × 1` column.
    pub fn gather(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(a);
        require_matrix("gather", t)?;
        let mut vals = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= t.rows() || c >= t.cols() {
                return Err(Error::InvalidArgument(format!(
                    "gather index ({r}, {c}) out of range for {:?}",
                    t.shape()
                )));
            }
            vals.push(t.at(r, c));
        }
        self.push("gather", Op::Gather(a, idx.to_vec()), Tensor::column_vector(&vals))
    }

    /// `out[i][j] = ‖x_i − y_j‖²` for `x: n × d`, `y: m × d`.
    pub fn pairwise_sq_dist(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if !tx.is_matrix() || !ty.is_matrix() || tx.cols() != ty.cols() {
            return Err(mismatch("pairwise_sq_dist", tx, ty));
        }
        let (n, m) = (tx.rows(), ty.rows());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(
                    tx.row(i)
                        .iter()
                        .zip(ty.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum(),
                );
            }
        }
        let out = Tensor::matrix(n, m, out)?;
        self.push("pairwise_sq_dist", Op::PairwiseSqDist(x, y), out)
    }

    /// Batch normalization over the rows of `x`, followed by the per-column
    /// affine `gamma`, `beta` (both `1 × F`).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: &BatchNormMode) -> Result<Var> {
        let tx = self.value(x);
        require_matrix("batch_norm", tx)?;
        let (n, f) = (tx.rows(), tx.cols());
        for p in [gamma, beta] {
            let t = self.value(p);
            if t.shape() != [1, f] {
                return Err(mismatch("batch_norm", tx, t));
            }
        }
        let (mean, var, batch_stats) = match mode {
            BatchNormMode::Batch => {
                if n < 2 {
                    return Err(Error::Contract(
                        "batch statistics need at least two rows".into(),
                    ));
                }
                let mut mean = vec![0.0; f];
                for i in 0..n {
                    for (m, v) in mean.iter_mut().zip(tx.row(i)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; f];
                for i in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(tx.row(i)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var, true)
            }
            BatchNormMode::Fixed { mean, var } => {
                if mean.len() != f || var.len() != f {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm",
                        lhs: vec![1, f],
                        rhs: vec![1, mean.len()],
                    });
                }
                (mean.clone(), var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = tx.clone();
        for i in 0..n {
            let row = out.row_mut(i);
            for j in 0..f {
                row[j] = (row[j] - mean[j]) * inv_std[j] * g[j] + b[j];
            }
        }
        self.push(
            "batch_norm",
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            out,
        )
    }

    /// Reverse pass from a scalar root. Returns adjoints for every trainable
    /// leaf reachable from `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        let mut grads = Gradients::default();
        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Some(pid) = node.param {
                match grads.map.get_mut(&pid) {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += d;
                        }
                    }
                    None => {
                        grads.map.insert(pid, g);
                    }
                }
                continue;
            }
            for (input, delta) in self.local_grads(idx, &g)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut adj[input.0], delta);
                }
            }
        }
        Ok(grads)
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let ga = g.matmul(&val(b).transpose())?;
                let gb = val(a).transpose().matmul(g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, zip_map(g, val(b), |x, y| x * y)),
                (*b, zip_map(g, val(a), |x, y| x * y)),
            ],
            Op::Div(a, b) => {
                let ga = zip_map(g, val(b), |x, y| x / y);
                let tmp = zip_map(g, y, |x, q| x * q);
                let gb = zip_map(&tmp, val(b), |x, d| -x / d);
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddRow(a, row) => {
                let c = g.cols();
                let mut gr = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    gr[i % c] += v;
                }
                vec![(*a, g.clone()), (*row, Tensor::row_vector(&gr))]
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (val(a), val(col));
                let c = ta.cols();
                let mut ga = g.clone();
                let mut gc = vec![0.0; ta.rows()];
                for (i, v) in ga.data_mut().iter_mut().enumerate() {
                    gc[i / c] += *v * ta.data()[i];
                    *v *= tc.data()[i / c];
                }
                vec![(*a, ga), (*col, Tensor::column_vector(&gc))]
            }
            Op::Affine(x, w, b) => {
                let gx = g.matmul(&val(w).transpose())?;
                let gw = val(x).transpose().matmul(g)?;
                let c = g.cols();
                let mut gb = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % c] += v;
                }
                vec![(*x, gx), (*w, gw), (*b, Tensor::row_vector(&gb))]
            }
            Op::Scale(a, k) => vec![(*a, g.map(|v| v * k))],
            Op::Shift(a) => vec![(*a, g.clone())],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Sigmoid(a) => vec![(*a, zip_map(g, y, |d, s| d * s * (1.0 - s)))],
            Op::Exp(a) => vec![(*a, zip_map(g, y, |d, e| d * e))],
            Op::Log(a) => vec![(*a, zip_map(g, val(a), |d, x| d / x))],
            Op::LeakyRelu(a) => vec![(
                *a,
                zip_map(g, val(a), |d, x| if x > 0.0 { d } else { d * LEAKY_SLOPE }),
            )],
            Op::Powf(a, p) => vec![(
                *a,
                zip_map(g, val(a), |d, x| {
                    if *p == 0.0 {
                        0.0
                    } else {
                        d * p * x.powf(p - 1.0)
                    }
                }),
            )],
            Op::Clamp(a, lo, hi) => vec![(
                *a,
                zip_map(g, val(a), |d, x| if x < *lo || x > *hi { 0.0 } else { d }),
            )],
            Op::Map(a, df) => vec![(*a, zip_map(g, val(a), |d, x| d * df(x)))],
            Op::Softmax(a, axis) => {
                let mut ga = zip_map(g, y, |d, s| d * s);
                let dots = axis_sums(&ga, *axis);
                for_each_entry(&mut ga, |i, j, v| {
                    let k = if *axis == Axis::Cols { i } else { j };
                    *v -= y.at(i, j) * dots[k];
                });
                vec![(*a, ga)]
            }
            Op::LogSoftmax(a, axis) => {
                let sums = axis_sums(g, *axis);
                let mut ga = g.clone();
                for_each_entry(&mut ga, |i, j, v| {
                    let k = if *axis == Axis::Cols { i } else { j };
                    *v -= y.at(i, j).exp() * sums[k];
                });
                vec![(*a, ga)]
            }
            Op::L2Normalize(a) => {
                let x = val(a);
                let mut ga = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let n = crate::tensor::norm(x.row(r));
                    if n < 1e-12 {
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let yg = crate::tensor::dot(yr, gr);
                    for (o, (gv, yv)) in ga.row_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                        *o = (gv - yv * yg) / n;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Sum(a) => {
                let d = g.data()[0];
                vec![(*a, Tensor::full(val(a).shape(), d))]
            }
            Op::Mean(a) => {
                let t = val(a);
                let d = g.data()[0] / t.numel() as f64;
                vec![(*a, Tensor::full(t.shape(), d))]
            }
            Op::SumAxis(a, axis) => {
                let mut ga = Tensor::zeros(val(a).shape());
                for_each_entry(&mut ga, |i, j, v| {
                    *v = match axis {
                        Axis::Rows => g.data()[j],
                        Axis::Cols => g.data()[i],
                    };
                });
                vec![(*a, ga)]
            }
            Op::Concat(parts, axis) => {
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let t = val(p);
                    let (r, c) = (t.rows(), t.cols());
                    let mut gp = Vec::with_capacity(r * c);
                    match axis {
                        Axis::Rows => {
                            gp.extend_from_slice(&g.data()[offset * c..(offset + r) * c]);
                            offset += r;
                        }
                        Axis::Cols => {
                            for i in 0..r {
                                gp.extend_from_slice(&g.row(i)[offset..offset + c]);
                            }
                            offset += c;
                        }
                    }
                    res.push((*p, Tensor::matrix(r, c, gp)?));
                }
                res
            }
            Op::SelectRows(a, rows) => {
                let mut ga = Tensor::zeros(val(a).shape());
                for (k, &r) in rows.iter().enumerate() {
                    for (o, d) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += d;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Gather(a, idx) => {
                let t = val(a);
                let mut ga = Tensor::zeros(t.shape());
                let c = t.cols();
                for (k, &(r, col)) in idx.iter().enumerate() {
                    ga.data_mut()[r * c + col] += g.data()[k];
                }
                vec![(*a, ga)]
            }
            Op::PairwiseSqDist(x, yv) => {
                let (tx, ty) = (val(x), val(yv));
                let mut gx = Tensor::zeros(tx.shape());
                let mut gy = Tensor::zeros(ty.shape());
                for i in 0..tx.rows() {
                    for j in 0..ty.rows() {
                        let d = g.at(i, j);
                        if d == 0.0 {
                            continue;
                        }
                        for k in 0..tx.cols() {
                            let diff = 2.0 * d * (tx.at(i, k) - ty.at(j, k));
                            gx.row_mut(i)[k] += diff;
                            gy.row_mut(j)[k] -= diff;
                        }
                    }
                }
                vec![(*x, gx), (*yv, gy)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let tx = val(x);
                let gam = val(gamma).data();
                let (n, f) = (tx.rows(), tx.cols());
                let mut ggam = vec![0.0; f];
                let mut gbeta = vec![0.0; f];
                let mut gx = Tensor::zeros(tx.shape());
                for j in 0..f {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for i in 0..n {
                        let xhat = (tx.at(i, j) - mean[j]) * inv_std[j];
                        let gij = g.at(i, j);
                        ggam[j] += gij * xhat;
                        gbeta[j] += gij;
                        let dxhat = gij * gam[j];
                        sum_d += dxhat;
                        sum_dx += dxhat * xhat;
                    }
                    for i in 0..n {
                        let xhat = (tx.at(i, j) - mean[j]) * inv_std[j];
                        let dxhat = g.at(i, j) * gam[j];
                        gx.row_mut(i)[j] = if *batch_stats {
                            inv_std[j] * (dxhat - sum_d / n as f64 - xhat * sum_dx / n as f64)
                        } else {
                            inv_std[j] * dxhat
                        };
                    }
                }
                vec![
                    (*x, gx),
                    (*gamma, Tensor::row_vector(&ggam)),
                    (*beta, Tensor::row_vector(&gbeta)),
                ]
            }
        };
        Ok(out)
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddRow(a, b)
        | Op::MulCol(a, b)
        | Op::PairwiseSqDist(a, b) => vec![*a, *b],
        Op::Affine(a, b, c) => vec![*a, *b, *c],
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Scale(a, _)
        | Op::Shift(a)
        | Op::Transpose(a)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::LeakyRelu(a)
        | Op::Powf(a, _)
        | Op::Clamp(a, _, _)
        | Op::Map(a, _)
        | Op::Softmax(a, _)
        | Op::LogSoftmax(a, _)
        | Op::L2Normalize(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumAxis(a, _)
        | Op::SelectRows(a, _)
        | Op::Gather(a, _) => vec![*a],
        Op::Concat(parts, _) => parts.clone(),
    }
}

fn for_each_entry(t: &mut Tensor, mut f: impl FnMut(usize, usize, &mut f64)) {
    let c = t.cols();
    for (k, v) in t.data_mut().iter_mut().enumerate() {
        f(k / c, k % c, v);
    }
}

/// Sums along `axis`: one value per row (`Cols`) or per column (`Rows`).
fn axis_sums(t: &Tensor, axis: Axis) -> Vec<f64> {
    let (r, c) = (t.rows(), t.cols());
    match axis {
        Axis::Cols => (0..r).map(|i| t.row(i).iter().sum()).collect(),
        Axis::Rows => {
            let mut s = vec![0.0; c];
            for i in 0..r {
                for (acc, v) in s.iter_mut().zip(t.row(i)) {
                    *acc += v;
                }
            }
            s
        }
    }
}

fn softmax_values(t: &Tensor, axis: Axis, log: bool) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = t.clone();
    let lanes: Vec<Vec<usize>> = match axis {
        Axis::Cols => (0..r).map(|i| (0..c).map(|j| i * c + j).collect()).collect(),
        Axis::Rows => (0..c).map(|j| (0..r).map(|i| i * c + j).collect()).collect(),
    };
    let data = out.data_mut();
    for lane in lanes {
        let max = lane.iter().map(|&k| data[k]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = lane.iter().map(|&k| (data[k] - max).exp()).sum();
        let lse = max + z.ln();
        for &k in &lane {
            data[k] = if log {
                data[k] - lse
            } else {
                (data[k] - lse).exp()
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.scalar(0.0);
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.item(y).unwrap(), 0.5);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(&[0.0, 0.0]));
        let y = g.softmax(x, Axis::Cols).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn log_of_zero_is_numeric_failure() {
        let mut g = Graph::new();
        let x = g.scalar(0.0);
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
    }

    fn one_param(value: Tensor) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", value, true).unwrap();
        (store, id)
    }

    #[test]
    fn square_gradient() {
        let (store, id) = one_param(Tensor::scalar(3.0));
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_sigmoid_gradient_at_zero() {
        let (store, id) = one_param(Tensor::zeros(&[1, 4]));
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let s = g.sigmoid(x).unwrap();
        let y = g.sum(s).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let (store, id) = one_param(Tensor::zeros(&[1, 2]));
        let mut g = Graph::new();
        let x = g.param(&store, id);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_and_buffers_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(2.0), true).unwrap();
        let buf = store.add("buf", Tensor::scalar(5.0), false).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, w);
        let b = g.param(&store, buf);
        let c = g.frozen(&store, w);
        let ab = g.mul(a, b).unwrap();
        let y = g.mul(ab, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get(w).unwrap().data(), &[10.0]);
        assert!(!grads.contains(buf));
    }

    #[test]
    fn shared_leaf_accumulates() {
        let (store, id) = one_param(Tensor::scalar(1.5));
        let mut g = Graph::new();
        let x1 = g.param(&store, id);
        let x2 = g.param(&store, id);
        let y = g.add(x1, x2).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[2.0]);
    }

    #[test]
    fn batch_norm_batch_mode_needs_two_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let gam = g.constant(Tensor::full(&[1, 3], 1.0));
        let bet = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.batch_norm(x, gam, bet, &BatchNormMode::Batch).is_err());
        let fixed = BatchNormMode::Fixed {
            mean: vec![0.0; 3],
            var: vec![0.0; 3],
        };
        // zero variance divides by sqrt(eps), never by zero
        let y = g.batch_norm(x, gam, bet, &fixed).unwrap();
        assert!(g.value(y).all_finite());
    }
}
