//! Reverse-mode differentiation over an explicit operation tape.
//!
//! A [`Tape`] records every forward operation of one pass. [`Tape::backward`]
//! consumes the tape, replays it in reverse and returns a [`Gradients`] table
//! holding the derivative of a scalar output with respect to every input leaf
//! and every parameter read through [`Tape::param`].
//!
//! Nodes that do not depend on a leaf or a parameter are never visited during
//! the reverse sweep.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::params::ParamStore;
use super::tensor::{lanes, Tensor};
use crate::error::{Error, Result};

/// Variance floor used by [`Tape::standardize`].
pub const STANDARDIZE_EPS: f64 = 1e-5;
/// Running-statistics momentum used by [`Tape::standardize`].
pub const STANDARDIZE_MOMENTUM: f64 = 0.1;
/// Norms at or below this are treated as zero by the normalizing ops.
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// `standardize` uses batch statistics and records running-stat updates.
    Train,
    /// `standardize` uses the stored running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Abs,
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Elementwise operation selector used by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Abs,
    Relu,
    Sigmoid,
    Negate,
}

/// Row/column pattern of a sparse square matrix, entries listed row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsePattern {
    pub n: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl SparsePattern {
    pub fn new(n: usize, rows: Vec<usize>, cols: Vec<usize>) -> Result<Self> {
        if rows.len() != cols.len() {
            return Err(Error::Invalid("sparse pattern rows/cols differ in length".into()));
        }
        if rows.iter().chain(&cols).any(|&i| i >= n) {
            return Err(Error::Invalid(format!("sparse index out of range for n = {n}")));
        }
        Ok(SparsePattern { n, rows, cols })
    }

    /// Every entry of an `n×n` matrix.
    pub fn dense(n: usize) -> Self {
        let rows = (0..n * n).map(|e| e / n).collect();
        let cols = (0..n * n).map(|e| e % n).collect();
        SparsePattern { n, rows, cols }
    }

    pub fn nnz(&self) -> usize {
        self.rows.len()
    }

    pub fn to_dense(&self, values: &[f64]) -> Vec<f64> {
        let mut m = vec![0.0; self.n * self.n];
        for ((&r, &c), &v) in self.rows.iter().zip(&self.cols).zip(values) {
            m[r * self.n + c] += v;
        }
        m
    }
}

/// Pending running-statistics update produced by a training-mode `standardize`.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Leaf {
    Constant,
    Input,
    Param,
}

enum Op {
    Leaf(Leaf),
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Scale(Var, f64),
    AddConst(Var),
    ClampMin(Var, f64),
    MulScalar(Var, Var),
    Sum(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    NormalizeAxis(Var, usize),
    L2NormalizeRows(Var),
    RowNorms(Var),
    Standardize {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Gather(Var, Rc<[Option<usize>]>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    SpMV {
        values: Var,
        pattern: Rc<SparsePattern>,
        x: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
    params: HashMap<String, Var>,
    stat_updates: Vec<StatUpdate>,
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Tape {
            nodes: Vec::new(),
            mode,
            params: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
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

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        let d = self.data(v);
        assert_eq!(d.len(), 1, "item() on a non-scalar node");
        d[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_raw(&mut self, name: &'static str, shape: &[usize], data: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push(name, value, op, needs_grad)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push("constant", t, Op::Leaf(Leaf::Constant), false)
            .expect("non-finite constant")
    }

    /// Records an input leaf whose gradient is reported by `backward`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push("leaf", t, Op::Leaf(Leaf::Input), true)
    }

    /// Reads a parameter (snapshot of its current value). Repeated reads of
    /// the same name in one pass share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        let trainable = t.requires_grad();
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        let op = if trainable {
            Op::Leaf(Leaf::Param)
        } else {
            Op::Leaf(Leaf::Constant)
        };
        let v = self.push("param", value, op, trainable)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &y) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push_raw("matmul", &[m, n], out, Op::MatMul(a, b), needs)
    }

    /// `values` holds the nonzeros of an `n×n` matrix laid out by `pattern`;
    /// returns the product with the length-`n` vector `x`.
    pub fn spmv(&mut self, values: Var, pattern: &Rc<SparsePattern>, x: Var) -> Result<Var> {
        if self.value(values).numel() != pattern.nnz() {
            return Err(Error::shape("spmv", self.shape(values), &[pattern.nnz()]));
        }
        if self.value(x).numel() != pattern.n {
            return Err(Error::shape("spmv", self.shape(x), &[pattern.n]));
        }
        let (vd, xd) = (self.data(values), self.data(x));
        let mut out = vec![0.0; pattern.n];
        for ((&r, &c), &v) in pattern.rows.iter().zip(&pattern.cols).zip(vd) {
            out[r] += v * xd[c];
        }
        let needs = self.needs(values) || self.needs(x);
        let op = Op::SpMV {
            values,
            pattern: Rc::clone(pattern),
            x,
        };
        self.push_raw("spmv", &[pattern.n], out, op, needs)
    }

    // ---- elementwise ----------------------------------------------------

    /// Dispatches the elementwise family by kind; `b` is required for the
    /// binary kinds and ignored otherwise.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::Invalid(format!("{kind:?} needs two operands")));
        match kind {
            ElementwiseKind::Add => self.add(a, need_b()?),
            ElementwiseKind::Sub => self.sub(a, need_b()?),
            ElementwiseKind::Mul => self.mul(a, need_b()?),
            ElementwiseKind::Abs => self.abs(a),
            ElementwiseKind::Relu => self.relu(a),
            ElementwiseKind::Sigmoid => self.sigmoid(a),
            ElementwiseKind::Negate => self.neg(a),
        }
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push_raw(name, &shape, out, Op::Binary(kind, a, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let (name, f): (&'static str, fn(f64) -> f64) = match kind {
            UnaryKind::Neg => ("neg", |x| -x),
            UnaryKind::Abs => ("abs", f64::abs),
            UnaryKind::Relu => ("relu", |x| if x > 0.0 { x } else { 0.0 }),
            UnaryKind::Sigmoid => ("sigmoid", sigmoid),
            UnaryKind::Exp => ("exp", f64::exp),
            UnaryKind::Ln => ("ln", f64::ln),
            UnaryKind::Sqrt => ("sqrt", f64::sqrt),
            UnaryKind::Softplus => ("softplus", softplus),
        };
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push_raw(name, &shape, out, Op::Unary(kind, a), needs)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    /// Absolute value; the subgradient at exactly zero is zero.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Ln, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push_raw("scale", &shape, out, Op::Scale(a, c), needs)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push_raw("add_const", &shape, out, Op::AddConst(a), needs)
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x.max(floor)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push_raw("clamp_min", &shape, out, Op::ClampMin(a, floor), needs)
    }

    /// Tensor times a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(a), self.shape(s)));
        }
        let sv = self.item(s);
        let out = self.data(a).iter().map(|&x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(s);
        self.push_raw("mul_scalar", &shape, out, Op::MulScalar(a, s), needs)
    }

    // ---- reductions and normalizations ----------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push_raw("sum", &[1], vec![s], Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    fn check_axis(&self, name: &'static str, a: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::Invalid(format!("{name}: axis {axis} out of range for {shape:?}")));
        }
        Ok(lanes(shape, axis))
    }

    /// Sum along `axis`, keeping the axis with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("sum_axis", a, axis)?;
        let d = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape = self.shape(a).to_vec();
        shape[axis] = 1;
        let needs = self.needs(a);
        self.push_raw("sum_axis", &shape, out, Op::SumAxis(a, axis), needs)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("softmax", a, axis)?;
        let out = softmax_lanes(self.data(a), outer, len, inner, false);
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push_raw("softmax", &shape, out, Op::Softmax(a, axis), needs)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("log_softmax", a, axis)?;
        let out = softmax_lanes(self.data(a), outer, len, inner, true);
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push_raw("log_softmax", &shape, out, Op::LogSoftmax(a, axis), needs)
    }

    /// Divides every lane along `axis` by its sum.
    pub fn normalize_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("normalize_axis", a, axis)?;
        let d = self.data(a);
        let mut out = d.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let s: f64 = (0..len).map(|l| d[idx(l)]).sum();
                for l in 0..len {
                    out[idx(l)] = d[idx(l)] / s;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push_raw("normalize_axis", &shape, out, Op::NormalizeAxis(a, axis), needs)
    }

    /// Scales each row of a matrix to unit Euclidean norm; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::Invalid(format!("l2_normalize_rows needs a matrix, got {shape:?}")));
        }
        let c = shape[1];
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c) {
            let r = norm(row);
            if r > NORM_FLOOR {
                row.iter_mut().for_each(|x| *x /= r);
            } else {
                row.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let needs = self.needs(a);
        self.push_raw("l2_normalize_rows", &shape, out, Op::L2NormalizeRows(a), needs)
    }

    /// Euclidean norm of each row, as an `n×1` column; the gradient at a
    /// zero row is zero.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::Invalid(format!("row_norms needs a matrix, got {shape:?}")));
        }
        let out = self.data(a).chunks(shape[1]).map(norm).collect();
        let needs = self.needs(a);
        self.push_raw("row_norms", &[shape[0], 1], out, Op::RowNorms(a), needs)
    }

    /// Per-column standardization with learned scale and shift, reading
    /// `{prefix}.gamma`, `{prefix}.beta` and the running statistics from `store`.
    ///
    /// In [`Mode::Train`] the batch statistics are used and a running-stat
    /// update is queued; in [`Mode::Eval`] the running statistics are used.
    pub fn standardize(&mut self, x: Var, store: &ParamStore, prefix: &str) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Invalid(format!("standardize needs a matrix, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let gamma = self.param(store, &format!("{prefix}.gamma"))?;
        let beta = self.param(store, &format!("{prefix}.beta"))?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("standardize", &shape, self.shape(gamma)));
        }
        let xd = self.data(x);
        let (mean, var, batch_stats) = match self.mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for row in xd.chunks(c) {
                    mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for row in xd.chunks(c) {
                    for j in 0..c {
                        var[j] += (row[j] - mean[j]).powi(2);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var, true)
            }
            Mode::Eval => {
                let mean = store.get(&format!("{prefix}.running_mean"))?.data().to_vec();
                let var = store.get(&format!("{prefix}.running_var"))?.data().to_vec();
                (mean, var, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + STANDARDIZE_EPS).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let h = (xd[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        if batch_stats {
            let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            self.stat_updates.push(StatUpdate {
                prefix: prefix.to_string(),
                mean: mean.clone(),
                var: var.iter().map(|v| v * unbiased).collect(),
            });
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::Standardize {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        };
        self.push_raw("standardize", &shape, out, op, needs)
    }

    // ---- structural -----------------------------------------------------

    /// `out[i] = a[index[i]]`, or zero where the index is `None`.
    pub fn gather(&mut self, a: Var, index: Rc<[Option<usize>]>, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        let d = self.data(a);
        if index.iter().flatten().any(|&i| i >= d.len()) {
            return Err(Error::Invalid("gather index out of range".into()));
        }
        let out = index.iter().map(|i| i.map_or(0.0, |i| d[i])).collect();
        let needs = self.needs(a);
        self.push_raw("gather", shape, out, Op::Gather(a, index), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.data(a).to_vec();
        let needs = self.needs(a);
        self.push_raw("reshape", shape, out, Op::Reshape(a), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [m, n] = shape[..] else {
            return Err(Error::Invalid(format!("transpose needs a matrix, got {shape:?}")));
        };
        let index: Rc<[Option<usize>]> = (0..m * n).map(|k| Some((k % m) * n + k / m)).collect();
        self.gather(a, index, &[n, m])
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || start >= end || end > shape[0] {
            return Err(Error::Invalid(format!("slice_rows {start}..{end} of {shape:?}")));
        }
        let c = shape[1];
        let index: Rc<[Option<usize>]> = (start * c..end * c).map(Some).collect();
        self.gather(a, index, &[end - start, c])
    }

    /// Selects whole rows of a matrix, in the given order.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || rows.iter().any(|&r| r >= shape[0]) || rows.is_empty() {
            return Err(Error::Invalid(format!("select_rows {rows:?} of {shape:?}")));
        }
        let c = shape[1];
        let index: Rc<[Option<usize>]> = rows
            .iter()
            .flat_map(|&r| (r * c..(r + 1) * c).map(Some))
            .collect();
        self.gather(a, index, &[rows.len(), c])
    }

    /// Concatenates matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 2 || axis > 1 {
            return Err(Error::Invalid(format!("concat needs matrices and axis 0/1, got {s0:?}")));
        }
        for p in &parts[1..] {
            let s = self.shape(*p);
            if s.len() != 2 || s[1 - axis] != s0[1 - axis] {
                return Err(Error::shape("concat", &s0, s));
            }
        }
        let out_shape = if axis == 0 {
            vec![parts.iter().map(|p| self.shape(*p)[0]).sum(), s0[1]]
        } else {
            vec![s0[0], parts.iter().map(|p| self.shape(*p)[1]).sum()]
        };
        let mut out = Vec::with_capacity(out_shape[0] * out_shape[1]);
        if axis == 0 {
            for p in parts {
                out.extend_from_slice(self.data(*p));
            }
        } else {
            for r in 0..s0[0] {
                for p in parts {
                    out.extend_from_slice(self.value(*p).row(r));
                }
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push_raw("concat", &out_shape, out, Op::Concat(parts.to_vec(), axis), needs)
    }

    // ---- reverse sweep --------------------------------------------------

    /// Differentiates the scalar `output`, consuming the tape.
    pub fn backward(self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (name, v) in &self.params {
            if let Some(g) = &grads[v.0] {
                params.insert(name.clone(), g.clone());
            }
        }
        // Only input leaves keep their per-node gradient.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf(Leaf::Input)) {
                *g = None;
            }
        }
        Ok(Gradients {
            leaves: grads,
            params,
            stat_updates: self.stat_updates,
        })
    }

    /// Running-stat updates queued so far (training mode only).
    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut send = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let acc = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(acc);
        };
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                send(*a, &|acc| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bd[p * n + j];
                            }
                            acc[i * k + p] += s;
                        }
                    }
                });
                send(*b, &|acc| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = ad[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                acc[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::SpMV { values, pattern, x } => {
                let (vd, xd) = (self.data(*values), self.data(*x));
                send(*values, &|acc| {
                    for (e, (&r, &c)) in pattern.rows.iter().zip(&pattern.cols).enumerate() {
                        acc[e] += g[r] * xd[c];
                    }
                });
                send(*x, &|acc| {
                    for ((&r, &c), &v) in pattern.rows.iter().zip(&pattern.cols).zip(vd) {
                        acc[c] += g[r] * v;
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                match kind {
                    BinaryKind::Add => {
                        send(*a, &|acc| add_into(acc, g));
                        send(*b, &|acc| add_into(acc, g));
                    }
                    BinaryKind::Sub => {
                        send(*a, &|acc| add_into(acc, g));
                        send(*b, &|acc| acc.iter_mut().zip(g).for_each(|(s, &gi)| *s -= gi));
                    }
                    BinaryKind::Mul => {
                        send(*a, &|acc| zip3(acc, g, bd, |gi, bi| gi * bi));
                        send(*b, &|acc| zip3(acc, g, ad, |gi, ai| gi * ai));
                    }
                    BinaryKind::Div => {
                        send(*a, &|acc| zip3(acc, g, bd, |gi, bi| gi / bi));
                        send(*b, &|acc| {
                            for i in 0..acc.len() {
                                acc[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                            }
                        });
                    }
                }
            }
            Op::Unary(kind, a) => {
                let x = self.data(*a);
                let d: fn(f64, f64) -> f64 = match kind {
                    UnaryKind::Neg => |_, _| -1.0,
                    UnaryKind::Abs => |x, _| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    },
                    UnaryKind::Relu => |x, _| if x > 0.0 { 1.0 } else { 0.0 },
                    UnaryKind::Sigmoid => |_, y| y * (1.0 - y),
                    UnaryKind::Exp => |_, y| y,
                    UnaryKind::Ln => |x, _| 1.0 / x,
                    UnaryKind::Sqrt => |_, y| if y > 0.0 { 0.5 / y } else { 0.0 },
                    UnaryKind::Softplus => |x, _| sigmoid(x),
                };
                send(*a, &|acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * d(x[i], y[i]);
                    }
                });
            }
            Op::Scale(a, c) => send(*a, &|acc| zip3(acc, g, g, |gi, _| gi * c)),
            Op::AddConst(a) => send(*a, &|acc| add_into(acc, g)),
            Op::ClampMin(a, floor) => {
                let x = self.data(*a);
                send(*a, &|acc| zip3(acc, g, x, |gi, xi| if xi > *floor { gi } else { 0.0 }));
            }
            Op::MulScalar(a, s) => {
                let sv = self.item(*s);
                let ad = self.data(*a);
                send(*a, &|acc| zip3(acc, g, g, |gi, _| gi * sv));
                send(*s, &|acc| acc[0] += g.iter().zip(ad).map(|(gi, ai)| gi * ai).sum::<f64>());
            }
            Op::Sum(a) => send(*a, &|acc| acc.iter_mut().for_each(|s| *s += g[0])),
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = lanes(self.shape(*a), *axis);
                send(*a, &|acc| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                acc[(o * len + l) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = lanes(self.shape(*a), *axis);
                send(*a, &|acc| {
                    for_lanes(outer, len, inner, |idx| {
                        let dot: f64 = idx.clone().map(|k| g[k] * y[k]).sum();
                        for k in idx {
                            acc[k] += y[k] * (g[k] - dot);
                        }
                    });
                });
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = lanes(self.shape(*a), *axis);
                send(*a, &|acc| {
                    for_lanes(outer, len, inner, |idx| {
                        let total: f64 = idx.clone().map(|k| g[k]).sum();
                        for k in idx {
                            acc[k] += g[k] - y[k].exp() * total;
                        }
                    });
                });
            }
            Op::NormalizeAxis(a, axis) => {
                let x = self.data(*a);
                let (outer, len, inner) = lanes(self.shape(*a), *axis);
                send(*a, &|acc| {
                    for_lanes(outer, len, inner, |idx| {
                        let s: f64 = idx.clone().map(|k| x[k]).sum();
                        let dot: f64 = idx.clone().map(|k| g[k] * y[k]).sum();
                        for k in idx {
                            acc[k] += (g[k] - dot) / s;
                        }
                    });
                });
            }
            Op::L2NormalizeRows(a) => {
                let x = self.data(*a);
                let c = self.shape(*a)[1];
                send(*a, &|acc| {
                    for r in 0..x.len() / c {
                        let span = r * c..(r + 1) * c;
                        let nr = norm(&x[span.clone()]);
                        if nr <= NORM_FLOOR {
                            continue;
                        }
                        let dot: f64 = span.clone().map(|k| y[k] * g[k]).sum();
                        for k in span {
                            acc[k] += (g[k] - y[k] * dot) / nr;
                        }
                    }
                });
            }
            Op::RowNorms(a) => {
                let x = self.data(*a);
                let c = self.shape(*a)[1];
                send(*a, &|acc| {
                    for (r, &nr) in y.iter().enumerate() {
                        if nr <= 0.0 {
                            continue;
                        }
                        for k in r * c..(r + 1) * c {
                            acc[k] += g[r] * x[k] / nr;
                        }
                    }
                });
            }
            Op::Standardize {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let gd = self.data(*gamma);
                send(*beta, &|acc| {
                    for row in g.chunks(c) {
                        add_into(acc, row);
                    }
                });
                send(*gamma, &|acc| {
                    for i in 0..n * c {
                        acc[i % c] += g[i] * xhat[i];
                    }
                });
                send(*x, &|acc| {
                    if !*batch_stats {
                        for i in 0..n * c {
                            acc[i] += g[i] * gd[i % c] * inv_std[i % c];
                        }
                        return;
                    }
                    let nf = n as f64;
                    for j in 0..c {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for i in 0..n {
                            let d = g[i * c + j] * gd[j];
                            sum_d += d;
                            sum_dx += d * xhat[i * c + j];
                        }
                        for i in 0..n {
                            let d = g[i * c + j] * gd[j];
                            acc[i * c + j] += inv_std[j] / nf * (nf * d - sum_d - xhat[i * c + j] * sum_dx);
                        }
                    }
                });
            }
            Op::Gather(a, index) => send(*a, &|acc| {
                for (gi, i) in g.iter().zip(index.iter()) {
                    if let Some(i) = i {
                        acc[*i] += gi;
                    }
                }
            }),
            Op::Reshape(a) => send(*a, &|acc| add_into(acc, g)),
            Op::Concat(parts, axis) => {
                let total_cols = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let s = self.shape(*p);
                    let (r, c) = (s[0], s[1]);
                    if *axis == 0 {
                        let start = offset;
                        send(*p, &|acc| add_into(acc, &g[start * c..(start + r) * c]));
                        offset += r;
                    } else {
                        let start = offset;
                        send(*p, &|acc| {
                            for i in 0..r {
                                let src = &g[i * total_cols + start..i * total_cols + start + c];
                                add_into(&mut acc[i * c..(i + 1) * c], src);
                            }
                        });
                        offset += c;
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Vec<f64>>,
    stat_updates: Vec<StatUpdate>,
}

impl Gradients {
    /// Gradient of an input leaf; `None` when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Adds every parameter gradient into the matching grad slot of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, g) in &self.params {
            store.get_mut(name)?.accumulate_grad(g);
        }
        Ok(())
    }

    /// Folds the queued batch statistics into the running statistics.
    pub fn update_running_stats(&self, store: &mut ParamStore) -> Result<()> {
        apply_stat_updates(&self.stat_updates, store)
    }
}

pub fn apply_stat_updates(updates: &[StatUpdate], store: &mut ParamStore) -> Result<()> {
    let m = STANDARDIZE_MOMENTUM;
    for u in updates {
        for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let t = store.get_mut(&format!("{}.{suffix}", u.prefix))?;
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn norm(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn zip3(acc: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for i in 0..acc.len() {
        acc[i] += f(g[i], other[i]);
    }
}

fn for_lanes(outer: usize, len: usize, inner: usize, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    for o in 0..outer {
        for i in 0..inner {
            let start = o * len * inner + i;
            f((start..start + len * inner).step_by(inner));
        }
    }
}

fn softmax_lanes(d: &[f64], outer: usize, len: usize, inner: usize, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for_lanes(outer, len, inner, |idx| {
        let max = idx.clone().map(|k| d[k]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = idx.clone().map(|k| (d[k] - max).exp()).sum();
        for k in idx {
            out[k] = if log {
                d[k] - max - total.ln()
            } else {
                (d[k] - max).exp() / total
            };
        }
    });
    out
}
