//! Reverse-mode tape over [`Tensor`] values.
//!
//! A forward pass appends operation records to the tape; [`Var::backward`]
//! walks them in reverse and accumulates adjoints. One tape per logical
//! training thread; tapes are append-only within a pass.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    // unary elementwise
    Negate(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    Abs(usize),
    Huber { a: usize, delta: f64 },
    Scale { a: usize, c: f64 },
    AddScalar(usize),
    Clamp { a: usize, lo: Vec<f64>, hi: Vec<f64> },
    // binary elementwise, equal shapes
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Maximum(usize, usize),
    // broadcasts
    AddRow(usize, usize),
    AddCol(usize, usize),
    SubCol(usize, usize),
    MulCol(usize, usize),
    DivCol(usize, usize),
    MulRow(usize, usize),
    // linear algebra
    MatMul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    // reductions
    SumAll(usize),
    MeanAll(usize),
    MaxAll(usize),
    SumAxis0(usize),
    SumAxis1(usize),
    ProdAxis1(usize),
    // structure
    SelectRows { a: usize, indices: Vec<usize> },
    ConcatRows { inputs: Vec<usize> },
    ConcatCols { inputs: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize },
    Reshape(usize),
}

struct TapeInner {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs: Vec<bool>,
    grads: Vec<Tensor>,
    backward_done: bool,
}

/// Shared handle to the recording tape.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                values: Vec::new(),
                ops: Vec::new(),
                needs: Vec::new(),
                grads: Vec::new(),
                backward_done: false,
            })),
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut t = self.inner.borrow_mut();
        let needs = match &op {
            Op::Leaf => false,
            other => op_inputs(other).iter().any(|&i| t.needs[i]),
        };
        let id = t.values.len();
        t.values.push(value);
        t.ops.push(op);
        t.needs.push(needs);
        Var { tape: self.clone(), id }
    }

    /// A differentiable leaf holding `value`.
    pub fn leaf(&self, value: Tensor) -> Var {
        let mut t = self.inner.borrow_mut();
        let id = t.values.len();
        t.values.push(value);
        t.ops.push(Op::Leaf);
        t.needs.push(true);
        Var { tape: self.clone(), id }
    }

    /// A non-differentiable input; adjoint work below it is skipped.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A node on the tape. Cloning copies the handle, not the value.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

macro_rules! unary {
    ($name:ident, $op:ident, $f:expr) => {
        pub fn $name(&self) -> Var {
            let v = self.map_value($f);
            self.tape.push(v, Op::$op(self.id))
        }
    };
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().values[self.id].clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        let t = self.tape.inner.borrow();
        (t.values[self.id].rows, t.values[self.id].cols)
    }

    pub fn scalar(&self) -> f64 {
        self.tape.inner.borrow().values[self.id].scalar_value()
    }

    /// Gradient of the last `backward` call with respect to this node.
    pub fn grad(&self) -> Tensor {
        let t = self.tape.inner.borrow();
        assert!(t.backward_done, "grad() before backward()");
        t.grads[self.id].clone()
    }

    fn map_value(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.tape.inner.borrow();
        let v = &t.values[self.id];
        Tensor {
            rows: v.rows,
            cols: v.cols,
            data: v.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_value(&self, other: &Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let t = self.tape.inner.borrow();
        let a = &t.values[self.id];
        let b = &t.values[other.id];
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        Tensor {
            rows: a.rows,
            cols: a.cols,
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    unary!(negate, Negate, |x| -x);
    unary!(exp, Exp, f64::exp);
    unary!(ln, Ln, f64::ln);
    unary!(sqrt, Sqrt, f64::sqrt);
    unary!(sin, Sin, f64::sin);
    unary!(cos, Cos, f64::cos);
    unary!(tanh, Tanh, f64::tanh);
    unary!(relu, Relu, |x| if x > 0.0 { x } else { 0.0 });
    unary!(abs, Abs, f64::abs);

    pub fn sigmoid(&self) -> Var {
        let v = self.map_value(sigmoid);
        self.tape.push(v, Op::Sigmoid(self.id))
    }

    pub fn softplus(&self) -> Var {
        let v = self.map_value(softplus);
        self.tape.push(v, Op::Softplus(self.id))
    }

    /// Elementwise Huber penalty with knee `delta`.
    pub fn huber(&self, delta: f64) -> Var {
        let v = self.map_value(|x| {
            if x.abs() <= delta {
                0.5 * x * x
            } else {
                delta * (x.abs() - 0.5 * delta)
            }
        });
        self.tape.push(v, Op::Huber { a: self.id, delta })
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = self.map_value(|x| x * c);
        self.tape.push(v, Op::Scale { a: self.id, c })
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let v = self.map_value(|x| x + c);
        self.tape.push(v, Op::AddScalar(self.id))
    }

    /// Clamp with straight-through gradient inside the bounds, zero outside.
    /// Bounds are plain values broadcast to the full shape.
    pub fn clamp(&self, lo: &[f64], hi: &[f64]) -> Var {
        let t = self.tape.inner.borrow();
        let a = &t.values[self.id];
        let lo_full = broadcast_bounds(lo, a.rows, a.cols);
        let hi_full = broadcast_bounds(hi, a.rows, a.cols);
        let data: Vec<f64> = a
            .data
            .iter()
            .zip(lo_full.iter().zip(hi_full.iter()))
            .map(|(&x, (&l, &h))| x.max(l).min(h))
            .collect();
        let v = Tensor { rows: a.rows, cols: a.cols, data };
        drop(t);
        self.tape.push(v, Op::Clamp { a: self.id, lo: lo_full, hi: hi_full })
    }

    pub fn add(&self, other: &Var) -> Var {
        let v = self.zip_value(other, |a, b| a + b);
        self.tape.push(v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = self.zip_value(other, |a, b| a - b);
        self.tape.push(v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = self.zip_value(other, |a, b| a * b);
        self.tape.push(v, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var) -> Var {
        let v = self.zip_value(other, |a, b| a / b);
        self.tape.push(v, Op::Div(self.id, other.id))
    }

    /// Elementwise maximum; gradient routes to the larger input (ties to self).
    pub fn maximum(&self, other: &Var) -> Var {
        let v = self.zip_value(other, f64::max);
        self.tape.push(v, Op::Maximum(self.id, other.id))
    }

    /// `self (n x d) + row (1 x d)` broadcast down the rows.
    pub fn add_row(&self, row: &Var) -> Var {
        let t = self.tape.inner.borrow();
        let a = &t.values[self.id];
        let b = &t.values[row.id];
        assert_eq!(b.rows, 1, "add_row expects a 1xd row");
        assert_eq!(a.cols, b.cols, "add_row width mismatch");
        let mut data = a.data.clone();
        for r in 0..a.rows {
            for c in 0..a.cols {
                data[r * a.cols + c] += b.data[c];
            }
        }
        let v = Tensor { rows: a.rows, cols: a.cols, data };
        drop(t);
        self.tape.push(v, Op::AddRow(self.id, row.id))
    }

    fn col_broadcast(&self, col: &Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let t = self.tape.inner.borrow();
        let a = &t.values[self.id];
        let b = &t.values[col.id];
        assert_eq!(b.cols, 1, "column broadcast expects nx1");
        assert_eq!(a.rows, b.rows, "column broadcast height mismatch");
        let mut data = Vec::with_capacity(a.len());
        for r in 0..a.rows {
            let s = b.data[r];
            for c in 0..a.cols {
                data.push(f(a.data[r * a.cols + c], s));
            }
        }
        Tensor { rows: a.rows, cols: a.cols, data }
    }

    pub fn add_col(&self, col: &Var) -> Var {
        let v = self.col_broadcast(col, |a, b| a + b);
        self.tape.push(v, Op::AddCol(self.id, col.id))
    }

    pub fn sub_col(&self, col: &Var) -> Var {
        let v = self.col_broadcast(col, |a, b| a - b);
        self.tape.push(v, Op::SubCol(self.id, col.id))
    }

    pub fn mul_col(&self, col: &Var) -> Var {
        let v = self.col_broadcast(col, |a, b| a * b);
        self.tape.push(v, Op::MulCol(self.id, col.id))
    }

    pub fn div_col(&self, col: &Var) -> Var {
        let v = self.col_broadcast(col, |a, b| a / b);
        self.tape.push(v, Op::DivCol(self.id, col.id))
    }

    /// `self (n x d) * row (1 x d)` broadcast down the rows.
    pub fn mul_row(&self, row: &Var) -> Var {
        let t = self.tape.inner.borrow();
        let a = &t.values[self.id];
        let b = &t.values[row.id];
        assert_eq!(b.rows, 1, "mul_row expects a 1xd row");
        assert_eq!(a.cols, b.cols, "mul_row width mismatch");
        let mut data = a.data.clone();
        for r in 0..a.rows {
            for c in 0..a.cols {
                data[r * a.cols + c] *= b.data[c];
            }
        }
        let v = Tensor { rows: a.rows, cols: a.cols, data };
        drop(t);
        self.tape.push(v, Op::MulRow(self.id, row.id))
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let t = self.tape.inner.borrow();
        let v = t.values[self.id].matmul(&t.values[other.id]);
        drop(t);
        self.tape.push(v, Op::MatMul(self.id, other.id))
    }

    pub fn transpose(&self) -> Var {
        let t = self.tape.inner.borrow();
        let v = t.values[self.id].transpose();
        drop(t);
        self.tape.push(v, Op::Transpose(self.id))
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&self) -> Var {
        let t = self.tape.inner.borrow();
        let a = &t.values[self.id];
        let mut data = Vec::with_capacity(a.len());
        for r in 0..a.rows {
            let row = a.row_slice(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|&e| e / s));
        }
        let v = Tensor { rows: a.rows, cols: a.cols, data };
        drop(t);
        self.tape.push(v, Op::SoftmaxRows(self.id))
    }

    pub fn sum(&self) -> Var {
        let t = self.tape.inner.borrow();
        let v = Tensor::scalar(t.values[self.id].data.iter().sum());
        drop(t);
        self.tape.push(v, Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var {
        let t = self.tape.inner.borrow();
        let a = &t.values[self.id];
        let v = Tensor::scalar(a.data.iter().sum::<f64>() / a.len() as f64);
        drop(t);
        self.tape.push(v, Op::MeanAll(self.id))
    }

    pub fn max(&self) -> Var {
        let t = self.tape.inner.borrow();
        let v = Tensor::scalar(t.values[self.id].data.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        drop(t);
        self.tape.push(v, Op::MaxAll(self.id))
    }

    /// Sum over rows: n x d -> 1 x d.
    pub fn sum_axis0(&self) -> Var {
        let t = self.tape.inner.borrow();
        let a = &t.values[self.id];
        let mut data = vec![0.0; a.cols];
        for r in 0..a.rows {
            for c in 0..a.cols {
                data[c] += a.data[r * a.cols + c];
            }
        }
        let v = Tensor { rows: 1, cols: a.cols, data };
        drop(t);
        self.tape.push(v, Op::SumAxis0(self.id))
    }

    /// Sum over columns: n x d -> n x 1.
    pub fn sum_axis1(&self) -> Var {
        let t = self.tape.inner.borrow();
        let a = &t.values[self.id];
        let data: Vec<f64> = (0..a.rows).map(|r| a.row_slice(r).iter().sum()).collect();
        let v = Tensor { rows: a.rows, cols: 1, data };
        drop(t);
        self.tape.push(v, Op::SumAxis1(self.id))
    }

    /// Product over columns: n x d -> n x 1. Backward uses prefix/suffix
    /// products so zero entries are handled exactly.
    pub fn prod_axis1(&self) -> Var {
        let t = self.tape.inner.borrow();
        let a = &t.values[self.id];
        let data: Vec<f64> = (0..a.rows).map(|r| a.row_slice(r).iter().product()).collect();
        let v = Tensor { rows: a.rows, cols: 1, data };
        drop(t);
        self.tape.push(v, Op::ProdAxis1(self.id))
    }

    /// Gather rows by index; backward scatter-adds.
    pub fn select_rows(&self, indices: &[usize]) -> Var {
        let t = self.tape.inner.borrow();
        let a = &t.values[self.id];
        let mut data = Vec::with_capacity(indices.len() * a.cols);
        for &i in indices {
            assert!(i < a.rows, "select_rows index {} out of {} rows", i, a.rows);
            data.extend_from_slice(a.row_slice(i));
        }
        let v = Tensor { rows: indices.len(), cols: a.cols, data };
        drop(t);
        self.tape.push(v, Op::SelectRows { a: self.id, indices: indices.to_vec() })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var {
        let t = self.tape.inner.borrow();
        let a = &t.values[self.id];
        assert!(start + len <= a.cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(a.rows * len);
        for r in 0..a.rows {
            data.extend_from_slice(&a.row_slice(r)[start..start + len]);
        }
        let v = Tensor { rows: a.rows, cols: len, data };
        drop(t);
        self.tape.push(v, Op::SliceCols { a: self.id, start, len })
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Var {
        let t = self.tape.inner.borrow();
        let a = &t.values[self.id];
        assert_eq!(a.len(), rows * cols, "reshape element count mismatch");
        let v = Tensor { rows, cols, data: a.data.clone() };
        drop(t);
        self.tape.push(v, Op::Reshape(self.id))
    }

    /// Reverse pass from a scalar root. Errors on a non-scalar root or a
    /// second call on the same tape.
    pub fn backward(&self) -> Result<(), BackwardError> {
        let mut t = self.tape.inner.borrow_mut();
        if t.backward_done {
            return Err(BackwardError::AlreadyRun);
        }
        let root = &t.values[self.id];
        if !root.is_scalar() {
            return Err(BackwardError::NonScalarRoot { rows: root.rows, cols: root.cols });
        }
        t.grads = t.values.iter().map(|v| Tensor::zeros(v.rows, v.cols)).collect();
        t.grads[self.id].data[0] = 1.0;
        t.run_backward();
        t.backward_done = true;
        Ok(())
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum BackwardError {
    NonScalarRoot { rows: usize, cols: usize },
    AlreadyRun,
}

impl std::fmt::Display for BackwardError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackwardError::NonScalarRoot { rows, cols } => {
                write!(f, "backward root must be scalar, got {rows}x{cols}")
            }
            BackwardError::AlreadyRun => write!(f, "backward already run on this tape"),
        }
    }
}

impl std::error::Error for BackwardError {}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Negate(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Sqrt(a)
        | Op::Sin(a)
        | Op::Cos(a)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Softplus(a)
        | Op::Relu(a)
        | Op::Abs(a)
        | Op::Huber { a, .. }
        | Op::Scale { a, .. }
        | Op::AddScalar(a)
        | Op::Clamp { a, .. }
        | Op::Transpose(a)
        | Op::SoftmaxRows(a)
        | Op::SumAll(a)
        | Op::MeanAll(a)
        | Op::MaxAll(a)
        | Op::SumAxis0(a)
        | Op::SumAxis1(a)
        | Op::ProdAxis1(a)
        | Op::SelectRows { a, .. }
        | Op::SliceCols { a, .. }
        | Op::Reshape(a) => vec![*a],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Maximum(a, b)
        | Op::AddRow(a, b)
        | Op::AddCol(a, b)
        | Op::SubCol(a, b)
        | Op::MulCol(a, b)
        | Op::DivCol(a, b)
        | Op::MulRow(a, b)
        | Op::MatMul(a, b) => vec![*a, *b],
        Op::ConcatRows { inputs } | Op::ConcatCols { inputs } => inputs.clone(),
    }
}

fn broadcast_bounds(b: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let n = rows * cols;
    if b.len() == n {
        b.to_vec()
    } else if b.len() == 1 {
        vec![b[0]; n]
    } else if b.len() == rows {
        // one bound per row
        let mut out = Vec::with_capacity(n);
        for &v in b {
            out.extend(std::iter::repeat(v).take(cols));
        }
        out
    } else {
        panic!("clamp bounds length {} incompatible with {}x{}", b.len(), rows, cols);
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl TapeInner {
    fn run_backward(&mut self) {
        for idx in (0..self.ops.len()).rev() {
            if !self.needs[idx] {
                continue;
            }
            let go = std::mem::replace(&mut self.grads[idx], Tensor::zeros(0, 0));
            if go.data.iter().all(|&g| g == 0.0) {
                self.grads[idx] = go;
                continue;
            }
            let op = self.ops[idx].clone();
            match op {
                Op::Leaf => {}
                Op::Negate(a) => self.accum_with(a, &go, |_, g| -g),
                Op::Exp(a) => {
                    let out = self.values[idx].data.clone();
                    self.accum_with(a, &go, |i, g| g * out[i]);
                }
                Op::Ln(a) => {
                    let av = self.values[a].data.clone();
                    self.accum_with(a, &go, |i, g| g / av[i]);
                }
                Op::Sqrt(a) => {
                    let out = self.values[idx].data.clone();
                    self.accum_with(a, &go, |i, g| g / (2.0 * out[i]));
                }
                Op::Sin(a) => {
                    let av = self.values[a].data.clone();
                    self.accum_with(a, &go, |i, g| g * av[i].cos());
                }
                Op::Cos(a) => {
                    let av = self.values[a].data.clone();
                    self.accum_with(a, &go, |i, g| -g * av[i].sin());
                }
                Op::Tanh(a) => {
                    let out = self.values[idx].data.clone();
                    self.accum_with(a, &go, |i, g| g * (1.0 - out[i] * out[i]));
                }
                Op::Sigmoid(a) => {
                    let out = self.values[idx].data.clone();
                    self.accum_with(a, &go, |i, g| g * out[i] * (1.0 - out[i]));
                }
                Op::Softplus(a) => {
                    let av = self.values[a].data.clone();
                    self.accum_with(a, &go, |i, g| g * sigmoid(av[i]));
                }
                Op::Relu(a) => {
                    let av = self.values[a].data.clone();
                    self.accum_with(a, &go, |i, g| if av[i] > 0.0 { g } else { 0.0 });
                }
                Op::Abs(a) => {
                    let av = self.values[a].data.clone();
                    self.accum_with(a, &go, |i, g| g * av[i].signum() * if av[i] == 0.0 { 0.0 } else { 1.0 });
                }
                Op::Huber { a, delta } => {
                    let av = self.values[a].data.clone();
                    self.accum_with(a, &go, |i, g| {
                        let x = av[i];
                        if x.abs() <= delta {
                            g * x
                        } else {
                            g * delta * x.signum()
                        }
                    });
                }
                Op::Scale { a, c } => self.accum_with(a, &go, |_, g| g * c),
                Op::AddScalar(a) => self.accum_with(a, &go, |_, g| g),
                Op::Clamp { a, lo, hi } => {
                    let av = self.values[a].data.clone();
                    self.accum_with(a, &go, |i, g| {
                        if av[i] >= lo[i] && av[i] <= hi[i] {
                            g
                        } else {
                            0.0
                        }
                    });
                }
                Op::Add(a, b) => {
                    self.accum_with(a, &go, |_, g| g);
                    self.accum_with(b, &go, |_, g| g);
                }
                Op::Sub(a, b) => {
                    self.accum_with(a, &go, |_, g| g);
                    self.accum_with(b, &go, |_, g| -g);
                }
                Op::Mul(a, b) => {
                    let av = self.values[a].data.clone();
                    let bv = self.values[b].data.clone();
                    self.accum_with(a, &go, |i, g| g * bv[i]);
                    self.accum_with(b, &go, |i, g| g * av[i]);
                }
                Op::Div(a, b) => {
                    let av = self.values[a].data.clone();
                    let bv = self.values[b].data.clone();
                    self.accum_with(a, &go, |i, g| g / bv[i]);
                    self.accum_with(b, &go, |i, g| -g * av[i] / (bv[i] * bv[i]));
                }
                Op::Maximum(a, b) => {
                    let av = self.values[a].data.clone();
                    let bv = self.values[b].data.clone();
                    self.accum_with(a, &go, |i, g| if av[i] >= bv[i] { g } else { 0.0 });
                    self.accum_with(b, &go, |i, g| if av[i] >= bv[i] { 0.0 } else { g });
                }
                Op::AddRow(a, b) => {
                    self.accum_with(a, &go, |_, g| g);
                    let cols = go.cols;
                    let mut rowg = vec![0.0; cols];
                    for r in 0..go.rows {
                        for c in 0..cols {
                            rowg[c] += go.data[r * cols + c];
                        }
                    }
                    self.add_into(b, &rowg);
                }
                Op::AddCol(a, b) => {
                    self.accum_with(a, &go, |_, g| g);
                    let colg = row_sums(&go);
                    self.add_into(b, &colg);
                }
                Op::SubCol(a, b) => {
                    self.accum_with(a, &go, |_, g| g);
                    let colg: Vec<f64> = row_sums(&go).iter().map(|v| -v).collect();
                    self.add_into(b, &colg);
                }
                Op::MulCol(a, b) => {
                    let bv = self.values[b].data.clone();
                    let av = self.values[a].clone();
                    let cols = av.cols;
                    self.accum_with(a, &go, |i, g| g * bv[i / cols]);
                    let mut colg = vec![0.0; av.rows];
                    for r in 0..av.rows {
                        for c in 0..cols {
                            colg[r] += go.data[r * cols + c] * av.data[r * cols + c];
                        }
                    }
                    self.add_into(b, &colg);
                }
                Op::DivCol(a, b) => {
                    let bv = self.values[b].data.clone();
                    let av = self.values[a].clone();
                    let cols = av.cols;
                    self.accum_with(a, &go, |i, g| g / bv[i / cols]);
                    let mut colg = vec![0.0; av.rows];
                    for r in 0..av.rows {
                        for c in 0..cols {
                            colg[r] -= go.data[r * cols + c] * av.data[r * cols + c] / (bv[r] * bv[r]);
                        }
                    }
                    self.add_into(b, &colg);
                }
                Op::MulRow(a, b) => {
                    let bv = self.values[b].data.clone();
                    let av = self.values[a].clone();
                    let cols = av.cols;
                    self.accum_with(a, &go, |i, g| g * bv[i % cols]);
                    let mut rowg = vec![0.0; cols];
                    for r in 0..av.rows {
                        for c in 0..cols {
                            rowg[c] += go.data[r * cols + c] * av.data[r * cols + c];
                        }
                    }
                    self.add_into(b, &rowg);
                }
                Op::MatMul(a, b) => {
                    if self.needs[a] {
                        let bt = self.values[b].transpose();
                        let ga = go.matmul(&bt);
                        self.add_tensor(a, &ga);
                    }
                    if self.needs[b] {
                        let at = self.values[a].transpose();
                        let gb = at.matmul(&go);
                        self.add_tensor(b, &gb);
                    }
                }
                Op::Transpose(a) => {
                    let gt = go.transpose();
                    self.add_tensor(a, &gt);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.values[idx].clone();
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yrow = y.row_slice(r);
                        let grow = &go.data[r * y.cols..(r + 1) * y.cols];
                        let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                        for c in 0..y.cols {
                            ga.data[r * y.cols + c] = yrow[c] * (grow[c] - dot);
                        }
                    }
                    self.add_tensor(a, &ga);
                }
                Op::SumAll(a) => {
                    let g = go.data[0];
                    self.accum_with(a, &Tensor::scalar(g), |_, _| g);
                }
                Op::MeanAll(a) => {
                    let n = self.values[a].len() as f64;
                    let g = go.data[0] / n;
                    self.accum_with(a, &Tensor::scalar(g), |_, _| g);
                }
                Op::MaxAll(a) => {
                    if self.needs[a] {
                        let av = &self.values[a];
                        let mut arg = 0;
                        let mut best = f64::NEG_INFINITY;
                        for (i, &v) in av.data.iter().enumerate() {
                            if v > best {
                                best = v;
                                arg = i;
                            }
                        }
                        let g = go.data[0];
                        self.grads[a].data[arg] += g;
                    }
                }
                Op::SumAxis0(a) => {
                    let (rows, cols) = self.values[a].shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            ga.data[r * cols + c] = go.data[c];
                        }
                    }
                    self.add_tensor(a, &ga);
                }
                Op::SumAxis1(a) => {
                    let (rows, cols) = self.values[a].shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            ga.data[r * cols + c] = go.data[r];
                        }
                    }
                    self.add_tensor(a, &ga);
                }
                Op::ProdAxis1(a) => {
                    let av = self.values[a].clone();
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    let cols = av.cols;
                    for r in 0..av.rows {
                        let row = av.row_slice(r);
                        // prefix[i] = prod(row[..i]), suffix[i] = prod(row[i+1..])
                        let mut prefix = vec![1.0; cols];
                        for i in 1..cols {
                            prefix[i] = prefix[i - 1] * row[i - 1];
                        }
                        let mut suffix = vec![1.0; cols];
                        for i in (0..cols.saturating_sub(1)).rev() {
                            suffix[i] = suffix[i + 1] * row[i + 1];
                        }
                        for c in 0..cols {
                            ga.data[r * cols + c] = go.data[r] * prefix[c] * suffix[c];
                        }
                    }
                    self.add_tensor(a, &ga);
                }
                Op::SelectRows { a, indices } => {
                    if self.needs[a] {
                        let cols = go.cols;
                        for (out_r, &src_r) in indices.iter().enumerate() {
                            for c in 0..cols {
                                self.grads[a].data[src_r * cols + c] += go.data[out_r * cols + c];
                            }
                        }
                    }
                }
                Op::ConcatRows { inputs } => {
                    let cols = go.cols;
                    let mut offset = 0;
                    for &inp in &inputs {
                        let rows = self.values[inp].rows;
                        if self.needs[inp] {
                            for r in 0..rows {
                                for c in 0..cols {
                                    self.grads[inp].data[r * cols + c] += go.data[(offset + r) * cols + c];
                                }
                            }
                        }
                        offset += rows;
                    }
                }
                Op::ConcatCols { inputs } => {
                    let rows = go.rows;
                    let mut offset = 0;
                    for &inp in &inputs {
                        let icols = self.values[inp].cols;
                        if self.needs[inp] {
                            for r in 0..rows {
                                for c in 0..icols {
                                    self.grads[inp].data[r * icols + c] += go.data[r * go.cols + offset + c];
                                }
                            }
                        }
                        offset += icols;
                    }
                }
                Op::SliceCols { a, start, len } => {
                    if self.needs[a] {
                        let acols = self.values[a].cols;
                        for r in 0..go.rows {
                            for c in 0..len {
                                self.grads[a].data[r * acols + start + c] += go.data[r * len + c];
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if self.needs[a] {
                        for (i, &g) in go.data.iter().enumerate() {
                            self.grads[a].data[i] += g;
                        }
                    }
                }
            }
            self.grads[idx] = go;
        }
    }

    fn accum_with(&mut self, a: usize, go: &Tensor, f: impl Fn(usize, f64) -> f64) {
        if !self.needs[a] {
            return;
        }
        let target = &mut self.grads[a];
        if go.len() == target.len() {
            for (i, &g) in go.data.iter().enumerate() {
                target.data[i] += f(i, g);
            }
        } else {
            // scalar-broadcast case used by SumAll/MeanAll
            for i in 0..target.len() {
                target.data[i] += f(i, go.data[0]);
            }
        }
    }

    fn add_into(&mut self, a: usize, values: &[f64]) {
        if !self.needs[a] {
            return;
        }
        let target = &mut self.grads[a];
        assert_eq!(target.len(), values.len());
        for (t, &v) in target.data.iter_mut().zip(values) {
            *t += v;
        }
    }

    fn add_tensor(&mut self, a: usize, g: &Tensor) {
        if !self.needs[a] {
            return;
        }
        let target = &mut self.grads[a];
        assert_eq!(target.shape(), g.shape());
        for (t, &v) in target.data.iter_mut().zip(&g.data) {
            *t += v;
        }
    }
}

fn row_sums(t: &Tensor) -> Vec<f64> {
    (0..t.rows).map(|r| t.row_slice(r).iter().sum()).collect()
}

/// Concatenate along rows; all inputs must share a column count.
pub fn concat_rows(inputs: &[&Var]) -> Var {
    assert!(!inputs.is_empty(), "concat_rows of nothing");
    let tape = inputs[0].tape.clone();
    let t = tape.inner.borrow();
    let cols = t.values[inputs[0].id].cols;
    let mut data = Vec::new();
    let mut rows = 0;
    for v in inputs {
        let val = &t.values[v.id];
        assert_eq!(val.cols, cols, "concat_rows width mismatch");
        data.extend_from_slice(&val.data);
        rows += val.rows;
    }
    let value = Tensor { rows, cols, data };
    drop(t);
    tape.push(value, Op::ConcatRows { inputs: inputs.iter().map(|v| v.id).collect() })
}

/// Concatenate along columns; all inputs must share a row count.
pub fn concat_cols(inputs: &[&Var]) -> Var {
    assert!(!inputs.is_empty(), "concat_cols of nothing");
    let tape = inputs[0].tape.clone();
    let t = tape.inner.borrow();
    let rows = t.values[inputs[0].id].rows;
    let total_cols: usize = inputs.iter().map(|v| t.values[v.id].cols).sum();
    let mut data = Vec::with_capacity(rows * total_cols);
    for r in 0..rows {
        for v in inputs {
            let val = &t.values[v.id];
            assert_eq!(val.rows, rows, "concat_cols height mismatch");
            data.extend_from_slice(val.row_slice(r));
        }
    }
    let value = Tensor { rows, cols: total_cols, data };
    drop(t);
    tape.push(value, Op::ConcatCols { inputs: inputs.iter().map(|v| v.id).collect() })
}

impl Add for &Var {
    type Output = Var;
    fn add(self, rhs: Self) -> Var {
        Var::add(self, rhs)
    }
}

impl Sub for &Var {
    type Output = Var;
    fn sub(self, rhs: Self) -> Var {
        Var::sub(self, rhs)
    }
}

impl Mul for &Var {
    type Output = Var;
    fn mul(self, rhs: Self) -> Var {
        Var::mul(self, rhs)
    }
}

impl Div for &Var {
    type Output = Var;
    fn div(self, rhs: Self) -> Var {
        Var::div(self, rhs)
    }
}

impl Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.negate()
    }
}
