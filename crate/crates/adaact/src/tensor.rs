//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a Wengert list;
//! [`Tensor`] values are handles into it. Trainable state lives in [`Param`]s,
//! which persist across tapes: each forward pass enters the current parameter
//! values as leaves, and `backward` accumulates gradients back into the params.
//! The tape is rebuilt per forward pass, so graphs whose weights are themselves
//! generated per input work without special casing.
//!
//! A tape and its tensors are confined to one thread. Independent model
//! instances on separate threads do not share state.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

/// Errors from tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, left={left:?} right={right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank-{expected} operand, got shape {got:?}")]
    RankExpected {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("{op}: data length {got} does not match shape {shape:?}")]
    DataLength {
        op: &'static str,
        shape: Vec<usize>,
        got: usize,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("backward requires a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("parameter '{param}' has no gradient; run backward first")]
    MissingGrad { param: String },
    #[error("{op}: index {index} out of range for bound {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
}

pub type TensorResult<T> = Result<T, TensorError>;

// ── Parameters ───────────────────────────────────────────────────────

struct ParamInner {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

/// A named trainable parameter. Persists across tapes; gradients accumulate
/// here when `backward` reaches the leaf that snapshotted it.
#[derive(Clone)]
pub struct Param {
    inner: Rc<RefCell<ParamInner>>,
}

impl fmt::Debug for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.inner.borrow();
        f.debug_struct("Param")
            .field("name", &p.name)
            .field("shape", &p.shape)
            .finish()
    }
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> TensorResult<Self> {
        let numel: usize = shape.iter().product();
        if values.len() != numel || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::DataLength {
                op: "param",
                shape,
                got: values.len(),
            });
        }
        Ok(Self {
            inner: Rc::new(RefCell::new(ParamInner {
                name: name.into(),
                shape,
                values,
                grad: None,
            })),
        })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::new(name, shape, vec![0.0; numel]).expect("zeros shape")
    }

    pub fn ones(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::new(name, shape, vec![1.0; numel]).expect("ones shape")
    }

    /// i.i.d. normal initialization with the given standard deviation.
    pub fn randn(
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut impl rand::Rng,
    ) -> Self {
        use rand_distr::{Distribution, Normal};
        let numel = shape.iter().product();
        let dist = Normal::new(0.0, std.max(0.0)).expect("normal std");
        let values = (0..numel).map(|_| dist.sample(rng)).collect();
        Self::new(name, shape, values).expect("randn shape")
    }

    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    pub fn set_values(&self, values: Vec<f64>) -> TensorResult<()> {
        let mut p = self.inner.borrow_mut();
        if values.len() != p.values.len() {
            return Err(TensorError::DataLength {
                op: "set_values",
                shape: p.shape.clone(),
                got: values.len(),
            });
        }
        p.values = values;
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn accumulate_grad(&self, g: &[f64]) {
        let mut p = self.inner.borrow_mut();
        match p.grad.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => p.grad = Some(g.to_vec()),
        }
    }

    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Nudge a single coordinate in place; used by finite-difference checks.
    pub fn perturb(&self, index: usize, delta: f64) {
        self.inner.borrow_mut().values[index] += delta;
    }
}

/// One SGD update: `p <- p - lr * grad` for every parameter, then gradients
/// are cleared. A parameter without a populated gradient is a state error.
pub fn sgd_step(params: &[Param], lr: f64) -> TensorResult<()> {
    // Validate first so a failure never applies a partial update.
    for p in params {
        if p.inner.borrow().grad.is_none() {
            return Err(TensorError::MissingGrad { param: p.name() });
        }
    }
    for p in params {
        let mut inner = p.inner.borrow_mut();
        let grad = inner.grad.take().expect("validated above");
        for (v, g) in inner.values.iter_mut().zip(&grad) {
            *v -= lr * g;
        }
    }
    Ok(())
}

// ── Tape ─────────────────────────────────────────────────────────────

#[derive(Clone)]
enum Op {
    Leaf { param: Option<Param> },
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Relu { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Affine { a: usize, scale: f64 },
    Log { a: usize },
    SoftmaxRows { a: usize },
    LayerNorm { a: usize, gain: usize, shift: usize, eps: f64 },
    LogSumExp { a: usize },
    Sum { a: usize },
    AddRowBias { a: usize, bias: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize },
    GatherRows { a: usize, rows: Vec<usize> },
    ScaleRows { a: usize, factors: Rc<Vec<f64>> },
    Reshape { a: usize },
    // Scalar whose value and Jacobian w.r.t. one input were computed outside
    // the tape (the decoding losses). Backward adds `upstream * jac`.
    InjectedScalar { a: usize, jac: Rc<Vec<f64>> },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Records one forward pass. Create a fresh tape per pass.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    idx: usize,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("idx", &self.idx)
            .field("shape", &self.shape())
            .finish()
    }
}

#[cfg(debug_assertions)]
fn check_finite(op: &'static str, values: &[f64]) -> TensorResult<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

#[cfg(not(debug_assertions))]
#[inline(always)]
fn check_finite(_op: &'static str, _values: &[f64]) -> TensorResult<()> {
    Ok(())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row_a = &a[i * k..(i + 1) * k];
        let row_c = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in row_a.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let row_b = &b[p * n..(p + 1) * n];
            for (c, &bv) in row_c.iter_mut().zip(row_b) {
                *c += aip * bv;
            }
        }
    }
}

/// Numerically stable logistic function.
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sum(exp(x))) over a nonempty slice, max-shifted. Exact on singletons.
pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    debug_assert!(!xs.is_empty());
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        let idx = {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(Node {
                shape,
                values,
                grad: None,
                op,
                requires_grad,
            });
            inner.nodes.len() - 1
        };
        Tensor {
            tape: self.clone(),
            idx,
        }
    }

    /// A constant input; never receives gradient.
    pub fn constant(&self, shape: Vec<usize>, values: Vec<f64>) -> TensorResult<Tensor> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(TensorError::DataLength {
                op: "constant",
                shape,
                got: values.len(),
            });
        }
        check_finite("constant", &values)?;
        Ok(self.push(shape, values, Op::Leaf { param: None }, false))
    }

    pub fn scalar(&self, v: f64) -> TensorResult<Tensor> {
        self.constant(vec![1], vec![v])
    }

    /// Enters the parameter's current values as a differentiable leaf.
    pub fn leaf(&self, param: &Param) -> Tensor {
        let (shape, values) = {
            let p = param.inner.borrow();
            (p.shape.clone(), p.values.clone())
        };
        self.push(
            shape,
            values,
            Op::Leaf {
                param: Some(param.clone()),
            },
            true,
        )
    }

    fn requires(&self, idx: usize) -> bool {
        self.inner.borrow().nodes[idx].requires_grad
    }

    fn shape_of(&self, idx: usize) -> Vec<usize> {
        self.inner.borrow().nodes[idx].shape.clone()
    }

    fn values_of(&self, idx: usize) -> Vec<f64> {
        self.inner.borrow().nodes[idx].values.clone()
    }

    fn with_values<R>(&self, idx: usize, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().nodes[idx].values)
    }

    /// Vertical stacking: all parts must share a column count.
    pub fn concat_rows(&self, parts: &[&Tensor]) -> TensorResult<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_rows" });
        }
        let cols = cols_of(&self.shape_of(parts[0].idx));
        let mut values = Vec::new();
        let mut rows = 0usize;
        let mut req = false;
        for p in parts {
            let shape = self.shape_of(p.idx);
            if cols_of(&shape) != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, cols],
                    right: shape,
                });
            }
            rows += rows_of(&shape);
            values.extend_from_slice(&self.values_of(p.idx));
            req |= self.requires(p.idx);
        }
        let op = Op::ConcatRows {
            parts: parts.iter().map(|p| p.idx).collect(),
        };
        Ok(self.push(vec![rows, cols], values, op, req))
    }

    /// Horizontal stacking: all parts must share a row count.
    pub fn concat_cols(&self, parts: &[&Tensor]) -> TensorResult<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_cols" });
        }
        let rows = rows_of(&self.shape_of(parts[0].idx));
        let mut total_cols = 0usize;
        let mut req = false;
        for p in parts {
            let shape = self.shape_of(p.idx);
            if rows_of(&shape) != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![rows, total_cols],
                    right: shape,
                });
            }
            total_cols += cols_of(&shape);
            req |= self.requires(p.idx);
        }
        let mut values = vec![0.0; rows * total_cols];
        {
            let inner = self.inner.borrow();
            let mut col_off = 0usize;
            for p in parts {
                let node = &inner.nodes[p.idx];
                let c = cols_of(&node.shape);
                for r in 0..rows {
                    values[r * total_cols + col_off..r * total_cols + col_off + c]
                        .copy_from_slice(&node.values[r * c..(r + 1) * c]);
                }
                col_off += c;
            }
        }
        let op = Op::ConcatCols {
            parts: parts.iter().map(|p| p.idx).collect(),
        };
        Ok(self.push(vec![rows, total_cols], values, op, req))
    }

    /// A scalar computed outside the tape together with its Jacobian with
    /// respect to `input`. Bridges external differentiable routines (the
    /// decoding losses) into the graph.
    pub fn inject_scalar(&self, input: &Tensor, value: f64, jac: Vec<f64>) -> TensorResult<Tensor> {
        let numel: usize = self.shape_of(input.idx).iter().product();
        if jac.len() != numel {
            return Err(TensorError::DataLength {
                op: "inject_scalar",
                shape: self.shape_of(input.idx),
                got: jac.len(),
            });
        }
        check_finite("inject_scalar", &[value])?;
        check_finite("inject_scalar", &jac)?;
        let req = self.requires(input.idx);
        Ok(self.push(
            vec![1],
            vec![value],
            Op::InjectedScalar {
                a: input.idx,
                jac: Rc::new(jac),
            },
            req,
        ))
    }
}

fn rows_of(shape: &[usize]) -> usize {
    match shape.len() {
        1 => 1,
        2 => shape[0],
        _ => shape.iter().take(shape.len() - 1).product(),
    }
}

fn cols_of(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&0)
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.idx)
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn values(&self) -> Vec<f64> {
        self.tape.values_of(self.idx)
    }

    /// The single value of a scalar tensor.
    pub fn value(&self) -> f64 {
        let v = self.values();
        debug_assert_eq!(v.len(), 1, "value() on non-scalar");
        v[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.idx)
    }

    /// Gradient recorded by the most recent backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().nodes[self.idx].grad.clone()
    }

    fn unary(&self, op_name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> TensorResult<Tensor> {
        let values: Vec<f64> = self
            .tape
            .with_values(self.idx, |xs| xs.iter().map(|&x| f(x)).collect());
        check_finite(op_name, &values)?;
        Ok(self
            .tape
            .push(self.shape(), values, op, self.requires_grad()))
    }

    pub fn relu(&self) -> TensorResult<Tensor> {
        self.unary("relu", |x| x.max(0.0), Op::Relu { a: self.idx })
    }

    pub fn tanh(&self) -> TensorResult<Tensor> {
        self.unary("tanh", f64::tanh, Op::Tanh { a: self.idx })
    }

    pub fn sigmoid(&self) -> TensorResult<Tensor> {
        self.unary("sigmoid", stable_sigmoid, Op::Sigmoid { a: self.idx })
    }

    pub fn log(&self) -> TensorResult<Tensor> {
        self.unary("log", f64::ln, Op::Log { a: self.idx })
    }

    /// Elementwise `scale * x + offset`.
    pub fn affine(&self, scale: f64, offset: f64) -> TensorResult<Tensor> {
        self.unary(
            "affine",
            |x| scale * x + offset,
            Op::Affine {
                a: self.idx,
                scale,
            },
        )
    }

    fn binary(&self, other: &Tensor, op_name: &'static str) -> TensorResult<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.binary(other, "add")?;
        let values: Vec<f64> = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx]
                .values
                .iter()
                .zip(&inner.nodes[other.idx].values)
                .map(|(&x, &y)| x + y)
                .collect()
        };
        check_finite("add", &values)?;
        let req = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            self.shape(),
            values,
            Op::Add {
                a: self.idx,
                b: other.idx,
            },
            req,
        ))
    }

    pub fn mul(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.binary(other, "mul")?;
        let values: Vec<f64> = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx]
                .values
                .iter()
                .zip(&inner.nodes[other.idx].values)
                .map(|(&x, &y)| x * y)
                .collect()
        };
        check_finite("mul", &values)?;
        let req = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            self.shape(),
            values,
            Op::Mul {
                a: self.idx,
                b: other.idx,
            },
            req,
        ))
    }

    pub fn sub(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.add(&other.affine(-1.0, 0.0)?)
    }

    pub fn matmul(&self, other: &Tensor) -> TensorResult<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 {
            return Err(TensorError::RankExpected {
                op: "matmul",
                expected: 2,
                got: sa,
            });
        }
        if sb.len() != 2 {
            return Err(TensorError::RankExpected {
                op: "matmul",
                expected: 2,
                got: sb,
            });
        }
        if sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut values = vec![0.0; m * n];
        {
            let inner = self.tape.inner.borrow();
            matmul_raw(
                &inner.nodes[self.idx].values,
                &inner.nodes[other.idx].values,
                m,
                k,
                n,
                &mut values,
            );
        }
        check_finite("matmul", &values)?;
        let req = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            vec![m, n],
            values,
            Op::Matmul {
                a: self.idx,
                b: other.idx,
            },
            req,
        ))
    }

    pub fn transpose(&self) -> TensorResult<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::RankExpected {
                op: "transpose",
                expected: 2,
                got: s,
            });
        }
        let (m, n) = (s[0], s[1]);
        let mut values = vec![0.0; m * n];
        self.tape.with_values(self.idx, |src| {
            for i in 0..m {
                for j in 0..n {
                    values[j * m + i] = src[i * n + j];
                }
            }
        });
        Ok(self
            .tape
            .push(vec![n, m], values, Op::Transpose { a: self.idx }, self.requires_grad()))
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&self) -> TensorResult<Tensor> {
        let s = self.shape();
        let (rows, cols) = (rows_of(&s), cols_of(&s));
        if cols == 0 {
            return Err(TensorError::EmptyInput { op: "softmax_rows" });
        }
        let mut values = vec![0.0; rows * cols];
        self.tape.with_values(self.idx, |src| {
            for r in 0..rows {
                let row = &src[r * cols..(r + 1) * cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let out = &mut values[r * cols..(r + 1) * cols];
                let mut sum = 0.0;
                for (o, &x) in out.iter_mut().zip(row) {
                    *o = (x - m).exp();
                    sum += *o;
                }
                for o in out.iter_mut() {
                    *o /= sum;
                }
            }
        });
        check_finite("softmax_rows", &values)?;
        Ok(self
            .tape
            .push(s, values, Op::SoftmaxRows { a: self.idx }, self.requires_grad()))
    }

    /// Per-row normalization to zero mean and unit variance, then an affine
    /// map by `gain` and `shift` (both length-N vectors).
    pub fn layernorm(&self, gain: &Tensor, shift: &Tensor, eps: f64) -> TensorResult<Tensor> {
        let s = self.shape();
        let (rows, cols) = (rows_of(&s), cols_of(&s));
        if cols < 2 {
            return Err(TensorError::RankExpected {
                op: "layernorm",
                expected: 2,
                got: s,
            });
        }
        for t in [gain, shift] {
            if t.numel() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "layernorm",
                    left: s.clone(),
                    right: t.shape(),
                });
            }
        }
        let mut values = vec![0.0; rows * cols];
        {
            let inner = self.tape.inner.borrow();
            let src = &inner.nodes[self.idx].values;
            let g = &inner.nodes[gain.idx].values;
            let b = &inner.nodes[shift.idx].values;
            for r in 0..rows {
                let row = &src[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let out = &mut values[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    out[j] = g[j] * ((row[j] - mean) * inv) + b[j];
                }
            }
        }
        check_finite("layernorm", &values)?;
        let req = self.requires_grad() || gain.requires_grad() || shift.requires_grad();
        Ok(self.tape.push(
            s,
            values,
            Op::LayerNorm {
                a: self.idx,
                gain: gain.idx,
                shift: shift.idx,
                eps,
            },
            req,
        ))
    }

    /// log(sum(exp(x))) over all elements, producing a scalar.
    pub fn logsumexp(&self) -> TensorResult<Tensor> {
        if self.numel() == 0 {
            return Err(TensorError::EmptyInput { op: "logsumexp" });
        }
        let v = self.tape.with_values(self.idx, |src| logsumexp_slice(src));
        check_finite("logsumexp", &[v])?;
        Ok(self
            .tape
            .push(vec![1], vec![v], Op::LogSumExp { a: self.idx }, self.requires_grad()))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&self) -> TensorResult<Tensor> {
        let v: f64 = self.tape.with_values(self.idx, |src| src.iter().sum());
        check_finite("sum", &[v])?;
        Ok(self
            .tape
            .push(vec![1], vec![v], Op::Sum { a: self.idx }, self.requires_grad()))
    }

    /// Adds a length-N bias vector to every row of an M×N tensor. The only
    /// broadcasting form supported.
    pub fn add_row_bias(&self, bias: &Tensor) -> TensorResult<Tensor> {
        let s = self.shape();
        let (rows, cols) = (rows_of(&s), cols_of(&s));
        if bias.numel() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                left: s,
                right: bias.shape(),
            });
        }
        let mut values = vec![0.0; rows * cols];
        {
            let inner = self.tape.inner.borrow();
            let src = &inner.nodes[self.idx].values;
            let b = &inner.nodes[bias.idx].values;
            for r in 0..rows {
                for j in 0..cols {
                    values[r * cols + j] = src[r * cols + j] + b[j];
                }
            }
        }
        check_finite("add_row_bias", &values)?;
        let req = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            s,
            values,
            Op::AddRowBias {
                a: self.idx,
                bias: bias.idx,
            },
            req,
        ))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> TensorResult<Tensor> {
        let s = self.shape();
        let (rows, cols) = (rows_of(&s), cols_of(&s));
        if start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: cols,
            });
        }
        let mut values = Vec::with_capacity(rows * len);
        self.tape.with_values(self.idx, |src| {
            for r in 0..rows {
                values.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
            }
        });
        Ok(self.tape.push(
            vec![rows, len],
            values,
            Op::SliceCols {
                a: self.idx,
                start,
                len,
            },
            self.requires_grad(),
        ))
    }

    /// Selects rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&self, rows: &[usize]) -> TensorResult<Tensor> {
        let s = self.shape();
        let (nrows, cols) = (rows_of(&s), cols_of(&s));
        for &r in rows {
            if r >= nrows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    bound: nrows,
                });
            }
        }
        let mut values = Vec::with_capacity(rows.len() * cols);
        self.tape.with_values(self.idx, |src| {
            for &r in rows {
                values.extend_from_slice(&src[r * cols..(r + 1) * cols]);
            }
        });
        Ok(self.tape.push(
            vec![rows.len(), cols],
            values,
            Op::GatherRows {
                a: self.idx,
                rows: rows.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Multiplies row r by the constant `factors[r]`.
    pub fn scale_rows(&self, factors: &[f64]) -> TensorResult<Tensor> {
        let s = self.shape();
        let (rows, cols) = (rows_of(&s), cols_of(&s));
        if factors.len() != rows {
            return Err(TensorError::DataLength {
                op: "scale_rows",
                shape: s,
                got: factors.len(),
            });
        }
        let mut values = vec![0.0; rows * cols];
        self.tape.with_values(self.idx, |src| {
            for r in 0..rows {
                for j in 0..cols {
                    values[r * cols + j] = src[r * cols + j] * factors[r];
                }
            }
        });
        check_finite("scale_rows", &values)?;
        Ok(self.tape.push(
            s,
            values,
            Op::ScaleRows {
                a: self.idx,
                factors: Rc::new(factors.to_vec()),
            },
            self.requires_grad(),
        ))
    }

    /// Reinterprets the row-major buffer under a new shape of equal size.
    pub fn reshape(&self, shape: Vec<usize>) -> TensorResult<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::DataLength {
                op: "reshape",
                shape,
                got: self.numel(),
            });
        }
        Ok(self
            .tape
            .push(shape, self.values(), Op::Reshape { a: self.idx }, self.requires_grad()))
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// `requires_grad` leaf's parameter; repeated calls without clearing
    /// accumulate further.
    pub fn backward(&self) -> TensorResult<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar { shape: self.shape() });
        }
        let inner = self.tape.inner.borrow();
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[self.idx] = Some(vec![1.0]);

        let add_into = |grads: &mut Vec<Option<Vec<f64>>>, idx: usize, contrib: &[f64]| {
            if !inner.nodes[idx].requires_grad {
                return;
            }
            match grads[idx].as_mut() {
                Some(g) => {
                    for (a, &c) in g.iter_mut().zip(contrib) {
                        *a += c;
                    }
                }
                None => grads[idx] = Some(contrib.to_vec()),
            }
        };

        for i in (0..=self.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &inner.nodes[i];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        p.accumulate_grad(&g);
                    }
                }
                Op::Matmul { a, b } => {
                    let (na, nb) = (&inner.nodes[*a], &inner.nodes[*b]);
                    let (m, k) = (na.shape[0], na.shape[1]);
                    let nn = nb.shape[1];
                    if na.requires_grad {
                        // dA = dC · B^T
                        let mut da = vec![0.0; m * k];
                        for i2 in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..nn {
                                    s += g[i2 * nn + j] * nb.values[p * nn + j];
                                }
                                da[i2 * k + p] = s;
                            }
                        }
                        add_into(&mut grads, *a, &da);
                    }
                    if nb.requires_grad {
                        // dB = A^T · dC
                        let mut db = vec![0.0; k * nn];
                        for i2 in 0..m {
                            for p in 0..k {
                                let aip = na.values[i2 * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..nn {
                                    db[p * nn + j] += aip * g[i2 * nn + j];
                                }
                            }
                        }
                        add_into(&mut grads, *b, &db);
                    }
                }
                Op::Transpose { a } => {
                    let sa = &inner.nodes[*a].shape;
                    let (m, nn) = (sa[0], sa[1]);
                    let mut da = vec![0.0; m * nn];
                    for i2 in 0..m {
                        for j in 0..nn {
                            da[i2 * nn + j] = g[j * m + i2];
                        }
                    }
                    add_into(&mut grads, *a, &da);
                }
                Op::Add { a, b } => {
                    add_into(&mut grads, *a, &g);
                    add_into(&mut grads, *b, &g);
                }
                Op::Mul { a, b } => {
                    if inner.nodes[*a].requires_grad {
                        let bv = &inner.nodes[*b].values;
                        let da: Vec<f64> = g.iter().zip(bv).map(|(&gv, &b)| gv * b).collect();
                        add_into(&mut grads, *a, &da);
                    }
                    if inner.nodes[*b].requires_grad {
                        let av = &inner.nodes[*a].values;
                        let db: Vec<f64> = g.iter().zip(av).map(|(&gv, &a)| gv * a).collect();
                        add_into(&mut grads, *b, &db);
                    }
                }
                Op::Relu { a } => {
                    let xv = &inner.nodes[*a].values;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    add_into(&mut grads, *a, &da);
                }
                Op::Tanh { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&node.values)
                        .map(|(&gv, &y)| gv * (1.0 - y * y))
                        .collect();
                    add_into(&mut grads, *a, &da);
                }
                Op::Sigmoid { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&node.values)
                        .map(|(&gv, &y)| gv * y * (1.0 - y))
                        .collect();
                    add_into(&mut grads, *a, &da);
                }
                Op::Affine { a, scale, .. } => {
                    let da: Vec<f64> = g.iter().map(|&gv| gv * scale).collect();
                    add_into(&mut grads, *a, &da);
                }
                Op::Log { a } => {
                    let xv = &inner.nodes[*a].values;
                    let da: Vec<f64> = g.iter().zip(xv).map(|(&gv, &x)| gv / x).collect();
                    add_into(&mut grads, *a, &da);
                }
                Op::SoftmaxRows { a } => {
                    let cols = cols_of(&node.shape);
                    let rows = rows_of(&node.shape);
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let y = &node.values[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..cols {
                            da[r * cols + j] = y[j] * (gr[j] - dot);
                        }
                    }
                    add_into(&mut grads, *a, &da);
                }
                Op::LayerNorm { a, gain, shift, eps } => {
                    let xa = &inner.nodes[*a];
                    let cols = cols_of(&xa.shape);
                    let rows = rows_of(&xa.shape);
                    let gvals = &inner.nodes[*gain].values;
                    let mut da = vec![0.0; rows * cols];
                    let mut dgain = vec![0.0; cols];
                    let mut dshift = vec![0.0; cols];
                    for r in 0..rows {
                        let x = &xa.values[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mean = x.iter().sum::<f64>() / cols as f64;
                        let var = x.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        // dxhat, plus gain/shift accumulation
                        let mut dxhat = vec![0.0; cols];
                        for j in 0..cols {
                            let xhat = (x[j] - mean) * inv;
                            dgain[j] += gr[j] * xhat;
                            dshift[j] += gr[j];
                            dxhat[j] = gr[j] * gvals[j];
                        }
                        let mean_dx: f64 = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx_xhat: f64 = dxhat
                            .iter()
                            .enumerate()
                            .map(|(j, &d)| d * (x[j] - mean) * inv)
                            .sum::<f64>()
                            / cols as f64;
                        for j in 0..cols {
                            let xhat = (x[j] - mean) * inv;
                            da[r * cols + j] = inv * (dxhat[j] - mean_dx - xhat * mean_dx_xhat);
                        }
                    }
                    add_into(&mut grads, *a, &da);
                    add_into(&mut grads, *gain, &dgain);
                    add_into(&mut grads, *shift, &dshift);
                }
                Op::LogSumExp { a } => {
                    let xv = &inner.nodes[*a].values;
                    let out = node.values[0];
                    let da: Vec<f64> = xv.iter().map(|&x| g[0] * (x - out).exp()).collect();
                    add_into(&mut grads, *a, &da);
                }
                Op::Sum { a } => {
                    let n_in = inner.nodes[*a].values.len();
                    add_into(&mut grads, *a, &vec![g[0]; n_in]);
                }
                Op::AddRowBias { a, bias } => {
                    add_into(&mut grads, *a, &g);
                    if inner.nodes[*bias].requires_grad {
                        let cols = cols_of(&node.shape);
                        let rows = rows_of(&node.shape);
                        let mut db = vec![0.0; cols];
                        for r in 0..rows {
                            for j in 0..cols {
                                db[j] += g[r * cols + j];
                            }
                        }
                        add_into(&mut grads, *bias, &db);
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0usize;
                    for &p in parts {
                        let len = inner.nodes[p].values.len();
                        add_into(&mut grads, p, &g[off..off + len]);
                        off += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let total_cols = cols_of(&node.shape);
                    let rows = rows_of(&node.shape);
                    let mut col_off = 0usize;
                    for &p in parts {
                        let c = cols_of(&inner.nodes[p].shape);
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c].copy_from_slice(
                                &g[r * total_cols + col_off..r * total_cols + col_off + c],
                            );
                        }
                        add_into(&mut grads, p, &dp);
                        col_off += c;
                    }
                }
                Op::SliceCols { a, start, len } => {
                    let sa = &inner.nodes[*a].shape;
                    let (rows, cols) = (rows_of(sa), cols_of(sa));
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for j in 0..*len {
                            da[r * cols + start + j] = g[r * len + j];
                        }
                    }
                    add_into(&mut grads, *a, &da);
                }
                Op::GatherRows { a, rows } => {
                    let sa = &inner.nodes[*a].shape;
                    let (nrows, cols) = (rows_of(sa), cols_of(sa));
                    let mut da = vec![0.0; nrows * cols];
                    for (r, &src_row) in rows.iter().enumerate() {
                        for j in 0..cols {
                            da[src_row * cols + j] += g[r * cols + j];
                        }
                    }
                    add_into(&mut grads, *a, &da);
                }
                Op::ScaleRows { a, factors } => {
                    let cols = cols_of(&node.shape);
                    let rows = rows_of(&node.shape);
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            da[r * cols + j] = g[r * cols + j] * factors[r];
                        }
                    }
                    add_into(&mut grads, *a, &da);
                }
                Op::Reshape { a } => {
                    add_into(&mut grads, *a, &g);
                }
                Op::InjectedScalar { a, jac } => {
                    let da: Vec<f64> = jac.iter().map(|&j| g[0] * j).collect();
                    add_into(&mut grads, *a, &da);
                }
            }
            grads[i] = Some(g);
        }
        drop(inner);

        // Keep per-node gradients inspectable; accumulate if already present.
        let mut inner = self.tape.inner.borrow_mut();
        for (node, g) in inner.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                match node.grad.as_mut() {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}
