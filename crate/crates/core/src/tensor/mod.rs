//! Dense f64 tensors with a reverse-mode tape.
//!
//! A [`Tensor`] is a plain value (shape + row-major data). Computation that
//! needs gradients is recorded on a [`Tape`]: every operation appends a node
//! and returns a [`Var`] handle. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid topological order because an operation
//! can only reference nodes that already exist.
//!
//! Everything runs in f64. Reductions use a fixed sequential order so two
//! passes over identical inputs produce bitwise-identical values and
//! gradients.

mod backward;
pub mod container;
mod gradcheck;
mod ops;
mod params;

pub use backward::Gradients;
pub use gradcheck::{grad_check, numeric_gradient};
pub use ops::{sigmoid, softplus, CustomOp, OpAttrs, OpKind};
pub use params::{ParamBinding, ParamId, ParamStore};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: String },
    #[error("unsupported op kind `{0}`")]
    Unsupported(String),
    #[error("unknown variable handle {0}")]
    UnknownVar(usize),
    #[error("container: {0}")]
    Container(String),
}

/// Variance floor used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Dense row-major tensor. A rank-0 tensor (empty shape) holds one scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let data = vec![value; numel(&shape)];
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self { shape, data }
    }

    /// Normal(0, std²) entries.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "item",
                msg: format!("expected one element, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnOp {
    Neg,
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Tanh,
    Gelu,
    Abs,
    Sqrt,
    Acos,
}

pub(crate) enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Binary(BinOp, Var, Var),
    Unary(UnOp, Var),
    Pow(Var, f64),
    Scale(Var, f64),
    Shift(Var),
    Clamp(Var, f64, f64),
    Sum {
        x: Var,
        axis: Option<usize>,
    },
    Mean {
        x: Var,
        axis: Option<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Records operations for one forward pass; owned by a single step.
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Toggle the per-op finiteness check (on by default).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(
        &mut self,
        name: &str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: name.to_string(),
            });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    pub(crate) fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }
}
