use super::{numel, BinOp, Op, Result, Tape, Tensor, TensorError, UnOp, Var};
use rayon::prelude::*;
use std::str::FromStr;
use std::sync::Arc;

/// Element count above which matmul splits rows across threads.
const PAR_THRESHOLD: usize = 1 << 15;

/// An operation whose backward pass is supplied by the caller. The renderer
/// uses this to put its hand-derived gradients on the same tape.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    /// One entry per input; `None` means no gradient flows to that input.
    fn backward(
        &self,
        grad_out: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

/// Operation kinds reachable through [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
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
    Pow,
    Clamp,
    Sum,
    Mean,
    Concat,
    Slice,
    Reshape,
    Transpose,
    Permute,
    MaskedSoftmax,
    LayerNorm,
    Embedding,
    Gather,
}

impl OpKind {
    pub const ALL: [OpKind; 28] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Softplus,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Gelu,
        OpKind::Abs,
        OpKind::Sqrt,
        OpKind::Acos,
        OpKind::Pow,
        OpKind::Clamp,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::Permute,
        OpKind::MaskedSoftmax,
        OpKind::LayerNorm,
        OpKind::Embedding,
        OpKind::Gather,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softplus => "softplus",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Gelu => "gelu",
            OpKind::Abs => "abs",
            OpKind::Sqrt => "sqrt",
            OpKind::Acos => "acos",
            OpKind::Pow => "pow",
            OpKind::Clamp => "clamp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Permute => "permute",
            OpKind::MaskedSoftmax => "masked_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Embedding => "embedding",
            OpKind::Gather => "gather",
        }
    }
}

impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| TensorError::Unsupported(s.to_string()))
    }
}

/// Attributes for [`Tape::apply`]. Only the fields a kind needs are read.
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    pub axis: Option<usize>,
    pub keepdim: bool,
    pub exponent: Option<f64>,
    pub range: Option<(usize, usize)>,
    pub bounds: Option<(f64, f64)>,
    pub shape: Option<Vec<usize>>,
    pub perm: Option<Vec<usize>>,
    pub mask: Option<Tensor>,
    pub indices: Option<Vec<usize>>,
}

fn missing(op: &'static str, what: &str) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: format!("missing attribute `{what}`"),
    }
}

fn arity(op: &'static str, inputs: &[Var], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected {n} inputs, got {}", inputs.len()),
        });
    }
    Ok(())
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Flat source offsets of `src` for every element of the broadcast `out` shape.
pub(crate) fn broadcast_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let d = rank - src.len() + i;
        strides[d] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let n = numel(out);
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    offsets
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// out(m×n) += a(m×k) · b(k×n)
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let row = |(i, orow): (usize, &mut [f64])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// out(m×n) += a(m×k) · b(n×k)ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let row = |(i, orow): (usize, &mut [f64])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *o += s;
        }
    };
    if m * k * n >= PAR_THRESHOLD && n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// out(k×n) += a(m×k)ᵀ · g(m×n)
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let row = |(p, orow): (usize, &mut [f64])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let grow = &g[i * n..(i + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

pub(crate) struct MatMulDims {
    pub batch: usize,
    pub shared_rhs: bool,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    let err = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let batch_a = &a[..a.len() - 2];
    let shared_rhs = b.len() == 2;
    if !shared_rhs && batch_a != &b[..b.len() - 2] {
        return Err(err());
    }
    let mut out_shape = batch_a.to_vec();
    out_shape.extend([m, n]);
    Ok(MatMulDims {
        batch: numel(batch_a),
        shared_rhs,
        m,
        k,
        n,
        out_shape,
    })
}

pub(crate) fn unary_forward(op: UnOp, x: f64) -> f64 {
    match op {
        UnOp::Neg => -x,
        UnOp::Exp => x.exp(),
        UnOp::Log => x.ln(),
        UnOp::Softplus => softplus(x),
        UnOp::Sigmoid => sigmoid(x),
        UnOp::Tanh => x.tanh(),
        UnOp::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        UnOp::Abs => x.abs(),
        UnOp::Sqrt => x.sqrt(),
        UnOp::Acos => x.acos(),
    }
}

/// Derivative given the input `x` and output `y`.
pub(crate) fn unary_derivative(op: UnOp, x: f64, y: f64) -> f64 {
    match op {
        UnOp::Neg => -1.0,
        UnOp::Exp => y,
        UnOp::Log => 1.0 / x,
        UnOp::Softplus => sigmoid(x),
        UnOp::Sigmoid => y * (1.0 - y),
        UnOp::Tanh => 1.0 - y * y,
        UnOp::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
        UnOp::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnOp::Sqrt => 0.5 / y,
        UnOp::Acos => -1.0 / (1.0 - x * x).sqrt(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn permute_data(
    data: &[f64],
    shape: &[usize],
    perm: &[usize],
) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let d = matmul_dims(av.shape(), bv.shape())?;
        let mut out = vec![0.0; numel(&d.out_shape)];
        for bi in 0..d.batch {
            let a_s = &av.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
            let b_s = if d.shared_rhs {
                bv.data()
            } else {
                &bv.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n]
            };
            gemm_nn(
                a_s,
                b_s,
                &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                d.m,
                d.k,
                d.n,
            );
        }
        let value = Tensor::new(d.out_shape, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    fn binary(&mut self, op: BinOp, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let value = if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else {
            let shape = broadcast_shape(name, av.shape(), bv.shape())?;
            let oa = broadcast_offsets(av.shape(), &shape);
            let ob = broadcast_offsets(bv.shape(), &shape);
            let data = oa
                .iter()
                .zip(&ob)
                .map(|(&i, &j)| f(av.data()[i], bv.data()[j]))
                .collect();
            Tensor::new(shape, data)?
        };
        self.push(name, value, Op::Binary(op, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, "div", a, b)
    }

    fn unary(&mut self, op: UnOp, name: &'static str, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| unary_forward(op, v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(name, value, Op::Unary(op, x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Neg, "neg", x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Exp, "exp", x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Log, "log", x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Softplus, "softplus", x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Sigmoid, "sigmoid", x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Tanh, "tanh", x)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Gelu, "gelu", x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Abs, "abs", x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Sqrt, "sqrt", x)
    }

    pub fn acos(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Acos, "acos", x)
    }

    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.powf(p)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("pow", value, Op::Pow(x, p), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v + c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("add_scalar", value, Op::Shift(x), &[x])
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::InvalidArgument {
                op: "clamp",
                msg: format!("lower bound {lo} exceeds upper bound {hi}"),
            });
        }
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("clamp", value, Op::Clamp(x, lo, hi), &[x])
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, keepdim: bool, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        let xv = self.value(x);
        let value = match axis {
            None => {
                let mut s = 0.0;
                for &v in xv.data() {
                    s += v;
                }
                if mean {
                    s /= xv.numel().max(1) as f64;
                }
                let shape = if keepdim {
                    vec![1; xv.rank()]
                } else {
                    Vec::new()
                };
                Tensor::new(shape, vec![s])?
            }
            Some(ax) => {
                if ax >= xv.rank() {
                    return Err(TensorError::InvalidArgument {
                        op: name,
                        msg: format!("axis {ax} out of range for shape {:?}", xv.shape()),
                    });
                }
                let (outer, n, inner) = split_axis(xv.shape(), ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let src = &xv.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if mean && n > 0 {
                    for v in &mut out {
                        *v /= n as f64;
                    }
                }
                let mut shape = xv.shape().to_vec();
                if keepdim {
                    shape[ax] = 1;
                } else {
                    shape.remove(ax);
                }
                Tensor::new(shape, out)?
            }
        };
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        self.push(name, value, op, &[x])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, None, false, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, None, false, true)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, Some(axis), keepdim, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, Some(axis), keepdim, true)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &x in xs {
                let xv = self.value(x);
                let n = xv.shape()[axis] * inner;
                out.extend_from_slice(&xv.data()[o * n..(o + 1) * n]);
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || start > end || end > xv.shape()[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!(
                    "range {start}..{end} on axis {axis} of shape {:?}",
                    xv.shape()
                ),
            });
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = end - start;
        let value = Tensor::new(shape, out)?;
        self.push("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut seen = vec![false; xv.rank()];
        let valid = perm.len() == xv.rank()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("{perm:?} is not a permutation for shape {:?}", xv.shape()),
            });
        }
        let (data, shape) = permute_data(xv.data(), xv.shape(), perm);
        let value = Tensor::new(shape, data)?;
        self.push(
            "permute",
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: "rank must be at least 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Softmax over the last axis after adding `mask`, whose shape must be a
    /// suffix of the input shape. Entries masked with `-inf` get exactly zero
    /// weight and pass exactly zero gradient. A row with every entry masked
    /// yields all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let cols = *shape.last().ok_or(TensorError::InvalidArgument {
            op: "masked_softmax",
            msg: "rank-0 input".into(),
        })?;
        if let Some(m) = mask {
            let ms = m.shape();
            if ms.len() > shape.len() || shape[shape.len() - ms.len()..] != *ms {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: shape,
                    rhs: ms.to_vec(),
                });
            }
        }
        let mut out = vec![0.0; xv.numel()];
        if cols > 0 {
            let mlen = mask.map_or(1, |m| m.numel());
            for (r, (orow, xrow)) in out.chunks_mut(cols).zip(xv.data().chunks(cols)).enumerate() {
                let mrow = mask.map(|m| {
                    let off = (r * cols) % mlen;
                    &m.data()[off..off + cols]
                });
                let mut mx = f64::NEG_INFINITY;
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = xrow[j] + mrow.map_or(0.0, |m| m[j]);
                    mx = mx.max(*o);
                }
                if mx == f64::NEG_INFINITY {
                    orow.iter_mut().for_each(|o| *o = 0.0);
                    continue;
                }
                let mut s = 0.0;
                for o in orow.iter_mut() {
                    *o = (*o - mx).exp();
                    s += *o;
                }
                for o in orow.iter_mut() {
                    *o /= s;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("masked_softmax", value, Op::MaskedSoftmax(x), &[x])
    }

    /// Normalize over the last axis: `(x - mean) / sqrt(var + eps)`. No affine
    /// part; compose with `mul`/`add` for that.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let cols = *shape.last().ok_or(TensorError::InvalidArgument {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        let rows = if cols == 0 { 0 } else { xv.numel() / cols };
        let mut out = vec![0.0; xv.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for (orow, xrow) in out
            .chunks_mut(cols.max(1))
            .zip(xv.data().chunks(cols.max(1)))
        {
            let mut mean = 0.0;
            for &v in xrow {
                mean += v;
            }
            mean /= cols as f64;
            let mut var = 0.0;
            for &v in xrow {
                var += (v - mean) * (v - mean);
            }
            var /= cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, &v) in orow.iter_mut().zip(xrow) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(shape, out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if numel(shape) != index.len() {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: format!("{} indices for shape {shape:?}", index.len()),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.numel()) {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of range for {} elements", xv.numel()),
            });
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push("gather", value, Op::Gather { x, index }, &[x])
    }

    /// Row lookup into a `[rows, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.value(table).shape().to_vec();
        if ts.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                msg: format!("table must be rank 2, got {ts:?}"),
            });
        }
        let dim = ts[1];
        if let Some(&bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                msg: format!("id {bad} out of range for {} rows", ts[0]),
            });
        }
        let index: Vec<usize> = ids.iter().flat_map(|&i| (i * dim)..(i + 1) * dim).collect();
        self.gather(table, Arc::new(index), &[ids.len(), dim])
    }

    /// Record an op whose output was computed externally and whose backward
    /// is provided by `op`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name().to_string();
        self.push(
            &name,
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Generic entry point dispatching on [`OpKind`].
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let name = kind.name();
        let unary_kinds = [
            (OpKind::Neg, UnOp::Neg),
            (OpKind::Exp, UnOp::Exp),
            (OpKind::Log, UnOp::Log),
            (OpKind::Softplus, UnOp::Softplus),
            (OpKind::Sigmoid, UnOp::Sigmoid),
            (OpKind::Tanh, UnOp::Tanh),
            (OpKind::Gelu, UnOp::Gelu),
            (OpKind::Abs, UnOp::Abs),
            (OpKind::Sqrt, UnOp::Sqrt),
            (OpKind::Acos, UnOp::Acos),
        ];
        if let Some(&(_, u)) = unary_kinds.iter().find(|(k, _)| *k == kind) {
            arity(name, inputs, 1)?;
            return self.unary(u, name, inputs[0]);
        }
        match kind {
            OpKind::MatMul => {
                arity(name, inputs, 2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                arity(name, inputs, 2)?;
                let op = match kind {
                    OpKind::Add => BinOp::Add,
                    OpKind::Sub => BinOp::Sub,
                    OpKind::Mul => BinOp::Mul,
                    _ => BinOp::Div,
                };
                self.binary(op, name, inputs[0], inputs[1])
            }
            OpKind::Pow => {
                arity(name, inputs, 1)?;
                let p = attrs.exponent.ok_or_else(|| missing(name, "exponent"))?;
                self.pow(inputs[0], p)
            }
            OpKind::Clamp => {
                arity(name, inputs, 1)?;
                let (lo, hi) = attrs.bounds.ok_or_else(|| missing(name, "bounds"))?;
                self.clamp(inputs[0], lo, hi)
            }
            OpKind::Sum | OpKind::Mean => {
                arity(name, inputs, 1)?;
                self.reduce(inputs[0], attrs.axis, attrs.keepdim, kind == OpKind::Mean)
            }
            OpKind::Concat => self.concat(inputs, attrs.axis.unwrap_or(0)),
            OpKind::Slice => {
                arity(name, inputs, 1)?;
                let (s, e) = attrs.range.ok_or_else(|| missing(name, "range"))?;
                self.slice(inputs[0], attrs.axis.unwrap_or(0), s, e)
            }
            OpKind::Reshape => {
                arity(name, inputs, 1)?;
                let shape = attrs.shape.as_ref().ok_or_else(|| missing(name, "shape"))?;
                self.reshape(inputs[0], shape)
            }
            OpKind::Transpose => {
                arity(name, inputs, 1)?;
                self.transpose(inputs[0])
            }
            OpKind::Permute => {
                arity(name, inputs, 1)?;
                let perm = attrs.perm.as_ref().ok_or_else(|| missing(name, "perm"))?;
                self.permute(inputs[0], perm)
            }
            OpKind::MaskedSoftmax => {
                arity(name, inputs, 1)?;
                self.masked_softmax(inputs[0], attrs.mask.as_ref())
            }
            OpKind::LayerNorm => {
                arity(name, inputs, 1)?;
                self.layer_norm(inputs[0], crate::tensor::LAYER_NORM_EPS)
            }
            OpKind::Embedding => {
                arity(name, inputs, 1)?;
                let ids = attrs
                    .indices
                    .as_ref()
                    .ok_or_else(|| missing(name, "indices"))?;
                self.embedding(inputs[0], ids)
            }
            OpKind::Gather => {
                arity(name, inputs, 1)?;
                let idx = attrs
                    .indices
                    .clone()
                    .ok_or_else(|| missing(name, "indices"))?;
                let shape = attrs.shape.clone().unwrap_or_else(|| vec![idx.len()]);
                self.gather(inputs[0], Arc::new(idx), &shape)
            }
            _ => Err(TensorError::Unsupported(name.to_string())),
        }
    }
}
