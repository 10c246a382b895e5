use super::ops::{
    broadcast_offsets, gemm_nt, gemm_tn, invert_perm, matmul_dims, permute_data, split_axis,
    unary_derivative,
};
use super::{BinOp, Op, Result, Tape, Tensor, TensorError, Var};

/// Gradients of a scalar root with respect to the tape's leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the leaf is unreachable from the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but materializes zeros for unreachable leaves.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Sum a broadcast gradient back down to `src` shape.
fn unbroadcast(g: &[f64], out_shape: &[usize], src_shape: &[usize]) -> Vec<f64> {
    if out_shape == src_shape {
        return g.to_vec();
    }
    let offs = broadcast_offsets(src_shape, out_shape);
    let mut r = vec![0.0; src_shape.iter().product()];
    for (&o, &gv) in offs.iter().zip(g) {
        r[o] += gv;
    }
    r
}

impl Tape {
    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self.node(root)?;
        if root_node.value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let out = &node.value;
            let wants = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(Tensor::new(out.shape().to_vec(), g)?);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let d = matmul_dims(av.shape(), bv.shape())?;
                    let (m, k, nn) = (d.m, d.k, d.n);
                    if wants(*a) {
                        let mut ga = vec![0.0; av.numel()];
                        for bi in 0..d.batch {
                            let b_s = if d.shared_rhs {
                                bv.data()
                            } else {
                                &bv.data()[bi * k * nn..(bi + 1) * k * nn]
                            };
                            gemm_nt(
                                &g[bi * m * nn..(bi + 1) * m * nn],
                                b_s,
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                nn,
                                k,
                            );
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                    if wants(*b) {
                        let mut gb = vec![0.0; bv.numel()];
                        for bi in 0..d.batch {
                            let dst = if d.shared_rhs {
                                &mut gb[..]
                            } else {
                                &mut gb[bi * k * nn..(bi + 1) * k * nn]
                            };
                            gemm_tn(
                                &av.data()[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * nn..(bi + 1) * m * nn],
                                dst,
                                m,
                                k,
                                nn,
                            );
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Binary(op, a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let os = out.shape();
                    let same = av.shape() == os && bv.shape() == os;
                    let (oa, ob) = if same {
                        (None, None)
                    } else {
                        (
                            Some(broadcast_offsets(av.shape(), os)),
                            Some(broadcast_offsets(bv.shape(), os)),
                        )
                    };
                    let xa = |j: usize| av.data()[oa.as_ref().map_or(j, |o| o[j])];
                    let xb = |j: usize| bv.data()[ob.as_ref().map_or(j, |o| o[j])];
                    if wants(*a) {
                        let full: Vec<f64> = match op {
                            BinOp::Add | BinOp::Sub => g.clone(),
                            BinOp::Mul => g.iter().enumerate().map(|(j, gv)| gv * xb(j)).collect(),
                            BinOp::Div => g.iter().enumerate().map(|(j, gv)| gv / xb(j)).collect(),
                        };
                        accumulate(&mut grads, *a, unbroadcast(&full, os, av.shape()));
                    }
                    if wants(*b) {
                        let full: Vec<f64> = match op {
                            BinOp::Add => g.clone(),
                            BinOp::Sub => g.iter().map(|gv| -gv).collect(),
                            BinOp::Mul => g.iter().enumerate().map(|(j, gv)| gv * xa(j)).collect(),
                            BinOp::Div => g
                                .iter()
                                .enumerate()
                                .map(|(j, gv)| -gv * xa(j) / (xb(j) * xb(j)))
                                .collect(),
                        };
                        accumulate(&mut grads, *b, unbroadcast(&full, os, bv.shape()));
                    }
                }
                Op::Unary(op, x) => {
                    let xv = self.value(*x);
                    let d = g
                        .iter()
                        .zip(xv.data())
                        .zip(out.data())
                        .map(|((gv, &xi), &yi)| gv * unary_derivative(*op, xi, yi))
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Pow(x, p) => {
                    let xv = self.value(*x);
                    let d = g
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, &xi)| gv * p * xi.powf(p - 1.0))
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Scale(x, c) => {
                    let d = g.iter().map(|gv| gv * c).collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Shift(x) | Op::Reshape(x) => accumulate(&mut grads, *x, g),
                Op::Clamp(x, lo, hi) => {
                    let xv = self.value(*x);
                    let d = g
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, &xi)| if xi >= *lo && xi <= *hi { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Sum { x, axis } | Op::Mean { x, axis } => {
                    let xv = self.value(*x);
                    let is_mean = matches!(node.op, Op::Mean { .. });
                    let d = match axis {
                        None => {
                            let s = if is_mean {
                                g[0] / xv.numel().max(1) as f64
                            } else {
                                g[0]
                            };
                            vec![s; xv.numel()]
                        }
                        Some(ax) => {
                            let (outer, n_ax, inner) = split_axis(xv.shape(), *ax);
                            let f = if is_mean {
                                1.0 / n_ax.max(1) as f64
                            } else {
                                1.0
                            };
                            let mut d = vec![0.0; xv.numel()];
                            for o in 0..outer {
                                for j in 0..n_ax {
                                    for q in 0..inner {
                                        d[(o * n_ax + j) * inner + q] = g[o * inner + q] * f;
                                    }
                                }
                            }
                            d
                        }
                    };
                    accumulate(&mut grads, *x, d);
                }
                Op::Concat { xs, axis } => {
                    let (outer, _, inner) = split_axis(out.shape(), *axis);
                    let total = out.shape()[*axis] * inner;
                    let mut offset = 0;
                    for &x in xs {
                        let w = self.value(x).shape()[*axis] * inner;
                        if wants(x) {
                            let mut d = Vec::with_capacity(outer * w);
                            for o in 0..outer {
                                d.extend_from_slice(&g[o * total + offset..o * total + offset + w]);
                            }
                            accumulate(&mut grads, x, d);
                        }
                        offset += w;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let xv = self.value(*x);
                    let (outer, n_ax, inner) = split_axis(xv.shape(), *axis);
                    let len = out.shape()[*axis];
                    let mut d = vec![0.0; xv.numel()];
                    for o in 0..outer {
                        let dst = (o * n_ax + start) * inner;
                        d[dst..dst + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Permute { x, perm } => {
                    let (d, _) = permute_data(&g, out.shape(), &invert_perm(perm));
                    accumulate(&mut grads, *x, d);
                }
                Op::MaskedSoftmax(x) => {
                    let cols = *out.shape().last().unwrap_or(&1);
                    let mut d = vec![0.0; out.numel()];
                    if cols > 0 {
                        for ((drow, yrow), grow) in d
                            .chunks_mut(cols)
                            .zip(out.data().chunks(cols))
                            .zip(g.chunks(cols))
                        {
                            let mut dot = 0.0;
                            for (y, gv) in yrow.iter().zip(grow) {
                                dot += y * gv;
                            }
                            for ((dv, y), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                                *dv = y * (gv - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::LayerNorm { x, inv_std } => {
                    let cols = *out.shape().last().unwrap_or(&1);
                    let mut d = vec![0.0; out.numel()];
                    if cols > 0 {
                        let nf = cols as f64;
                        for (((drow, yrow), grow), is) in d
                            .chunks_mut(cols)
                            .zip(out.data().chunks(cols))
                            .zip(g.chunks(cols))
                            .zip(inv_std)
                        {
                            let mut mg = 0.0;
                            let mut mgy = 0.0;
                            for (y, gv) in yrow.iter().zip(grow) {
                                mg += gv;
                                mgy += gv * y;
                            }
                            mg /= nf;
                            mgy /= nf;
                            for ((dv, y), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                                *dv = is * (gv - mg - y * mgy);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Gather { x, index } => {
                    let mut d = vec![0.0; self.value(*x).numel()];
                    for (&src, gv) in index.iter().zip(&g) {
                        d[src] += gv;
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Custom { inputs, op } => {
                    let gt = Tensor::new(out.shape().to_vec(), g)?;
                    let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    let results = op.backward(&gt, &ins, out)?;
                    if results.len() != inputs.len() {
                        return Err(TensorError::InvalidArgument {
                            op: "custom",
                            msg: format!(
                                "{} returned {} gradients for {} inputs",
                                op.name(),
                                results.len(),
                                inputs.len()
                            ),
                        });
                    }
                    for (v, r) in inputs.iter().zip(results) {
                        if let (Some(r), true) = (r, wants(*v)) {
                            if r.shape() != self.value(*v).shape() {
                                return Err(TensorError::ShapeMismatch {
                                    op: "custom backward",
                                    lhs: self.value(*v).shape().to_vec(),
                                    rhs: r.shape().to_vec(),
                                });
                            }
                            accumulate(&mut grads, *v, r.into_data());
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}
