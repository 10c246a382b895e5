//! Differentiable counterparts of the pose codec and canonicalization.

use super::Result;
use crate::geometry::HOMOGENEOUS_EPS;
use crate::tensor::{Tape, Tensor, Var};

fn column(tape: &mut Tape, x: Var, i: usize) -> Result<Var> {
    Ok(tape.slice(x, 1, i, i + 1)?)
}

fn normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let n = tape.sum_axis(sq, 1, true)?;
    let n = tape.sqrt(n)?;
    Ok(tape.div(x, n)?)
}

/// Codes `[V, 10]` to rotations `[V, 3, 3]` and translations `[V, 3]`, the
/// same map as `geometry::decode_pose10`.
pub fn decode_pose10_on_tape(tape: &mut Tape, codes: Var) -> Result<(Var, Var)> {
    let v = tape.shape(codes)[0];
    let a1 = tape.slice(codes, 1, 0, 3)?;
    let a2 = tape.slice(codes, 1, 3, 6)?;
    let b1 = normalize_rows(tape, a1)?;
    let d = tape.mul(b1, a2)?;
    let d = tape.sum_axis(d, 1, true)?;
    let proj = tape.mul(d, b1)?;
    let r = tape.sub(a2, proj)?;
    let b2 = normalize_rows(tape, r)?;

    let mut b3 = Vec::with_capacity(3);
    for (i, j) in [(1, 2), (2, 0), (0, 1)] {
        let x1 = column(tape, b1, i)?;
        let y2 = column(tape, b2, j)?;
        let x2 = column(tape, b1, j)?;
        let y1 = column(tape, b2, i)?;
        let p = tape.mul(x1, y2)?;
        let q = tape.mul(x2, y1)?;
        b3.push(tape.sub(p, q)?);
    }
    let b3 = tape.concat(&b3, 1)?;

    let mut cols = Vec::with_capacity(3);
    for b in [b1, b2, b3] {
        cols.push(tape.reshape(b, &[v, 3, 1])?);
    }
    let rot = tape.concat(&cols, 2)?;

    let t = tape.slice(codes, 1, 6, 9)?;
    let w = tape.slice(codes, 1, 9, 10)?;
    let w = tape.softplus(w)?;
    let w = tape.add_scalar(w, HOMOGENEOUS_EPS)?;
    let trans = tape.div(t, w)?;
    Ok((rot, trans))
}

/// Express every pose relative to view 0: `R'_v = R_0ᵀ R_v`,
/// `T'_v = R_0ᵀ (T_v - T_0)`. View 0 becomes the exact identity.
pub fn canonicalize_on_tape(tape: &mut Tape, rot: Var, trans: Var) -> Result<(Var, Var)> {
    let v = tape.shape(rot)[0];
    let eye = tape.constant(Tensor::eye(3).reshape([1, 3, 3])?);
    let zero = tape.constant(Tensor::zeros([1, 3]));
    if v == 1 {
        return Ok((eye, zero));
    }
    let r0 = tape.slice(rot, 0, 0, 1)?;
    let r0 = tape.reshape(r0, &[3, 3])?;
    let t0 = tape.slice(trans, 0, 0, 1)?;

    let rest = tape.slice(rot, 0, 1, v)?;
    let rt = tape.transpose(rest)?;
    let rel = tape.matmul(rt, r0)?;
    let rel = tape.transpose(rel)?;
    let rot = tape.concat(&[eye, rel], 0)?;

    let rest = tape.slice(trans, 0, 1, v)?;
    let d = tape.sub(rest, t0)?;
    let rel = tape.matmul(d, r0)?;
    let trans = tape.concat(&[zero, rel], 0)?;
    Ok((rot, trans))
}
