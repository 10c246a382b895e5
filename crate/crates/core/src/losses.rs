//! Training objective: rendering loss at estimated target poses, pixel
//! reprojection loss on context views, and an optional supervised pose loss.

use crate::geometry::{Intrinsics, PoseSE3, Z_NEAR};
use crate::gsplat::{render_on_tape, RenderSettings};
use crate::netcore::ForwardOutput;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Perceptual {
    #[default]
    None,
    /// L1 distance between image gradients at 1×, 2× and 4× downsampling.
    MultiscaleGradient,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gamma: f64,
    pub w_reproj: f64,
    pub w_pose: f64,
    pub perceptual: Perceptual,
    pub reproj_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.05,
            w_reproj: 0.001,
            w_pose: 0.0,
            perceptual: Perceptual::None,
            reproj_reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("gamma", self.gamma),
            ("w_reproj", self.w_reproj),
            ("w_pose", self.w_pose),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(LossError::Config(format!(
                    "{name} must be a finite non-negative number"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetLoss {
    pub view: usize,
    pub l2: f64,
    pub perceptual: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub render_l2: f64,
    pub render_perceptual: f64,
    pub reproj: f64,
    pub pose_rot: f64,
    pub pose_trans: f64,
    pub per_target: Vec<TargetLoss>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.render_l2,
            self.render_perceptual,
            self.reproj,
            self.pose_rot,
            self.pose_trans,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Differentiable loss terms alongside their values.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    pub report: LossReport,
}

fn check_same(tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(LossError::Input(format!(
            "image shapes differ: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Mean-squared error over pixels and channels.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    check_same(tape, a, b)?;
    let d = tape.sub(a, b)?;
    let d2 = tape.mul(d, d)?;
    Ok(tape.mean_all(d2)?)
}

fn average_pool(tape: &mut Tape, x: Var, s: usize) -> Result<Var> {
    if s == 1 {
        return Ok(x);
    }
    let sh = tape.shape(x).to_vec();
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    let y = tape.reshape(x, &[h / s, s, w / s, s, c])?;
    let y = tape.mean_axis(y, 3, false)?;
    Ok(tape.mean_axis(y, 1, false)?)
}

fn finite_differences(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let sh = tape.shape(x).to_vec();
    let (h, w) = (sh[0], sh[1]);
    let right = tape.slice(x, 1, 1, w)?;
    let left = tape.slice(x, 1, 0, w - 1)?;
    let dx = tape.sub(right, left)?;
    let down = tape.slice(x, 0, 1, h)?;
    let up = tape.slice(x, 0, 0, h - 1)?;
    let dy = tape.sub(down, up)?;
    Ok((dx, dy))
}

/// Mean L1 distance between image gradients, averaged over the scales
/// 1, 2 and 4 that divide the image and leave at least 2×2 pixels.
pub fn multiscale_gradient_l1(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    check_same(tape, a, b)?;
    let sh = tape.shape(a).to_vec();
    if sh.len() != 3 {
        return Err(LossError::Input(format!("expected [H, W, C], got {sh:?}")));
    }
    let mut terms = Vec::new();
    for s in [1, 2, 4] {
        if !sh[0].is_multiple_of(s) || !sh[1].is_multiple_of(s) || sh[0] / s < 2 || sh[1] / s < 2 {
            continue;
        }
        let pa = average_pool(tape, a, s)?;
        let pb = average_pool(tape, b, s)?;
        let (ax, ay) = finite_differences(tape, pa)?;
        let (bx, by) = finite_differences(tape, pb)?;
        for (p, q) in [(ax, bx), (ay, by)] {
            let d = tape.sub(p, q)?;
            let d = tape.abs(d)?;
            terms.push(tape.mean_all(d)?);
        }
    }
    if terms.is_empty() {
        return Err(LossError::Input(
            "image too small for the gradient metric".into(),
        ));
    }
    let n = terms.len() as f64;
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t)?;
    }
    Ok(tape.scale(sum, 2.0 / n)?)
}

/// `(mse, perceptual)`; the perceptual term is `None` when disabled.
pub fn rendering_loss(
    tape: &mut Tape,
    rendered: Var,
    gt: Var,
    cfg: &LossConfig,
) -> Result<(Var, Option<Var>)> {
    let l2 = mse(tape, rendered, gt)?;
    let perc = match cfg.perceptual {
        Perceptual::None => None,
        Perceptual::MultiscaleGradient => Some(multiscale_gradient_l1(tape, rendered, gt)?),
    };
    Ok((l2, perc))
}

/// Penalty for a center behind the camera: the image diagonal in pixels.
pub fn reprojection_cap(k: &Intrinsics) -> f64 {
    (k.width as f64).hypot(k.height as f64)
}

/// Per-pixel L1 reprojection error `|du| + |dv|` of one view's centers
/// `mu [H·W, 3]` under pose `(rot [3,3], trans [3])`, as a `[H·W, 1]`
/// variable. Centers at depth ≤ `Z_NEAR` cost [`reprojection_cap`].
pub fn reprojection_errors(
    tape: &mut Tape,
    mu: Var,
    rot: Var,
    trans: Var,
    k: &Intrinsics,
) -> Result<Var> {
    let n = k.width * k.height;
    if tape.shape(mu) != [n, 3] {
        return Err(LossError::Input(format!(
            "centers have shape {:?}, expected [{n}, 3]",
            tape.shape(mu)
        )));
    }
    let d = tape.sub(mu, trans)?;
    let cam = tape.matmul(d, rot)?;
    let x = tape.slice(cam, 1, 0, 1)?;
    let y = tape.slice(cam, 1, 1, 2)?;
    let z = tape.slice(cam, 1, 2, 3)?;
    let front: Vec<f64> = tape
        .value(z)
        .data()
        .iter()
        .map(|&z| if z > Z_NEAR { 1.0 } else { 0.0 })
        .collect();
    let back: Vec<f64> = front.iter().map(|m| 1.0 - m).collect();
    let front = tape.constant(Tensor::new([n, 1], front)?);
    let back_t = Tensor::new([n, 1], back)?;
    let cap = tape.constant(Tensor::from_fn([n, 1], |i| {
        back_t.data()[i] * reprojection_cap(k)
    }));
    let back = tape.constant(back_t);

    let zs = tape.mul(z, front)?;
    let zs = tape.add(zs, back)?;
    let mut pix_u = Vec::with_capacity(n);
    let mut pix_v = Vec::with_capacity(n);
    for py in 0..k.height {
        for px in 0..k.width {
            let p = Intrinsics::pixel_center(px, py);
            pix_u.push(p.x);
            pix_v.push(p.y);
        }
    }
    let pu = tape.constant(Tensor::new([n, 1], pix_u)?);
    let pv = tape.constant(Tensor::new([n, 1], pix_v)?);
    let u = tape.div(x, zs)?;
    let u = tape.scale(u, k.fx)?;
    let u = tape.add_scalar(u, k.cx)?;
    let v = tape.div(y, zs)?;
    let v = tape.scale(v, k.fy)?;
    let v = tape.add_scalar(v, k.cy)?;
    let du = tape.sub(u, pu)?;
    let du = tape.abs(du)?;
    let dv = tape.sub(v, pv)?;
    let dv = tape.abs(dv)?;
    let e = tape.add(du, dv)?;
    let e = tape.mul(e, front)?;
    Ok(tape.add(e, cap)?)
}

/// Reprojection loss for one view, reduced over the pixels marked valid
/// (all when `valid` is `None`).
pub fn reprojection_loss(
    tape: &mut Tape,
    mu: Var,
    rot: Var,
    trans: Var,
    k: &Intrinsics,
    valid: Option<&[bool]>,
    reduction: Reduction,
) -> Result<Var> {
    let e = reprojection_errors(tape, mu, rot, trans, k)?;
    let n = k.width * k.height;
    let (e, count) = match valid {
        Some(mask) => {
            if mask.len() != n {
                return Err(LossError::Input(format!(
                    "{} mask entries for {n} pixels",
                    mask.len()
                )));
            }
            let m = tape.constant(Tensor::from_fn([n, 1], |i| f64::from(u8::from(mask[i]))));
            (tape.mul(e, m)?, mask.iter().filter(|v| **v).count())
        }
        None => (e, n),
    };
    let sum = tape.sum_all(e)?;
    Ok(match reduction {
        Reduction::Sum => sum,
        Reduction::Mean => tape.scale(sum, 1.0 / count.max(1) as f64)?,
    })
}

/// Clamp bound for the `acos` argument of the geodesic distance.
pub const ACOS_CLAMP: f64 = 1.0 - 1e-7;

/// `(geodesic angle in radians, squared translation distance)`. The `acos`
/// argument is clamped to `±ACOS_CLAMP`, so identical rotations give
/// `acos(ACOS_CLAMP) ≈ 4.5e-4` rather than 0.
pub fn pose_loss(tape: &mut Tape, rot: Var, trans: Var, gt: &PoseSE3) -> Result<(Var, Var)> {
    let g: Vec<f64> = (0..9).map(|i| gt.rot[(i / 3, i % 3)]).collect();
    let g = tape.constant(Tensor::new([3, 3], g)?);
    let prod = tape.mul(rot, g)?;
    let tr = tape.sum_all(prod)?;
    let c = tape.add_scalar(tr, -1.0)?;
    let c = tape.scale(c, 0.5)?;
    let c = tape.clamp(c, -ACOS_CLAMP, ACOS_CLAMP)?;
    let angle = tape.acos(c)?;
    let t = tape.constant(Tensor::vector(gt.trans.iter().copied().collect()));
    let d = tape.sub(trans, t)?;
    let d2 = tape.mul(d, d)?;
    let dist = tape.sum_all(d2)?;
    Ok((angle, dist))
}

/// Inputs of the objective beyond the forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    /// Target images `[H, W, 3]`, in view order after the contexts.
    pub targets: &'a [Tensor],
    /// One per view, contexts first.
    pub intrinsics: &'a [Intrinsics],
    /// Canonical ground-truth poses per view; only read when `w_pose > 0`.
    pub gt_poses: Option<&'a [PoseSE3]>,
    /// Optional per-context-view validity of the reprojection term.
    pub reproj_valid: Option<&'a [Vec<bool>]>,
    pub render: &'a RenderSettings,
}

/// Render every target at its estimated pose and combine the rendering,
/// reprojection and (optional) pose terms. Context views are never rendered.
pub fn total_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    inputs: &LossInputs,
    cfg: &LossConfig,
) -> Result<Objective> {
    cfg.validate()?;
    let n = out.n_context;
    let m = out.n_views - n;
    if m == 0 {
        return Err(LossError::Input("no target views".into()));
    }
    if inputs.targets.len() != m || inputs.intrinsics.len() != out.n_views {
        return Err(LossError::Input(format!(
            "{} targets and {} intrinsics for {n}+{m} views",
            inputs.targets.len(),
            inputs.intrinsics.len()
        )));
    }
    let mut report = LossReport::default();
    let mut terms: Vec<Var> = Vec::new();

    for (j, target) in inputs.targets.iter().enumerate() {
        let v = n + j;
        let rot = out.view_rot(tape, v).map_err(net_err)?;
        let trans = out.view_trans(tape, v).map_err(net_err)?;
        let img = render_on_tape(
            tape,
            out.sh_degree,
            out.mu,
            out.quat,
            out.scale,
            out.opacity,
            out.sh,
            rot,
            trans,
            &inputs.intrinsics[v],
            inputs.render,
        )?;
        let gt = tape.constant(target.clone());
        let (l2, perc) = rendering_loss(tape, img, gt, cfg)?;
        let mut entry = TargetLoss {
            view: v,
            l2: tape.value(l2).item()?,
            perceptual: 0.0,
        };
        terms.push(l2);
        if let Some(p) = perc {
            entry.perceptual = tape.value(p).item()?;
            terms.push(tape.scale(p, cfg.gamma)?);
        }
        report.render_l2 += entry.l2;
        report.render_perceptual += entry.perceptual;
        report.per_target.push(entry);
    }

    if cfg.w_reproj > 0.0 {
        let mut sum: Option<Var> = None;
        for v in 0..n {
            let mu = out.view_mu(tape, v).map_err(net_err)?;
            let rot = out.view_rot(tape, v).map_err(net_err)?;
            let trans = out.view_trans(tape, v).map_err(net_err)?;
            let valid = inputs.reproj_valid.map(|vs| vs[v].as_slice());
            let l = reprojection_loss(
                tape,
                mu,
                rot,
                trans,
                &inputs.intrinsics[v],
                valid,
                cfg.reproj_reduction,
            )?;
            sum = Some(match sum {
                Some(s) => tape.add(s, l)?,
                None => l,
            });
        }
        let mut r = sum.expect("at least one context view");
        if cfg.reproj_reduction == Reduction::Mean {
            r = tape.scale(r, 1.0 / n as f64)?;
        }
        report.reproj = tape.value(r).item()?;
        terms.push(tape.scale(r, cfg.w_reproj)?);
    }

    if cfg.w_pose > 0.0 {
        let gt = inputs.gt_poses.ok_or_else(|| {
            LossError::Input("pose loss enabled without ground-truth poses".into())
        })?;
        if gt.len() != out.n_views {
            return Err(LossError::Input(format!("{} ground-truth poses", gt.len())));
        }
        for (v, p) in gt.iter().enumerate().skip(1) {
            let rot = out.view_rot(tape, v).map_err(net_err)?;
            let trans = out.view_trans(tape, v).map_err(net_err)?;
            let (a, d) = pose_loss(tape, rot, trans, p)?;
            report.pose_rot += tape.value(a).item()?;
            report.pose_trans += tape.value(d).item()?;
            let s = tape.add(a, d)?;
            terms.push(tape.scale(s, cfg.w_pose)?);
        }
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    report.total = tape.value(total).item()?;
    Ok(Objective { total, report })
}

fn net_err(e: crate::netcore::NetError) -> LossError {
    match e {
        crate::netcore::NetError::Tensor(t) => LossError::Tensor(t),
        other => LossError::Input(other.to_string()),
    }
}
