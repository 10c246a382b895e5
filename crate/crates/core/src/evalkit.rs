//! Evaluation: image metrics, pose metrics, evaluation-time pose alignment,
//! PnP + RANSAC from predicted centers, and the leakage audit.

use crate::geometry::{
    auc_at_thresholds, pose_error, se3_exp, GeometryError, Intrinsics, Mat3, PoseError, PoseSE3,
    Vec3,
};
use crate::gsplat::{render, render_backward, Camera, GaussianScene, GsplatError, RenderSettings};
use crate::netcore::{Mode, Model, NetError};
use crate::synthdata::MultiViewSample;
use crate::tensor::{Tape, Tensor};
use nalgebra::{DMatrix, Matrix3x4, Matrix6, Vector6};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("image {0}x{1} is smaller than the {2}x{2} SSIM window")]
    TooSmall(usize, usize, usize),
    #[error("no consensus: {0}")]
    NoConsensus(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Render(#[from] GsplatError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

pub const PSNR_CAP: f64 = 99.0;
pub const AUC_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != 3 || a.shape()[2] != 3 {
        return Err(EvalError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio of `[H, W, 3]` images in `[0, 1]`, capped.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over the valid region of one channel.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW)
                .map(|i| k[i] * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// valid window positions and channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EvalError::TooSmall(w, h, SSIM_WINDOW));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let x: Vec<f64> = a.data().iter().skip(ch).step_by(3).copied().collect();
        let y: Vec<f64> = b.data().iter().skip(ch).step_by(3).copied().collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let sxx = filter_valid(&prod(&x, &x), w, h, &k);
        let syy = filter_valid(&prod(&y, &y), w, h, &k);
        let sxy = filter_valid(&prod(&x, &y), w, h, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn render_tensor(
    scene: &GaussianScene,
    k: &Intrinsics,
    pose: &PoseSE3,
    s: &RenderSettings,
) -> Result<Tensor> {
    let (out, _) = render(scene, &Camera { k: *k, pose: *pose }, s)?;
    Ok(Tensor::new(vec![k.height, k.width, 3], out.color).expect("render size"))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpaConfig {
    pub iters: usize,
    pub lr: f64,
}

impl Default for EpaConfig {
    fn default() -> Self {
        Self {
            iters: 200,
            lr: 4e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpaResult {
    pub pose: PoseSE3,
    pub initial_l2: f64,
    pub best_l2: f64,
    /// Iterate index of the returned pose; 0 is the initial pose.
    pub best_iter: usize,
    /// Set when a non-finite loss stopped the optimization early.
    pub non_finite: bool,
}

/// Align a target pose to `gt` (`[H, W, 3]`) by Adam on the se(3) tangent of
/// the L2 render error, Gaussians frozen. Returns the best iterate seen.
pub fn epa(
    scene: &GaussianScene,
    k: &Intrinsics,
    init: &PoseSE3,
    gt: &Tensor,
    settings: &RenderSettings,
    cfg: &EpaConfig,
) -> Result<EpaResult> {
    if gt.shape() != [k.height, k.width, 3] {
        return Err(EvalError::Shape(
            gt.shape().to_vec(),
            vec![k.height, k.width, 3],
        ));
    }
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let n = gt.numel() as f64;
    let mut pose = *init;
    let mut m = [0.0; 6];
    let mut v = [0.0; 6];
    let mut res = EpaResult {
        pose: *init,
        initial_l2: f64::NAN,
        best_l2: f64::INFINITY,
        best_iter: 0,
        non_finite: false,
    };
    for it in 0..=cfg.iters {
        let cam = Camera { k: *k, pose };
        let (out, state) = render(scene, &cam, settings)?;
        let loss = mse(&out.color, gt.data());
        if it == 0 {
            res.initial_l2 = loss;
        }
        if !loss.is_finite() {
            log::warn!("epa: non-finite loss at iteration {it}; returning best iterate");
            res.non_finite = true;
            break;
        }
        if loss < res.best_l2 {
            res.best_l2 = loss;
            res.pose = pose;
            res.best_iter = it;
        }
        if it == cfg.iters {
            break;
        }
        let grad_out: Vec<f64> = out
            .color
            .iter()
            .zip(gt.data())
            .map(|(r, g)| 2.0 * (r - g) / n)
            .collect();
        let (_, pg) = render_backward(scene, &state, &grad_out)?;
        let t = (it + 1) as i32;
        let mut step = [0.0; 6];
        for j in 0..6 {
            let g = pg.tangent[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mh = m[j] / (1.0 - b1.powi(t));
            let vh = v[j] / (1.0 - b2.powi(t));
            step[j] = -cfg.lr * mh / (vh.sqrt() + eps);
        }
        pose = pose.retract(&step);
    }
    Ok(res)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub threshold_px: f64,
    pub confidence: f64,
    pub max_iters: usize,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: 2.0,
            confidence: 0.999,
            max_iters: 2000,
            min_inliers: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnpResult {
    /// View→canonical pose.
    pub pose: PoseSE3,
    pub inliers: Vec<usize>,
    pub iterations: usize,
}

/// World→camera transform `x = rc X + tc`.
#[derive(Clone, Copy, Debug)]
struct Extrinsic {
    rc: Mat3,
    tc: Vec3,
}

impl Extrinsic {
    fn to_pose(self) -> PoseSE3 {
        let r = self.rc.transpose();
        PoseSE3::new(r, -(r * self.tc))
    }

    fn project(&self, k: &Intrinsics, x: &Vec3) -> Option<[f64; 2]> {
        let c = self.rc * x + self.tc;
        (c.z > 1e-9).then(|| [k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy])
    }

    fn residual(&self, k: &Intrinsics, x: &Vec3, p: &[f64; 2]) -> f64 {
        match self.project(k, x) {
            Some(q) => ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt(),
            None => f64::INFINITY,
        }
    }
}

/// Six-or-more-point DLT in normalized image coordinates. `None` when the
/// configuration is degenerate (e.g. coplanar points).
fn dlt(k: &Intrinsics, pts: &[Vec3], px: &[[f64; 2]]) -> Option<Extrinsic> {
    let n = pts.len();
    let c = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / n as f64;
    let s = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n as f64 / 3f64.sqrt();
    if !(s > 1e-12) {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (p, q)) in pts.iter().zip(px).enumerate() {
        let x = (p - c) / s;
        let xh = [x.x, x.y, x.z, 1.0];
        let u = (q[0] - k.cx) / k.fx;
        let v = (q[1] - k.cy) / k.fy;
        for j in 0..4 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 8 + j)] = -u * xh[j];
            a[(2 * i + 1, 4 + j)] = xh[j];
            a[(2 * i + 1, 8 + j)] = -v * xh[j];
        }
    }
    // Square up so the SVD always yields a full 12×12 right basis.
    let ata = a.transpose() * &a;
    let svd = ata.svd(false, true);
    let vt = svd.v_t?;
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let (s0, s1, smax) = (
        svd.singular_values[order[0]],
        svd.singular_values[order[1]],
        svd.singular_values[order[11]],
    );
    if !(s1 > 1e-12 * smax) || !s0.is_finite() {
        return None;
    }
    let h = vt.row(order[0]);
    let mut m = Matrix3x4::from_fn(|r, col| h[r * 4 + col]);
    // Undo the point normalization: X' = (X - c) / s.
    let left = m.fixed_view::<3, 3>(0, 0) / s;
    let right = m.column(3) - left * c;
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&left);
    m.set_column(3, &right);
    let mut lhs: Mat3 = m.fixed_view::<3, 3>(0, 0).into_owned();
    let mut t: Vec3 = m.column(3).into_owned();
    if lhs.determinant() < 0.0 {
        lhs = -lhs;
        t = -t;
    }
    let svd = lhs.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let scale = svd.singular_values.sum() / 3.0;
    if !(scale > 0.0) {
        return None;
    }
    let rc = u * vt;
    if rc.determinant() < 0.0 {
        return None;
    }
    Some(Extrinsic { rc, tc: t / scale })
}

/// Levenberg–Marquardt on the left-perturbed extrinsic minimizing squared
/// pixel reprojection error over `idx`.
fn refine(
    k: &Intrinsics,
    pts: &[Vec3],
    px: &[[f64; 2]],
    idx: &[usize],
    init: Extrinsic,
) -> Extrinsic {
    let cost = |e: &Extrinsic| -> f64 {
        idx.iter()
            .map(|&i| match e.project(k, &pts[i]) {
                Some(q) => (q[0] - px[i][0]).powi(2) + (q[1] - px[i][1]).powi(2),
                None => 1e12,
            })
            .sum()
    };
    let mut e = init;
    let mut c = cost(&e);
    let mut lambda = 1e-3;
    for _ in 0..100 {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for &i in idx {
            let x = e.rc * pts[i] + e.tc;
            if x.z <= 1e-9 {
                continue;
            }
            let (iz, iz2) = (1.0 / x.z, 1.0 / (x.z * x.z));
            let du = [k.fx * iz, 0.0, -k.fx * x.x * iz2];
            let dv = [0.0, k.fy * iz, -k.fy * x.y * iz2];
            // d x / d(rho, phi) = [I, -[x]×].
            let dx: [[f64; 6]; 3] = [
                [1.0, 0.0, 0.0, 0.0, x.z, -x.y],
                [0.0, 1.0, 0.0, -x.z, 0.0, x.x],
                [0.0, 0.0, 1.0, x.y, -x.x, 0.0],
            ];
            let r = [
                k.fx * x.x * iz + k.cx - px[i][0],
                k.fy * x.y * iz + k.cy - px[i][1],
            ];
            for (row, d) in [du, dv].iter().enumerate() {
                let j = Vector6::from_fn(|c, _| (0..3).map(|a| d[a] * dx[a][c]).sum());
                jtj += j * j.transpose();
                jtr += j * r[row];
            }
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = jtj;
            for d in 0..6 {
                damped[(d, d)] += lambda * (1.0 + jtj[(d, d)]);
            }
            let Some(delta) = damped.lu().solve(&(-jtr)) else {
                break;
            };
            let step = se3_exp(&std::array::from_fn(|i| delta[i]));
            let cand = Extrinsic {
                rc: step.rot * e.rc,
                tc: step.rot * e.tc + step.trans,
            };
            let cc = cost(&cand);
            if cc < c {
                let small = delta.norm() < 1e-14;
                e = cand;
                c = cc;
                lambda = (lambda * 0.3).max(1e-12);
                improved = !small;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    e
}

/// Robust camera pose from 3D–2D correspondences: 6-point DLT hypotheses
/// inside RANSAC, then Levenberg–Marquardt on the inliers. `points` are in
/// the canonical frame; the returned pose maps this view to it.
pub fn pnp_ransac_correspondences(
    points: &[[f64; 3]],
    pixels: &[[f64; 2]],
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> Result<PnpResult> {
    if points.len() != pixels.len() {
        return Err(EvalError::Input(format!(
            "{} points for {} pixels",
            points.len(),
            pixels.len()
        )));
    }
    let keep: Vec<usize> = (0..points.len())
        .filter(|&i| points[i].iter().chain(&pixels[i]).all(|v| v.is_finite()))
        .collect();
    let need = cfg.min_inliers.max(6);
    if keep.len() < need {
        return Err(EvalError::NoConsensus(format!(
            "{} valid correspondences",
            keep.len()
        )));
    }
    let pts: Vec<Vec3> = points.iter().map(|p| Vec3::from(*p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inliers_of = |e: &Extrinsic| -> Vec<usize> {
        keep.iter()
            .copied()
            .filter(|&i| e.residual(k, &pts[i], &pixels[i]) < cfg.threshold_px)
            .collect()
    };
    let mut best: Option<(Extrinsic, Vec<usize>)> = None;
    let mut budget = cfg.max_iters;
    let mut it = 0;
    while it < budget {
        it += 1;
        let pick: Vec<usize> = sample_indices(&mut rng, keep.len(), 6)
            .into_iter()
            .map(|j| keep[j])
            .collect();
        let sp: Vec<Vec3> = pick.iter().map(|&i| pts[i]).collect();
        let sx: Vec<[f64; 2]> = pick.iter().map(|&i| pixels[i]).collect();
        let Some(e) = dlt(k, &sp, &sx) else {
            continue;
        };
        let inl = inliers_of(&e);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            let w = inl.len() as f64 / keep.len() as f64;
            if w >= 1.0 {
                budget = it;
            } else if w > 0.0 {
                let n = (1.0 - cfg.confidence).ln() / (1.0 - w.powi(6)).ln();
                budget = budget.min(n.ceil().max(1.0) as usize).max(it);
            }
            best = Some((e, inl));
        }
    }
    let Some((e, inl)) = best else {
        return Err(EvalError::NoConsensus(
            "every minimal sample was degenerate".into(),
        ));
    };
    if inl.len() < need {
        return Err(EvalError::NoConsensus(format!(
            "{} inliers, need {need}",
            inl.len()
        )));
    }
    let mut e = refine(k, &pts, pixels, &inl, e);
    let mut inl2 = inliers_of(&e);
    if inl2.len() >= need && inl2 != inl {
        e = refine(k, &pts, pixels, &inl2, e);
        inl2 = inliers_of(&e);
    }
    if inl2.len() < need {
        return Err(EvalError::NoConsensus(format!(
            "{} inliers after refinement",
            inl2.len()
        )));
    }
    Ok(PnpResult {
        pose: e.to_pose(),
        inliers: inl2,
        iterations: it,
    })
}

/// PnP for a pixel-aligned grid: `mu_grid[y·W + x]` is the canonical center
/// seen at pixel center `(x + 0.5, y + 0.5)`. `valid` masks out pixels.
pub fn pnp_ransac(
    mu_grid: &[[f64; 3]],
    valid: Option<&[bool]>,
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> Result<PnpResult> {
    let (w, h) = (k.width, k.height);
    if mu_grid.len() != w * h || valid.is_some_and(|v| v.len() != w * h) {
        return Err(EvalError::Input(format!(
            "grid of {} for {w}x{h} intrinsics",
            mu_grid.len()
        )));
    }
    let idx: Vec<usize> = (0..w * h).filter(|&i| valid.is_none_or(|v| v[i])).collect();
    let points: Vec<[f64; 3]> = idx.iter().map(|&i| mu_grid[i]).collect();
    let pixels: Vec<[f64; 2]> = idx
        .iter()
        .map(|&i| [(i % w) as f64 + 0.5, (i / w) as f64 + 0.5])
        .collect();
    let mut r = pnp_ransac_correspondences(&points, &pixels, k, cfg)?;
    r.inliers = r.inliers.into_iter().map(|j| idx[j]).collect();
    Ok(r)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseMethod {
    #[default]
    Regression,
    Pnp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub epa: bool,
    pub epa_cfg: EpaConfig,
    /// Method whose target poses are used for rendering. PnP needs Gaussian
    /// centers, which targets don't have, so targets always use regression;
    /// this selects the method reported first in the summary.
    pub pose_method: PoseMethod,
    pub pnp: bool,
    pub ransac: RansacConfig,
    pub render: RenderSettings,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            epa: false,
            epa_cfg: EpaConfig::default(),
            pose_method: PoseMethod::Regression,
            pnp: true,
            ransac: RansacConfig::default(),
            render: RenderSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpaDelta {
    pub psnr: f64,
    pub ssim: f64,
    pub l2_before: f64,
    pub l2_after: f64,
    pub rot_before_deg: f64,
    pub rot_after_deg: f64,
    pub non_finite: bool,
}

/// One record per (sample, target view).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub sample: usize,
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l2: f64,
    pub pose: PoseError,
    pub epa: Option<EpaDelta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextPoseRecord {
    pub sample: usize,
    pub view: usize,
    pub regression: PoseError,
    pub pnp: Option<PoseError>,
    pub pnp_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: PoseMethod,
    pub n: usize,
    pub mean_rot_deg: f64,
    pub mean_trans_deg: f64,
    pub auc: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_epa: Option<f64>,
    pub ssim_epa: Option<f64>,
    pub methods: Vec<MethodSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub targets: Vec<TargetRecord>,
    pub context_poses: Vec<ContextPoseRecord>,
    pub summary: EvalSummary,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn method_summary(method: PoseMethod, errs: &[PoseError]) -> Result<Option<MethodSummary>> {
    if errs.is_empty() {
        return Ok(None);
    }
    let combined: Vec<f64> = errs.iter().map(|e| e.combined_deg).collect();
    let auc = auc_at_thresholds(&combined, &AUC_THRESHOLDS)?;
    Ok(Some(MethodSummary {
        method,
        n: errs.len(),
        mean_rot_deg: mean(errs.iter().map(|e| e.rot_deg)),
        mean_trans_deg: mean(errs.iter().map(|e| e.trans_deg)),
        auc: [auc[0], auc[1], auc[2]],
    }))
}

/// Gaussians and context poses from a context-only forward, target poses
/// from a forward that appends the targets as masked extra views.
pub struct Prediction {
    pub scene: GaussianScene,
    /// Per-pixel canonical centers of every context view, view-major.
    pub mu_grid: Vec<[f64; 3]>,
    /// Optional per-pixel validity of `mu_grid`.
    pub valid: Option<Vec<bool>>,
    /// Context poses, then target poses.
    pub poses: Vec<PoseSE3>,
}

pub fn predict(model: &Model, sample: &MultiViewSample) -> Result<Prediction> {
    let n = sample.n_context;
    let mut tape = Tape::new();
    let bind = model.params.bind_frozen(&mut tape);
    let ctx: Vec<_> = sample.images[..n]
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let out = model.forward(
        &mut tape,
        &bind,
        &ctx,
        &sample.intrinsics[..n],
        n,
        Mode::Infer,
    )?;
    let scene = out.scene(&tape);
    let mut poses = out.poses(&tape);
    if sample.n_target > 0 {
        let mut tape = Tape::new();
        let bind = model.params.bind_frozen(&mut tape);
        let all: Vec<_> = sample
            .images
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let out = model.forward(&mut tape, &bind, &all, &sample.intrinsics, n, Mode::Train)?;
        poses.extend_from_slice(&out.poses(&tape)[n..]);
    }
    Ok(Prediction {
        mu_grid: scene.mu.clone(),
        valid: None,
        scene,
        poses,
    })
}

pub fn evaluate(
    model: &Model,
    samples: &[MultiViewSample],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let preds = samples
        .iter()
        .map(|s| predict(model, s))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(samples, &preds, opts)
}

/// Metrics for given predictions, one per sample.
pub fn evaluate_predictions(
    samples: &[MultiViewSample],
    preds: &[Prediction],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if samples.len() != preds.len() {
        return Err(EvalError::Input(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let mut targets = Vec::new();
    let mut context_poses = Vec::new();
    for (si, (sample, pred)) in samples.iter().zip(preds).enumerate() {
        if pred.poses.len() != sample.n_views()
            || pred.mu_grid.len() != sample.n_context * sample.width() * sample.height()
        {
            return Err(EvalError::Input(format!(
                "prediction {si} does not match its sample"
            )));
        }
        let n = sample.n_context;
        let hw = sample.width() * sample.height();
        for v in 1..n {
            let regression = pose_error(&pred.poses[v], &sample.gt_poses[v]);
            let (pnp, pnp_error) = if opts.pnp {
                let grid = &pred.mu_grid[v * hw..(v + 1) * hw];
                let valid = pred.valid.as_ref().map(|m| &m[v * hw..(v + 1) * hw]);
                match pnp_ransac(grid, valid, &sample.intrinsics[v], &opts.ransac) {
                    Ok(r) => (Some(pose_error(&r.pose, &sample.gt_poses[v])), None),
                    Err(e) => (None, Some(e.to_string())),
                }
            } else {
                (None, None)
            };
            context_poses.push(ContextPoseRecord {
                sample: si,
                view: v,
                regression,
                pnp,
                pnp_error,
            });
        }
        for j in 0..sample.n_target {
            let v = n + j;
            let k = &sample.intrinsics[v];
            let gt = &sample.images[v];
            let img = render_tensor(&pred.scene, k, &pred.poses[v], &opts.render)?;
            let l2 = mse(img.data(), gt.data());
            let pose = pose_error(&pred.poses[v], &sample.gt_poses[v]);
            let epa_delta = if opts.epa {
                let r = epa(
                    &pred.scene,
                    k,
                    &pred.poses[v],
                    gt,
                    &opts.render,
                    &opts.epa_cfg,
                )?;
                let aligned = render_tensor(&pred.scene, k, &r.pose, &opts.render)?;
                Some(EpaDelta {
                    psnr: psnr(&aligned, gt)?,
                    ssim: ssim(&aligned, gt)?,
                    l2_before: r.initial_l2,
                    l2_after: r.best_l2,
                    rot_before_deg: pose.rot_deg,
                    rot_after_deg: pose_error(&r.pose, &sample.gt_poses[v]).rot_deg,
                    non_finite: r.non_finite,
                })
            } else {
                None
            };
            targets.push(TargetRecord {
                sample: si,
                view: v,
                psnr: psnr(&img, gt)?,
                ssim: ssim(&img, gt)?,
                l2,
                pose,
                epa: epa_delta,
            });
        }
    }
    let reg: Vec<PoseError> = context_poses.iter().map(|r| r.regression).collect();
    let pnp: Vec<PoseError> = context_poses.iter().filter_map(|r| r.pnp).collect();
    let mut methods: Vec<MethodSummary> = [
        method_summary(PoseMethod::Regression, &reg)?,
        method_summary(PoseMethod::Pnp, &pnp)?,
    ]
    .into_iter()
    .flatten()
    .collect();
    methods.sort_by_key(|m| m.method != opts.pose_method);
    let epa_on = opts.epa && !targets.is_empty();
    let summary = EvalSummary {
        psnr: mean(targets.iter().map(|t| t.psnr)),
        ssim: mean(targets.iter().map(|t| t.ssim)),
        psnr_epa: epa_on.then(|| {
            mean(
                targets
                    .iter()
                    .filter_map(|t| t.epa.as_ref().map(|e| e.psnr)),
            )
        }),
        ssim_epa: epa_on.then(|| {
            mean(
                targets
                    .iter()
                    .filter_map(|t| t.epa.as_ref().map(|e| e.ssim)),
            )
        }),
        methods,
    };
    Ok(EvalReport {
        targets,
        context_poses,
        summary,
    })
}

/// Header and one row: image metrics, then AUC@{5,10,20} per pose method,
/// then EPA columns when present.
pub fn summary_csv(report: &EvalReport) -> Result<String> {
    let s = &report.summary;
    let mut header = vec!["psnr".to_string(), "ssim".to_string()];
    let mut row = vec![format!("{:.4}", s.psnr), format!("{:.4}", s.ssim)];
    for m in &s.methods {
        let tag = match m.method {
            PoseMethod::Regression => "reg",
            PoseMethod::Pnp => "pnp",
        };
        for (t, a) in AUC_THRESHOLDS.iter().zip(m.auc) {
            header.push(format!("auc{t}_{tag}"));
            row.push(format!("{a:.4}"));
        }
    }
    if let (Some(p), Some(q)) = (s.psnr_epa, s.ssim_epa) {
        header.extend(["psnr_epa".to_string(), "ssim_epa".to_string()]);
        row.extend([format!("{p:.4}"), format!("{q:.4}")]);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    w.write_record(&row)?;
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("ascii csv"))
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(report)?)?;
    std::fs::write(dir.join("eval.csv"), summary_csv(report)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub passed: bool,
    pub max_deviation: f64,
    /// Max absolute deviation per tensor group.
    pub groups: Vec<(String, f64)>,
}

/// Run the train-mode forward twice, once with random target pixels, and
/// compare everything derived from the contexts: Gaussians and context pose
/// codes. Passes iff nothing moved at all.
pub fn leakage_audit(model: &Model, sample: &MultiViewSample, seed: u64) -> Result<LeakageReport> {
    if sample.n_target == 0 {
        return Err(EvalError::Input("leakage audit needs target views".into()));
    }
    let n = sample.n_context;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = sample.images.clone();
    for img in &mut noisy[n..] {
        img.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen::<f64>());
    }
    let run = |images: &[Tensor]| -> Result<Vec<(String, Vec<f64>)>> {
        let mut tape = Tape::new();
        let bind = model.params.bind_frozen(&mut tape);
        let vars: Vec<_> = images.iter().map(|t| tape.constant(t.clone())).collect();
        let out = model.forward(&mut tape, &bind, &vars, &sample.intrinsics, n, Mode::Train)?;
        let mut g: Vec<(String, Vec<f64>)> = out
            .gaussian_vars()
            .iter()
            .map(|(name, v)| (name.to_string(), tape.value(*v).data().to_vec()))
            .collect();
        g.push((
            "pose_code".into(),
            tape.value(out.codes).data()[..n * 10].to_vec(),
        ));
        Ok(g)
    };
    let a = run(&sample.images)?;
    let b = run(&noisy)?;
    let groups: Vec<(String, f64)> = a
        .into_iter()
        .zip(b)
        .map(|((name, x), (_, y))| {
            let d = x
                .iter()
                .zip(&y)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            (name, d)
        })
        .collect();
    let max_deviation = groups.iter().map(|g| g.1).fold(0.0, f64::max);
    Ok(LeakageReport {
        passed: max_deviation == 0.0,
        max_deviation,
        groups,
    })
}

#[cfg(test)]
mod tests;
