use super::{quat_to_mat, sh, GaussianScene, GsplatError, Result};
use crate::geometry::{skew, Intrinsics, Mat3, PoseSE3, Vec3};
use nalgebra::{Matrix2, Matrix2x3};
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    /// Isotropic screen-space blur added to every 2D covariance, in px².
    pub blur: f64,
    pub near: f64,
    pub tile: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Compositing stops before transmittance would drop below this.
    pub t_min: f64,
    /// Squared Mahalanobis radius beyond which a splat is ignored (3σ).
    pub cutoff: f64,
    pub background: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            blur: 0.3,
            near: 0.01,
            tile: 16,
            alpha_min: 1.0 / 255.0,
            alpha_max: 0.999,
            t_min: 1e-4,
            cutoff: 9.0,
            background: [0.0; 3],
        }
    }
}

/// Intrinsics plus the view→canonical pose of the rendered view. The
/// rotation may be any 3×3 matrix; gradients are taken entrywise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub k: Intrinsics,
    pub pose: PoseSE3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major `H·W·3`.
    pub color: Vec<f64>,
    /// Accumulated opacity per pixel.
    pub alpha: Vec<f64>,
    /// Number of Gaussians blended into each pixel.
    pub contributors: Vec<u32>,
    /// Front-most Gaussian blended into each pixel.
    pub first: Vec<Option<u32>>,
}

impl RenderOutput {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.color[o], self.color[o + 1], self.color[o + 2]]
    }
}

/// Per-Gaussian screen-space quantities.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Splat {
    pub mean: [f64; 2],
    /// Inverse 2D covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    /// Inclusive pixel bounds `(x0, y0, x1, y1)`; `None` when culled.
    pub rect: Option<[i64; 4]>,
}

/// Intermediates saved by [`render`] for [`render_backward`].
#[derive(Debug)]
pub struct RenderState {
    n: usize,
    width: usize,
    height: usize,
    camera: Camera,
    settings: RenderSettings,
    splats: Vec<Splat>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    final_t: Vec<f64>,
    last: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub mu: Vec<[f64; 3]>,
    pub quat: Vec<[f64; 4]>,
    pub scale: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub sh: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseGrads {
    /// Entrywise gradient with respect to the pose rotation matrix.
    pub rot: Mat3,
    pub trans: Vec3,
    /// Gradient with respect to `(rho, phi)` of the right perturbation
    /// `P · Exp(xi)` at `xi = 0`.
    pub tangent: [f64; 6],
}

impl PoseGrads {
    pub fn from_matrix(pose: &PoseSE3, rot: Mat3, trans: Vec3) -> Self {
        let rho = pose.rot.transpose() * trans;
        let mut tangent = [rho.x, rho.y, rho.z, 0.0, 0.0, 0.0];
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = 1.0;
            tangent[3 + k] = rot.dot(&(pose.rot * skew(&e)));
        }
        Self {
            rot,
            trans,
            tangent,
        }
    }
}

fn preprocess_one(scene: &GaussianScene, i: usize, cam: &Camera, s: &RenderSettings) -> Splat {
    let k = &cam.k;
    let w = cam.pose.rot.transpose();
    let delta = Vec3::from(scene.mu[i]) - cam.pose.trans;
    let t = w * delta;
    let culled = Splat {
        mean: [0.0; 2],
        conic: [0.0; 3],
        color: [0.0; 3],
        opacity: 0.0,
        depth: t.z,
        rect: None,
    };
    if !(t.z > s.near) {
        return culled;
    }
    let q = scene.quat[i];
    let qn = nalgebra::Vector4::from(q).norm();
    if !(qn > 0.0) {
        return culled;
    }
    let rq = quat_to_mat([q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn]);
    let sc = scene.scale[i];
    let m = rq * Mat3::from_diagonal(&Vec3::new(sc[0], sc[1], sc[2]));
    let sigma = m * m.transpose();
    let cov_cam = w * sigma * w.transpose();
    let (x, y, z) = (t.x, t.y, t.z);
    let j = Matrix2x3::new(
        k.fx / z,
        0.0,
        -k.fx * x / (z * z),
        0.0,
        k.fy / z,
        -k.fy * y / (z * z),
    );
    let cov2 = j * cov_cam * j.transpose() + Matrix2::identity() * s.blur;
    let (p, qq, r) = (cov2[(0, 0)], cov2[(0, 1)], cov2[(1, 1)]);
    let det = p * r - qq * qq;
    if !(det > 0.0) {
        return culled;
    }
    let conic = [r / det, -qq / det, p / det];
    let mean = [k.fx * x / z + k.cx, k.fy * y / z + k.cy];
    let mid = 0.5 * (p + r);
    let lambda = mid + (0.25 * (p - r) * (p - r) + qq * qq).sqrt();
    let radius = (s.cutoff * lambda).sqrt() + 1.0;
    let rect = [
        (mean[0] - radius).floor() as i64,
        (mean[1] - radius).floor() as i64,
        (mean[0] + radius).ceil() as i64,
        (mean[1] + radius).ceil() as i64,
    ];
    let onscreen =
        rect[2] >= 0 && rect[3] >= 0 && rect[0] < k.width as i64 && rect[1] < k.height as i64;

    let dn = delta.norm();
    let dir = [delta.x / dn, delta.y / dn, delta.z / dn];
    let d = scene.sh_dim();
    let raw = sh::eval(scene.sh_degree, &scene.sh[i * d..(i + 1) * d], dir);
    let color = [
        (raw[0] + 0.5).max(0.0),
        (raw[1] + 0.5).max(0.0),
        (raw[2] + 0.5).max(0.0),
    ];
    Splat {
        mean,
        conic,
        color,
        opacity: scene.opacity[i],
        depth: z,
        rect: onscreen.then_some(rect),
    }
}

fn preprocess(scene: &GaussianScene, cam: &Camera, s: &RenderSettings) -> Vec<Splat> {
    (0..scene.len())
        .into_par_iter()
        .map(|i| preprocess_one(scene, i, cam, s))
        .collect()
}

/// Visible splat indices sorted front to back, ties by index.
fn depth_order(splats: &[Splat]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..splats.len() as u32)
        .filter(|&i| splats[i as usize].rect.is_some())
        .collect();
    order.sort_by(|&a, &b| {
        splats[a as usize]
            .depth
            .total_cmp(&splats[b as usize].depth)
            .then(a.cmp(&b))
    });
    order
}

/// Opacity of a splat at a pixel center, before the upper clamp; `None` when
/// the pixel is outside the cutoff or below `alpha_min`.
#[inline]
fn splat_alpha(sp: &Splat, px: f64, py: f64, s: &RenderSettings) -> Option<(f64, f64, f64, f64)> {
    let dx = px - sp.mean[0];
    let dy = py - sp.mean[1];
    let [a, b, c] = sp.conic;
    let maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if !(maha <= s.cutoff) {
        return None;
    }
    let g = (-0.5 * maha).exp();
    let raw = sp.opacity * g;
    if raw < s.alpha_min {
        return None;
    }
    Some((raw, g, dx, dy))
}

fn check_inputs(scene: &GaussianScene, cam: &Camera) -> Result<()> {
    scene.validate()?;
    cam.k
        .validate()
        .map_err(|e| GsplatError::Shape(e.to_string()))?;
    let p = &cam.pose;
    if !(p.rot.iter().all(|v| v.is_finite()) && p.trans.iter().all(|v| v.is_finite())) {
        return Err(GsplatError::Shape("non-finite camera pose".into()));
    }
    Ok(())
}

/// Tile-parallel forward pass. Returns the image and the state needed by
/// [`render_backward`].
pub fn render(
    scene: &GaussianScene,
    cam: &Camera,
    s: &RenderSettings,
) -> Result<(RenderOutput, RenderState)> {
    check_inputs(scene, cam)?;
    let (w, h) = (cam.k.width, cam.k.height);
    let splats = preprocess(scene, cam, s);
    let order = depth_order(&splats);
    let ts = s.tile.max(1);
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &gi in &order {
        let r = splats[gi as usize].rect.expect("visible");
        let tx0 = (r[0].max(0) as usize) / ts;
        let ty0 = (r[1].max(0) as usize) / ts;
        let tx1 = ((r[2].min(w as i64 - 1)) as usize) / ts;
        let ty1 = ((r[3].min(h as i64 - 1)) as usize) / ts;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(gi);
            }
        }
    }

    struct TileOut {
        color: Vec<f64>,
        final_t: Vec<f64>,
        last: Vec<u32>,
        count: Vec<u32>,
        first: Vec<Option<u32>>,
    }
    let outs: Vec<TileOut> = tiles
        .par_iter()
        .enumerate()
        .map(|(ti, list)| {
            let (tx, ty) = (ti % tiles_x, ti / tiles_x);
            let (x0, y0) = (tx * ts, ty * ts);
            let (x1, y1) = ((x0 + ts).min(w), (y0 + ts).min(h));
            let np = (x1 - x0) * (y1 - y0);
            let mut o = TileOut {
                color: Vec::with_capacity(np * 3),
                final_t: Vec::with_capacity(np),
                last: Vec::with_capacity(np),
                count: Vec::with_capacity(np),
                first: Vec::with_capacity(np),
            };
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = 1.0;
                    let mut c = [0.0; 3];
                    let mut n = 0u32;
                    let mut first = None;
                    let mut last = list.len() as u32;
                    for (li, &gi) in list.iter().enumerate() {
                        let sp = &splats[gi as usize];
                        let Some((raw, ..)) = splat_alpha(sp, px, py, s) else {
                            continue;
                        };
                        let a = raw.min(s.alpha_max);
                        let next_t = t * (1.0 - a);
                        if next_t < s.t_min {
                            last = li as u32;
                            break;
                        }
                        for ch in 0..3 {
                            c[ch] += sp.color[ch] * a * t;
                        }
                        t = next_t;
                        n += 1;
                        first.get_or_insert(gi);
                    }
                    for ch in 0..3 {
                        o.color.push(c[ch] + t * s.background[ch]);
                    }
                    o.final_t.push(t);
                    o.last.push(last);
                    o.count.push(n);
                    o.first.push(first);
                }
            }
            o
        })
        .collect();

    let mut color = vec![0.0; w * h * 3];
    let mut alpha = vec![0.0; w * h];
    let mut final_t = vec![1.0; w * h];
    let mut last = vec![0u32; w * h];
    let mut contributors = vec![0u32; w * h];
    let mut first = vec![None; w * h];
    for (ti, o) in outs.into_iter().enumerate() {
        let (tx, ty) = (ti % tiles_x, ti / tiles_x);
        let (x0, y0) = (tx * ts, ty * ts);
        let (x1, y1) = ((x0 + ts).min(w), (y0 + ts).min(h));
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * w + x;
                color[p * 3..p * 3 + 3].copy_from_slice(&o.color[k * 3..k * 3 + 3]);
                final_t[p] = o.final_t[k];
                alpha[p] = 1.0 - o.final_t[k];
                last[p] = o.last[k];
                contributors[p] = o.count[k];
                first[p] = o.first[k];
                k += 1;
            }
        }
    }
    let out = RenderOutput {
        width: w,
        height: h,
        color,
        alpha,
        contributors,
        first,
    };
    let state = RenderState {
        n: scene.len(),
        width: w,
        height: h,
        camera: *cam,
        settings: *s,
        splats,
        tiles,
        tiles_x,
        final_t,
        last,
    };
    Ok((out, state))
}

/// Brute-force compositor: every pixel walks the globally depth-sorted list.
pub fn render_naive(
    scene: &GaussianScene,
    cam: &Camera,
    s: &RenderSettings,
) -> Result<RenderOutput> {
    check_inputs(scene, cam)?;
    let (w, h) = (cam.k.width, cam.k.height);
    let splats = preprocess(scene, cam, s);
    let order = depth_order(&splats);
    let mut out = RenderOutput {
        width: w,
        height: h,
        color: vec![0.0; w * h * 3],
        alpha: vec![0.0; w * h],
        contributors: vec![0; w * h],
        first: vec![None; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut transmit = 1.0;
            let mut acc = [0.0; 3];
            for &gi in &order {
                let sp = &splats[gi as usize];
                let dx = px - sp.mean[0];
                let dy = py - sp.mean[1];
                let [a, b, c] = sp.conic;
                let maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
                if maha > s.cutoff {
                    continue;
                }
                let raw = sp.opacity * (-0.5 * maha).exp();
                if raw < s.alpha_min {
                    continue;
                }
                let alpha = raw.min(s.alpha_max);
                if transmit * (1.0 - alpha) < s.t_min {
                    break;
                }
                for ch in 0..3 {
                    acc[ch] += sp.color[ch] * alpha * transmit;
                }
                transmit *= 1.0 - alpha;
                let p = y * w + x;
                out.contributors[p] += 1;
                out.first[p].get_or_insert(gi);
            }
            let p = y * w + x;
            for ch in 0..3 {
                out.color[p * 3 + ch] = acc[ch] + transmit * s.background[ch];
            }
            out.alpha[p] = 1.0 - transmit;
        }
    }
    Ok(out)
}

/// Screen-space gradient accumulators for one splat.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

/// Gradients of `Σ grad_out · color` with respect to every Gaussian field
/// and the camera pose.
pub fn render_backward(
    scene: &GaussianScene,
    state: &RenderState,
    grad_out: &[f64],
) -> Result<(GaussianGrads, PoseGrads)> {
    let (w, h) = (state.width, state.height);
    if state.n != scene.len() || state.splats.len() != scene.len() || grad_out.len() != w * h * 3 {
        return Err(GsplatError::StateMismatch);
    }
    let s = &state.settings;
    let ts = s.tile.max(1);
    let splats = &state.splats;

    let per_tile: Vec<Vec<SplatGrad>> = state
        .tiles
        .par_iter()
        .enumerate()
        .map(|(ti, list)| {
            let mut acc = vec![SplatGrad::default(); list.len()];
            let (tx, ty) = (ti % state.tiles_x, ti / state.tiles_x);
            let (x0, y0) = (tx * ts, ty * ts);
            let (x1, y1) = ((x0 + ts).min(w), (y0 + ts).min(h));
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * w + x;
                    let g = [grad_out[p * 3], grad_out[p * 3 + 1], grad_out[p * 3 + 2]];
                    if g == [0.0; 3] {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = state.final_t[p];
                    let mut after = [
                        s.background[0] * t,
                        s.background[1] * t,
                        s.background[2] * t,
                    ];
                    let last = (state.last[p] as usize).min(list.len());
                    for li in (0..last).rev() {
                        let sp = &splats[list[li] as usize];
                        let Some((raw, gauss, dx, dy)) = splat_alpha(sp, px, py, s) else {
                            continue;
                        };
                        let a = raw.min(s.alpha_max);
                        let t_i = t / (1.0 - a);
                        let sg = &mut acc[li];
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            sg.color[ch] += g[ch] * a * t_i;
                            d_alpha += g[ch] * (sp.color[ch] * t_i - after[ch] / (1.0 - a));
                            after[ch] += sp.color[ch] * a * t_i;
                        }
                        t = t_i;
                        if raw > s.alpha_max {
                            continue;
                        }
                        sg.opacity += d_alpha * gauss;
                        let d_maha = -0.5 * gauss * sp.opacity * d_alpha;
                        let [ca, cb, cc] = sp.conic;
                        sg.conic[0] += d_maha * dx * dx;
                        sg.conic[1] += d_maha * 2.0 * dx * dy;
                        sg.conic[2] += d_maha * dy * dy;
                        sg.mean[0] -= d_maha * 2.0 * (ca * dx + cb * dy);
                        sg.mean[1] -= d_maha * 2.0 * (cb * dx + cc * dy);
                    }
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![SplatGrad::default(); scene.len()];
    for (list, acc) in state.tiles.iter().zip(&per_tile) {
        for (&gi, sg) in list.iter().zip(acc) {
            let d = &mut screen[gi as usize];
            for k in 0..2 {
                d.mean[k] += sg.mean[k];
            }
            for k in 0..3 {
                d.conic[k] += sg.conic[k];
                d.color[k] += sg.color[k];
            }
            d.opacity += sg.opacity;
        }
    }

    let cam = &state.camera;
    let per_gauss: Vec<GaussBack> = (0..scene.len())
        .into_par_iter()
        .map(|i| backward_one(scene, i, cam, &splats[i], &screen[i]))
        .collect();

    let d = scene.sh_dim();
    let mut grads = GaussianGrads {
        mu: vec![[0.0; 3]; scene.len()],
        quat: vec![[0.0; 4]; scene.len()],
        scale: vec![[0.0; 3]; scene.len()],
        opacity: vec![0.0; scene.len()],
        sh: vec![0.0; scene.len() * d],
    };
    let mut g_w = Mat3::zeros();
    let mut g_trans = Vec3::zeros();
    for (i, b) in per_gauss.into_iter().enumerate() {
        grads.mu[i] = [b.mu.x, b.mu.y, b.mu.z];
        grads.quat[i] = b.quat;
        grads.scale[i] = b.scale;
        grads.opacity[i] = b.opacity;
        grads.sh[i * d..(i + 1) * d].copy_from_slice(&b.sh);
        g_w += b.w;
        g_trans -= b.mu;
    }
    let pose = PoseGrads::from_matrix(&cam.pose, g_w.transpose(), g_trans);
    Ok((grads, pose))
}

struct GaussBack {
    /// Also the negated contribution to the camera translation.
    mu: Vec3,
    quat: [f64; 4],
    scale: [f64; 3],
    opacity: f64,
    sh: Vec<f64>,
    /// Contribution to the gradient of `W = Rᵀ`.
    w: Mat3,
}

fn backward_one(
    scene: &GaussianScene,
    i: usize,
    cam: &Camera,
    sp: &Splat,
    sg: &SplatGrad,
) -> GaussBack {
    let d = scene.sh_dim();
    let mut out = GaussBack {
        mu: Vec3::zeros(),
        quat: [0.0; 4],
        scale: [0.0; 3],
        opacity: sg.opacity,
        sh: vec![0.0; d],
        w: Mat3::zeros(),
    };
    if sp.rect.is_none() {
        return out;
    }
    let k = &cam.k;
    let w = cam.pose.rot.transpose();
    let delta = Vec3::from(scene.mu[i]) - cam.pose.trans;
    let t = w * delta;
    let (x, y, z) = (t.x, t.y, t.z);

    // color
    let dn = delta.norm();
    let dir = [delta.x / dn, delta.y / dn, delta.z / dn];
    let basis = sh::basis_with_grad(scene.sh_degree, dir);
    let coeffs = &scene.sh[i * d..(i + 1) * d];
    let mut g_dir = Vec3::zeros();
    for ch in 0..3 {
        let raw: f64 = basis
            .iter()
            .enumerate()
            .map(|(kk, b)| coeffs[kk * 3 + ch] * b.v)
            .sum();
        if raw + 0.5 < 0.0 {
            continue;
        }
        let gc = sg.color[ch];
        for (kk, b) in basis.iter().enumerate() {
            out.sh[kk * 3 + ch] = gc * b.v;
            for ax in 0..3 {
                g_dir[ax] += gc * coeffs[kk * 3 + ch] * b.d[ax];
            }
        }
    }
    let dirv = Vec3::from(dir);
    let mut g_delta = (g_dir - dirv * dirv.dot(&g_dir)) / dn;

    // conic -> 2D covariance
    let [ca, cb, cc] = sp.conic;
    let a_inv = Matrix2::new(ca, cb, cb, cc);
    let g_conic = Matrix2::new(
        sg.conic[0],
        0.5 * sg.conic[1],
        0.5 * sg.conic[1],
        sg.conic[2],
    );
    let g_cov2 = -(a_inv * g_conic * a_inv);

    let q = scene.quat[i];
    let qv = nalgebra::Vector4::from(q);
    let qnorm = qv.norm();
    let qn = qv / qnorm;
    let rq = quat_to_mat([qn[0], qn[1], qn[2], qn[3]]);
    let sc = scene.scale[i];
    let m = rq * Mat3::from_diagonal(&Vec3::new(sc[0], sc[1], sc[2]));
    let sigma = m * m.transpose();
    let cov_cam = w * sigma * w.transpose();
    let j = Matrix2x3::new(
        k.fx / z,
        0.0,
        -k.fx * x / (z * z),
        0.0,
        k.fy / z,
        -k.fy * y / (z * z),
    );
    let g_cov_cam = j.transpose() * g_cov2 * j;
    let g_j = 2.0 * g_cov2 * j * cov_cam;
    let g_sigma = w.transpose() * g_cov_cam * w;
    out.w += 2.0 * g_cov_cam * w * sigma;
    let g_m = 2.0 * g_sigma * m;
    let mut g_rq = Mat3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            out.scale[c] += g_m[(r, c)] * rq[(r, c)];
            g_rq[(r, c)] = g_m[(r, c)] * sc[c];
        }
    }
    let g_qn = quat_mat_vjp([qn[0], qn[1], qn[2], qn[3]], &g_rq);
    let g_qn = nalgebra::Vector4::from(g_qn);
    let g_q = (g_qn - qn * qn.dot(&g_qn)) / qnorm;
    out.quat = [g_q[0], g_q[1], g_q[2], g_q[3]];

    // camera-frame center
    let z2 = z * z;
    let z3 = z2 * z;
    let mut g_t = Vec3::new(
        sg.mean[0] * k.fx / z,
        sg.mean[1] * k.fy / z,
        -sg.mean[0] * k.fx * x / z2 - sg.mean[1] * k.fy * y / z2,
    );
    g_t.x += g_j[(0, 2)] * (-k.fx / z2);
    g_t.y += g_j[(1, 2)] * (-k.fy / z2);
    g_t.z += g_j[(0, 0)] * (-k.fx / z2)
        + g_j[(0, 2)] * (2.0 * k.fx * x / z3)
        + g_j[(1, 1)] * (-k.fy / z2)
        + g_j[(1, 2)] * (2.0 * k.fy * y / z3);
    g_delta += w.transpose() * g_t;
    out.w += g_t * delta.transpose();
    out.mu = g_delta;
    out
}

/// Vector-Jacobian product of [`quat_to_mat`] at a unit quaternion.
fn quat_mat_vjp(q: [f64; 4], g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = q;
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}
