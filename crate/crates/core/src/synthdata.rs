//! Deterministic synthetic scenes, camera rigs and multi-view samples
//! rendered with the splat rasterizer, plus on-disk sample bundles.

use crate::geometry::{
    look_at, normalize_to_canonical, unproject, Intrinsics, Mat3, PoseRecord, PoseSE3, Vec3,
};
use crate::gsplat::{
    self, io, ply, render, sh, Camera, GaussianPrimitive, GaussianScene, RenderSettings,
};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Render(#[from] gsplat::GsplatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Five textured walls of a box open towards the cameras.
    BoxRoom,
    /// A back plane and two partial foreground planes.
    TexturedPlanes,
    /// Isotropic splats scattered in a ball.
    RandomCloud,
}

impl std::str::FromStr for Layout {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box-room" => Ok(Layout::BoxRoom),
            "textured-planes" => Ok(Layout::TexturedPlanes),
            "random-cloud" => Ok(Layout::RandomCloud),
            other => Err(SynthError::Spec(format!(
                "unknown layout `{other}` (expected box-room, textured-planes or random-cloud)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorScheme {
    /// Per-surface base color modulated by a checkerboard and a smooth ramp.
    Checker,
    /// Base color and ramp only.
    Smooth,
    /// Independent random color per splat.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    /// Splat budget. Surface layouts round each surface to a full grid, so
    /// the actual count can differ slightly.
    pub n_gaussians: usize,
    pub layout: Layout,
    /// Upper bound on the distance between any two centers.
    pub diameter: f64,
    pub colors: ColorScheme,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_gaussians: 6000,
            layout: Layout::BoxRoom,
            diameter: 1.0,
            colors: ColorScheme::Checker,
        }
    }
}

/// A rectangle `origin + a·u + b·v`, `a, b ∈ [0, 1]`, facing `u × v`.
struct Surface {
    origin: Vec3,
    u: Vec3,
    v: Vec3,
}

impl Surface {
    fn area(&self) -> f64 {
        self.u.norm() * self.v.norm()
    }
}

const BASE_COLORS: [[f64; 3]; 6] = [
    [0.85, 0.35, 0.25],
    [0.25, 0.6, 0.85],
    [0.35, 0.8, 0.35],
    [0.9, 0.8, 0.3],
    [0.7, 0.4, 0.8],
    [0.3, 0.75, 0.7],
];

const CHECKER: f64 = 0.08;

fn surface_color(
    scheme: ColorScheme,
    surface: usize,
    a: f64,
    b: f64,
    rng: &mut ChaCha8Rng,
) -> [f64; 3] {
    if scheme == ColorScheme::Random {
        return [
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
        ];
    }
    let base = BASE_COLORS[surface % BASE_COLORS.len()];
    let check = if scheme == ColorScheme::Checker
        && ((a / CHECKER).floor() as i64 + (b / CHECKER).floor() as i64).rem_euclid(2) == 1
    {
        0.45
    } else {
        1.0
    };
    let ramp = 0.12 * (7.0 * a + 4.0 * b + surface as f64).sin();
    let mut c = [0.0; 3];
    for (k, v) in c.iter_mut().enumerate() {
        let hue = 0.06 * (5.0 * a - 3.0 * b + 2.0 * k as f64).cos();
        *v = (base[k] * check + ramp + hue).clamp(0.03, 0.97);
    }
    c
}

fn room_surfaces() -> Vec<Surface> {
    let (a, b, c) = (0.35, 0.25, 0.25);
    let s = |o: [f64; 3], u: [f64; 3], v: [f64; 3]| Surface {
        origin: Vec3::from(o),
        u: Vec3::from(u),
        v: Vec3::from(v),
    };
    vec![
        // back wall, facing -z
        s([a, -b, c], [-2.0 * a, 0.0, 0.0], [0.0, 2.0 * b, 0.0]),
        // left and right walls
        s([-a, -b, c], [0.0, 0.0, -2.0 * c], [0.0, 2.0 * b, 0.0]),
        s([a, -b, -c], [0.0, 0.0, 2.0 * c], [0.0, 2.0 * b, 0.0]),
        // ceiling (y = -b) and floor (y = +b)
        s([-a, -b, -c], [2.0 * a, 0.0, 0.0], [0.0, 0.0, 2.0 * c]),
        s([-a, b, c], [2.0 * a, 0.0, 0.0], [0.0, 0.0, -2.0 * c]),
    ]
}

fn plane_surfaces(rng: &mut ChaCha8Rng) -> Vec<Surface> {
    let s = |o: [f64; 3], u: [f64; 3], v: [f64; 3]| Surface {
        origin: Vec3::from(o),
        u: Vec3::from(u),
        v: Vec3::from(v),
    };
    let x0 = rng.gen_range(-0.3..-0.1);
    let x1 = rng.gen_range(0.0..0.15);
    vec![
        s([0.35, -0.25, 0.3], [-0.7, 0.0, 0.0], [0.0, 0.5, 0.0]),
        s([x0 + 0.2, -0.15, 0.1], [-0.2, 0.0, 0.0], [0.0, 0.3, 0.0]),
        s([x1 + 0.2, -0.1, -0.05], [-0.2, 0.0, 0.0], [0.0, 0.2, 0.0]),
    ]
}

fn quat_from_frame(u: &Vec3, v: &Vec3) -> [f64; 4] {
    let (x, y) = (u.normalize(), v.normalize());
    let m = Mat3::from_columns(&[x, y, x.cross(&y)]);
    let q = nalgebra::UnitQuaternion::from_matrix(&m);
    [q.w, q.i, q.j, q.k]
}

fn fill_surfaces(
    scene: &mut GaussianScene,
    surfaces: &[Surface],
    budget: usize,
    colors: ColorScheme,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let total: f64 = surfaces.iter().map(Surface::area).sum();
    // A single splat covers the first surface.
    let counts: Vec<usize> = if budget == 1 {
        let mut c = vec![0; surfaces.len()];
        c[0] = 1;
        c
    } else {
        surfaces
            .iter()
            .map(|s| ((budget as f64) * s.area() / total).round() as usize)
            .collect()
    };
    for (si, (s, &count)) in surfaces.iter().zip(&counts).enumerate() {
        if count == 0 {
            continue;
        }
        let (lu, lv) = (s.u.norm(), s.v.norm());
        let nu = ((count as f64 * lu / lv).sqrt().round() as usize).max(1);
        let nv = ((count as f64 / nu as f64).round() as usize).max(1);
        let (su, sv) = (lu / nu as f64, lv / nv as f64);
        let quat = quat_from_frame(&s.u, &s.v);
        let spread = if count == 1 { 0.5 } else { 0.6 };
        for j in 0..nv {
            for i in 0..nu {
                let (a, b) = ((i as f64 + 0.5) / nu as f64, (j as f64 + 0.5) / nv as f64);
                let p = s.origin + s.u * a + s.v * b;
                let rgb = surface_color(colors, si, a * lu, b * lv, rng);
                let mut coeffs = vec![0.0; 3 * sh::num_coeffs(scene.sh_degree)];
                for c in 0..3 {
                    coeffs[c] = sh::rgb_to_dc(rgb[c]);
                }
                scene.push(GaussianPrimitive {
                    mu: [p.x, p.y, p.z],
                    quat,
                    scale: [spread * su, spread * sv, 0.002],
                    opacity: 0.98,
                    sh: coeffs,
                })?;
            }
        }
    }
    Ok(())
}

/// Generate a scene centered at the origin whose centers are at most
/// `spec.diameter` apart.
pub fn gen_scene(spec: &SceneSpec) -> Result<GaussianScene> {
    if spec.n_gaussians == 0 {
        return Err(SynthError::Spec("n_gaussians must be at least 1".into()));
    }
    if !(spec.diameter.is_finite() && spec.diameter > 0.0) {
        return Err(SynthError::Spec("diameter must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scene = GaussianScene::new(0);
    match spec.layout {
        Layout::BoxRoom => fill_surfaces(
            &mut scene,
            &room_surfaces(),
            spec.n_gaussians,
            spec.colors,
            &mut rng,
        )?,
        Layout::TexturedPlanes => {
            let planes = plane_surfaces(&mut rng);
            fill_surfaces(&mut scene, &planes, spec.n_gaussians, spec.colors, &mut rng)?
        }
        Layout::RandomCloud => {
            for _ in 0..spec.n_gaussians {
                let p = loop {
                    let p = Vec3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    );
                    if p.norm() <= 1.0 {
                        break p * 0.3;
                    }
                };
                let rgb = surface_color(ColorScheme::Random, 0, 0.0, 0.0, &mut rng);
                let s = rng.gen_range(0.02..0.05);
                scene.push(GaussianPrimitive {
                    mu: [p.x, p.y, p.z],
                    quat: [1.0, 0.0, 0.0, 0.0],
                    scale: [s; 3],
                    opacity: rng.gen_range(0.6..0.95),
                    sh: rgb.iter().map(|c| sh::rgb_to_dc(*c)).collect(),
                })?;
            }
        }
    }
    // Center the bounding box and shrink it to the requested diagonal, which
    // bounds every pairwise distance.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for m in &scene.mu {
        for a in 0..3 {
            lo[a] = lo[a].min(m[a]);
            hi[a] = hi[a].max(m[a]);
        }
    }
    let mid: Vec<f64> = (0..3).map(|a| 0.5 * (lo[a] + hi[a])).collect();
    let diag = (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt();
    let f = if diag > spec.diameter {
        spec.diameter / diag
    } else {
        1.0
    };
    for m in &mut scene.mu {
        for a in 0..3 {
            m[a] = (m[a] - mid[a]) * f;
        }
    }
    if f < 1.0 {
        for s in &mut scene.scale {
            s.iter_mut().for_each(|v| *v *= f);
        }
    }
    Ok(scene)
}

pub fn max_pairwise_distance(points: &[[f64; 3]]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            let d = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
            best = best.max(d);
        }
    }
    best.sqrt()
}

/// Cameras on a horizontal arc around the scene center, looking at it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraRig {
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub radius: f64,
    /// Uniform jitter of each camera's arc angle, degrees.
    pub jitter_deg: f64,
    /// Uniform jitter of camera height and look-at point, scene units.
    pub offset_jitter: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fov_deg: 60.0,
            radius: 0.6,
            jitter_deg: 1.0,
            offset_jitter: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSample {
    pub n_context: usize,
    pub n_target: usize,
    /// `[H, W, 3]` per view, contexts first.
    pub images: Vec<Tensor>,
    pub intrinsics: Vec<Intrinsics>,
    /// Canonical ground truth; view 0 is exactly the identity. For
    /// evaluation and debugging only.
    pub gt_poses: Vec<PoseSE3>,
    /// Ground-truth scene in the canonical frame.
    pub scene: GaussianScene,
    pub separation_deg: f64,
    pub seed: u64,
}

impl MultiViewSample {
    pub fn n_views(&self) -> usize {
        self.n_context + self.n_target
    }

    pub fn width(&self) -> usize {
        self.intrinsics[0].width
    }

    pub fn height(&self) -> usize {
        self.intrinsics[0].height
    }

    pub fn context_images(&self) -> &[Tensor] {
        &self.images[..self.n_context]
    }

    pub fn target_images(&self) -> &[Tensor] {
        &self.images[self.n_context..]
    }

    /// Keep only the listed context views (in order) and every target.
    pub fn with_contexts(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() || keep.iter().any(|&i| i >= self.n_context) {
            return Err(SynthError::Spec(format!("invalid context subset {keep:?}")));
        }
        let order: Vec<usize> = keep
            .iter()
            .copied()
            .chain(self.n_context..self.n_views())
            .collect();
        let poses: Vec<PoseSE3> = order.iter().map(|&i| self.gt_poses[i]).collect();
        // Re-express everything relative to the new first view.
        let inv = self.gt_poses[keep[0]].inverse();
        Ok(Self {
            n_context: keep.len(),
            n_target: self.n_target,
            images: order.iter().map(|&i| self.images[i].clone()).collect(),
            intrinsics: order.iter().map(|&i| self.intrinsics[i]).collect(),
            gt_poses: normalize_to_canonical(&poses),
            scene: if keep[0] == 0 {
                self.scene.clone()
            } else {
                self.scene.transformed(&inv)?
            },
            separation_deg: self.separation_deg,
            seed: self.seed,
        })
    }
}

/// Render `n_context + n_target` views of `scene`. Context views sit
/// `separation_deg` apart on the rig's arc; targets fall between the outer
/// contexts. Poses and scene are re-expressed in the first view's frame.
pub fn gen_sample(
    scene: &GaussianScene,
    rig: &CameraRig,
    n_context: usize,
    n_target: usize,
    separation_deg: f64,
    seed: u64,
    settings: &RenderSettings,
) -> Result<MultiViewSample> {
    if n_context == 0 {
        return Err(SynthError::Spec("n_context must be at least 1".into()));
    }
    if !(separation_deg > 0.0 && separation_deg <= 90.0) {
        return Err(SynthError::Spec(format!(
            "separation {separation_deg} outside (0, 90]"
        )));
    }
    let k = Intrinsics::from_fov(rig.width, rig.height, rig.fov_deg)
        .map_err(|e| SynthError::Spec(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = separation_deg * (n_context.saturating_sub(1)) as f64;
    let mut angles: Vec<f64> = (0..n_context)
        .map(|i| -span / 2.0 + separation_deg * i as f64)
        .collect();
    let (lo, hi) = if n_context >= 2 {
        (angles[0], angles[n_context - 1])
    } else {
        (-separation_deg, separation_deg)
    };
    for _ in 0..n_target {
        angles.push(rng.gen_range(lo..=hi));
    }

    let mut world = Vec::with_capacity(angles.len());
    for base in angles {
        let pose = (0..100)
            .find_map(|_| {
                let j = |rng: &mut ChaCha8Rng, r: f64| {
                    if r > 0.0 {
                        rng.gen_range(-r..=r)
                    } else {
                        0.0
                    }
                };
                let theta = (base + j(&mut rng, rig.jitter_deg)).to_radians();
                let eye = Vec3::new(
                    rig.radius * theta.sin(),
                    j(&mut rng, rig.offset_jitter),
                    -rig.radius * theta.cos(),
                );
                let target = Vec3::new(
                    j(&mut rng, rig.offset_jitter),
                    j(&mut rng, rig.offset_jitter),
                    j(&mut rng, rig.offset_jitter),
                );
                look_at(&eye, &target, &Vec3::y())
            })
            .ok_or_else(|| SynthError::Spec("could not place a camera".into()))?;
        world.push(pose);
    }
    let canon_scene = scene.transformed(&world[0].inverse())?;
    let gt_poses = normalize_to_canonical(&world);
    let mut images = Vec::with_capacity(gt_poses.len());
    for pose in &gt_poses {
        let out = render(&canon_scene, &Camera { k, pose: *pose }, settings)?.0;
        images.push(Tensor::new([rig.height, rig.width, 3], out.color).expect("render size"));
    }
    Ok(MultiViewSample {
        n_context,
        n_target,
        images,
        intrinsics: vec![k; gt_poses.len()],
        gt_poses,
        scene: canon_scene,
        separation_deg,
        seed,
    })
}

/// Per-pixel canonical points of view `v` at the depth of the front-most
/// blended splat. Pixels no splat reaches are marked invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleGrid {
    /// `H·W` row-major points; invalid pixels hold zeros.
    pub points: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl OracleGrid {
    pub fn coverage(&self) -> f64 {
        self.valid.iter().filter(|v| **v).count() as f64 / self.valid.len().max(1) as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [self.points.len(), 3],
            self.points.iter().flatten().copied().collect(),
        )
        .expect("consistent shape")
    }
}

pub fn unproject_oracle(
    sample: &MultiViewSample,
    v: usize,
    settings: &RenderSettings,
) -> Result<OracleGrid> {
    if v >= sample.n_views() {
        return Err(SynthError::Spec(format!(
            "view {v} of {}",
            sample.n_views()
        )));
    }
    let k = sample.intrinsics[v];
    let pose = sample.gt_poses[v];
    let out = render(&sample.scene, &Camera { k, pose }, settings)?.0;
    let mut points = Vec::with_capacity(k.width * k.height);
    let mut valid = Vec::with_capacity(k.width * k.height);
    for y in 0..k.height {
        for x in 0..k.width {
            match out.first[y * k.width + x] {
                Some(i) => {
                    let depth = pose.to_camera(&Vec3::from(sample.scene.mu[i as usize])).z;
                    let p = unproject(&k, &pose, &Intrinsics::pixel_center(x, y), depth);
                    points.push([p.x, p.y, p.z]);
                    valid.push(true);
                }
                None => {
                    points.push([0.0; 3]);
                    valid.push(false);
                }
            }
        }
    }
    Ok(OracleGrid { points, valid })
}

/// Step-indexed maximum camera separation, linearly interpolated between
/// `(step, degrees)` knots and held constant outside them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSchedule {
    pub knots: Vec<(u64, f64)>,
    /// Lower bound of sampled separations (capped by the current maximum).
    pub min_deg: f64,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            knots: vec![(0, 10.0), (5000, 25.0)],
            min_deg: 5.0,
        }
    }
}

impl CurriculumSchedule {
    pub fn constant(deg: f64) -> Self {
        Self {
            knots: vec![(0, deg)],
            min_deg: deg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.is_empty() {
            return Err(SynthError::Spec(
                "curriculum needs at least one knot".into(),
            ));
        }
        for w in self.knots.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 < w[0].1 {
                return Err(SynthError::Spec(
                    "curriculum knots must have increasing steps and non-decreasing angles".into(),
                ));
            }
        }
        if self.knots.iter().any(|k| !(k.1 > 0.0 && k.1 <= 90.0)) || !(self.min_deg > 0.0) {
            return Err(SynthError::Spec(
                "curriculum angles must lie in (0, 90]".into(),
            ));
        }
        Ok(())
    }

    pub fn max_at(&self, step: u64) -> f64 {
        let first = self.knots[0];
        if step <= first.0 {
            return first.1;
        }
        for w in self.knots.windows(2) {
            let ((s0, a0), (s1, a1)) = (w[0], w[1]);
            if step <= s1 {
                return a0 + (a1 - a0) * (step - s0) as f64 / (s1 - s0) as f64;
            }
        }
        self.knots[self.knots.len() - 1].1
    }

    pub fn sample<R: Rng + ?Sized>(&self, step: u64, rng: &mut R) -> f64 {
        let hi = self.max_at(step);
        let lo = self.min_deg.min(hi);
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            hi
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleCameras {
    pub n_context: usize,
    pub n_target: usize,
    pub seed: u64,
    pub separation_deg: f64,
    pub intrinsics: Vec<Intrinsics>,
    pub poses: Vec<PoseRecord>,
}

fn image_name(sample: &MultiViewSample, v: usize) -> String {
    if v < sample.n_context {
        format!("context_{v}.png")
    } else {
        format!("target_{}.png", v - sample.n_context)
    }
}

/// Write images as PNG, cameras as JSON and the ground-truth scene as PLY.
pub fn write_bundle(dir: &Path, sample: &MultiViewSample) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (w, h) = (sample.width(), sample.height());
    for (v, img) in sample.images.iter().enumerate() {
        io::write_png(&dir.join(image_name(sample, v)), img.data(), w, h)?;
    }
    let cams = BundleCameras {
        n_context: sample.n_context,
        n_target: sample.n_target,
        seed: sample.seed,
        separation_deg: sample.separation_deg,
        intrinsics: sample.intrinsics.clone(),
        poses: sample.gt_poses.iter().map(PoseSE3::to_record).collect(),
    };
    std::fs::write(
        dir.join("cameras.json"),
        serde_json::to_string_pretty(&cams)?,
    )?;
    std::fs::write(dir.join("scene.ply"), ply::export_ply(&sample.scene)?)?;
    Ok(())
}

/// Read a bundle back. Images come back quantized to 8 bits and the scene
/// at single precision.
pub fn read_bundle(dir: &Path) -> Result<MultiViewSample> {
    let cams: BundleCameras = serde_json::from_slice(&std::fs::read(dir.join("cameras.json"))?)?;
    let v = cams.n_context + cams.n_target;
    if cams.n_context == 0 || cams.intrinsics.len() != v || cams.poses.len() != v {
        return Err(SynthError::Bundle(
            "camera list does not match view counts".into(),
        ));
    }
    let mut gt_poses = Vec::with_capacity(v);
    for p in &cams.poses {
        gt_poses.push(p.to_pose().map_err(|e| SynthError::Bundle(e.to_string()))?);
    }
    for k in &cams.intrinsics {
        k.validate()
            .map_err(|e| SynthError::Bundle(e.to_string()))?;
    }
    let mut sample = MultiViewSample {
        n_context: cams.n_context,
        n_target: cams.n_target,
        images: Vec::with_capacity(v),
        intrinsics: cams.intrinsics,
        gt_poses,
        scene: ply::import_ply(&std::fs::read(dir.join("scene.ply"))?)?,
        separation_deg: cams.separation_deg,
        seed: cams.seed,
    };
    for i in 0..v {
        let (data, w, h) = io::read_png(&dir.join(image_name(&sample, i)))?;
        let k = &sample.intrinsics[i];
        if (w, h) != (k.width, k.height) {
            return Err(SynthError::Bundle(format!("image {i} is {w}x{h}")));
        }
        sample
            .images
            .push(Tensor::new([h, w, 3], data).expect("png size"));
    }
    Ok(sample)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub scene: SceneSpec,
    pub rig: CameraRig,
    pub n_context: usize,
    pub n_target: usize,
    pub splits: std::collections::BTreeMap<String, Vec<String>>,
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&std::fs::read(
        dir.join("manifest.json"),
    )?)?)
}
