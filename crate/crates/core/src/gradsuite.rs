//! Randomized finite-difference checks for every tape op and for each
//! rasterizer input group.

use crate::geometry::{se3_exp, Intrinsics};
use crate::gsplat::{
    render, render_backward, Camera, GaussianPrimitive, GaussianScene, RenderSettings,
};
use crate::tensor::{grad_check, OpAttrs, OpKind, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct GradRow {
    pub group: &'static str,
    pub name: String,
    pub cases: usize,
    /// Max over cases and coordinates of `|a - n| / max(1, |a|, |n|)`.
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    pub cases: usize,
    pub seed: u64,
    pub eps: f64,
    pub tol: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            cases: 20,
            seed: 0,
            eps: 1e-6,
            tol: 1e-4,
        }
    }
}

pub fn run(cfg: &SuiteConfig) -> Vec<GradRow> {
    let mut rows: Vec<GradRow> = OpKind::ALL.iter().map(|&k| op_row(k, cfg)).collect();
    rows.extend(raster_rows(cfg));
    rows
}

pub fn all_passed(rows: &[GradRow]) -> bool {
    rows.iter().all(|r| r.passed)
}

pub fn format_table(rows: &[GradRow]) -> String {
    let mut s = format!(
        "{:<8} {:<16} {:>5} {:>12}  result\n",
        "group", "name", "cases", "max_rel_err"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<8} {:<16} {:>5} {:>12.3e}  {}\n",
            r.group,
            r.name,
            r.cases,
            r.max_rel_err,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}

fn row(group: &'static str, name: String, cases: usize, errs: Vec<f64>, tol: f64) -> GradRow {
    let max = errs.iter().copied().fold(0.0, f64::max);
    let complete = errs.len() == cases && errs.iter().all(|e| e.is_finite());
    GradRow {
        group,
        name,
        cases,
        max_rel_err: if complete { max } else { f64::INFINITY },
        passed: complete && max < tol,
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

/// Values bounded away from zero, either sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.2..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ w ⊙ y` with fixed random weights, so every output entry matters.
fn weighted_sum(t: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = t.constant(w.clone());
    let p = t.mul(y, wv)?;
    t.sum_all(p)
}

struct OpCase {
    inputs: Vec<Tensor>,
    /// Index of the input differentiated; the others are held constant.
    wrt: usize,
    attrs: OpAttrs,
}

fn op_case(kind: OpKind, rng: &mut ChaCha8Rng, case: usize) -> OpCase {
    let r = rng.gen_range(1..4);
    let c = rng.gen_range(1..5);
    let shape = [r, c];
    let mut attrs = OpAttrs::default();
    let wrt = case % 2;
    let inputs = match kind {
        OpKind::MatMul => {
            let k = rng.gen_range(1..4);
            if case % 4 < 2 {
                vec![
                    uniform(rng, &[r, k], -1.0, 1.0),
                    uniform(rng, &[k, c], -1.0, 1.0),
                ]
            } else {
                let b = rng.gen_range(1..3);
                vec![
                    uniform(rng, &[b, r, k], -1.0, 1.0),
                    uniform(rng, &[b, k, c], -1.0, 1.0),
                ]
            }
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let rhs = if case.is_multiple_of(3) {
                vec![c]
            } else {
                shape.to_vec()
            };
            vec![
                uniform(rng, &shape, -1.0, 1.0),
                uniform(rng, &rhs, -1.0, 1.0),
            ]
        }
        OpKind::Div => vec![uniform(rng, &shape, -1.0, 1.0), away_from_zero(rng, &shape)],
        OpKind::Log | OpKind::Sqrt => vec![uniform(rng, &shape, 0.3, 2.0)],
        OpKind::Acos => vec![uniform(rng, &shape, -0.8, 0.8)],
        OpKind::Abs => vec![away_from_zero(rng, &shape)],
        OpKind::Pow => {
            attrs.exponent = Some(rng.gen_range(-2.0..3.0));
            vec![uniform(rng, &shape, 0.3, 2.0)]
        }
        OpKind::Clamp => {
            attrs.bounds = Some((-0.5, 0.5));
            // Keep clear of the kinks at ±0.5.
            vec![Tensor::from_fn(shape.to_vec(), |_| {
                let v: f64 = rng.gen_range(-1.0..1.0);
                if (v.abs() - 0.5).abs() < 0.05 {
                    v * 0.5
                } else {
                    v
                }
            })]
        }
        OpKind::Sum | OpKind::Mean => {
            attrs.axis = if case.is_multiple_of(3) {
                None
            } else {
                Some(case % 2)
            };
            attrs.keepdim = case % 4 == 1;
            vec![uniform(rng, &shape, -1.0, 1.0)]
        }
        OpKind::Concat => {
            attrs.axis = Some(case % 2);
            let other = if case.is_multiple_of(2) {
                [rng.gen_range(1..3), c]
            } else {
                [r, rng.gen_range(1..3)]
            };
            vec![
                uniform(rng, &shape, -1.0, 1.0),
                uniform(rng, &other, -1.0, 1.0),
            ]
        }
        OpKind::Slice => {
            let axis = case % 2;
            let n = shape[axis];
            let s = rng.gen_range(0..n);
            let e = rng.gen_range(s + 1..=n);
            attrs.axis = Some(axis);
            attrs.range = Some((s, e));
            vec![uniform(rng, &shape, -1.0, 1.0)]
        }
        OpKind::Reshape => {
            attrs.shape = Some(vec![c, r]);
            vec![uniform(rng, &shape, -1.0, 1.0)]
        }
        OpKind::Transpose => vec![uniform(rng, &shape, -1.0, 1.0)],
        OpKind::Permute => {
            attrs.perm = Some(vec![2, 0, 1]);
            vec![uniform(rng, &[r, c, 2], -1.0, 1.0)]
        }
        OpKind::MaskedSoftmax => {
            let mut m = Tensor::zeros(vec![c]);
            for j in 1..c {
                if rng.gen_bool(0.3) {
                    m.data_mut()[j] = f64::NEG_INFINITY;
                }
            }
            attrs.mask = Some(m);
            vec![uniform(rng, &shape, -2.0, 2.0)]
        }
        OpKind::LayerNorm => vec![uniform(rng, &[r, c + 1], -1.0, 1.0)],
        OpKind::Embedding => {
            let n = rng.gen_range(1..6);
            attrs.indices = Some((0..n).map(|_| rng.gen_range(0..r)).collect());
            vec![uniform(rng, &shape, -1.0, 1.0)]
        }
        OpKind::Gather => {
            let n = rng.gen_range(1..8);
            attrs.indices = Some((0..n).map(|_| rng.gen_range(0..r * c)).collect());
            vec![uniform(rng, &shape, -1.0, 1.0)]
        }
        _ => vec![uniform(rng, &shape, -1.5, 1.5)],
    };
    let wrt = wrt.min(inputs.len() - 1);
    OpCase { inputs, wrt, attrs }
}

fn op_row(kind: OpKind, cfg: &SuiteConfig) -> GradRow {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (kind as u64 + 1).wrapping_mul(0x9e37_79b9));
    let mut errs = Vec::with_capacity(cfg.cases);
    for case in 0..cfg.cases {
        let oc = op_case(kind, &mut rng, case);
        // Output shape, for the weights.
        let out_shape = {
            let mut t = Tape::new();
            let vars: Vec<Var> = oc.inputs.iter().map(|x| t.constant(x.clone())).collect();
            match t.apply(kind, &vars, &oc.attrs) {
                Ok(y) => t.shape(y).to_vec(),
                Err(_) => break,
            }
        };
        let w = uniform(&mut rng, &out_shape, -1.0, 1.0);
        let f = |t: &mut Tape, x: Var| -> Result<Var> {
            let vars: Vec<Var> = oc
                .inputs
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    if i == oc.wrt {
                        x
                    } else {
                        t.constant(v.clone())
                    }
                })
                .collect();
            let y = t.apply(kind, &vars, &oc.attrs)?;
            weighted_sum(t, y, &w)
        };
        match grad_check(f, &oc.inputs[oc.wrt], cfg.eps) {
            Ok(e) => errs.push(e),
            Err(_) => break,
        }
    }
    row("tensor", kind.name().to_string(), cfg.cases, errs, cfg.tol)
}

const RASTER_GROUPS: [&str; 6] = ["mu", "quat", "scale", "opacity", "sh", "pose_tangent"];

fn raster_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene {
    let mut s = GaussianScene::new(1);
    let d = s.sh_dim();
    for _ in 0..n {
        let z = rng.gen_range(1.5..4.0);
        s.push(GaussianPrimitive {
            mu: [
                rng.gen_range(-0.4..0.4) * z,
                rng.gen_range(-0.4..0.4) * z,
                z,
            ],
            quat: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
            scale: std::array::from_fn(|_| rng.gen_range(0.05..0.3)),
            opacity: rng.gen_range(0.1..0.9),
            sh: (0..d).map(|_| rng.gen_range(-0.6..0.6)).collect(),
        })
        .expect("finite primitive");
    }
    s
}

fn raster_rows(cfg: &SuiteConfig) -> Vec<GradRow> {
    let (w, h) = (16, 16);
    let settings = RenderSettings {
        background: [0.2, 0.4, 0.1],
        ..RenderSettings::default()
    };
    let mut errs: Vec<Vec<f64>> = vec![Vec::new(); RASTER_GROUPS.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_7374);
    for _ in 0..cfg.cases {
        let scene = raster_scene(&mut rng, 5);
        let cam = Camera {
            k: Intrinsics::from_fov(w, h, 60.0).expect("valid intrinsics"),
            pose: se3_exp(&std::array::from_fn(|_| rng.gen_range(-0.05..0.05))),
        };
        let weights: Vec<f64> = (0..w * h * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |sc: &GaussianScene, c: &Camera| -> Option<f64> {
            let (o, _) = render(sc, c, &settings).ok()?;
            Some(o.color.iter().zip(&weights).map(|(a, b)| a * b).sum())
        };
        let Ok((_, state)) = render(&scene, &cam, &settings) else {
            continue;
        };
        let Ok((g, pg)) = render_backward(&scene, &state, &weights) else {
            continue;
        };
        let eps = cfg.eps;
        let rel = |a: f64, p: Option<f64>, m: Option<f64>| match (p, m) {
            (Some(p), Some(m)) => {
                let fd = (p - m) / (2.0 * eps);
                (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs())
            }
            _ => f64::INFINITY,
        };
        let perturb = |edit: &dyn Fn(&mut GaussianScene, f64), a: f64| {
            let mut p = scene.clone();
            let mut m = scene.clone();
            edit(&mut p, eps);
            edit(&mut m, -eps);
            rel(a, objective(&p, &cam), objective(&m, &cam))
        };
        let mut worst = [0.0f64; 6];
        for i in 0..scene.len() {
            for k in 0..3 {
                worst[0] = worst[0].max(perturb(&|s, d| s.mu[i][k] += d, g.mu[i][k]));
                worst[2] = worst[2].max(perturb(&|s, d| s.scale[i][k] += d, g.scale[i][k]));
            }
            for k in 0..4 {
                worst[1] = worst[1].max(perturb(&|s, d| s.quat[i][k] += d, g.quat[i][k]));
            }
            worst[3] = worst[3].max(perturb(&|s, d| s.opacity[i] += d, g.opacity[i]));
            for k in 0..scene.sh_dim() {
                let j = i * scene.sh_dim() + k;
                worst[4] = worst[4].max(perturb(&|s, d| s.sh[j] += d, g.sh[j]));
            }
        }
        for k in 0..6 {
            let mut xi = [0.0; 6];
            xi[k] = eps;
            let cp = Camera {
                pose: cam.pose.retract(&xi),
                ..cam
            };
            xi[k] = -eps;
            let cm = Camera {
                pose: cam.pose.retract(&xi),
                ..cam
            };
            worst[5] = worst[5].max(rel(
                pg.tangent[k],
                objective(&scene, &cp),
                objective(&scene, &cm),
            ));
        }
        for (e, w) in errs.iter_mut().zip(worst) {
            e.push(w);
        }
    }
    RASTER_GROUPS
        .iter()
        .zip(errs)
        .map(|(name, e)| row("raster", name.to_string(), cfg.cases, e, cfg.tol))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_kind_and_raster_group_has_a_row() {
        let rows = run(&SuiteConfig {
            cases: 2,
            ..SuiteConfig::default()
        });
        assert_eq!(rows.len(), OpKind::ALL.len() + RASTER_GROUPS.len());
        for r in &rows {
            assert!(r.passed, "{}/{}: {}", r.group, r.name, r.max_rel_err);
        }
    }

    #[test]
    fn a_wrong_gradient_is_flagged() {
        let r = row("x", "y".into(), 2, vec![1e-6, 3e-3], 1e-4);
        assert!(!r.passed);
        let short = row("x", "y".into(), 2, vec![1e-9], 1e-4);
        assert!(!short.passed && short.max_rel_err.is_infinite());
        assert!(format_table(&[r]).contains("FAIL"));
    }
}
