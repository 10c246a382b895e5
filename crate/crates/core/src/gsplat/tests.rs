use super::*;
use crate::geometry::{rotation_about, se3_exp, Intrinsics, PoseSE3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn camera(w: usize, h: usize) -> Camera {
    Camera {
        k: Intrinsics::from_fov(w, h, 60.0).unwrap(),
        pose: PoseSE3::identity(),
    }
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize, degree: usize) -> GaussianScene {
    let mut s = GaussianScene::new(degree);
    let d = s.sh_dim();
    for _ in 0..n {
        let z = rng.gen_range(1.5..4.0);
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        s.push(GaussianPrimitive {
            mu: [
                rng.gen_range(-0.5..0.5) * z,
                rng.gen_range(-0.5..0.5) * z,
                z,
            ],
            quat: q,
            scale: std::array::from_fn(|_| rng.gen_range(0.03..0.25)),
            opacity: rng.gen_range(0.1..0.95),
            sh: (0..d).map(|_| rng.gen_range(-0.6..0.6)).collect(),
        })
        .unwrap();
    }
    s
}

fn white_splat(z: f64, opacity: f64) -> GaussianPrimitive {
    let mut sh = vec![0.0; 3];
    sh.iter_mut().for_each(|v| *v = sh::rgb_to_dc(1.0));
    GaussianPrimitive {
        mu: [0.0, 0.0, z],
        quat: [1.0, 0.0, 0.0, 0.0],
        scale: [0.1; 3],
        opacity,
        sh,
    }
}

#[test]
fn empty_scene_renders_background() {
    let s = RenderSettings {
        background: [0.2, 0.4, 0.6],
        ..Default::default()
    };
    let (out, _) = render(&GaussianScene::new(1), &camera(20, 12), &s).unwrap();
    for p in 0..20 * 12 {
        assert_eq!(&out.color[p * 3..p * 3 + 3], &[0.2, 0.4, 0.6]);
        assert_eq!(out.alpha[p], 0.0);
    }
    assert_eq!(
        render_naive(&GaussianScene::new(1), &camera(20, 12), &s).unwrap(),
        out
    );
}

#[test]
fn single_white_splat_is_bright_at_center_and_decays() {
    let mut scene = GaussianScene::new(0);
    scene.push(white_splat(1.0, 0.999)).unwrap();
    let (out, _) = render(&scene, &camera(32, 32), &RenderSettings::default()).unwrap();
    let center = out.pixel(16, 16);
    assert!(center.iter().all(|&c| c >= 0.9), "{center:?}");
    let mut prev = center[0];
    for dx in 1..12 {
        let v = out.pixel(16 + dx, 16)[0];
        assert!(v <= prev, "not decaying at {dx}");
        prev = v;
    }
    assert!(prev < 0.1);
}

#[test]
fn single_splat_matches_naive_bitwise() {
    let mut scene = GaussianScene::new(1);
    let mut g = white_splat(1.3, 0.8);
    g.sh = vec![
        0.3, -0.2, 0.1, 0.2, 0.0, -0.1, 0.05, 0.1, 0.0, -0.3, 0.2, 0.1,
    ];
    g.mu = [0.1, -0.05, 1.3];
    scene.push(g).unwrap();
    let cam = camera(40, 24);
    let s = RenderSettings::default();
    let (tiled, _) = render(&scene, &cam, &s).unwrap();
    let naive = render_naive(&scene, &cam, &s).unwrap();
    assert_eq!(tiled, naive);
}

#[test]
fn random_scenes_match_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let n = rng.gen_range(1..=64);
        let scene = random_scene(&mut rng, n, 1);
        let cam = camera(32, 32);
        let s = RenderSettings {
            background: [0.1, 0.2, 0.3],
            ..Default::default()
        };
        let (tiled, _) = render(&scene, &cam, &s).unwrap();
        let naive = render_naive(&scene, &cam, &s).unwrap();
        let diff = tiled
            .color
            .iter()
            .zip(&naive.color)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }
}

#[test]
fn near_splat_occludes_far_one() {
    let mut scene = GaussianScene::new(0);
    let mut red = white_splat(1.0, 0.99);
    red.sh = vec![sh::rgb_to_dc(1.0), sh::rgb_to_dc(0.0), sh::rgb_to_dc(0.0)];
    let mut blue = white_splat(2.0, 0.99);
    blue.sh = vec![sh::rgb_to_dc(0.0), sh::rgb_to_dc(0.0), sh::rgb_to_dc(1.0)];
    blue.scale = [0.3; 3];
    // insertion order must not matter
    scene.push(blue).unwrap();
    scene.push(red).unwrap();
    let cam = camera(32, 32);
    let out = render_naive(&scene, &cam, &RenderSettings::default()).unwrap();
    let c = out.pixel(16, 16);
    assert!(c[0] > 0.9 && c[2] < 0.1, "{c:?}");
    assert_eq!(out.first[16 * 32 + 16], Some(1));
}

#[test]
fn non_finite_parameter_is_reported_with_index() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut scene = random_scene(&mut rng, 4, 0);
    scene.scale[2][1] = f64::NAN;
    let e = render(&scene, &camera(8, 8), &RenderSettings::default()).unwrap_err();
    assert!(
        matches!(
            e,
            GsplatError::NonFinite {
                index: 2,
                field: "scale"
            }
        ),
        "{e}"
    );
}

#[test]
fn colors_stay_within_energy_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scene = random_scene(&mut rng, 80, 1);
    let s = RenderSettings {
        background: [1.0, 0.5, 0.0],
        ..Default::default()
    };
    let (out, _) = render(&scene, &camera(32, 32), &s).unwrap();
    let max_color = (0..scene.len())
        .map(|i| {
            let d = scene.sh_dim();
            let m = Vec3::from(scene.mu[i]).normalize();
            let c = sh::eval(1, &scene.sh[i * d..(i + 1) * d], [m.x, m.y, m.z]);
            c.iter().map(|v| v + 0.5).fold(0.0, f64::max)
        })
        .fold(1.0, f64::max);
    assert!(out
        .color
        .iter()
        .all(|&c| (0.0..=max_color + 1e-12).contains(&c)));
    assert!(out.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
}

#[test]
fn render_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let scene = random_scene(&mut rng, 100, 1);
    let cam = camera(48, 40);
    let s = RenderSettings::default();
    let (a, sa) = render(&scene, &cam, &s).unwrap();
    let (b, sb) = render(&scene, &cam, &s).unwrap();
    assert_eq!(a, b);
    let g: Vec<f64> = (0..48 * 40 * 3)
        .map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.5)
        .collect();
    let (ga, pa) = render_backward(&scene, &sa, &g).unwrap();
    let (gb, pb) = render_backward(&scene, &sb, &g).unwrap();
    assert_eq!(ga, gb);
    assert_eq!(pa, pb);
}

#[test]
fn rigid_gauge_leaves_image_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let scene = random_scene(&mut rng, 60, 1);
    let cam = camera(32, 32);
    let q = PoseSE3::new(
        rotation_about(&Vec3::new(0.3, -1.0, 0.5), 41.0),
        Vec3::new(0.4, -1.2, 2.0),
    );
    let moved = scene.transformed(&q).unwrap();
    let cam2 = Camera {
        k: cam.k,
        pose: q.compose(&cam.pose),
    };
    let s = RenderSettings::default();
    let (a, _) = render(&scene, &cam, &s).unwrap();
    let (b, _) = render(&moved, &cam2, &s).unwrap();
    let diff = a
        .color
        .iter()
        .zip(&b.color)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-9, "{diff}");
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scene = random_scene(&mut rng, 20, 1);
    let cam = camera(16, 16);
    let (_, st) = render(&scene, &cam, &RenderSettings::default()).unwrap();
    let (g, p) = render_backward(&scene, &st, &vec![0.0; 16 * 16 * 3]).unwrap();
    assert!(g.mu.iter().flatten().all(|&v| v == 0.0));
    assert!(g.sh.iter().all(|&v| v == 0.0));
    assert!(g.opacity.iter().all(|&v| v == 0.0));
    assert!(p.tangent.iter().all(|&v| v == 0.0));
}

#[test]
fn culled_gaussian_gets_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut scene = random_scene(&mut rng, 5, 1);
    scene.mu[3] = [0.0, 0.0, -1.0];
    let cam = camera(16, 16);
    let (_, st) = render(&scene, &cam, &RenderSettings::default()).unwrap();
    let (g, _) = render_backward(&scene, &st, &vec![1.0; 16 * 16 * 3]).unwrap();
    assert_eq!(g.mu[3], [0.0; 3]);
    assert_eq!(g.quat[3], [0.0; 4]);
    assert_eq!(g.scale[3], [0.0; 3]);
    assert_eq!(g.opacity[3], 0.0);
    assert!(g.sh[3 * 12..4 * 12].iter().all(|&v| v == 0.0));
}

#[test]
fn state_mismatch_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scene = random_scene(&mut rng, 5, 1);
    let (_, st) = render(&scene, &camera(16, 16), &RenderSettings::default()).unwrap();
    let other = random_scene(&mut rng, 6, 1);
    assert!(matches!(
        render_backward(&other, &st, &vec![0.0; 16 * 16 * 3]),
        Err(GsplatError::StateMismatch)
    ));
}

/// Central differences of `Σ w · color` against the analytic backward pass,
/// for every scalar of the scene and of the pose.
#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (w, h) = (24, 20);
    for case in 0..3 {
        let scene = random_scene(&mut rng, 6, 1);
        let pose = se3_exp(&std::array::from_fn(|_| rng.gen_range(-0.05..0.05)));
        let cam = Camera {
            k: Intrinsics::from_fov(w, h, 60.0).unwrap(),
            pose,
        };
        let s = RenderSettings {
            background: [0.3, 0.1, 0.6],
            ..Default::default()
        };
        let weights: Vec<f64> = (0..w * h * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |sc: &GaussianScene, c: &Camera| -> f64 {
            let (o, _) = render(sc, c, &s).unwrap();
            o.color.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, st) = render(&scene, &cam, &s).unwrap();
        let (g, pg) = render_backward(&scene, &st, &weights).unwrap();
        let eps = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * eps);
            let rel = (analytic - fd).abs() / 1f64.max(analytic.abs()).max(fd.abs());
            assert!(
                rel < 1e-4,
                "case {case} {what}: analytic {analytic} fd {fd}"
            );
        };
        for i in 0..scene.len() {
            for k in 0..3 {
                let mut p = scene.clone();
                let mut m = scene.clone();
                p.mu[i][k] += eps;
                m.mu[i][k] -= eps;
                check(g.mu[i][k], loss(&p, &cam), loss(&m, &cam), "mu");
                let mut p = scene.clone();
                let mut m = scene.clone();
                p.scale[i][k] += eps;
                m.scale[i][k] -= eps;
                check(g.scale[i][k], loss(&p, &cam), loss(&m, &cam), "scale");
            }
            for k in 0..4 {
                let mut p = scene.clone();
                let mut m = scene.clone();
                p.quat[i][k] += eps;
                m.quat[i][k] -= eps;
                check(g.quat[i][k], loss(&p, &cam), loss(&m, &cam), "quat");
            }
            let mut p = scene.clone();
            let mut m = scene.clone();
            p.opacity[i] += eps;
            m.opacity[i] -= eps;
            check(g.opacity[i], loss(&p, &cam), loss(&m, &cam), "opacity");
            for k in 0..12 {
                let mut p = scene.clone();
                let mut m = scene.clone();
                p.sh[i * 12 + k] += eps;
                m.sh[i * 12 + k] -= eps;
                check(g.sh[i * 12 + k], loss(&p, &cam), loss(&m, &cam), "sh");
            }
        }
        for k in 0..6 {
            let mut xi = [0.0; 6];
            xi[k] = eps;
            let cp = Camera {
                pose: pose.retract(&xi),
                ..cam
            };
            xi[k] = -eps;
            let cm = Camera {
                pose: pose.retract(&xi),
                ..cam
            };
            check(
                pg.tangent[k],
                loss(&scene, &cp),
                loss(&scene, &cm),
                "pose tangent",
            );
        }
        for r in 0..3 {
            for c in 0..3 {
                let mut cp = cam;
                let mut cm = cam;
                cp.pose.rot[(r, c)] += eps;
                cm.pose.rot[(r, c)] -= eps;
                check(
                    pg.rot[(r, c)],
                    loss(&scene, &cp),
                    loss(&scene, &cm),
                    "pose rot",
                );
            }
            let mut cp = cam;
            let mut cm = cam;
            cp.pose.trans[r] += eps;
            cm.pose.trans[r] -= eps;
            check(
                pg.trans[r],
                loss(&scene, &cp),
                loss(&scene, &cm),
                "pose trans",
            );
        }
    }
}

#[test]
fn tape_render_gradients_match_direct_backward() {
    use crate::tensor::{Tape, Tensor};
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scene = random_scene(&mut rng, 8, 1);
    let k = Intrinsics::from_fov(16, 16, 60.0).unwrap();
    let s = RenderSettings::default();
    let mut tape = Tape::new();
    let n = scene.len();
    let mu = tape.leaf(Tensor::new([n, 3], scene.mu.iter().flatten().copied().collect()).unwrap());
    let quat =
        tape.leaf(Tensor::new([n, 4], scene.quat.iter().flatten().copied().collect()).unwrap());
    let scale =
        tape.leaf(Tensor::new([n, 3], scene.scale.iter().flatten().copied().collect()).unwrap());
    let op = tape.leaf(Tensor::vector(scene.opacity.clone()));
    let shv = tape.leaf(Tensor::new([n, 12], scene.sh.clone()).unwrap());
    let rot = tape.leaf(Tensor::eye(3));
    let trans = tape.leaf(Tensor::zeros([3]));
    let img = render_on_tape(&mut tape, 1, mu, quat, scale, op, shv, rot, trans, &k, &s).unwrap();
    let l = tape.sum_all(img).unwrap();
    let grads = tape.backward(l).unwrap();

    let cam = Camera {
        k,
        pose: PoseSE3::identity(),
    };
    let (_, st) = render(&scene, &cam, &s).unwrap();
    let (g, p) = render_backward(&scene, &st, &vec![1.0; 16 * 16 * 3]).unwrap();
    assert_eq!(
        grads.get(mu).unwrap().data(),
        g.mu.iter()
            .flatten()
            .copied()
            .collect::<Vec<_>>()
            .as_slice()
    );
    assert_eq!(grads.get(shv).unwrap().data(), g.sh.as_slice());
    assert_eq!(
        grads.get(trans).unwrap().data(),
        &[p.trans.x, p.trans.y, p.trans.z]
    );
}
