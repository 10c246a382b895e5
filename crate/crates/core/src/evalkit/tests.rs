use super::*;
use crate::geometry::rotation_about;
use crate::netcore::{ModelConfig, Variant};
use crate::synthdata::{gen_sample, gen_scene, unproject_oracle, CameraRig, SceneSpec};
use proptest::prelude::*;
use rand::Rng;

fn image(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
    Tensor::from_fn(vec![h, w, 3], |i| f(i / 3 / w, (i / 3) % w, i % 3))
}

fn box_sample(rig: CameraRig, sep: f64) -> MultiViewSample {
    let scene = gen_scene(&SceneSpec {
        n_gaussians: 3000,
        ..SceneSpec::default()
    })
    .unwrap();
    gen_sample(&scene, &rig, 2, 1, sep, 3, &RenderSettings::default()).unwrap()
}

fn small_rig(side: usize) -> CameraRig {
    CameraRig {
        width: side,
        height: side,
        ..CameraRig::default()
    }
}

fn tiny_model(side: usize, mask: bool) -> Model {
    let cfg = ModelConfig {
        variant: Variant::Asymmetric,
        patch: 4,
        channels: 16,
        enc_depth: 1,
        dec_depth: 1,
        heads: 2,
        mlp_ratio: 2,
        height: side,
        width: side,
        gs_features: 4,
        pose_attn_layers: 1,
        mask_enabled: mask,
        ..ModelConfig::default()
    };
    Model::new(cfg, 5).unwrap()
}

#[test]
fn psnr_examples() {
    let a = image(4, 5, |y, x, c| 0.1 * (y + x + c) as f64 / 3.0);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let b = Tensor::from_fn(a.shape().to_vec(), |i| a.data()[i] + 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    let zeros = Tensor::zeros(vec![3, 3, 3]);
    let ones = Tensor::ones(vec![3, 3, 3]);
    assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
    assert!(psnr(&zeros, &Tensor::zeros(vec![3, 4, 3])).is_err());
}

#[test]
fn psnr_decreases_with_noise_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = image(16, 16, |y, x, c| {
        0.5 + 0.3 * ((x * 3 + y * 5 + c) as f64).sin()
    });
    let unit: Vec<f64> = (0..a.numel())
        .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
        .collect();
    let mut last = f64::INFINITY;
    for sigma in [0.01, 0.02, 0.05, 0.1, 0.2] {
        let b = Tensor::from_fn(a.shape().to_vec(), |i| a.data()[i] + sigma * unit[i]);
        let p = psnr(&a, &b).unwrap();
        assert!(p < last);
        last = p;
    }
}

#[test]
fn ssim_examples() {
    let a = image(24, 20, |y, x, c| {
        0.5 + 0.4 * (0.37 * x as f64 + 0.23 * y as f64 + c as f64).sin()
    });
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let flat = Tensor::full(vec![12, 12, 3], 0.3);
    assert!((ssim(&flat, &flat).unwrap() - 1.0).abs() < 1e-12);
    let neg = Tensor::from_fn(a.shape().to_vec(), |i| 1.0 - a.data()[i]);
    assert!(ssim(&a, &neg).unwrap() < 0.0);
    assert!(matches!(
        ssim(
            &Tensor::zeros(vec![10, 12, 3]),
            &Tensor::zeros(vec![10, 12, 3])
        ),
        Err(EvalError::TooSmall(..))
    ));
}

/// Reference from scikit-image `structural_similarity` (gaussian weights,
/// σ = 1.5, population covariance, data range 1) on the same image pair.
#[test]
fn ssim_matches_reference_implementation() {
    let f = |y: usize, x: usize, c: usize| {
        0.5 + 0.4 * (0.37 * x as f64 + 0.23 * y as f64 + c as f64).sin()
    };
    let a = image(24, 20, f);
    let b = image(24, 20, |y, x, c| {
        f(y, x, c) + 0.1 * (0.91 * x as f64 - 0.57 * y as f64 + 2.0 * c as f64).cos()
    });
    assert!((ssim(&a, &b).unwrap() - 0.904_277_542_184_772_2).abs() < 1e-12);
}

#[test]
fn epa_fixed_point_keeps_the_pose() {
    let s = box_sample(small_rig(24), 10.0);
    let v = 2;
    let r = epa(
        &s.scene,
        &s.intrinsics[v],
        &s.gt_poses[v],
        &s.images[v],
        &RenderSettings::default(),
        &EpaConfig::default(),
    )
    .unwrap();
    assert_eq!(r.initial_l2, 0.0);
    assert_eq!(r.best_l2, 0.0);
    assert_eq!(r.best_iter, 0);
    assert_eq!(r.pose, s.gt_poses[v]);
}

#[test]
fn epa_recovers_a_two_degree_rotation_on_true_gaussians() {
    let s = box_sample(small_rig(48), 12.0);
    let v = 2;
    let gt = s.gt_poses[v];
    let axis = Vec3::new(0.3, -0.8, 0.5).normalize();
    let init = PoseSE3::new(gt.rot * rotation_about(&axis, 2.0), gt.trans);
    let r = epa(
        &s.scene,
        &s.intrinsics[v],
        &init,
        &s.images[v],
        &RenderSettings::default(),
        &EpaConfig::default(),
    )
    .unwrap();
    assert!(r.best_l2 < r.initial_l2);
    assert!(
        pose_error(&r.pose, &gt).rot_deg < 0.5,
        "{:?}",
        pose_error(&r.pose, &gt)
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn epa_never_returns_a_worse_objective(
        seed in 0u64..1000,
        deg in 0.5f64..6.0,
        lr in 1e-4f64..5e-2,
    ) {
        let s = box_sample(small_rig(16), 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0).normalize();
        let gt = s.gt_poses[2];
        let init = PoseSE3::new(gt.rot * rotation_about(&axis, deg), gt.trans);
        let cfg = EpaConfig { iters: 15, lr };
        let r = epa(&s.scene, &s.intrinsics[2], &init, &s.images[2], &RenderSettings::default(), &cfg).unwrap();
        prop_assert!(r.best_l2 <= r.initial_l2);
    }
}

fn oracle_correspondences(s: &MultiViewSample, v: usize) -> (Vec<[f64; 3]>, Vec<bool>) {
    let g = unproject_oracle(s, v, &RenderSettings::default()).unwrap();
    assert!(g.coverage() > 0.5);
    (g.points, g.valid)
}

#[test]
fn pnp_recovers_exact_pose_from_oracle_grid() {
    let s = box_sample(CameraRig::default(), 20.0);
    let (points, valid) = oracle_correspondences(&s, 1);
    let r = pnp_ransac(
        &points,
        Some(&valid),
        &s.intrinsics[1],
        &RansacConfig::default(),
    )
    .unwrap();
    let gt = s.gt_poses[1];
    assert!(pose_error(&r.pose, &gt).rot_deg < 1e-3);
    assert!((r.pose.trans - gt.trans).norm() < 1e-5);
    assert_eq!(r.inliers.len(), valid.iter().filter(|v| **v).count());
}

#[test]
fn pnp_tolerates_thirty_percent_outliers() {
    let s = box_sample(CameraRig::default(), 20.0);
    let (mut points, valid) = oracle_correspondences(&s, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let idx: Vec<usize> = (0..points.len()).filter(|&i| valid[i]).collect();
    let n_out = idx.len() * 3 / 10;
    for j in sample_indices(&mut rng, idx.len(), n_out) {
        points[idx[j]] = std::array::from_fn(|_| rng.gen_range(-0.5..0.5));
    }
    let r = pnp_ransac(
        &points,
        Some(&valid),
        &s.intrinsics[1],
        &RansacConfig::default(),
    )
    .unwrap();
    assert!(pose_error(&r.pose, &s.gt_poses[1]).rot_deg < 0.1);
    assert!(r.inliers.len() >= idx.len() - n_out);
}

#[test]
fn pnp_rejects_planar_and_insufficient_data() {
    let k = Intrinsics::from_fov(32, 32, 60.0).unwrap();
    let pose = se3_exp(&[0.05, -0.02, 0.01, 0.03, 0.02, -0.01]);
    let mut pts = Vec::new();
    let mut px = Vec::new();
    for i in 0..64 {
        let x = Vec3::new(
            (i % 8) as f64 * 0.1 - 0.35,
            (i / 8) as f64 * 0.1 - 0.35,
            1.5,
        );
        let c = pose.to_camera(&x);
        pts.push([x.x, x.y, x.z]);
        px.push([k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy]);
    }
    let planar = pnp_ransac_correspondences(&pts, &px, &k, &RansacConfig::default());
    assert!(
        matches!(planar, Err(EvalError::NoConsensus(_))),
        "{planar:?}"
    );
    let few = pnp_ransac_correspondences(&pts[..5], &px[..5], &k, &RansacConfig::default());
    assert!(matches!(few, Err(EvalError::NoConsensus(_))));
}

#[test]
fn oracle_prediction_scores_perfectly() {
    let s = box_sample(small_rig(32), 15.0);
    let mut mu_grid = Vec::new();
    let mut valid = Vec::new();
    for v in 0..s.n_context {
        let (p, m) = oracle_correspondences(&s, v);
        mu_grid.extend(p);
        valid.extend(m);
    }
    let pred = Prediction {
        scene: s.scene.clone(),
        mu_grid,
        valid: Some(valid),
        poses: s.gt_poses.clone(),
    };
    let opts = EvalOptions {
        epa: true,
        ..EvalOptions::default()
    };
    let r = evaluate_predictions(std::slice::from_ref(&s), &[pred], &opts).unwrap();
    assert_eq!(r.summary.psnr, PSNR_CAP);
    let reg = &r.summary.methods[0];
    assert_eq!(reg.method, PoseMethod::Regression);
    assert_eq!(reg.auc, [1.0; 3]);
    let pnp = &r.summary.methods[1];
    assert!(pnp.auc.iter().all(|a| *a > 0.9999));
    let e = r.targets[0].epa.as_ref().unwrap();
    assert_eq!((e.l2_before, e.l2_after), (0.0, 0.0));
}

#[test]
fn evaluate_counts_and_csv_columns() {
    let side = 16;
    let model = tiny_model(side, true);
    let samples = vec![
        box_sample(small_rig(side), 10.0),
        box_sample(small_rig(side), 14.0),
    ];
    let plain = evaluate(&model, &samples, &EvalOptions::default()).unwrap();
    assert_eq!(plain.targets.len(), 2);
    assert_eq!(plain.context_poses.len(), 2);
    assert!(plain.summary.psnr.is_finite());
    let csv = summary_csv(&plain).unwrap();
    assert!(csv.starts_with("psnr,ssim,auc5_reg"));
    assert!(!csv.contains("psnr_epa"));

    let opts = EvalOptions {
        epa: true,
        epa_cfg: EpaConfig { iters: 5, lr: 1e-3 },
        ..EvalOptions::default()
    };
    let with_epa = evaluate(&model, &samples, &opts).unwrap();
    assert!(summary_csv(&with_epa)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .ends_with("psnr_epa,ssim_epa"));
    for (a, b) in plain.targets.iter().zip(&with_epa.targets) {
        assert!(b.epa.as_ref().unwrap().l2_after <= a.l2);
    }
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &with_epa).unwrap();
    let back: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap())
            .unwrap();
    assert_eq!(back.targets.len(), 2);
}

#[test]
fn leakage_audit_passes_with_mask_and_fails_without() {
    let side = 8;
    let s = box_sample(small_rig(side), 10.0);
    let masked = leakage_audit(&tiny_model(side, true), &s, 1).unwrap();
    assert!(masked.passed, "{masked:?}");
    assert_eq!(masked.max_deviation, 0.0);
    let names: Vec<&str> = masked.groups.iter().map(|g| g.0.as_str()).collect();
    assert_eq!(names, ["mu", "quat", "scale", "opacity", "sh", "pose_code"]);
    let open = leakage_audit(&tiny_model(side, false), &s, 1).unwrap();
    assert!(!open.passed && open.max_deviation > 0.0);
}
