use super::*;
use crate::geometry::{decode_pose10, normalize_to_canonical, rotation_angle, PoseCode10};
use crate::tensor::grad_check;

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        patch: 4,
        channels: 16,
        enc_depth: 1,
        dec_depth: 2,
        heads: 2,
        mlp_ratio: 2,
        height: 8,
        width: 8,
        n_max: 4,
        m_max: 2,
        gs_features: 4,
        pose_attn_layers: 1,
        ..ModelConfig::default()
    }
}

fn image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([8, 8, 3], |_| rng.gen::<f64>())
}

fn k8() -> Intrinsics {
    Intrinsics::from_fov(8, 8, 60.0).unwrap()
}

struct Run {
    tape: Tape,
    images: Vec<Var>,
    out: ForwardOutput,
}

fn run(model: &Model, imgs: &[Tensor], n_context: usize, mode: Mode) -> Run {
    let mut tape = Tape::new();
    let bind = model.params.bind(&mut tape);
    let images: Vec<Var> = imgs.iter().map(|t| tape.leaf(t.clone())).collect();
    let ks = vec![k8(); imgs.len()];
    let out = model
        .forward(&mut tape, &bind, &images, &ks, n_context, mode)
        .unwrap();
    Run { tape, images, out }
}

#[test]
fn mask_examples() {
    let m = build_mask(2, 1).unwrap();
    let rows: Vec<Vec<bool>> = (0..3)
        .map(|q| (0..3).map(|k| m.allows(q, k)).collect())
        .collect();
    assert_eq!(
        rows,
        vec![
            vec![true, true, false],
            vec![true, true, false],
            vec![true; 3]
        ]
    );
    let m = build_mask(3, 0).unwrap();
    assert!((0..3).all(|q| (0..3).all(|k| m.allows(q, k))));
    let m = build_mask(1, 2).unwrap();
    assert!(m.allows(0, 0) && !m.allows(0, 1) && !m.allows(0, 2));
    assert!((1..3).all(|q| (0..3).all(|k| m.allows(q, k))));
    assert!(build_mask(0, 1).is_err());

    let add = build_mask(1, 1).unwrap().additive(0..2, 2);
    assert_eq!(add.shape(), &[4, 4]);
    assert_eq!(
        &add.data()[..4],
        &[0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]
    );
    assert!(add.data()[8..].iter().all(|v| *v == 0.0));
}

#[test]
fn config_arithmetic_and_validation() {
    let cfg = ModelConfig {
        height: 256,
        width: 256,
        patch: 16,
        ..ModelConfig::default()
    };
    assert_eq!(cfg.image_tokens(), 256);
    assert_eq!(ModelConfig::default().gs_channels(), 20);
    assert!(ModelConfig {
        patch: 7,
        ..ModelConfig::default()
    }
    .validate()
    .is_err());
    assert!(ModelConfig {
        dec_depth: 0,
        ..ModelConfig::default()
    }
    .validate()
    .is_err());
    assert!(ModelConfig {
        heads: 3,
        ..ModelConfig::default()
    }
    .validate()
    .is_err());

    let text = serde_json::to_string(&tiny(Variant::Unified)).unwrap();
    assert!(text.contains("\"v2l\""));
    let back: ModelConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, tiny(Variant::Unified));
    assert!(serde_json::from_str::<ModelConfig>("{\"depth\": 3}").is_err());
    assert_eq!("v2".parse::<Variant>().unwrap(), Variant::Asymmetric);
}

#[test]
fn encoder_is_per_view() {
    let model = Model::new(tiny(Variant::Asymmetric), 1).unwrap();
    let mut tape = Tape::new();
    let bind = model.params.bind_frozen(&mut tape);
    let (a, b) = (image(1), image(2));
    let ims: Vec<Var> = [&a, &b, &a]
        .iter()
        .map(|t| tape.constant((*t).clone()))
        .collect();
    let x = model.encode(&mut tape, &bind, &ims).unwrap();
    let v = tape.value(x);
    assert_eq!(v.shape(), &[3, 4, 16]);
    let n = 4 * 16;
    assert_eq!(&v.data()[..n], &v.data()[2 * n..]);
    assert_ne!(&v.data()[..n], &v.data()[n..2 * n]);

    let swapped: Vec<Var> = vec![ims[1], ims[0]];
    let y = model.encode(&mut tape, &bind, &swapped).unwrap();
    assert_eq!(&tape.value(y).data()[..n], &tape.value(x).data()[n..2 * n]);

    let bad = tape.constant(Tensor::zeros([4, 8, 3]));
    assert!(model.encode(&mut tape, &bind, &[bad]).is_err());
}

#[test]
fn assembled_tokens() {
    for variant in [Variant::Asymmetric, Variant::Unified] {
        let cfg = ModelConfig {
            use_intrinsics_token: false,
            ..tiny(variant)
        };
        let model = Model::new(cfg, 2).unwrap();
        let mut tape = Tape::new();
        let bind = model.params.bind_frozen(&mut tape);
        let ims: Vec<Var> = (0..3).map(|s| tape.constant(image(s))).collect();
        let f = model.encode(&mut tape, &bind, &ims).unwrap();
        let ts = model.assemble(&mut tape, &bind, f, None, 2).unwrap();
        assert_eq!(ts.roles.len(), 4 + 1);
        assert_eq!(
            ts.views,
            vec![ViewRole::Context, ViewRole::Context, ViewRole::Target]
        );
        let t = tape.value(ts.tokens);
        let pose = |v: usize| t.data()[v * 5 * 16..v * 5 * 16 + 16].to_vec();
        assert_eq!(pose(1), pose(2));
        match variant {
            Variant::Asymmetric => assert_eq!(pose(0), pose(1)),
            Variant::Unified => assert_ne!(pose(0), pose(1)),
        }
    }
    let model = Model::new(tiny(Variant::Asymmetric), 2).unwrap();
    let mut tape = Tape::new();
    let bind = model.params.bind_frozen(&mut tape);
    let im = tape.constant(image(0));
    let f = model.encode(&mut tape, &bind, &[im]).unwrap();
    assert!(model.assemble(&mut tape, &bind, f, None, 1).is_err());
    let ts = model
        .assemble(&mut tape, &bind, f, Some(&[k8()]), 1)
        .unwrap();
    assert_eq!(ts.roles[..2], [TokenRole::Intrinsics, TokenRole::Pose]);
}

#[test]
fn zero_weights_make_the_decoder_an_identity() {
    let cfg = ModelConfig {
        dec_depth: 1,
        ..tiny(Variant::Asymmetric)
    };
    let mut model = Model::new(cfg, 3).unwrap();
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    for n in names.iter().filter(|n| n.starts_with("dec.")) {
        let shape = model
            .params
            .get(model.params.id(n).unwrap())
            .shape()
            .to_vec();
        model.params.set(n, Tensor::zeros(shape)).unwrap();
    }
    let mut tape = Tape::new();
    let bind = model.params.bind_frozen(&mut tape);
    let im = tape.constant(image(5));
    let f = model.encode(&mut tape, &bind, &[im]).unwrap();
    let ts = model
        .assemble(&mut tape, &bind, f, Some(&[k8()]), 1)
        .unwrap();
    let states = model.decode(&mut tape, &bind, &ts, None).unwrap();
    assert_eq!(states.len(), 2);
    assert_eq!(tape.value(states[1]), tape.value(states[0]));
}

#[test]
fn asymmetric_decoder_shares_source_weights() {
    let model = Model::new(tiny(Variant::Asymmetric), 4).unwrap();
    let imgs = [image(10), image(11), image(12)];
    let decode = |order: [usize; 3]| {
        let mut tape = Tape::new();
        let bind = model.params.bind_frozen(&mut tape);
        let ims: Vec<Var> = order
            .iter()
            .map(|&i| tape.constant(imgs[i].clone()))
            .collect();
        let f = model.encode(&mut tape, &bind, &ims).unwrap();
        let ts = model
            .assemble(&mut tape, &bind, f, Some(&[k8(); 3]), 3)
            .unwrap();
        let mask = build_mask(3, 0).unwrap();
        let s = model.decode(&mut tape, &bind, &ts, Some(&mask)).unwrap();
        tape.value(*s.last().unwrap()).clone()
    };
    let a = decode([0, 1, 2]);
    let b = decode([0, 2, 1]);
    let n = a.numel() / 3;
    let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12);
    assert!(close(&a.data()[..n], &b.data()[..n]));
    assert!(close(&a.data()[n..2 * n], &b.data()[2 * n..]));
    assert!(close(&a.data()[2 * n..], &b.data()[n..2 * n]));
}

#[test]
fn head_shapes_and_wiring() {
    let model = Model::new(tiny(Variant::Asymmetric), 5).unwrap();
    let mut tape = Tape::new();
    let bind = model.params.bind_frozen(&mut tape);
    let fused = tape.constant(Tensor::randn(
        [1, 4, 48],
        1.0,
        &mut ChaCha8Rng::seed_from_u64(0),
    ));
    let p0 = model.point_head(&mut tape, &bind, fused, 0).unwrap();
    let p1 = model.point_head(&mut tape, &bind, fused, 1).unwrap();
    assert_eq!(tape.shape(p0), &[1, 8, 8, 3]);
    assert!(tape.value(p0).is_finite());
    assert_ne!(tape.value(p0), tape.value(p1));
    assert!(model.point_head(&mut tape, &bind, fused, 2).is_err());

    let img = tape.constant(image(3).reshape([1, 8, 8, 3]).unwrap());
    let dark = tape.constant(Tensor::zeros([1, 8, 8, 3]));
    let g = model.gs_head(&mut tape, &bind, fused, img, 0).unwrap();
    let g0 = model.gs_head(&mut tape, &bind, fused, dark, 0).unwrap();
    assert_eq!(tape.shape(g), &[1, 8, 8, 20]);
    assert_ne!(tape.value(g), tape.value(g0));
}

#[test]
fn forward_contracts() {
    for variant in [Variant::Asymmetric, Variant::Unified] {
        let model = Model::new(tiny(variant), 6).unwrap();
        let r = run(&model, &[image(1), image(2)], 2, Mode::Infer);
        let scene = r.out.scene(&r.tape);
        assert_eq!(scene.len(), 2 * 64);
        scene.validate().unwrap();
        let poses = r.out.poses(&r.tape);
        assert_eq!(poses.len(), 2);
        assert_eq!(poses[0], PoseSE3::identity());
        for p in &poses {
            assert!(rotation_angle(&p.rot).to_degrees() < 0.5);
            assert!(p.trans.norm() < 1e-2);
        }
        assert_eq!(r.tape.shape(r.out.codes), &[2, 10]);

        let r = run(&model, &[image(1), image(2), image(3)], 2, Mode::Train);
        assert_eq!(r.out.poses(&r.tape).len(), 3);
        assert_eq!(r.tape.value(r.out.mu).shape(), &[128, 3]);

        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape);
        let ims: Vec<Var> = (0..2).map(|s| tape.constant(image(s))).collect();
        let ks = [k8(); 2];
        assert!(model
            .forward(&mut tape, &bind, &ims, &ks, 2, Mode::Train)
            .is_err());
        assert!(model
            .forward(&mut tape, &bind, &ims, &ks, 1, Mode::Infer)
            .is_err());
        assert!(model
            .forward(&mut tape, &bind, &ims, &ks[..1], 2, Mode::Infer)
            .is_err());
    }
}

#[test]
fn initial_splats_reproduce_context_colors() {
    let model = Model::new(tiny(Variant::Asymmetric), 7).unwrap();
    let img = image(4);
    let r = run(&model, std::slice::from_ref(&img), 1, Mode::Infer);
    let scene = r.out.scene(&r.tape);
    for (i, rgb) in img.data().chunks(3).enumerate() {
        for c in 0..3 {
            let col = crate::gsplat::sh::dc_to_rgb(scene.sh[i * scene.sh_dim() + c]);
            assert!((col - rgb[c]).abs() < 0.05, "pixel {i}");
        }
    }
}

fn context_values(r: &Run) -> Vec<Tensor> {
    let mut v: Vec<Tensor> = r
        .out
        .gaussian_vars()
        .iter()
        .map(|(_, x)| r.tape.value(*x).clone())
        .collect();
    let codes = r.tape.value(r.out.codes);
    v.push(Tensor::vector(
        codes.data()[..r.out.n_context * 10].to_vec(),
    ));
    v
}

#[test]
fn target_pixels_never_reach_context_outputs() {
    for variant in [Variant::Asymmetric, Variant::Unified] {
        let model = Model::new(tiny(variant), 8).unwrap();
        let a = run(
            &model,
            &[image(1), image(2), image(3), image(4)],
            2,
            Mode::Train,
        );
        let b = run(
            &model,
            &[image(1), image(2), image(30), image(40)],
            2,
            Mode::Train,
        );
        assert_eq!(context_values(&a), context_values(&b));
        let ta = a.tape.value(a.out.codes).data()[20..].to_vec();
        let tb = b.tape.value(b.out.codes).data()[20..].to_vec();
        assert_ne!(ta, tb);

        let mut r = a;
        let mut terms = Vec::new();
        for (_, x) in r.out.gaussian_vars() {
            terms.push(r.tape.sum_all(x).unwrap());
        }
        let ctx_codes = r.tape.slice(r.out.codes, 0, 0, 2).unwrap();
        terms.push(r.tape.sum_all(ctx_codes).unwrap());
        let mut total = terms[0];
        for t in &terms[1..] {
            total = r.tape.add(total, *t).unwrap();
        }
        let g = r.tape.backward(total).unwrap();
        for &im in &r.images[2..] {
            let gi = g.get_or_zeros(&r.tape, im);
            assert!(gi.data().iter().all(|v| *v == 0.0));
        }
        let g0 = g.get_or_zeros(&r.tape, r.images[0]);
        assert!(g0.data().iter().any(|v| *v != 0.0));
    }
}

#[test]
fn disabling_the_mask_leaks() {
    let cfg = ModelConfig {
        mask_enabled: false,
        ..tiny(Variant::Asymmetric)
    };
    let model = Model::new(cfg, 9).unwrap();
    let a = run(&model, &[image(1), image(2), image(3)], 2, Mode::Train);
    let b = run(&model, &[image(1), image(2), image(31)], 2, Mode::Train);
    assert_ne!(context_values(&a), context_values(&b));
}

#[test]
fn mean_pool_pose_fallback() {
    let cfg = ModelConfig {
        use_pose_token: false,
        ..tiny(Variant::Unified)
    };
    let model = Model::new(cfg, 10).unwrap();
    let r = run(&model, &[image(1), image(2), image(3)], 2, Mode::Train);
    assert_eq!(r.tape.shape(r.out.codes), &[3, 10]);
}

#[test]
fn pose_decoding_on_tape_matches_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let codes = Tensor::randn([4, 10], 1.0, &mut rng);
    let mut tape = Tape::new();
    let c = tape.leaf(codes.clone());
    let (rot, trans) = decode_pose10_on_tape(&mut tape, c).unwrap();
    let (crot, ctrans) = canonicalize_on_tape(&mut tape, rot, trans).unwrap();
    let poses: Vec<PoseSE3> = codes
        .data()
        .chunks(10)
        .map(|c| decode_pose10(&PoseCode10::from_slice(c).unwrap()).unwrap())
        .collect();
    let canon = normalize_to_canonical(&poses);
    for (v, (p, q)) in poses.iter().zip(&canon).enumerate() {
        let r = &tape.value(rot).data()[v * 9..v * 9 + 9];
        let cr = &tape.value(crot).data()[v * 9..v * 9 + 9];
        for i in 0..9 {
            assert!((r[i] - p.rot[(i / 3, i % 3)]).abs() < 1e-12);
            assert!((cr[i] - q.rot[(i / 3, i % 3)]).abs() < 1e-12);
        }
        for i in 0..3 {
            assert!((tape.value(trans).data()[v * 3 + i] - p.trans[i]).abs() < 1e-12);
            assert!((tape.value(ctrans).data()[v * 3 + i] - q.trans[i]).abs() < 1e-12);
        }
    }
    assert_eq!(&tape.value(crot).data()[..9], Tensor::eye(3).data());

    let w = Tensor::randn([4, 3, 3], 1.0, &mut rng);
    let wt = Tensor::randn([4, 3], 1.0, &mut rng);
    let err = grad_check(
        |t, x| {
            let (r, tr) = decode_pose10_on_tape(t, x).map_err(|e| match e {
                NetError::Tensor(e) => e,
                other => panic!("{other}"),
            })?;
            let (r, tr) = canonicalize_on_tape(t, r, tr).map_err(|e| match e {
                NetError::Tensor(e) => e,
                other => panic!("{other}"),
            })?;
            let a = t.constant(w.clone());
            let b = t.constant(wt.clone());
            let r = t.mul(r, a)?;
            let tr = t.mul(tr, b)?;
            let r = t.sum_all(r)?;
            let tr = t.sum_all(tr)?;
            t.add(r, tr)
        },
        &codes,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn activation_examples() {
    let mut tape = Tape::new();
    let mut raw = vec![0.0; 20];
    raw[0] = 1.0;
    let x = tape.leaf(Tensor::new([1, 20], raw).unwrap());
    let (q, s, o, sh) = activate_on_tape(&mut tape, x, 10.0).unwrap();
    assert!((tape.value(q).data()[0] - 1.0).abs() < 1e-12 && tape.value(q).data()[1..] == [0.0; 3]);
    assert_eq!(tape.value(s).data(), &[1.0; 3]);
    assert_eq!(tape.value(o).data(), &[0.5]);
    assert_eq!(tape.shape(sh), &[1, 12]);
    let (_, s, _, _) = activate_on_tape(&mut tape, x, 0.5).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5; 3]);
}

#[test]
fn dropout_keeps_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let kept = multi_view_dropout(&[1, 2, 3, 4, 5], 0.5, &mut rng).unwrap();
        assert_eq!(kept.first(), Some(&1));
        assert_eq!(kept.last(), Some(&5));
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(
            multi_view_dropout(&[7, 8], 0.5, &mut rng).unwrap(),
            vec![7, 8]
        );
    }
    let a = dropout_indices(6, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = dropout_indices(6, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
    assert!(dropout_indices(0, 0.5, &mut rng).is_err());
}

#[test]
fn backbone_partition() {
    let model = Model::new(tiny(Variant::Unified), 13).unwrap();
    let (bb, other): (Vec<&str>, Vec<&str>) = model
        .params
        .iter()
        .map(|(n, _)| n)
        .partition(|n| is_backbone(n));
    assert!(bb.iter().any(|n| n.starts_with("enc.")));
    assert!(other.iter().any(|n| n.starts_with("pose.")));
    assert!(other.iter().all(|n| !n.starts_with("dec.")));
    assert_eq!(bb.len() + other.len(), model.params.len());
}
