use crate::config::{echo, resolve};
use crate::Common;
use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use splatpose::evalkit::{self, EvalOptions};
use splatpose::gradsuite::{self, SuiteConfig};
use splatpose::gsplat::{io::write_png, ply::export_ply, render, Camera, RenderSettings};
use splatpose::netcore::Variant;
use splatpose::synthdata::{
    gen_sample, gen_scene, read_bundle, read_manifest, write_bundle, write_manifest, CameraRig,
    Layout, Manifest, SceneSpec,
};
use splatpose::trainer::{self, TrainConfig};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub scene: SceneSpec,
    pub rig: CameraRig,
    pub n_context: usize,
    pub n_target: usize,
    /// Context separation is drawn uniformly from this range per bundle.
    pub separation_deg: [f64; 2],
    pub render: RenderSettings,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            rig: CameraRig::default(),
            n_context: 2,
            n_target: 1,
            separation_deg: [10.0, 45.0],
            render: RenderSettings::default(),
        }
    }
}

/// Bundle `i` uses scene seed `seed + i`; separations and camera seeds come
/// from one stream seeded by `seed`.
pub fn cmd_gen_scene(common: &Common, seed: u64, n: usize, layout: Option<Layout>) -> Result<()> {
    let mut cfg: GenConfig = resolve(common.config.as_deref(), &common.overrides)?;
    cfg.scene.seed = seed;
    if let Some(l) = layout {
        cfg.scene.layout = l;
    }
    let [lo, hi] = cfg.separation_deg;
    ensure!(n > 0, "--n must be at least 1");
    ensure!(
        lo > 0.0 && lo <= hi && hi <= 90.0,
        "separation_deg must satisfy 0 < lo <= hi <= 90"
    );
    echo(&common.out, "gen-scene", &cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(n);
    for i in 0..n {
        let scene = gen_scene(&SceneSpec {
            seed: seed + i as u64,
            ..cfg.scene.clone()
        })?;
        let sep = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let sample = gen_sample(
            &scene,
            &cfg.rig,
            cfg.n_context,
            cfg.n_target,
            sep,
            rng.gen(),
            &cfg.render,
        )?;
        let name = format!("sample_{i:04}");
        write_bundle(&common.out.join(&name), &sample)?;
        names.push(name);
    }
    write_manifest(
        &common.out,
        &Manifest {
            scene: cfg.scene,
            rig: cfg.rig,
            n_context: cfg.n_context,
            n_target: cfg.n_target,
            splits: BTreeMap::from([("all".to_string(), names)]),
        },
    )?;
    println!("wrote {n} bundles to {}", common.out.display());
    Ok(())
}

pub fn cmd_train(
    common: &Common,
    seed: Option<u64>,
    ablate: &[String],
    variant: Option<Variant>,
) -> Result<()> {
    let mut cfg: TrainConfig = resolve(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(v) = variant {
        cfg.model.variant = v;
    }
    for a in ablate {
        cfg.ablation.set(a)?;
    }
    cfg.validate()?;
    echo(&common.out, "train", &cfg)?;
    let res = trainer::fit(cfg, &common.out)?;
    if let Some(last) = res.records.last() {
        println!("step {} loss {:.6}", last.step, last.loss.total);
    }
    println!("checkpoint {}", res.checkpoint.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    split: &'a str,
    options: &'a EvalOptions,
}

pub fn cmd_eval(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    epa: bool,
    seed: Option<u64>,
) -> Result<()> {
    let mut opts: EvalOptions = resolve(common.config.as_deref(), &common.overrides)?;
    opts.epa |= epa;
    if let Some(s) = seed {
        opts.ransac.seed = s;
    }
    let (model, _) = trainer::load_model(checkpoint)?;
    let manifest =
        read_manifest(data).with_context(|| format!("reading manifest in {}", data.display()))?;
    let names = manifest
        .splits
        .get(split)
        .with_context(|| format!("split `{split}` not in manifest"))?;
    let samples = names
        .iter()
        .map(|n| read_bundle(&data.join(n)).with_context(|| format!("reading bundle {n}")))
        .collect::<Result<Vec<_>>>()?;
    echo(
        &common.out,
        "eval",
        &EvalEcho {
            checkpoint,
            data,
            split,
            options: &opts,
        },
    )?;
    let report = evalkit::evaluate(&model, &samples, &opts)?;
    evalkit::write_report(&common.out, &report)?;
    let s = &report.summary;
    println!("psnr {:.3} ssim {:.4}", s.psnr, s.ssim);
    if let (Some(p), Some(q)) = (s.psnr_epa, s.ssim_epa) {
        println!("psnr_epa {p:.3} ssim_epa {q:.4}");
    }
    for m in &s.methods {
        println!(
            "{:?}: auc@5/10/20 {:.4} {:.4} {:.4}",
            m.method, m.auc[0], m.auc[1], m.auc[2]
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictEcho<'a> {
    checkpoint: &'a Path,
    sample: &'a Path,
    render: &'a RenderSettings,
}

pub fn cmd_render(checkpoint: &Path, sample_dir: &Path, out: &Path) -> Result<()> {
    let (model, tcfg) = trainer::load_model(checkpoint)?;
    let sample = read_bundle(sample_dir)?;
    echo(
        out,
        "render",
        &PredictEcho {
            checkpoint,
            sample: sample_dir,
            render: &tcfg.render,
        },
    )?;
    let pred = evalkit::predict(&model, &sample)?;
    for (v, (k, pose)) in sample.intrinsics.iter().zip(&pred.poses).enumerate() {
        let (img, _) = render(&pred.scene, &Camera { k: *k, pose: *pose }, &tcfg.render)?;
        let name = if v < sample.n_context {
            format!("render_context_{v}.png")
        } else {
            format!("render_target_{}.png", v - sample.n_context)
        };
        write_png(&out.join(name), &img.color, k.width, k.height)?;
    }
    println!("rendered {} views to {}", sample.n_views(), out.display());
    Ok(())
}

pub fn cmd_gradcheck(cases: usize, seed: u64, out: Option<&Path>) -> Result<bool> {
    ensure!(cases > 0, "--cases must be at least 1");
    let cfg = SuiteConfig {
        cases,
        seed,
        ..SuiteConfig::default()
    };
    let rows = gradsuite::run(&cfg);
    let table = gradsuite::format_table(&rows);
    print!("{table}");
    let ok = gradsuite::all_passed(&rows);
    println!("{}", if ok { "all rows pass" } else { "FAILED" });
    if let Some(dir) = out {
        echo(
            dir,
            "gradcheck",
            &serde_json::json!({ "cases": cfg.cases, "seed": cfg.seed, "eps": cfg.eps, "tol": cfg.tol }),
        )?;
        std::fs::write(dir.join("gradcheck.txt"), &table)?;
    }
    Ok(ok)
}

pub fn cmd_export_ply(checkpoint: &Path, sample_dir: &Path, out: &Path) -> Result<()> {
    let (model, tcfg) = trainer::load_model(checkpoint)?;
    let sample = read_bundle(sample_dir)?;
    echo(
        out,
        "export-ply",
        &PredictEcho {
            checkpoint,
            sample: sample_dir,
            render: &tcfg.render,
        },
    )?;
    let pred = evalkit::predict(&model, &sample)?;
    let path = out.join("gaussians.ply");
    std::fs::write(&path, export_ply(&pred.scene)?)?;
    println!("wrote {} Gaussians to {}", pred.scene.len(), path.display());
    Ok(())
}
