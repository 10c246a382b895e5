//! Self-supervised training: two-group Adam, gradient clipping, curriculum,
//! multi-view dropout, checkpoints with bitwise resume, JSON-lines metrics.

use crate::gsplat::{GaussianScene, RenderSettings};
use crate::losses::{total_loss, LossConfig, LossError, LossInputs, LossReport};
use crate::netcore::{dropout_indices, is_backbone, Mode, Model, ModelConfig, NetError};
use crate::synthdata::{
    gen_sample, gen_scene, CameraRig, CurriculumSchedule, MultiViewSample, SceneSpec, SynthError,
};
use crate::tensor::container::Container;
use crate::tensor::{ParamStore, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}\n{dump}")]
    NonFinite { step: u64, dump: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Component switches: attention mask (M), pose token (P), intrinsics token
/// (I) and reprojection loss (R).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub mask: bool,
    pub pose_token: bool,
    pub intrinsics: bool,
    pub reproj: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            mask: true,
            pose_token: true,
            intrinsics: true,
            reproj: true,
        }
    }
}

impl Ablation {
    /// Apply a `KEY=on|off` switch with `KEY ∈ {M, P, I, R}`.
    pub fn set(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("ablation `{spec}` is not KEY=on|off")))?;
        let on = match value {
            "on" => true,
            "off" => false,
            _ => {
                return Err(TrainError::Config(format!(
                    "ablation value `{value}` is not on|off"
                )))
            }
        };
        let slot = match key {
            "M" => &mut self.mask,
            "P" => &mut self.pose_token,
            "I" => &mut self.intrinsics,
            "R" => &mut self.reproj,
            _ => return Err(TrainError::Config(format!("unknown ablation key `{key}`"))),
        };
        *slot = on;
        Ok(())
    }
}

/// Where training samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub rig: CameraRig,
    pub n_context: usize,
    pub n_target: usize,
    /// Number of distinct scenes, seeded `scene.seed + i`.
    pub scenes: usize,
    /// Reuse one sample (seeded by the run seed) at every step.
    pub fixed_sample: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            rig: CameraRig::default(),
            n_context: 2,
            n_target: 1,
            scenes: 8,
            fixed_sample: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub p_keep: f64,
    pub log_every: u64,
    /// 0 disables periodic checkpoints; a final one is always written.
    pub checkpoint_every: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub curriculum: CurriculumSchedule,
    pub data: DataConfig,
    pub render: RenderSettings,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 4,
            lr_backbone: 1e-5,
            lr_other: 1e-4,
            clip_norm: 1.0,
            seed: 0,
            p_keep: 0.5,
            log_every: 1,
            checkpoint_every: 1000,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            curriculum: CurriculumSchedule::default(),
            data: DataConfig::default(),
            render: RenderSettings::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "steps and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr_backbone > 0.0 && self.lr_other > 0.0) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::Config("clip_norm must be positive".into()));
        }
        if self.data.n_target == 0 {
            return Err(TrainError::Config(
                "training needs at least one target view".into(),
            ));
        }
        if self.data.scenes == 0 {
            return Err(TrainError::Config("data.scenes must be at least 1".into()));
        }
        let (m, _) = self.effective();
        m.validate()?;
        if self.data.n_context > m.n_max || self.data.n_target > m.m_max {
            return Err(TrainError::Config(
                "view counts exceed the model limits".into(),
            ));
        }
        if (self.data.rig.width, self.data.rig.height) != (m.width, m.height) {
            return Err(TrainError::Config(
                "camera rig and model image sizes differ".into(),
            ));
        }
        self.loss.validate()?;
        self.curriculum.validate()?;
        Ok(())
    }

    /// Model and loss configuration with the ablation switches applied.
    pub fn effective(&self) -> (ModelConfig, LossConfig) {
        let mut m = self.model.clone();
        m.mask_enabled &= self.ablation.mask;
        m.use_pose_token &= self.ablation.pose_token;
        m.use_intrinsics_token &= self.ablation.intrinsics;
        let mut l = self.loss.clone();
        if !self.ablation.reproj {
            l.w_reproj = 0.0;
        }
        (m, l)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json))
    }
}

/// Adam with β = (0.9, 0.999), eps 1e-8, no weight decay, one learning rate
/// per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub backbone: Vec<bool>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
            backbone: params.iter().map(|(n, _)| is_backbone(n)).collect(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Tensor],
        lr_backbone: f64,
        lr_other: f64,
    ) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t as i32);
        let c2 = 1.0 - Self::B2.powi(self.t as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let lr = if self.backbone[i] {
                lr_backbone
            } else {
                lr_other
            };
            let p = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, &g) in grads[i].data().iter().enumerate() {
                m[j] = Self::B1 * m[j] + (1.0 - Self::B1) * g;
                v[j] = Self::B2 * v[j] + (1.0 - Self::B2) * g * g;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
    norm
}

/// Parameter names per learning-rate group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub backbone: Vec<String>,
    pub other: Vec<String>,
}

pub fn partition(params: &ParamStore) -> Partition {
    let (backbone, other) = params
        .iter()
        .map(|(n, _)| n.to_string())
        .partition(|n| is_backbone(n));
    Partition { backbone, other }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub grad_norm: f64,
    pub n_context: usize,
    pub separation_deg: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// Gradients of the objective on one sample, plus its report.
pub fn sample_gradients(
    model: &Model,
    sample: &MultiViewSample,
    loss: &LossConfig,
    render: &RenderSettings,
) -> Result<(LossReport, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bind = model.params.bind(&mut tape);
    let images: Vec<_> = sample
        .images
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let out = model.forward(
        &mut tape,
        &bind,
        &images,
        &sample.intrinsics,
        sample.n_context,
        Mode::Train,
    )?;
    let inputs = LossInputs {
        targets: sample.target_images(),
        intrinsics: &sample.intrinsics,
        gt_poses: Some(&sample.gt_poses),
        reproj_valid: None,
        render,
    };
    let obj = total_loss(&mut tape, &out, &inputs, loss)?;
    if !obj.report.is_finite() {
        return Ok((obj.report, Vec::new()));
    }
    let g = tape.backward(obj.total)?;
    Ok((obj.report, bind.grads(&tape, &g)))
}

fn norm_table(params: &ParamStore, grads: &[Tensor]) -> String {
    let mut out =
        String::from("parameter                                  |param|        |grad|\n");
    for (i, (name, t)) in params.iter().enumerate() {
        let g = grads.get(i).map(|g| g.sq_norm().sqrt()).unwrap_or(f64::NAN);
        out.push_str(&format!(
            "{name:<40} {:>12.4e} {:>12.4e}\n",
            t.sq_norm().sqrt(),
            g
        ));
    }
    out
}

/// One optimizer step on a batch: multi-view dropout per sample, forward in
/// train mode, loss, backward, clipping, Adam. Returns the mean report.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model,
    opt: &mut Adam,
    batch: &[MultiViewSample],
    cfg: &TrainConfig,
    loss: &LossConfig,
    step: u64,
    rng: &mut R,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let mut total: Option<Vec<Tensor>> = None;
    let mut mean = LossReport::default();
    let mut n_context = 0;
    let mut separation = 0.0;
    for sample in batch {
        if sample.n_target == 0 {
            return Err(TrainError::Config("sample has no target views".into()));
        }
        let keep = dropout_indices(sample.n_context, cfg.p_keep, rng)?;
        let sample = if keep.len() == sample.n_context {
            sample.clone()
        } else {
            sample.with_contexts(&keep)?
        };
        n_context += sample.n_context;
        separation += sample.separation_deg;
        let (report, grads) = sample_gradients(model, &sample, loss, &cfg.render)?;
        if grads.is_empty() || grads.iter().any(|g| !g.is_finite()) {
            let zero: Vec<Tensor> = Vec::new();
            return Err(TrainError::NonFinite {
                step,
                dump: norm_table(&model.params, if grads.is_empty() { &zero } else { &grads }),
            });
        }
        accumulate(&mut mean, &report);
        total = Some(match total {
            None => grads,
            Some(mut acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(x, y)| *x += y);
                }
                acc
            }
        });
    }
    let b = batch.len() as f64;
    let mut grads = total.expect("non-empty batch");
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v /= b);
    }
    scale_report(&mut mean, 1.0 / b);
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    opt.step(&mut model.params, &grads, cfg.lr_backbone, cfg.lr_other);
    Ok(StepRecord {
        step,
        grad_norm,
        n_context: (n_context as f64 / b).round() as usize,
        separation_deg: separation / b,
        loss: mean,
    })
}

fn accumulate(acc: &mut LossReport, r: &LossReport) {
    acc.total += r.total;
    acc.render_l2 += r.render_l2;
    acc.render_perceptual += r.render_perceptual;
    acc.reproj += r.reproj;
    acc.pose_rot += r.pose_rot;
    acc.pose_trans += r.pose_trans;
    acc.per_target.extend(r.per_target.iter().cloned());
}

fn scale_report(r: &mut LossReport, f: f64) {
    r.total *= f;
    r.render_l2 *= f;
    r.render_perceptual *= f;
    r.reproj *= f;
    r.pose_rot *= f;
    r.pose_trans *= f;
}

/// Model, optimizer, RNG and step counter of a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    fixed: Option<MultiViewSample>,
    scenes: Vec<OnceLock<GaussianScene>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (mcfg, _) = cfg.effective();
        let model = Model::new(mcfg, cfg.seed)?;
        let opt = Adam::new(&model.params);
        let mut t = Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed),
            cfg,
            model,
            opt,
            step: 0,
            fixed: None,
            scenes: Vec::new(),
        };
        t.scenes = (0..t.cfg.data.scenes).map(|_| OnceLock::new()).collect();
        if t.cfg.data.fixed_sample {
            t.fixed = Some(t.sample_for(0, 0)?);
        }
        Ok(t)
    }

    /// Train on a caller-provided sample at every step instead of the
    /// configured data source.
    pub fn with_fixed_sample(mut self, sample: MultiViewSample) -> Self {
        self.fixed = Some(sample);
        self
    }

    pub fn fixed_sample(&self) -> Option<&MultiViewSample> {
        self.fixed.as_ref()
    }

    /// The sample for batch slot `b` of `step`, a pure function of the
    /// config.
    pub fn sample_for(&self, step: u64, b: usize) -> Result<MultiViewSample> {
        let d = &self.cfg.data;
        let key = self
            .cfg
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(step.wrapping_mul(1_000_003))
            .wrapping_add(b as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let idx = rng.gen_range(0..d.scenes);
        let scene = match self.scenes[idx].get() {
            Some(s) => s,
            None => {
                let s = gen_scene(&SceneSpec {
                    seed: d.scene.seed + idx as u64,
                    ..d.scene.clone()
                })?;
                self.scenes[idx].get_or_init(|| s)
            }
        };
        let sep = self.cfg.curriculum.sample(step, &mut rng);
        Ok(gen_sample(
            scene,
            &d.rig,
            d.n_context,
            d.n_target,
            sep,
            rng.gen(),
            &self.cfg.render,
        )?)
    }

    pub fn step_once(&mut self) -> Result<StepRecord> {
        let batch: Vec<MultiViewSample> = match &self.fixed {
            Some(s) => vec![s.clone(); self.cfg.batch_size],
            None => (0..self.cfg.batch_size)
                .map(|b| self.sample_for(self.step, b))
                .collect::<Result<_>>()?,
        };
        let (_, loss) = self.cfg.effective();
        let rec = train_step(
            &mut self.model,
            &mut self.opt,
            &batch,
            &self.cfg,
            &loss,
            self.step,
            &mut self.rng,
        )?;
        self.step += 1;
        Ok(rec)
    }

    pub fn checkpoint(&self) -> Result<Container> {
        let mut tensors = Vec::new();
        for (i, (name, t)) in self.model.params.iter().enumerate() {
            tensors.push((format!("param/{name}"), t.clone()));
            tensors.push((format!("adam.m/{name}"), self.opt.m[i].clone()));
            tensors.push((format!("adam.v/{name}"), self.opt.v[i].clone()));
        }
        let meta = serde_json::json!({
            "step": self.step,
            "adam_t": self.opt.t,
            "rng": serde_json::to_value(&self.rng)?,
            "config_hash": self.cfg.hash(),
            "config": serde_json::to_value(&self.cfg)?,
            "fixed_sample": self.fixed.as_ref().map(|s| s.seed),
        });
        Ok(Container { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)?;
        Ok(())
    }

    /// Restore a run. A caller-provided fixed sample is not stored in the
    /// checkpoint and must be re-attached with [`Trainer::with_fixed_sample`].
    pub fn resume(container: &Container) -> Result<Self> {
        let meta = &container.meta;
        let cfg: TrainConfig = serde_json::from_value(meta["config"].clone())?;
        if meta["config_hash"].as_str() != Some(cfg.hash().as_str()) {
            return Err(TrainError::Checkpoint("config hash mismatch".into()));
        }
        let mut t = Trainer::new(cfg)?;
        let get = |prefix: &str, name: &str| {
            container
                .get(&format!("{prefix}/{name}"))
                .cloned()
                .ok_or_else(|| TrainError::Checkpoint(format!("missing {prefix}/{name}")))
        };
        let names: Vec<String> = t.model.params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            t.model.params.set(name, get("param", name)?)?;
            t.opt.m[i] = get("adam.m", name)?;
            t.opt.v[i] = get("adam.v", name)?;
        }
        let field = |k: &str| {
            meta[k]
                .as_u64()
                .ok_or_else(|| TrainError::Checkpoint(format!("missing {k}")))
        };
        t.step = field("step")?;
        t.opt.t = field("adam_t")?;
        t.rng = serde_json::from_value(meta["rng"].clone())?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        Self::resume(&c)
    }
}

/// Load just the model from a training checkpoint.
pub fn load_model(path: &Path) -> Result<(Model, TrainConfig)> {
    let c = Container::load(path)?;
    let cfg: TrainConfig = serde_json::from_value(c.meta["config"].clone())?;
    let (mcfg, _) = cfg.effective();
    let mut model = Model::new(mcfg, cfg.seed)?;
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let t = c
            .get(&format!("param/{name}"))
            .ok_or_else(|| TrainError::Checkpoint(format!("missing param/{name}")))?;
        model.params.set(&name, t.clone())?;
    }
    Ok((model, cfg))
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub checkpoint: PathBuf,
    pub records: Vec<StepRecord>,
}

/// Run `trainer` until `cfg.steps`, writing `config.json`, `partition.json`,
/// `metrics.jsonl` and checkpoints to `out`. On a non-finite loss a final
/// checkpoint is still written before the error is returned.
pub fn fit_trainer(trainer: &mut Trainer, out: &Path) -> Result<FitResult> {
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&trainer.cfg)?,
    )?;
    std::fs::write(
        out.join("partition.json"),
        serde_json::to_string_pretty(&partition(&trainer.model.params))?,
    )?;
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("metrics.jsonl"))?;
    let mut records = Vec::new();
    while trainer.step < trainer.cfg.steps {
        let rec = match trainer.step_once() {
            Ok(r) => r,
            Err(e) => {
                trainer.save(&out.join("abort.ckpt"))?;
                return Err(e);
            }
        };
        if trainer.cfg.log_every > 0
            && (rec.step % trainer.cfg.log_every == 0 || trainer.step == trainer.cfg.steps)
        {
            writeln!(metrics, "{}", serde_json::to_string(&rec)?)?;
        }
        records.push(rec);
        let every = trainer.cfg.checkpoint_every;
        if every > 0 && trainer.step.is_multiple_of(every) && trainer.step < trainer.cfg.steps {
            trainer.save(&out.join(format!("step_{:06}.ckpt", trainer.step)))?;
        }
    }
    let checkpoint = out.join("final.ckpt");
    trainer.save(&checkpoint)?;
    Ok(FitResult {
        checkpoint,
        records,
    })
}

pub fn fit(cfg: TrainConfig, out: &Path) -> Result<FitResult> {
    let mut t = Trainer::new(cfg)?;
    fit_trainer(&mut t, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch_size: 1,
            log_every: 1,
            checkpoint_every: 0,
            model: ModelConfig {
                patch: 4,
                channels: 16,
                enc_depth: 1,
                dec_depth: 1,
                heads: 2,
                mlp_ratio: 2,
                height: 16,
                width: 16,
                gs_features: 4,
                pose_attn_layers: 1,
                ..ModelConfig::default()
            },
            data: DataConfig {
                scene: SceneSpec {
                    n_gaussians: 800,
                    ..SceneSpec::default()
                },
                rig: CameraRig {
                    width: 16,
                    height: 16,
                    ..CameraRig::default()
                },
                n_context: 3,
                n_target: 1,
                scenes: 2,
                fixed_sample: false,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ablation_switches() {
        let mut a = Ablation::default();
        a.set("R=off").unwrap();
        a.set("M=off").unwrap();
        assert!(!a.reproj && !a.mask && a.pose_token);
        assert!(a.set("X=off").is_err());
        assert!(a.set("R=maybe").is_err());
        assert!(a.set("R").is_err());
        let cfg = TrainConfig {
            ablation: a,
            ..tiny_config()
        };
        let (m, l) = cfg.effective();
        assert!(!m.mask_enabled);
        assert_eq!(l.w_reproj, 0.0);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(serde_json::from_str::<TrainConfig>("{\"stepz\": 3}").is_err());
        let cfg: TrainConfig = toml::from_str("steps = 7\n[loss]\nw_reproj = 0.5\n").unwrap();
        assert_eq!((cfg.steps, cfg.loss.w_reproj), (7, 0.5));
        assert!(TrainConfig {
            steps: 0,
            ..tiny_config()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr_other: 0.0,
            ..tiny_config()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn adam_matches_hand_computation() {
        let mut params = ParamStore::new();
        params
            .add("enc.w", Tensor::vector(vec![1.0, -2.0]))
            .unwrap();
        params.add("head.b", Tensor::vector(vec![0.5])).unwrap();
        let mut opt = Adam::new(&params);
        let grads = vec![Tensor::vector(vec![0.5, -1.0]), Tensor::vector(vec![2.0])];
        opt.step(&mut params, &grads, 0.1, 0.01);
        // First Adam step moves each entry by lr·sign(g) up to eps.
        let w = params.get(params.id("enc.w").unwrap()).data().to_vec();
        let b = params.get(params.id("head.b").unwrap()).data()[0];
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 1.9).abs() < 1e-7);
        assert!((b - 0.49).abs() < 1e-8);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut small = vec![Tensor::vector(vec![0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data()[0], 0.1);
    }

    #[test]
    fn partition_covers_every_parameter_once() {
        let t = Trainer::new(tiny_config()).unwrap();
        let p = partition(&t.model.params);
        assert_eq!(p.backbone.len() + p.other.len(), t.model.params.len());
        assert!(!p.backbone.is_empty() && !p.other.is_empty());
    }

    #[test]
    fn deterministic_runs_and_bitwise_resume() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            steps: 3,
            ..tiny_config()
        };
        let a = fit(cfg.clone(), &dir.path().join("a")).unwrap();
        let b = fit(cfg.clone(), &dir.path().join("b")).unwrap();
        let losses = |r: &FitResult| r.records.iter().map(|x| x.loss.total).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert!(losses(&a).iter().all(|v| v.is_finite()));
        let lines = std::fs::read_to_string(dir.path().join("a/metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 3);

        let mut t = Trainer::new(cfg).unwrap();
        t.step_once().unwrap();
        t.step_once().unwrap();
        let ckpt = dir.path().join("mid.ckpt");
        t.save(&ckpt).unwrap();
        let mut resumed = Trainer::load(&ckpt).unwrap();
        assert_eq!(resumed.step, 2);
        let next = resumed.step_once().unwrap();
        assert_eq!(next.loss.total.to_bits(), a.records[2].loss.total.to_bits());
    }

    #[test]
    fn single_step_fit_and_reproj_off() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = TrainConfig {
            steps: 1,
            ..tiny_config()
        };
        cfg.ablation.set("R=off").unwrap();
        let r = fit(cfg, dir.path()).unwrap();
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.records[0].loss.reproj, 0.0);
        let (model, _) = load_model(&r.checkpoint).unwrap();
        assert!(!model.params.is_empty());
    }
}
