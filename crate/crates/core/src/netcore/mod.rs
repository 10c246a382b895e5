//! The multi-view transformer: a per-view encoder, pose and intrinsics
//! tokens, a view-masked decoder in two flavors, and the Gaussian, point and
//! pose heads.
//!
//! Token layout per view is `[intrinsics?, pose?, image patches...]`. Context
//! views come first, targets after. Context queries never see target keys, so
//! everything produced for context views is independent of target pixels.

mod layers;
mod pose;
#[cfg(test)]
mod tests;

pub use pose::{canonicalize_on_tape, decode_pose10_on_tape};

use crate::geometry::{unit_homogeneous_weight, Intrinsics, PoseSE3, Vec3};
use crate::gsplat::{sh, GaussianScene};
use crate::tensor::{ParamBinding, ParamStore, Tape, Tensor, TensorError, Var};
use layers::Net;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Separate decoder, head and pose weights for the reference view.
    #[serde(rename = "v2")]
    Asymmetric,
    /// One set of weights for every view, alternating frame and global
    /// attention.
    #[serde(rename = "v2l")]
    Unified,
}

impl std::str::FromStr for Variant {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v2" => Ok(Variant::Asymmetric),
            "v2l" => Ok(Variant::Unified),
            other => Err(NetError::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub patch: usize,
    pub channels: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub height: usize,
    pub width: usize,
    pub n_max: usize,
    pub m_max: usize,
    pub sh_degree: usize,
    pub use_intrinsics_token: bool,
    pub use_pose_token: bool,
    /// Restrict context queries to context keys. Off only for ablations and
    /// as the negative control of the leakage audit.
    pub mask_enabled: bool,
    /// Hidden channels of the Gaussian head before the image skip.
    pub gs_features: usize,
    /// Self-attention layers over pose tokens in the unified pose head.
    pub pose_attn_layers: usize,
    /// Depth of the constant ray prior added to predicted centers.
    pub prior_depth: f64,
    /// Initial Gaussian scale (scene units).
    pub init_scale: f64,
    pub init_opacity: f64,
    /// Upper clamp for Gaussian scales.
    pub scene_diameter: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Asymmetric,
            patch: 8,
            channels: 128,
            enc_depth: 4,
            dec_depth: 4,
            heads: 4,
            mlp_ratio: 4,
            height: 64,
            width: 64,
            n_max: 4,
            m_max: 2,
            sh_degree: 1,
            use_intrinsics_token: true,
            use_pose_token: true,
            mask_enabled: true,
            gs_features: 8,
            pose_attn_layers: 4,
            prior_depth: 0.8,
            init_scale: 0.012,
            init_opacity: 0.88,
            scene_diameter: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NetError::Config(m));
        if self.patch == 0
            || !self.height.is_multiple_of(self.patch)
            || !self.width.is_multiple_of(self.patch)
        {
            return fail(format!(
                "image {}x{} is not divisible by patch {}",
                self.width, self.height, self.patch
            ));
        }
        if self.dec_depth == 0 {
            return fail("decoder depth must be at least 1".into());
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            ));
        }
        if !self.channels.is_multiple_of(4) {
            return fail("channels must be a multiple of 4 for the 2D positional encoding".into());
        }
        if self.sh_degree > sh::MAX_DEGREE {
            return fail(format!(
                "sh_degree {} exceeds {}",
                self.sh_degree,
                sh::MAX_DEGREE
            ));
        }
        if self.n_max == 0 || self.mlp_ratio == 0 || self.gs_features == 0 {
            return fail("n_max, mlp_ratio and gs_features must be positive".into());
        }
        let positive = [self.prior_depth, self.init_scale, self.scene_diameter];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return fail("prior_depth, init_scale and scene_diameter must be positive".into());
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return fail("init_opacity must lie in (0, 1)".into());
        }
        if self.init_scale > self.scene_diameter {
            return fail("init_scale exceeds scene_diameter".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn image_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Tokens before the image patches.
    pub fn prefix_tokens(&self) -> usize {
        usize::from(self.use_intrinsics_token) + usize::from(self.use_pose_token)
    }

    pub fn tokens_per_view(&self) -> usize {
        self.prefix_tokens() + self.image_tokens()
    }

    /// Raw Gaussian channels per pixel: quat, scale, opacity, SH.
    pub fn gs_channels(&self) -> usize {
        4 + 3 + 1 + 3 * sh::num_coeffs(self.sh_degree)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    Intrinsics,
    Pose,
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewRole {
    Context,
    Target,
}

/// Decoder input for all views: `tokens` is `[V, L, C]`.
#[derive(Clone, Debug)]
pub struct TokenSet {
    pub tokens: Var,
    pub roles: Vec<TokenRole>,
    pub views: Vec<ViewRole>,
}

/// View-level reachability: `allows(q, k)` says whether view `q` may attend
/// to view `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n_context: usize,
    n_views: usize,
    allow: Vec<bool>,
}

pub fn build_mask(n_context: usize, n_target: usize) -> Result<AttentionMask> {
    if n_context == 0 {
        return Err(NetError::Input(
            "at least one context view is required".into(),
        ));
    }
    let v = n_context + n_target;
    let allow = (0..v * v)
        .map(|i| {
            let (q, k) = (i / v, i % v);
            q >= n_context || k < n_context
        })
        .collect();
    Ok(AttentionMask {
        n_context,
        n_views: v,
        allow,
    })
}

impl AttentionMask {
    /// Every view sees every view.
    pub fn full(n_context: usize, n_target: usize) -> Self {
        let v = n_context + n_target;
        Self {
            n_context,
            n_views: v,
            allow: vec![true; v * v],
        }
    }

    pub fn n_context(&self) -> usize {
        self.n_context
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allow[query * self.n_views + key]
    }

    /// Additive token mask (`0` or `-inf`) of shape
    /// `[|query_views|·tokens, V·tokens]`.
    pub fn additive(&self, query_views: Range<usize>, tokens: usize) -> Tensor {
        let cols = self.n_views * tokens;
        let rows = query_views.len() * tokens;
        Tensor::from_fn([rows, cols], |i| {
            let q = query_views.start + (i / cols) / tokens;
            let k = (i % cols) / tokens;
            if self.allows(q, k) {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Context and target views; target poses come from the same pass.
    Train,
    /// Context views only.
    Infer,
}

/// Everything a forward pass produces, as tape variables.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub n_context: usize,
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    pub sh_degree: usize,
    /// Canonical-frame centers `[N·H·W, 3]`, view-major then row-major.
    pub mu: Var,
    pub quat: Var,
    pub scale: Var,
    pub opacity: Var,
    pub sh: Var,
    /// Raw head outputs before canonicalization, `[V, 10]`.
    pub codes: Var,
    /// Canonical poses: `rot [V,3,3]`, `trans [V,3]`. View 0 is exactly the
    /// identity.
    pub rot: Var,
    pub trans: Var,
}

impl ForwardOutput {
    pub fn pixels_per_view(&self) -> usize {
        self.height * self.width
    }

    pub fn view_rot(&self, tape: &mut Tape, v: usize) -> Result<Var> {
        let r = tape.slice(self.rot, 0, v, v + 1)?;
        Ok(tape.reshape(r, &[3, 3])?)
    }

    pub fn view_trans(&self, tape: &mut Tape, v: usize) -> Result<Var> {
        let t = tape.slice(self.trans, 0, v, v + 1)?;
        Ok(tape.reshape(t, &[3])?)
    }

    /// Centers of context view `v` as `[H·W, 3]`.
    pub fn view_mu(&self, tape: &mut Tape, v: usize) -> Result<Var> {
        let hw = self.pixels_per_view();
        Ok(tape.slice(self.mu, 0, v * hw, (v + 1) * hw)?)
    }

    pub fn poses(&self, tape: &Tape) -> Vec<PoseSE3> {
        let r = tape.value(self.rot).data();
        let t = tape.value(self.trans).data();
        (0..self.n_views)
            .map(|v| {
                PoseSE3::new(
                    crate::geometry::Mat3::from_row_slice(&r[v * 9..v * 9 + 9]),
                    Vec3::new(t[v * 3], t[v * 3 + 1], t[v * 3 + 2]),
                )
            })
            .collect()
    }

    pub fn scene(&self, tape: &Tape) -> GaussianScene {
        fn rows<const K: usize>(t: &Tensor) -> Vec<[f64; K]> {
            t.data()
                .chunks_exact(K)
                .map(|c| c.try_into().expect("chunk"))
                .collect()
        }
        GaussianScene {
            sh_degree: self.sh_degree,
            mu: rows::<3>(tape.value(self.mu)),
            quat: rows::<4>(tape.value(self.quat)),
            scale: rows::<3>(tape.value(self.scale)),
            opacity: tape.value(self.opacity).data().to_vec(),
            sh: tape.value(self.sh).data().to_vec(),
        }
    }

    /// The context-view Gaussian tensors, in a fixed order.
    pub fn gaussian_vars(&self) -> [(&'static str, Var); 5] {
        [
            ("mu", self.mu),
            ("quat", self.quat),
            ("scale", self.scale),
            ("opacity", self.opacity),
            ("sh", self.sh),
        ]
    }
}

/// Parameters whose names start with these prefixes form the backbone group.
pub const BACKBONE_PREFIXES: [&str; 2] = ["enc.", "dec."];

pub fn is_backbone(name: &str) -> bool {
    BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

const INIT_STD: f64 = 0.02;

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<()> {
        let t = Tensor::randn(shape.to_vec(), std, &mut self.rng);
        self.store.add(name, t)?;
        Ok(())
    }

    fn tensor(&mut self, name: String, t: Tensor) -> Result<()> {
        self.store.add(name, t)?;
        Ok(())
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, std: f64) -> Result<()> {
        self.normal(format!("{prefix}.w"), &[fan_in, fan_out], std)?;
        self.tensor(format!("{prefix}.b"), Tensor::zeros([fan_out]))
    }

    fn attention(&mut self, prefix: &str, c: usize) -> Result<()> {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{p}"), c, c, INIT_STD)?;
        }
        Ok(())
    }

    fn mlp(&mut self, prefix: &str, c: usize, ratio: usize) -> Result<()> {
        self.linear(&format!("{prefix}.fc1"), c, c * ratio, INIT_STD)?;
        self.linear(&format!("{prefix}.fc2"), c * ratio, c, INIT_STD)
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = config.channels;
        let p = config.patch;
        let r = config.mlp_ratio;

        init.linear("enc.embed", 3 * p * p, c, INIT_STD)?;
        for l in 0..config.enc_depth {
            init.attention(&format!("enc.{l}.attn"), c)?;
            init.mlp(&format!("enc.{l}.mlp"), c, r)?;
        }

        if config.use_intrinsics_token {
            init.linear("tok.intrinsics", 4, c, INIT_STD)?;
        }
        if config.use_pose_token {
            match config.variant {
                Variant::Asymmetric => init.normal("tok.pose".into(), &[c], INIT_STD)?,
                Variant::Unified => {
                    init.normal("tok.pose_ref".into(), &[c], INIT_STD)?;
                    init.normal("tok.pose_src".into(), &[c], INIT_STD)?;
                }
            }
        }

        for i in 0..config.dec_depth {
            match config.variant {
                Variant::Asymmetric => {
                    for g in ["ref", "src"] {
                        init.attention(&format!("dec.{i}.{g}.self"), c)?;
                        init.attention(&format!("dec.{i}.{g}.cross"), c)?;
                        init.mlp(&format!("dec.{i}.{g}.mlp"), c, r)?;
                    }
                }
                Variant::Unified => {
                    init.attention(&format!("dec.{i}.frame"), c)?;
                    init.attention(&format!("dec.{i}.global"), c)?;
                    init.mlp(&format!("dec.{i}.mlp"), c, r)?;
                }
            }
        }

        let fused = (config.dec_depth + 1) * c;
        let n_raw = config.gs_channels();
        let heads: &[&str] = match config.variant {
            Variant::Asymmetric => &["head.ref", "head.src"],
            Variant::Unified => &["head"],
        };
        for h in heads {
            init.linear(&format!("{h}.points"), fused, p * p * 3, 1e-3)?;
            init.linear(
                &format!("{h}.gs"),
                fused,
                p * p * config.gs_features,
                INIT_STD,
            )?;
            let w = gs_out_weight(&config, &mut init.rng);
            init.tensor(format!("{h}.gs_out.w"), w)?;
            init.tensor(format!("{h}.gs_out.b"), gs_out_bias(&config, n_raw))?;
        }

        let identity_bias = {
            let mut b = vec![0.0; 10];
            b[0] = 1.0;
            b[4] = 1.0;
            b[9] = unit_homogeneous_weight();
            Tensor::vector(b)
        };
        match config.variant {
            Variant::Asymmetric => {
                for g in ["pose.ref", "pose.src"] {
                    init.linear(&format!("{g}.fc1"), c, c, INIT_STD)?;
                    init.linear(&format!("{g}.fc2"), c, c, INIT_STD)?;
                    init.normal(format!("{g}.fc3.w"), &[c, 10], 1e-4)?;
                    init.tensor(format!("{g}.fc3.b"), identity_bias.clone())?;
                }
            }
            Variant::Unified => {
                for l in 0..config.pose_attn_layers {
                    init.attention(&format!("pose.{l}.attn"), c)?;
                    init.mlp(&format!("pose.{l}.mlp"), c, r)?;
                }
                init.normal("pose.out.w".into(), &[c, 10], 1e-4)?;
                init.tensor("pose.out.b".into(), identity_bias)?;
            }
        }
        Ok(Self { config, params })
    }

    fn net<'a>(&'a self, tape: &'a mut Tape, bind: &'a ParamBinding) -> Net<'a> {
        Net {
            tape,
            params: &self.params,
            bind,
            heads: self.config.heads,
        }
    }

    /// Per-view image tokens `[V, n, C]` from images `[H, W, 3]`.
    pub fn encode(&self, tape: &mut Tape, bind: &ParamBinding, images: &[Var]) -> Result<Var> {
        let cfg = &self.config;
        if images.is_empty() {
            return Err(NetError::Input("no images".into()));
        }
        for &im in images {
            if tape.shape(im) != [cfg.height, cfg.width, 3] {
                return Err(NetError::Input(format!(
                    "image shape {:?} does not match {}x{}x3",
                    tape.shape(im),
                    cfg.height,
                    cfg.width
                )));
            }
        }
        let v = images.len();
        let p = cfg.patch;
        let (gh, gw) = cfg.grid();
        let mut net = self.net(tape, bind);
        let x = net.stack(images)?;
        let x = net.tape.reshape(x, &[v, gh, p, gw, p, 3])?;
        let x = net.tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
        let x = net.tape.reshape(x, &[v, gh * gw, p * p * 3])?;
        let x = net.linear(x, "enc.embed")?;
        let pos = net.tape.constant(positional_encoding(gh, gw, cfg.channels));
        let mut x = net.tape.add(x, pos)?;
        for l in 0..cfg.enc_depth {
            x = net.self_block(x, &format!("enc.{l}.attn"), None)?;
            x = net.mlp_block(x, &format!("enc.{l}.mlp"))?;
        }
        Ok(x)
    }

    /// Prepend intrinsics and pose tokens to the encoder output.
    pub fn assemble(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        features: Var,
        intrinsics: Option<&[Intrinsics]>,
        n_context: usize,
    ) -> Result<TokenSet> {
        let cfg = &self.config;
        let shape = tape.shape(features).to_vec();
        let (v, n, c) = (shape[0], shape[1], shape[2]);
        let mut net = self.net(tape, bind);
        let mut parts = Vec::new();
        let mut roles = Vec::new();
        if cfg.use_intrinsics_token {
            let ks = intrinsics.ok_or_else(|| {
                NetError::Input("intrinsics token enabled but no intrinsics".into())
            })?;
            if ks.len() != v {
                return Err(NetError::Input(format!(
                    "{} intrinsics for {v} views",
                    ks.len()
                )));
            }
            let data: Vec<f64> = ks.iter().flat_map(|k| k.normalized()).collect();
            let kin = net.tape.constant(Tensor::new([v, 1, 4], data)?);
            parts.push(net.linear(kin, "tok.intrinsics")?);
            roles.push(TokenRole::Intrinsics);
        }
        if cfg.use_pose_token {
            let tokens: Vec<Var> = match cfg.variant {
                Variant::Asymmetric => vec![net.p("tok.pose")?; v],
                Variant::Unified => {
                    let r = net.p("tok.pose_ref")?;
                    let s = net.p("tok.pose_src")?;
                    (0..v).map(|i| if i == 0 { r } else { s }).collect()
                }
            };
            let tokens: Vec<Var> = tokens
                .into_iter()
                .map(|t| net.tape.reshape(t, &[1, 1, c]))
                .collect::<Result<_, _>>()?;
            parts.push(net.tape.concat(&tokens, 0)?);
            roles.push(TokenRole::Pose);
        }
        parts.push(features);
        roles.extend(std::iter::repeat_n(TokenRole::Image, n));
        let tokens = net.tape.concat(&parts, 1)?;
        let views = (0..v)
            .map(|i| {
                if i < n_context {
                    ViewRole::Context
                } else {
                    ViewRole::Target
                }
            })
            .collect();
        Ok(TokenSet {
            tokens,
            roles,
            views,
        })
    }

    /// Decoder states `G_0..G_B`, each `[V, L, C]`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        tokens: &TokenSet,
        mask: Option<&AttentionMask>,
    ) -> Result<Vec<Var>> {
        let v = tokens.views.len();
        let l = tokens.roles.len();
        if let Some(m) = mask {
            if m.n_views() != v {
                return Err(NetError::Input(format!(
                    "mask covers {} views, tokens {v}",
                    m.n_views()
                )));
            }
        }
        let mut net = self.net(tape, bind);
        let mut states = vec![tokens.tokens];
        let mut x = tokens.tokens;
        for i in 0..self.config.dec_depth {
            x = match self.config.variant {
                Variant::Asymmetric => {
                    let groups: Vec<(Range<usize>, String)> = [(0..1, "ref"), (1..v, "src")]
                        .into_iter()
                        .filter(|(r, _)| !r.is_empty())
                        .map(|(r, g)| (r, format!("dec.{i}.{g}")))
                        .collect();
                    let mut parts = Vec::new();
                    for (r, pre) in &groups {
                        let xg = net.tape.slice(x, 0, r.start, r.end)?;
                        parts.push(net.self_block(xg, &format!("{pre}.self"), None)?);
                    }
                    x = net.tape.concat(&parts, 0)?;
                    let memory = net.tape.layer_norm(x, crate::tensor::LAYER_NORM_EPS)?;
                    let memory = net
                        .tape
                        .reshape(memory, &[1, v * l, self.config.channels])?;
                    let mut deltas = Vec::new();
                    for (r, pre) in &groups {
                        let m = mask.map(|m| m.additive(r.clone(), l));
                        deltas.push(net.cross(
                            x,
                            memory,
                            r.clone(),
                            l,
                            &format!("{pre}.cross"),
                            m.as_ref(),
                        )?);
                    }
                    let delta = net.tape.concat(&deltas, 0)?;
                    x = net.tape.add(x, delta)?;
                    let mut parts = Vec::new();
                    for (r, pre) in &groups {
                        let xg = net.tape.slice(x, 0, r.start, r.end)?;
                        parts.push(net.mlp_block(xg, &format!("{pre}.mlp"))?);
                    }
                    net.tape.concat(&parts, 0)?
                }
                Variant::Unified => {
                    x = net.self_block(x, &format!("dec.{i}.frame"), None)?;
                    let m = mask.map(|m| m.additive(0..v, l));
                    x = net.global_block(x, &format!("dec.{i}.global"), m.as_ref())?;
                    net.mlp_block(x, &format!("dec.{i}.mlp"))?
                }
            };
            states.push(x);
        }
        Ok(states)
    }

    /// Image-token features of views `views`, all decoder states fused along
    /// channels: `[|views|, n, (B+1)·C]`.
    pub fn fuse_states(&self, tape: &mut Tape, states: &[Var], views: Range<usize>) -> Result<Var> {
        let pre = self.config.prefix_tokens();
        let l = self.config.tokens_per_view();
        let mut parts = Vec::with_capacity(states.len());
        for &s in states {
            let s = tape.slice(s, 0, views.start, views.end)?;
            let s = tape.slice(s, 1, pre, l)?;
            parts.push(tape.layer_norm(s, crate::tensor::LAYER_NORM_EPS)?);
        }
        Ok(tape.concat(&parts, 2)?)
    }

    fn head_prefix(&self, head: usize) -> Result<&'static str> {
        match (self.config.variant, head) {
            (Variant::Asymmetric, 0) => Ok("head.ref"),
            (Variant::Asymmetric, 1) => Ok("head.src"),
            (Variant::Unified, 0) => Ok("head"),
            _ => Err(NetError::Input(format!("no head {head} for this variant"))),
        }
    }

    /// Per-pixel centers `[n, H, W, 3]` from fused features, before the ray
    /// prior. `head` selects the reference (0) or source (1) head of the
    /// asymmetric variant.
    pub fn point_head(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        fused: Var,
        head: usize,
    ) -> Result<Var> {
        let pre = self.head_prefix(head)?;
        let mut net = self.net(tape, bind);
        let y = net.linear(fused, &format!("{pre}.points"))?;
        net.unpatchify(y, &self.config, 3)
    }

    /// Raw per-pixel Gaussian channels `[n, H, W, gs_channels]`.
    pub fn gs_head(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        fused: Var,
        images: Var,
        head: usize,
    ) -> Result<Var> {
        let pre = self.head_prefix(head)?;
        let cfg = &self.config;
        let n = tape.shape(fused)[0];
        if tape.shape(images) != [n, cfg.height, cfg.width, 3] {
            return Err(NetError::Input(format!(
                "skip images have shape {:?}",
                tape.shape(images)
            )));
        }
        let mut net = self.net(tape, bind);
        let y = net.linear(fused, &format!("{pre}.gs"))?;
        let y = net.unpatchify(y, cfg, cfg.gs_features)?;
        let y = net.tape.gelu(y)?;
        let y = net.tape.concat(&[y, images], 3)?;
        net.linear(y, &format!("{pre}.gs_out"))
    }

    /// Pose codes `[V, 10]` from per-view pose features `[V, C]`.
    pub fn pose_head(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        features: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let v = tape.shape(features)[0];
        let c = self.config.channels;
        let mut net = self.net(tape, bind);
        match self.config.variant {
            Variant::Asymmetric => {
                let mut parts = Vec::new();
                for (r, pre) in [(0..1, "pose.ref"), (1..v, "pose.src")] {
                    if r.is_empty() {
                        continue;
                    }
                    let x = net.tape.slice(features, 0, r.start, r.end)?;
                    let x = net.tape.layer_norm(x, crate::tensor::LAYER_NORM_EPS)?;
                    let x = net.linear(x, &format!("{pre}.fc1"))?;
                    let x = net.tape.gelu(x)?;
                    let x = net.linear(x, &format!("{pre}.fc2"))?;
                    let x = net.tape.gelu(x)?;
                    parts.push(net.linear(x, &format!("{pre}.fc3"))?);
                }
                Ok(net.tape.concat(&parts, 0)?)
            }
            Variant::Unified => {
                let mut x = net.tape.reshape(features, &[1, v, c])?;
                let m = mask.map(|m| m.additive(0..v, 1));
                for l in 0..self.config.pose_attn_layers {
                    x = net.global_block(x, &format!("pose.{l}.attn"), m.as_ref())?;
                    x = net.mlp_block(x, &format!("pose.{l}.mlp"))?;
                }
                let x = net.tape.reshape(x, &[v, c])?;
                let x = net.tape.layer_norm(x, crate::tensor::LAYER_NORM_EPS)?;
                net.linear(x, "pose.out")
            }
        }
    }

    /// Full pass. `images` lists context views then targets, each
    /// `[H, W, 3]`; `intrinsics` has one entry per image.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        images: &[Var],
        intrinsics: &[Intrinsics],
        n_context: usize,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let v = images.len();
        if n_context == 0 || n_context > v {
            return Err(NetError::Input(format!("{n_context} context views of {v}")));
        }
        let m = v - n_context;
        match mode {
            Mode::Train if m == 0 => {
                return Err(NetError::Input(
                    "train mode needs at least one target".into(),
                ))
            }
            Mode::Infer if m > 0 => {
                return Err(NetError::Input("infer mode takes no targets".into()))
            }
            _ => {}
        }
        if n_context > cfg.n_max || m > cfg.m_max {
            return Err(NetError::Input(format!(
                "{n_context} context / {m} target views exceed limits {} / {}",
                cfg.n_max, cfg.m_max
            )));
        }
        if intrinsics.len() != v {
            return Err(NetError::Input(format!(
                "{} intrinsics for {v} views",
                intrinsics.len()
            )));
        }
        for k in intrinsics {
            if k.width != cfg.width || k.height != cfg.height {
                return Err(NetError::Input(
                    "intrinsics do not match the image size".into(),
                ));
            }
        }

        let features = self.encode(tape, bind, images)?;
        let tokens = self.assemble(tape, bind, features, Some(intrinsics), n_context)?;
        let mask = if cfg.mask_enabled {
            build_mask(n_context, m)?
        } else {
            AttentionMask::full(n_context, m)
        };
        let states = self.decode(tape, bind, &tokens, Some(&mask))?;
        let last = *states.last().expect("at least one block");

        let pose_features = if cfg.use_pose_token {
            let at = tokens
                .roles
                .iter()
                .position(|r| *r == TokenRole::Pose)
                .expect("pose token present");
            let x = tape.slice(last, 1, at, at + 1)?;
            tape.reshape(x, &[v, cfg.channels])?
        } else {
            let pre = cfg.prefix_tokens();
            let x = tape.slice(last, 1, pre, cfg.tokens_per_view())?;
            tape.mean_axis(x, 1, false)?
        };
        let codes = self.pose_head(tape, bind, pose_features, Some(&mask))?;
        let (rot, trans) = decode_pose10_on_tape(tape, codes)?;
        let (rot, trans) = canonicalize_on_tape(tape, rot, trans)?;

        let groups: Vec<(Range<usize>, usize)> = match cfg.variant {
            Variant::Asymmetric => vec![(0..1, 0), (1..n_context, 1)],
            Variant::Unified => vec![(0..n_context, 0)],
        };
        let mut mus = Vec::new();
        let mut raws = Vec::new();
        for (r, head) in groups.into_iter().filter(|(r, _)| !r.is_empty()) {
            let fused = self.fuse_states(tape, &states, r.clone())?;
            let skip: Vec<Var> = images[r.clone()].to_vec();
            let skip = self.net(tape, bind).stack(&skip)?;
            let mu = self.point_head(tape, bind, fused, head)?;
            let prior = tape.constant(ray_prior(&intrinsics[r.clone()], cfg.prior_depth));
            mus.push(tape.add(mu, prior)?);
            raws.push(self.gs_head(tape, bind, fused, skip, head)?);
        }
        let hw = cfg.height * cfg.width;
        let n_pix = n_context * hw;
        let mu = tape.concat(&mus, 0)?;
        let mu = tape.reshape(mu, &[n_pix, 3])?;
        let raw = tape.concat(&raws, 0)?;
        let raw = tape.reshape(raw, &[n_pix, cfg.gs_channels()])?;
        let (quat, scale, opacity, sh) = activate_on_tape(tape, raw, cfg.scene_diameter)?;
        Ok(ForwardOutput {
            n_context,
            n_views: v,
            height: cfg.height,
            width: cfg.width,
            sh_degree: cfg.sh_degree,
            mu,
            quat,
            scale,
            opacity,
            sh,
            codes,
            rot,
            trans,
        })
    }
}

/// Raw head channels `[n, 8 + 3K]` to `(quat, scale, opacity, sh)`: unit
/// quaternion, `exp` scale clamped to `[1e-6, diameter]`, sigmoid opacity,
/// SH unchanged.
pub fn activate_on_tape(tape: &mut Tape, raw: Var, diameter: f64) -> Result<(Var, Var, Var, Var)> {
    let c = tape.shape(raw)[1];
    let n = tape.shape(raw)[0];
    let q = tape.slice(raw, 1, 0, 4)?;
    let q2 = tape.mul(q, q)?;
    let norm = tape.sum_axis(q2, 1, true)?;
    let norm = tape.add_scalar(norm, 1e-12)?;
    let norm = tape.sqrt(norm)?;
    let quat = tape.div(q, norm)?;
    let s = tape.slice(raw, 1, 4, 7)?;
    let s = tape.exp(s)?;
    let scale = tape.clamp(s, 1e-6, diameter)?;
    let o = tape.slice(raw, 1, 7, 8)?;
    let o = tape.sigmoid(o)?;
    let opacity = tape.reshape(o, &[n])?;
    let sh = tape.slice(raw, 1, 8, c)?;
    Ok((quat, scale, opacity, sh))
}

/// Fixed 2D sinusoidal encoding `[gh·gw, C]`: a quarter of the channels each
/// for `sin/cos` of the column and row index.
pub fn positional_encoding(gh: usize, gw: usize, c: usize) -> Tensor {
    let q = c / 4;
    Tensor::from_fn([gh * gw, c], |i| {
        let (tok, ch) = (i / c, i % c);
        let (row, col) = ((tok / gw) as f64, (tok % gw) as f64);
        let band = ch / q;
        let k = (ch % q) as f64;
        let omega = 1.0 / 10000f64.powf(k / q as f64);
        match band {
            0 => (col * omega).sin(),
            1 => (col * omega).cos(),
            2 => (row * omega).sin(),
            _ => (row * omega).cos(),
        }
    })
}

/// `depth · K⁻¹ [u, v, 1]` at every pixel center, `[n, H, W, 3]`.
pub fn ray_prior(intrinsics: &[Intrinsics], depth: f64) -> Tensor {
    let (w, h) = intrinsics
        .first()
        .map(|k| (k.width, k.height))
        .unwrap_or((0, 0));
    let mut data = Vec::with_capacity(intrinsics.len() * h * w * 3);
    for k in intrinsics {
        for y in 0..h {
            for x in 0..w {
                let p = Intrinsics::pixel_center(x, y);
                let r = k.ray(p.x, p.y) * depth;
                data.extend_from_slice(&[r.x, r.y, r.z]);
            }
        }
    }
    Tensor::new([intrinsics.len(), h, w, 3], data).expect("consistent shape")
}

/// The final Gaussian projection maps the image skip onto the SH DC
/// coefficients so that initial splat colors reproduce the input pixels.
fn gs_out_weight(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let f = cfg.gs_features;
    let n = cfg.gs_channels();
    let mut w = Tensor::randn([f + 3, n], 1e-3, rng);
    let data = w.data_mut();
    for c in 0..3 {
        for j in 0..n {
            data[(f + c) * n + j] = if j == 8 + c { 1.0 / sh::C0 } else { 0.0 };
        }
    }
    w
}

fn gs_out_bias(cfg: &ModelConfig, n: usize) -> Tensor {
    let mut b = vec![0.0; n];
    b[0] = 1.0;
    let ls = cfg.init_scale.ln();
    b[4..7].copy_from_slice(&[ls, ls, ls]);
    b[7] = (cfg.init_opacity / (1.0 - cfg.init_opacity)).ln();
    for c in 0..3 {
        b[8 + c] = -0.5 / sh::C0;
    }
    Tensor::vector(b)
}

/// Indices of the context views kept by multi-view dropout. The first and
/// last view always stay; intermediate views stay with probability `p_keep`.
pub fn dropout_indices<R: Rng + ?Sized>(n: usize, p_keep: f64, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(NetError::Input("no context views".into()));
    }
    if !(0.0..=1.0).contains(&p_keep) {
        return Err(NetError::Config(format!("p_keep {p_keep} outside [0, 1]")));
    }
    if n <= 2 {
        return Ok((0..n).collect());
    }
    let mut keep = vec![0];
    for i in 1..n - 1 {
        if rng.gen_bool(p_keep) {
            keep.push(i);
        }
    }
    keep.push(n - 1);
    Ok(keep)
}

pub fn multi_view_dropout<T: Clone, R: Rng + ?Sized>(
    views: &[T],
    p_keep: f64,
    rng: &mut R,
) -> Result<Vec<T>> {
    Ok(dropout_indices(views.len(), p_keep, rng)?
        .into_iter()
        .map(|i| views[i].clone())
        .collect())
}
