//! Desk-scale vision transformer with a registry of quantizable layers and
//! hooks where fake-quantization, reparameterization folding, and relevance
//! capture attach.
//!
//! Patch embedding is non-overlapping patch flattening followed by a shared
//! linear map. Classification mean-pools image tokens; there is no CLS token.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Precision, Var};
use crate::quant::QuantParams;
use crate::rnd;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    PatchEmbed,
    Qkv,
    MatMul1,
    PostSoftmax,
    MatMul2,
    Projection,
    Fc1,
    PostGelu,
    Fc2,
    Head,
    Ln1,
    Ln2,
}

impl LayerKind {
    /// Quantizable layer kinds in registry order (LN sites are folding
    /// targets, not quantized layers).
    pub const QUANTIZED: [LayerKind; 10] = [
        LayerKind::PatchEmbed,
        LayerKind::Qkv,
        LayerKind::MatMul1,
        LayerKind::PostSoftmax,
        LayerKind::MatMul2,
        LayerKind::Projection,
        LayerKind::Fc1,
        LayerKind::PostGelu,
        LayerKind::Fc2,
        LayerKind::Head,
    ];

    /// Kinds that repeat per transformer block.
    pub const PER_BLOCK: [LayerKind; 8] = [
        LayerKind::Qkv,
        LayerKind::MatMul1,
        LayerKind::PostSoftmax,
        LayerKind::MatMul2,
        LayerKind::Projection,
        LayerKind::Fc1,
        LayerKind::PostGelu,
        LayerKind::Fc2,
    ];

    pub fn token(&self) -> &'static str {
        match self {
            LayerKind::PatchEmbed => "patch_embed",
            LayerKind::Qkv => "qkv",
            LayerKind::MatMul1 => "matmul1",
            LayerKind::PostSoftmax => "post_softmax",
            LayerKind::MatMul2 => "matmul2",
            LayerKind::Projection => "proj",
            LayerKind::Fc1 => "fc1",
            LayerKind::PostGelu => "post_gelu",
            LayerKind::Fc2 => "fc2",
            LayerKind::Head => "head",
            LayerKind::Ln1 => "ln1",
            LayerKind::Ln2 => "ln2",
        }
    }

    pub fn from_token(s: &str) -> Option<LayerKind> {
        Some(match s {
            "patch_embed" => LayerKind::PatchEmbed,
            "qkv" => LayerKind::Qkv,
            "matmul1" => LayerKind::MatMul1,
            "post_softmax" => LayerKind::PostSoftmax,
            "matmul2" => LayerKind::MatMul2,
            "proj" => LayerKind::Projection,
            "fc1" => LayerKind::Fc1,
            "post_gelu" => LayerKind::PostGelu,
            "fc2" => LayerKind::Fc2,
            "head" => LayerKind::Head,
            "ln1" => LayerKind::Ln1,
            "ln2" => LayerKind::Ln2,
            _ => return None,
        })
    }

    /// True for sites outside the transformer blocks (block index is a 0
    /// sentinel for these).
    pub fn outside_blocks(&self) -> bool {
        matches!(self, LayerKind::PatchEmbed | LayerKind::Head)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId {
    pub block: usize,
    pub kind: LayerKind,
}

impl LayerId {
    pub fn new(block: usize, kind: LayerKind) -> Self {
        let block = if kind.outside_blocks() { 0 } else { block };
        LayerId { block, kind }
    }

    pub fn parse(s: &str) -> Option<LayerId> {
        if let Some(kind) = LayerKind::from_token(s) {
            if kind.outside_blocks() {
                return Some(LayerId::new(0, kind));
            }
            return None;
        }
        let rest = s.strip_prefix('b')?;
        let (num, kind) = rest.split_once('.')?;
        Some(LayerId::new(
            num.parse().ok()?,
            LayerKind::from_token(kind)?,
        ))
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind.outside_blocks() {
            write!(f, "{}", self.kind.token())
        } else {
            write!(f, "b{}.{}", self.block, self.kind.token())
        }
    }
}

/// Which value at a site a quantizer binds to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Weight,
    Act,
    OperandA,
    OperandB,
}

impl Slot {
    pub fn token(&self) -> &'static str {
        match self {
            Slot::Weight => "w",
            Slot::Act => "act",
            Slot::OperandA => "a",
            Slot::OperandB => "b",
        }
    }
}

pub fn site_key(id: LayerId, slot: Slot) -> String {
    format!("{}.{}", id, slot.token())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub blocks: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub tokens: usize,
    pub classes: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // default run profile: large enough for measurable per-layer
        // quantization differences, small enough for minutes-scale runs
        ModelConfig {
            blocks: 4,
            embed_dim: 64,
            heads: 4,
            mlp_dim: 128,
            tokens: 64,
            classes: 10,
            patch_size: 2,
            image_size: 16,
            channels: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.blocks,
            self.embed_dim,
            self.heads,
            self.mlp_dim,
            self.patch_size,
            self.image_size,
            self.channels,
        ];
        if positive.iter().any(|&d| d == 0) || self.tokens < 2 || self.classes < 2 {
            return Err(Error::Config(format!("non-positive model dimension: {self:?}")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        let per_side = self.image_size / self.patch_size;
        if self.tokens != per_side * per_side {
            return Err(Error::Config(format!(
                "tokens {} must equal (image_size/patch_size)^2 = {}",
                self.tokens,
                per_side * per_side
            )));
        }
        Ok(())
    }
}

/// Weight table keyed by canonical tensor names; immutable during forward.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyViT {
    pub config: ModelConfig,
    pub weights: BTreeMap<String, Tensor>,
}

/// Canonical weight-tensor names in construction order.
pub fn weight_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["patch.w".into(), "patch.b".into(), "pos".into()];
    for b in 0..config.blocks {
        for n in [
            "ln1.g", "ln1.b", "qkv.w", "qkv.b", "proj.w", "proj.b", "ln2.g", "ln2.b", "fc1.w",
            "fc1.b", "fc2.w", "fc2.b",
        ] {
            names.push(format!("b{b}.{n}"));
        }
    }
    names.push("head.w".into());
    names.push("head.b".into());
    names
}

fn weight_shape(config: &ModelConfig, name: &str) -> Vec<usize> {
    let d = config.embed_dim;
    let df = config.mlp_dim;
    let suffix = name.rsplit_once('.').map(|(_, s)| s).unwrap_or(name);
    let stem = name
        .rsplit_once('.')
        .map(|(p, _)| p.rsplit_once('.').map(|(_, k)| k).unwrap_or(p))
        .unwrap_or(name);
    match (stem, suffix) {
        ("patch", "w") => vec![config.patch_dim(), d],
        ("patch", "b") => vec![d],
        (_, _) if name == "pos" => vec![config.tokens, d],
        ("ln1", _) | ("ln2", _) => vec![d],
        ("qkv", "w") => vec![d, 3 * d],
        ("qkv", "b") => vec![3 * d],
        ("proj", "w") => vec![d, d],
        ("proj", "b") => vec![d],
        ("fc1", "w") => vec![d, df],
        ("fc1", "b") => vec![df],
        ("fc2", "w") => vec![df, d],
        ("fc2", "b") => vec![d],
        ("head", "w") => vec![d, config.classes],
        ("head", "b") => vec![config.classes],
        _ => panic!("unknown weight name {name}"),
    }
}

/// Deterministic seeded initialization: weight matrices and the positional
/// table are N(0, 1/sqrt(D)); biases zero; LayerNorm affine starts at
/// gamma = 1, beta = 0.
pub fn init_weights(config: &ModelConfig) -> Result<ToyViT> {
    config.validate()?;
    let mut rng = rnd::rng_from_seed(config.seed);
    let std = 1.0 / (config.embed_dim as f64).sqrt();
    let mut weights = BTreeMap::new();
    for name in weight_names(config) {
        let shape = weight_shape(config, &name);
        let n: usize = shape.iter().product();
        let t = if name.ends_with(".b") && !name.ends_with("ln1.b") && !name.ends_with("ln2.b") {
            Tensor::zeros(shape)
        } else if name.ends_with("ln1.g") || name.ends_with("ln2.g") {
            Tensor::filled(shape, 1.0)
        } else if name.ends_with("ln1.b") || name.ends_with("ln2.b") {
            Tensor::zeros(shape)
        } else {
            Tensor::new(shape, rnd::normal_vec(&mut rng, n, std))?
        };
        weights.insert(name, t);
    }
    Ok(ToyViT { config: *config, weights })
}

impl ToyViT {
    pub fn weight(&self, name: &str) -> &Tensor {
        self.weights
            .get(name)
            .unwrap_or_else(|| panic!("missing weight {name}"))
    }

    pub fn weight_mut(&mut self, name: &str) -> &mut Tensor {
        self.weights
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing weight {name}"))
    }
}

/// Per-site quantizer bindings; a site key appears at most once.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub sites: BTreeMap<String, QuantParams>,
}

impl QuantPlan {
    pub fn get(&self, id: LayerId, slot: Slot) -> Option<&QuantParams> {
        self.sites.get(&site_key(id, slot))
    }

    pub fn insert(&mut self, id: LayerId, slot: Slot, params: QuantParams) {
        self.sites.insert(site_key(id, slot), params);
    }

    /// Every key must name a real site of this architecture.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let valid = valid_site_keys(config);
        for k in self.sites.keys() {
            if !valid.contains(k) {
                return Err(Error::InvalidArgument(format!(
                    "quant plan references unknown site `{k}`"
                )));
            }
        }
        Ok(())
    }
}

fn valid_site_keys(config: &ModelConfig) -> std::collections::BTreeSet<String> {
    let mut keys = std::collections::BTreeSet::new();
    for entry in layer_registry(config) {
        let id = entry.id;
        match id.kind {
            LayerKind::MatMul1 | LayerKind::MatMul2 => {
                keys.insert(site_key(id, Slot::OperandA));
                keys.insert(site_key(id, Slot::OperandB));
            }
            LayerKind::PostSoftmax | LayerKind::PostGelu => {
                keys.insert(site_key(id, Slot::Act));
            }
            _ => {
                keys.insert(site_key(id, Slot::Weight));
                keys.insert(site_key(id, Slot::Act));
            }
        }
    }
    keys
}

/// Registry row: parameter count and per-image MAC count for one site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegistryEntry {
    pub id: LayerId,
    pub weight_count: u64,
    pub macs: u64,
}

/// Quantizable sites in canonical order with |w| and MAC counts derived from
/// the architecture shapes.
pub fn layer_registry(config: &ModelConfig) -> Vec<RegistryEntry> {
    let n = config.tokens as u64;
    let d = config.embed_dim as u64;
    let df = config.mlp_dim as u64;
    let c = config.classes as u64;
    let pd = config.patch_dim() as u64;
    let mut out = vec![RegistryEntry {
        id: LayerId::new(0, LayerKind::PatchEmbed),
        weight_count: pd * d + d,
        macs: n * pd * d,
    }];
    for b in 0..config.blocks {
        for kind in LayerKind::PER_BLOCK {
            let (w, m) = match kind {
                LayerKind::Qkv => (3 * d * d + 3 * d, n * d * 3 * d),
                LayerKind::MatMul1 => (0, n * n * d),
                LayerKind::PostSoftmax => (0, 0),
                LayerKind::MatMul2 => (0, n * n * d),
                LayerKind::Projection => (d * d + d, n * d * d),
                LayerKind::Fc1 => (d * df + df, n * d * df),
                LayerKind::PostGelu => (0, 0),
                LayerKind::Fc2 => (df * d + d, n * df * d),
                _ => unreachable!(),
            };
            out.push(RegistryEntry {
                id: LayerId::new(b, kind),
                weight_count: w,
                macs: m,
            });
        }
    }
    out.push(RegistryEntry {
        id: LayerId::new(0, LayerKind::Head),
        weight_count: d * c + c,
        macs: d * c,
    });
    out
}

/// Flatten an H x W x ch image into N x (p*p*ch) non-overlapping patch rows.
pub fn patchify(image: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let (h, w, ch) = (config.image_size, config.image_size, config.channels);
    if image.shape() != [h, w, ch] {
        return Err(Error::ShapeMismatch {
            context: "patchify",
            lhs: image.shape().to_vec(),
            rhs: vec![h, w, ch],
        });
    }
    let p = config.patch_size;
    let per_side = h / p;
    let pd = config.patch_dim();
    let mut out = vec![0.0; config.tokens * pd];
    for pr in 0..per_side {
        for pc in 0..per_side {
            let tok = pr * per_side + pc;
            let mut f = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..ch {
                        out[tok * pd + f] = image.data()[((pr * p + dy) * w + (pc * p + dx)) * ch + c];
                        f += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![config.tokens, pd], out)
}

/// Additive perturbation injected at one site element; used by the
/// finite-difference gradient checks.
#[derive(Clone, Copy, Debug)]
pub struct SiteBump {
    pub id: LayerId,
    pub head: Option<usize>,
    pub elem: usize,
    pub delta: f64,
}

#[derive(Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub plan: Option<&'a QuantPlan>,
    pub precision: Option<Precision>,
    pub bump: Option<SiteBump>,
}

pub struct HeadVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub scores: Var,
    pub probs: Var,
    pub out: Var,
}

pub struct BlockVars {
    pub x_in: Var,
    pub ln1: Var,
    pub qkv: Var,
    pub heads: Vec<HeadVars>,
    pub concat: Var,
    pub proj: Var,
    pub y: Var,
    pub ln2: Var,
    pub fc1: Var,
    pub gelu: Var,
    pub fc2: Var,
    pub x_out: Var,
}

/// One image's forward execution: the compute graph plus handles to every
/// activation a later stage may need (quant calibration, gradients, LRP).
pub struct Trace {
    pub graph: Graph,
    pub tokens: Var,
    pub patch_out: Var,
    pub embed: Var,
    pub blocks: Vec<BlockVars>,
    pub pooled: Var,
    pub logits: Var,
    /// Weight-leaf handles keyed by canonical weight name; used for training.
    pub weight_vars: BTreeMap<String, Var>,
}

/// Handles to the activation(s) a quantizable site is identified with.
pub enum SiteVars {
    One(Var),
    Heads(Vec<Var>),
}

impl Trace {
    pub fn site_vars(&self, id: LayerId) -> SiteVars {
        match id.kind {
            LayerKind::PatchEmbed => SiteVars::One(self.patch_out),
            LayerKind::Head => SiteVars::One(self.logits),
            LayerKind::Qkv => SiteVars::One(self.blocks[id.block].qkv),
            LayerKind::MatMul1 => {
                SiteVars::Heads(self.blocks[id.block].heads.iter().map(|h| h.scores).collect())
            }
            LayerKind::PostSoftmax => {
                SiteVars::Heads(self.blocks[id.block].heads.iter().map(|h| h.probs).collect())
            }
            LayerKind::MatMul2 => {
                SiteVars::Heads(self.blocks[id.block].heads.iter().map(|h| h.out).collect())
            }
            LayerKind::Projection => SiteVars::One(self.blocks[id.block].proj),
            LayerKind::Fc1 => SiteVars::One(self.blocks[id.block].fc1),
            LayerKind::PostGelu => SiteVars::One(self.blocks[id.block].gelu),
            LayerKind::Fc2 => SiteVars::One(self.blocks[id.block].fc2),
            LayerKind::Ln1 => SiteVars::One(self.blocks[id.block].ln1),
            LayerKind::Ln2 => SiteVars::One(self.blocks[id.block].ln2),
        }
    }

    pub fn logits_tensor(&self) -> &Tensor {
        self.graph.value(self.logits)
    }

    pub fn predicted_class(&self) -> usize {
        let l = self.logits_tensor();
        let mut best = 0;
        for c in 1..l.len() {
            if l.data()[c] > l.data()[best] {
                best = c;
            }
        }
        best
    }
}

struct Builder<'a> {
    model: &'a ToyViT,
    plan: Option<&'a QuantPlan>,
    bump: Option<SiteBump>,
    weight_vars: BTreeMap<String, Var>,
}

impl<'a> Builder<'a> {
    fn weight_leaf(&mut self, g: &mut Graph, name: &str, id: LayerId) -> Result<Var> {
        let t = self.model.weight(name);
        let t = match self.plan.and_then(|p| p.get(id, Slot::Weight)) {
            Some(params) if name.ends_with(".w") => params.fake_quant(t)?,
            _ => t.clone(),
        };
        let v = g.leaf(t, true);
        self.weight_vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn plain_leaf(&mut self, g: &mut Graph, name: &str) -> Var {
        let v = g.leaf(self.model.weight(name).clone(), true);
        self.weight_vars.insert(name.to_string(), v);
        v
    }

    fn maybe_fq(&self, g: &mut Graph, x: Var, id: LayerId, slot: Slot) -> Result<Var> {
        match self.plan.and_then(|p| p.get(id, slot)) {
            Some(params) => g.fake_quant(x, params),
            None => Ok(x),
        }
    }

    fn maybe_bump(&self, g: &mut Graph, x: Var, id: LayerId, head: Option<usize>) -> Result<Var> {
        match self.bump {
            Some(b) if b.id == id && b.head == head => {
                let mut delta = Tensor::zeros(g.value(x).shape().to_vec());
                delta.data_mut()[b.elem] = b.delta;
                g.add_const(x, &delta)
            }
            _ => Ok(x),
        }
    }
}

/// Run one image through the model; every `plan` entry replaces the site's
/// value with its fake-quantization.
pub fn forward_image(model: &ToyViT, image: &Tensor, opts: ForwardOptions) -> Result<Trace> {
    let cfg = &model.config;
    cfg.validate()?;
    if let Some(plan) = opts.plan {
        plan.validate(cfg)?;
    }
    let precision = opts.precision.unwrap_or(Precision::Double);
    let mut g = Graph::new(precision);
    let mut b = Builder {
        model,
        plan: opts.plan,
        bump: opts.bump,
        weight_vars: BTreeMap::new(),
    };

    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let eps = 1e-6;

    let patch_id = LayerId::new(0, LayerKind::PatchEmbed);
    let tokens = g.leaf(patchify(image, cfg)?, false);
    let tokens_q = b.maybe_fq(&mut g, tokens, patch_id, Slot::Act)?;
    let patch_w = b.weight_leaf(&mut g, "patch.w", patch_id)?;
    let patch_b = b.plain_leaf(&mut g, "patch.b");
    let pe = g.matmul(tokens_q, patch_w)?;
    let pe = g.add_row(pe, patch_b)?;
    let patch_out = b.maybe_bump(&mut g, pe, patch_id, None)?;
    let pos = b.plain_leaf(&mut g, "pos");
    let mut x = g.add(patch_out, pos)?;

    let mut blocks = Vec::with_capacity(cfg.blocks);
    for bi in 0..cfg.blocks {
        let x_in = x;
        let qkv_id = LayerId::new(bi, LayerKind::Qkv);
        let mm1_id = LayerId::new(bi, LayerKind::MatMul1);
        let sm_id = LayerId::new(bi, LayerKind::PostSoftmax);
        let mm2_id = LayerId::new(bi, LayerKind::MatMul2);
        let proj_id = LayerId::new(bi, LayerKind::Projection);
        let fc1_id = LayerId::new(bi, LayerKind::Fc1);
        let pg_id = LayerId::new(bi, LayerKind::PostGelu);
        let fc2_id = LayerId::new(bi, LayerKind::Fc2);

        let g1 = b.plain_leaf(&mut g, &format!("b{bi}.ln1.g"));
        let b1 = b.plain_leaf(&mut g, &format!("b{bi}.ln1.b"));
        let ln1 = g.layernorm(x_in, g1, b1, eps)?;
        let ln1 = b.maybe_bump(&mut g, ln1, LayerId::new(bi, LayerKind::Ln1), None)?;

        let ln1_q = b.maybe_fq(&mut g, ln1, qkv_id, Slot::Act)?;
        let qkv_w = b.weight_leaf(&mut g, &format!("b{bi}.qkv.w"), qkv_id)?;
        let qkv_b = b.plain_leaf(&mut g, &format!("b{bi}.qkv.b"));
        let qkv = g.matmul(ln1_q, qkv_w)?;
        let qkv = g.add_row(qkv, qkv_b)?;
        let qkv = b.maybe_bump(&mut g, qkv, qkv_id, None)?;

        let mut heads = Vec::with_capacity(cfg.heads);
        let mut head_outs = Vec::with_capacity(cfg.heads);
        for hi in 0..cfg.heads {
            let q = g.slice_cols(qkv, hi * dh, dh)?;
            let k = g.slice_cols(qkv, d + hi * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + hi * dh, dh)?;

            let q_q = b.maybe_fq(&mut g, q, mm1_id, Slot::OperandA)?;
            let kt = g.transpose(k)?;
            let kt_q = b.maybe_fq(&mut g, kt, mm1_id, Slot::OperandB)?;
            let scores_raw = g.matmul(q_q, kt_q)?;
            let scores_raw = b.maybe_bump(&mut g, scores_raw, mm1_id, Some(hi))?;
            let scores = g.scale(scores_raw, 1.0 / (dh as f64).sqrt());
            let probs = g.softmax_rows(scores);
            let probs = b.maybe_bump(&mut g, probs, sm_id, Some(hi))?;

            let probs_q = b.maybe_fq(&mut g, probs, sm_id, Slot::Act)?;
            let a_q = b.maybe_fq(&mut g, probs_q, mm2_id, Slot::OperandA)?;
            let v_q = b.maybe_fq(&mut g, v, mm2_id, Slot::OperandB)?;
            let out = g.matmul(a_q, v_q)?;
            let out = b.maybe_bump(&mut g, out, mm2_id, Some(hi))?;

            head_outs.push(out);
            heads.push(HeadVars {
                q,
                k,
                v,
                scores: scores_raw,
                probs,
                out,
            });
        }
        let concat = g.concat_cols(&head_outs)?;
        let concat_q = b.maybe_fq(&mut g, concat, proj_id, Slot::Act)?;
        let proj_w = b.weight_leaf(&mut g, &format!("b{bi}.proj.w"), proj_id)?;
        let proj_b = b.plain_leaf(&mut g, &format!("b{bi}.proj.b"));
        let proj = g.matmul(concat_q, proj_w)?;
        let proj = g.add_row(proj, proj_b)?;
        let proj = b.maybe_bump(&mut g, proj, proj_id, None)?;
        let y = g.add(x_in, proj)?;

        let g2 = b.plain_leaf(&mut g, &format!("b{bi}.ln2.g"));
        let b2 = b.plain_leaf(&mut g, &format!("b{bi}.ln2.b"));
        let ln2 = g.layernorm(y, g2, b2, eps)?;
        let ln2 = b.maybe_bump(&mut g, ln2, LayerId::new(bi, LayerKind::Ln2), None)?;

        let ln2_q = b.maybe_fq(&mut g, ln2, fc1_id, Slot::Act)?;
        let fc1_w = b.weight_leaf(&mut g, &format!("b{bi}.fc1.w"), fc1_id)?;
        let fc1_b = b.plain_leaf(&mut g, &format!("b{bi}.fc1.b"));
        let fc1 = g.matmul(ln2_q, fc1_w)?;
        let fc1 = g.add_row(fc1, fc1_b)?;
        let fc1 = b.maybe_bump(&mut g, fc1, fc1_id, None)?;

        let gelu = g.gelu(fc1);
        let gelu = b.maybe_bump(&mut g, gelu, pg_id, None)?;
        let gelu_q = b.maybe_fq(&mut g, gelu, pg_id, Slot::Act)?;

        let gelu_q2 = b.maybe_fq(&mut g, gelu_q, fc2_id, Slot::Act)?;
        let fc2_w = b.weight_leaf(&mut g, &format!("b{bi}.fc2.w"), fc2_id)?;
        let fc2_b = b.plain_leaf(&mut g, &format!("b{bi}.fc2.b"));
        let fc2 = g.matmul(gelu_q2, fc2_w)?;
        let fc2 = g.add_row(fc2, fc2_b)?;
        let fc2 = b.maybe_bump(&mut g, fc2, fc2_id, None)?;

        x = g.add(y, fc2)?;
        blocks.push(BlockVars {
            x_in,
            ln1,
            qkv,
            heads,
            concat,
            proj,
            y,
            ln2,
            fc1,
            gelu,
            fc2,
            x_out: x,
        });
    }

    let head_id = LayerId::new(0, LayerKind::Head);
    let pooled = g.mean_rows(x);
    let pooled_q = b.maybe_fq(&mut g, pooled, head_id, Slot::Act)?;
    let head_w = b.weight_leaf(&mut g, "head.w", head_id)?;
    let head_b = b.plain_leaf(&mut g, "head.b");
    let logits = g.matmul(pooled_q, head_w)?;
    let logits = g.add_row(logits, head_b)?;
    let logits = b.maybe_bump(&mut g, logits, head_id, None)?;

    Ok(Trace {
        graph: g,
        tokens,
        patch_out,
        embed: x,
        blocks,
        pooled,
        logits,
        weight_vars: b.weight_vars,
    })
}

/// Batched convenience wrapper: images B x H x W x ch, logits B x C.
pub fn forward_batch(model: &ToyViT, images: &[Tensor], opts: ForwardOptions) -> Result<Tensor> {
    let c = model.config.classes;
    let mut out = Vec::with_capacity(images.len() * c);
    for img in images {
        let trace = forward_image(model, img, opts)?;
        out.extend_from_slice(trace.logits_tensor().data());
    }
    Tensor::new(vec![images.len(), c], out)
}
