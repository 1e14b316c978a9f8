//! Range calibration over a small sample set, producing per-site summaries
//! from which a quantization plan at any bit assignment is derived.
//!
//! Post-softmax sites get a base-2 log quantizer, post-GELU a log quantizer
//! with a grid-searched base; every other site is uniform affine. Weights
//! are always quantized per output channel from their own min/max. When
//! reparameterization is enabled the fold happens here, and all activation
//! summaries are collected on the folded model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crl::{apply_reparam, ClipPolicy, ReparamRecord};
use crate::error::{Error, Result};
use crate::quant::{
    calibrate_uniform, log_params_from_min_max, search_adaptive_base, uniform_params_from_ranges,
    CalibrationStats, Granularity, QuantParams,
};
use crate::tensor::Tensor;
use crate::vit::{
    forward_image, layer_registry, site_key, ForwardOptions, LayerId, LayerKind, QuantPlan, Slot,
    ToyViT,
};

/// Bit-independent description of a site's value distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SiteSummary {
    /// Per-channel [lo, hi] ranges (length 1 for per-tensor sites).
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
    /// Per-tensor min/max plus the chosen log base.
    Log { min: f64, max: f64, base: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibOptions {
    /// Quantile for uniform activation ranges; 1.0 = exact min/max.
    pub percentile: f64,
    /// Clip policy for post-LN reparameterization; None disables it.
    pub crl: Option<ClipPolicy>,
    /// Reference bit-width for the per-channel LN parameters that drive the
    /// fold (the fold itself is bit-independent up to zero-point rounding).
    pub crl_bits: u8,
    /// Run post-LN activation quantizers per-channel instead of per-tensor.
    pub post_ln_per_channel: bool,
    /// Candidate bases for the post-GELU log quantizer.
    pub log_base_grid: Vec<f64>,
    /// Cap on values fed to the base grid search.
    pub base_search_cap: usize,
}

impl Default for CalibOptions {
    fn default() -> Self {
        CalibOptions {
            percentile: 1.0,
            crl: Some(ClipPolicy::default()),
            crl_bits: 8,
            post_ln_per_channel: false,
            log_base_grid: (0..20).map(|i| 1.15 + 0.05 * i as f64).collect(),
            base_search_cap: 100_000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Calibrator {
    pub summaries: BTreeMap<String, SiteSummary>,
    pub records: Vec<ReparamRecord>,
    pub options: CalibOptions,
}

/// Activation tensors of one trace keyed by (site, slot), per-head tensors
/// listed separately.
fn site_tensors<'a>(
    trace: &'a crate::vit::Trace,
    model: &ToyViT,
) -> Vec<(LayerId, Slot, Vec<&'a Tensor>)> {
    let g = &trace.graph;
    let mut out = Vec::new();
    out.push((
        LayerId::new(0, LayerKind::PatchEmbed),
        Slot::Act,
        vec![g.value(trace.tokens)],
    ));
    for (bi, blk) in trace.blocks.iter().enumerate() {
        let one = |kind, slot, vars: Vec<&'a Tensor>| (LayerId::new(bi, kind), slot, vars);
        out.push(one(LayerKind::Qkv, Slot::Act, vec![g.value(blk.ln1)]));
        out.push(one(
            LayerKind::MatMul1,
            Slot::OperandA,
            blk.heads.iter().map(|h| g.value(h.q)).collect(),
        ));
        out.push(one(
            LayerKind::MatMul1,
            Slot::OperandB,
            blk.heads.iter().map(|h| g.value(h.k)).collect(),
        ));
        out.push(one(
            LayerKind::PostSoftmax,
            Slot::Act,
            blk.heads.iter().map(|h| g.value(h.probs)).collect(),
        ));
        out.push(one(
            LayerKind::MatMul2,
            Slot::OperandA,
            blk.heads.iter().map(|h| g.value(h.probs)).collect(),
        ));
        out.push(one(
            LayerKind::MatMul2,
            Slot::OperandB,
            blk.heads.iter().map(|h| g.value(h.v)).collect(),
        ));
        out.push(one(LayerKind::Projection, Slot::Act, vec![g.value(blk.concat)]));
        out.push(one(LayerKind::Fc1, Slot::Act, vec![g.value(blk.ln2)]));
        out.push(one(LayerKind::PostGelu, Slot::Act, vec![g.value(blk.gelu)]));
        out.push(one(LayerKind::Fc2, Slot::Act, vec![g.value(blk.gelu)]));
        let _ = model;
    }
    out.push((
        LayerId::new(0, LayerKind::Head),
        Slot::Act,
        vec![g.value(trace.pooled)],
    ));
    out
}

fn is_log_site(id: LayerId) -> bool {
    matches!(id.kind, LayerKind::PostSoftmax | LayerKind::PostGelu)
}

fn is_post_ln_site(id: LayerId, slot: Slot) -> bool {
    slot == Slot::Act && matches!(id.kind, LayerKind::Qkv | LayerKind::Fc1)
}

/// Fit summaries (and, if enabled, the reparameterization fold) from
/// full-precision traces over `images`. Returns the calibrator together
/// with the model the summaries describe — folded when CRL is on.
pub fn fit(model: &ToyViT, images: &[Tensor], options: &CalibOptions) -> Result<(Calibrator, ToyViT)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("calibration needs at least one image".into()));
    }
    let d = model.config.embed_dim;

    // pass 1 (only when folding): per-channel stats at the LN outputs
    let mut records = Vec::new();
    let working = if let Some(policy) = options.crl {
        let mut ln_stats: BTreeMap<LayerId, CalibrationStats> = BTreeMap::new();
        for img in images {
            let trace = forward_image(model, img, ForwardOptions::default())?;
            for (bi, blk) in trace.blocks.iter().enumerate() {
                for (kind, var) in [(LayerKind::Ln1, blk.ln1), (LayerKind::Ln2, blk.ln2)] {
                    ln_stats
                        .entry(LayerId::new(bi, kind))
                        .or_insert_with(|| CalibrationStats::new(d))
                        .add(trace.graph.value(var))?;
                }
            }
        }
        for (id, stats) in ln_stats.iter_mut() {
            let params = calibrate_uniform(
                stats,
                options.crl_bits,
                Granularity::PerChannel,
                options.percentile,
            )?;
            records.push(ReparamRecord::from_params(*id, &params, policy)?);
        }
        apply_reparam(model, &records)?
    } else {
        model.clone()
    };

    // pass 2: per-site stats on the working model
    let mut stats: BTreeMap<String, CalibrationStats> = BTreeMap::new();
    for img in images {
        let trace = forward_image(&working, img, ForwardOptions::default())?;
        for (id, slot, tensors) in site_tensors(&trace, &working) {
            let ch = if is_post_ln_site(id, slot) && options.post_ln_per_channel {
                d
            } else {
                1
            };
            let entry = stats
                .entry(site_key(id, slot))
                .or_insert_with(|| CalibrationStats::new(ch));
            for t in tensors {
                entry.add(t)?;
            }
        }
    }

    let mut summaries = BTreeMap::new();
    for entry in layer_registry(&working.config) {
        let id = entry.id;
        let slots: &[Slot] = match id.kind {
            LayerKind::MatMul1 | LayerKind::MatMul2 => &[Slot::OperandA, Slot::OperandB],
            _ => &[Slot::Act],
        };
        for &slot in slots {
            let key = site_key(id, slot);
            let st = stats.get_mut(&key).expect("stats collected for every site");
            let summary = if is_log_site(id) {
                let mut pooled = st.pooled();
                let (min, max) = (pooled.min(0), pooled.max(0));
                let base = if id.kind == LayerKind::PostSoftmax {
                    2.0
                } else {
                    // grid-searched base on a capped sample of the values
                    let samples = pooled_sample(&pooled, options.base_search_cap);
                    search_adaptive_base(&samples, 4, &options.log_base_grid)?
                };
                SiteSummary::Log { min, max, base }
            } else {
                let (lo, hi) = st.ranges(options.percentile)?;
                SiteSummary::Uniform { lo, hi }
            };
            summaries.insert(key, summary);
        }
    }

    Ok((
        Calibrator {
            summaries,
            records,
            options: options.clone(),
        },
        working,
    ))
}

fn pooled_sample(stats: &CalibrationStats, cap: usize) -> Tensor {
    let mut one = stats.pooled();
    let n = one.channels();
    debug_assert_eq!(n, 1);
    // deterministic stride subsample of the sorted values
    let total = one.count(0);
    let take = total.min(cap.max(1));
    let stride = total.div_ceil(take);
    let mut vals = Vec::with_capacity(take);
    for i in (0..total).step_by(stride) {
        vals.push(one.nth(0, i));
    }
    Tensor::vector(vals)
}

impl Calibrator {
    /// Quantizer parameters for one site at the given bit-width.
    pub fn site_params(&self, key: &str, bits: u8) -> Result<QuantParams> {
        let summary = self.summaries.get(key).ok_or_else(|| {
            Error::InvalidArgument(format!("no calibration summary for site `{key}`"))
        })?;
        match summary {
            SiteSummary::Uniform { lo, hi } => Ok(uniform_params_from_ranges(lo, hi, bits)),
            SiteSummary::Log { min, max, base } => {
                log_params_from_min_max(&[*min], &[*max], bits, *base)
            }
        }
    }

    /// Per-output-channel weight quantizer from the weight tensor itself.
    pub fn weight_params(w: &Tensor, bits: u8) -> Result<QuantParams> {
        let ch = w.cols();
        let mut stats = CalibrationStats::new(ch);
        stats.add(w)?;
        calibrate_uniform(&mut stats, bits, Granularity::PerChannel, 1.0)
    }

    /// Full plan for `model` with each registered layer at its assigned bit
    /// (weights and activations share the layer's bits).
    pub fn plan(&self, model: &ToyViT, bits: &BTreeMap<LayerId, u8>) -> Result<QuantPlan> {
        let mut plan = QuantPlan::default();
        for entry in layer_registry(&model.config) {
            let id = entry.id;
            let b = *bits.get(&id).ok_or_else(|| {
                Error::InvalidArgument(format!("no bit assignment for layer {id}"))
            })?;
            match id.kind {
                LayerKind::MatMul1 | LayerKind::MatMul2 => {
                    for slot in [Slot::OperandA, Slot::OperandB] {
                        plan.insert(id, slot, self.site_params(&site_key(id, slot), b)?);
                    }
                }
                LayerKind::PostSoftmax | LayerKind::PostGelu => {
                    plan.insert(id, Slot::Act, self.site_params(&site_key(id, Slot::Act), b)?);
                }
                _ => {
                    plan.insert(id, Slot::Act, self.site_params(&site_key(id, Slot::Act), b)?);
                    let wname = match id.kind {
                        LayerKind::PatchEmbed => "patch.w".to_string(),
                        LayerKind::Head => "head.w".to_string(),
                        LayerKind::Qkv => format!("b{}.qkv.w", id.block),
                        LayerKind::Projection => format!("b{}.proj.w", id.block),
                        LayerKind::Fc1 => format!("b{}.fc1.w", id.block),
                        LayerKind::Fc2 => format!("b{}.fc2.w", id.block),
                        _ => unreachable!(),
                    };
                    plan.insert(id, Slot::Weight, Self::weight_params(model.weight(&wname), b)?);
                }
            }
        }
        Ok(plan)
    }

    /// Every registered layer at the same bit-width.
    pub fn uniform_plan(&self, model: &ToyViT, bits: u8) -> Result<QuantPlan> {
        let table = layer_registry(&model.config)
            .iter()
            .map(|e| (e.id, bits))
            .collect();
        self.plan(model, &table)
    }
}
