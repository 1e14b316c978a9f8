//! Quantization sensitivity analysis: how much the calibration-set loss
//! moves when all layers of one kind switch from the baseline bit-width to a
//! candidate bit-width, everything else held at the baseline.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::Calibrator;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::softmax_rows_value;
use crate::vit::{
    forward_image, layer_registry, ForwardOptions, LayerId, LayerKind, QuantPlan, ToyViT,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// Cross-entropy against sample labels (default).
    CrossEntropy,
    /// KL(full-precision || quantized) on output distributions; label-free.
    KlVsFullPrecision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub baseline_bits: u8,
    /// Sorted candidate bit-widths; must contain the baseline.
    pub candidates: Vec<u8>,
    pub loss: LossKind,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            baseline_bits: 4,
            candidates: vec![2, 3, 4, 5, 6],
            loss: LossKind::CrossEntropy,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::Config("empty candidate bit set".into()));
        }
        if !self.candidates.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("candidate bits must be strictly increasing".into()));
        }
        if !self.candidates.contains(&self.baseline_bits) {
            return Err(Error::Config(format!(
                "baseline bits {} not in candidate set {:?}",
                self.baseline_bits, self.candidates
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    /// Λ per (layer kind, bit), Σ = 1.
    pub lambda: BTreeMap<(LayerKind, u8), f64>,
    /// Raw Δ𝓛 retained for reporting.
    pub deltas: BTreeMap<(LayerKind, u8), f64>,
    /// True when all deltas were identical and Λ fell back to uniform.
    pub uniform_fallback: bool,
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            if a <= 0.0 {
                0.0
            } else {
                a * (a / b.max(1e-300)).ln()
            }
        })
        .sum()
}

/// Mean loss over the set under `plan`, per the configured loss kind.
pub fn plan_loss(
    model: &ToyViT,
    data: &Dataset,
    plan: &QuantPlan,
    loss: LossKind,
) -> Result<f64> {
    match loss {
        LossKind::CrossEntropy => crate::data::mean_cross_entropy(model, data, Some(plan)),
        LossKind::KlVsFullPrecision => {
            let per: Vec<Result<f64>> = data
                .images
                .par_iter()
                .map(|img| {
                    let fp = forward_image(model, img, ForwardOptions::default())?;
                    let q = forward_image(
                        model,
                        img,
                        ForwardOptions {
                            plan: Some(plan),
                            ..Default::default()
                        },
                    )?;
                    let p_fp = softmax_rows_value(fp.logits_tensor());
                    let p_q = softmax_rows_value(q.logits_tensor());
                    Ok(kl(p_fp.data(), p_q.data()))
                })
                .collect();
            let mut total = 0.0;
            for r in per {
                total += r?;
            }
            Ok(total / data.len() as f64)
        }
    }
}

fn bits_table(model: &ToyViT, baseline: u8, target: Option<(LayerKind, u8)>) -> BTreeMap<LayerId, u8> {
    layer_registry(&model.config)
        .iter()
        .map(|e| {
            let b = match target {
                Some((kind, bit)) if e.id.kind == kind => bit,
                _ => baseline,
            };
            (e.id, b)
        })
        .collect()
}

/// Mean loss with every quantizable layer at the baseline bits.
pub fn baseline_loss(
    model: &ToyViT,
    cal: &Calibrator,
    data: &Dataset,
    cfg: &SweepConfig,
) -> Result<f64> {
    cfg.validate()?;
    let plan = cal.plan(model, &bits_table(model, cfg.baseline_bits, None))?;
    plan_loss(model, data, &plan, cfg.loss)
}

/// Mean loss with all layers of `kind` at `bit` and the rest at baseline.
pub fn perturbed_loss(
    model: &ToyViT,
    cal: &Calibrator,
    data: &Dataset,
    cfg: &SweepConfig,
    kind: LayerKind,
    bit: u8,
) -> Result<f64> {
    cfg.validate()?;
    if !LayerKind::QUANTIZED.contains(&kind) {
        return Err(Error::InvalidArgument(format!(
            "{} is not a quantizable layer kind",
            kind.token()
        )));
    }
    if !cfg.candidates.contains(&bit) {
        return Err(Error::InvalidArgument(format!(
            "bit {bit} not in candidate set {:?}",
            cfg.candidates
        )));
    }
    let plan = cal.plan(model, &bits_table(model, cfg.baseline_bits, Some((kind, bit))))?;
    plan_loss(model, data, &plan, cfg.loss)
}

/// Λ from raw deltas: shift by |min| then normalize (uniform with a flag if
/// everything cancels).
pub fn sensitivity_scores(deltas: &BTreeMap<(LayerKind, u8), f64>) -> Result<SensitivityTable> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("no sensitivity deltas".into()));
    }
    // shift so the minimum lands at zero; for the usual min <= 0 case this
    // is exactly "add |min|", and it stays shift-invariant when min > 0
    let min = deltas.values().cloned().fold(f64::INFINITY, f64::min);
    let shifted: BTreeMap<(LayerKind, u8), f64> =
        deltas.iter().map(|(&k, &v)| (k, v - min)).collect();
    let total: f64 = shifted.values().sum();
    let n = shifted.len() as f64;
    let (lambda, uniform_fallback) = if total <= 0.0 {
        (shifted.keys().map(|&k| (k, 1.0 / n)).collect(), true)
    } else {
        (shifted.iter().map(|(&k, &v)| (k, v / total)).collect(), false)
    };
    Ok(SensitivityTable {
        lambda,
        deltas: deltas.clone(),
        uniform_fallback,
    })
}

/// Full sweep: Δ𝓛 for every (kind, bit) pair, then the normalized table.
/// Pairs evaluate in parallel; the table assembles in map order.
pub fn sweep(
    model: &ToyViT,
    cal: &Calibrator,
    data: &Dataset,
    cfg: &SweepConfig,
) -> Result<SensitivityTable> {
    cfg.validate()?;
    let base = baseline_loss(model, cal, data, cfg)?;
    let mut pairs = Vec::new();
    for kind in LayerKind::QUANTIZED {
        for &bit in &cfg.candidates {
            pairs.push((kind, bit));
        }
    }
    let losses: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(kind, bit)| {
            if bit == cfg.baseline_bits {
                Ok(base) // unperturbed configuration by definition
            } else {
                perturbed_loss(model, cal, data, cfg, kind, bit)
            }
        })
        .collect();
    let mut deltas = BTreeMap::new();
    for ((kind, bit), loss) in pairs.into_iter().zip(losses) {
        deltas.insert((kind, bit), loss? - base);
    }
    sensitivity_scores(&deltas)
}

/// Accuracy change per (kind, bit) under the same one-kind-perturbed plans
/// the loss sweep uses; loss drives the scores, this is report-only.
pub fn sweep_accuracy(
    model: &ToyViT,
    cal: &Calibrator,
    data: &Dataset,
    cfg: &SweepConfig,
) -> Result<BTreeMap<(LayerKind, u8), f64>> {
    cfg.validate()?;
    let base_plan = cal.plan(model, &bits_table(model, cfg.baseline_bits, None))?;
    let base = crate::data::accuracy(model, data, Some(&base_plan))?;
    let mut pairs = Vec::new();
    for kind in LayerKind::QUANTIZED {
        for &bit in &cfg.candidates {
            pairs.push((kind, bit));
        }
    }
    let accs: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(kind, bit)| {
            if bit == cfg.baseline_bits {
                Ok(base)
            } else {
                let plan = cal.plan(model, &bits_table(model, cfg.baseline_bits, Some((kind, bit))))?;
                crate::data::accuracy(model, data, Some(&plan))
            }
        })
        .collect();
    let mut out = BTreeMap::new();
    for ((kind, bit), acc) in pairs.into_iter().zip(accs) {
        out.insert((kind, bit), acc? - base);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::{fit, CalibOptions};
    use crate::data::{synth_dataset, SynthConfig};
    use crate::vit::{init_weights, ModelConfig};

    fn table_of(deltas: &[((LayerKind, u8), f64)]) -> BTreeMap<(LayerKind, u8), f64> {
        deltas.iter().cloned().collect()
    }

    #[test]
    fn hand_evaluated_normalization() {
        // deltas [-1, 0, 3] -> shifted [0, 1, 4] -> lambda [0, 0.2, 0.8]
        let deltas = table_of(&[
            ((LayerKind::Qkv, 2), -1.0),
            ((LayerKind::Qkv, 3), 0.0),
            ((LayerKind::Qkv, 5), 3.0),
        ]);
        let t = sensitivity_scores(&deltas).unwrap();
        assert_eq!(t.lambda[&(LayerKind::Qkv, 2)], 0.0);
        assert!((t.lambda[&(LayerKind::Qkv, 3)] - 0.2).abs() < 1e-12);
        assert!((t.lambda[&(LayerKind::Qkv, 5)] - 0.8).abs() < 1e-12);
        assert!(!t.uniform_fallback);
    }

    #[test]
    fn shift_invariance() {
        let base = table_of(&[
            ((LayerKind::Fc1, 2), 0.4),
            ((LayerKind::Fc1, 3), -0.2),
            ((LayerKind::Fc2, 2), 1.1),
        ]);
        let shifted: BTreeMap<_, _> = base.iter().map(|(&k, &v)| (k, v + 5.0)).collect();
        let a = sensitivity_scores(&base).unwrap();
        let b = sensitivity_scores(&shifted).unwrap();
        for (k, v) in &a.lambda {
            assert!((b.lambda[k] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn minimum_delta_gets_zero_and_sum_is_one() {
        let deltas = table_of(&[
            ((LayerKind::Qkv, 2), 0.7),
            ((LayerKind::Projection, 2), 0.1),
            ((LayerKind::Head, 2), 2.0),
        ]);
        let t = sensitivity_scores(&deltas).unwrap();
        let min_key = (LayerKind::Projection, 2);
        assert_eq!(t.lambda[&min_key], 0.0);
        let total: f64 = t.lambda.values().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(t.lambda.values().all(|&v| v >= 0.0));
    }

    #[test]
    fn identical_deltas_fall_back_to_uniform() {
        let deltas = table_of(&[
            ((LayerKind::Qkv, 2), 0.3),
            ((LayerKind::Fc1, 2), 0.3),
        ]);
        let t = sensitivity_scores(&deltas).unwrap();
        assert!(t.uniform_fallback);
        assert_eq!(t.lambda[&(LayerKind::Qkv, 2)], 0.5);
    }

    fn setup() -> (ToyViT, Calibrator, Dataset) {
        let cfg = ModelConfig {
            blocks: 1,
            embed_dim: 16,
            heads: 2,
            mlp_dim: 32,
            tokens: 16,
            classes: 4,
            patch_size: 2,
            image_size: 8,
            channels: 1,
            seed: 31,
        };
        let model = init_weights(&cfg).unwrap();
        let synth = SynthConfig {
            classes: 4,
            samples: 8,
            seed: 6,
            ..Default::default()
        };
        let data = synth_dataset(&cfg, &synth).unwrap();
        let (cal, working) = fit(&model, &data.images, &CalibOptions::default()).unwrap();
        (working, cal, data)
    }

    #[test]
    fn baseline_is_deterministic_and_perturb_at_baseline_matches() {
        let (model, cal, data) = setup();
        let cfg = SweepConfig::default();
        let a = baseline_loss(&model, &cal, &data, &cfg).unwrap();
        let b = baseline_loss(&model, &cal, &data, &cfg).unwrap();
        assert_eq!(a, b);
        let p = perturbed_loss(&model, &cal, &data, &cfg, LayerKind::Qkv, 4).unwrap();
        assert_eq!(p, a);
    }

    #[test]
    fn kl_of_identity_plan_is_zero() {
        let (model, cal, data) = setup();
        let plan = QuantPlan::default();
        let loss = plan_loss(&model, &data, &plan, LossKind::KlVsFullPrecision).unwrap();
        assert_eq!(loss, 0.0);
        let _ = cal;
    }

    #[test]
    fn sweep_produces_full_table() {
        let (model, cal, data) = setup();
        let small = Dataset {
            images: data.images[..4].to_vec(),
            labels: data.labels[..4].to_vec(),
        };
        let cfg = SweepConfig {
            baseline_bits: 4,
            candidates: vec![3, 4, 6],
            loss: LossKind::CrossEntropy,
        };
        let t = sweep(&model, &cal, &small, &cfg).unwrap();
        assert_eq!(t.lambda.len(), LayerKind::QUANTIZED.len() * 3);
        let total: f64 = t.lambda.values().sum();
        assert!((total - 1.0).abs() < 1e-9);
        // re-run: identical
        assert_eq!(sweep(&model, &cal, &small, &cfg).unwrap(), t);
    }

    #[test]
    fn config_validation() {
        assert!(SweepConfig { baseline_bits: 7, candidates: vec![2, 3], loss: LossKind::CrossEntropy }.validate().is_err());
        assert!(SweepConfig { baseline_bits: 2, candidates: vec![], loss: LossKind::CrossEntropy }.validate().is_err());
        assert!(SweepConfig::default().validate().is_ok());
    }
}
