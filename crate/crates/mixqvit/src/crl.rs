//! Reparameterization of post-LayerNorm activation quantizers.
//!
//! Per-channel quantizer parameters at the two post-LN sites of each block
//! are clipped toward their cross-channel mean, and the change of variables
//! is folded exactly into the LayerNorm affine and the next linear layer, so
//! inference runs with the cheaper clipped parameters and unchanged math.
//!
//! For channel c with original (s_c, z_c) and clipped (s'_c, z'_c), the
//! transformed activation is x' = (x + s_c v2_c) / v1_c with v1 = s / s' and
//! v2 = z - z'. Quantizing x' on the (s', z') lattice reproduces exactly the
//! (s, z) lattice on x.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{ParamsKind, QuantParams};
use crate::tensor::Tensor;
use crate::vit::{LayerId, LayerKind, ToyViT};

/// Outlier clipping rule: channel parameters are clamped into
/// mean +/- k * std (population std across channels).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipPolicy {
    pub k: f64,
}

impl Default for ClipPolicy {
    fn default() -> Self {
        ClipPolicy { k: 2.0 }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Clamp each entry into [mu - k*sigma, mu + k*sigma]. A non-positive lower
/// edge is ignored for positive quantities (scales); sigma = 0 leaves the
/// vector unchanged.
pub fn clip_to_band(values: &[f64], k: f64, keep_positive: bool) -> Vec<f64> {
    let (mu, sigma) = mean_std(values);
    if sigma == 0.0 {
        return values.to_vec();
    }
    let hi = mu + k * sigma;
    let lo = mu - k * sigma;
    values
        .iter()
        .map(|&x| {
            let mut y = x.min(hi);
            if !(keep_positive && lo <= 0.0) {
                y = y.max(lo);
            }
            y
        })
        .collect()
}

/// Everything needed to fold one post-LN site and to rebuild its activation
/// quantizer at any bit-width later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReparamRecord {
    /// The LayerNorm site this folds (kind Ln1 or Ln2).
    pub layer: LayerId,
    /// Bit-width the per-channel parameters were calibrated at.
    pub bits: u8,
    /// Original per-channel scale and zero point.
    pub scale: Vec<f64>,
    pub zero: Vec<f64>,
    /// Clipped per-channel scale and zero point.
    pub scale_hat: Vec<f64>,
    pub zero_hat: Vec<f64>,
    /// v1 = s / s_hat, v2 = z - z_hat.
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    /// Channels whose calibration range was degenerate; left untouched.
    pub degenerate: Vec<bool>,
}

impl ReparamRecord {
    /// Build from per-channel uniform parameters.
    pub fn from_params(layer: LayerId, params: &QuantParams, policy: ClipPolicy) -> Result<Self> {
        if !matches!(layer.kind, LayerKind::Ln1 | LayerKind::Ln2) {
            return Err(Error::InvalidArgument(format!(
                "reparameterization targets LayerNorm sites, got {layer}"
            )));
        }
        let (scale, zero, degenerate) = match &params.kind {
            ParamsKind::Uniform {
                scale,
                zero,
                degenerate,
            } => (scale.clone(), zero.clone(), degenerate.clone()),
            _ => {
                return Err(Error::InvalidArgument(
                    "reparameterization needs uniform per-channel parameters".into(),
                ))
            }
        };
        let qmax = params.max_code();
        let mut scale_hat = clip_to_band(&scale, policy.k, true);
        // zero points stay integers in the code domain
        let mut zero_hat: Vec<f64> = clip_to_band(&zero, policy.k, false)
            .into_iter()
            .map(|z| z.round().clamp(0.0, qmax))
            .collect();
        for (c, &d) in degenerate.iter().enumerate() {
            if d {
                scale_hat[c] = scale[c];
                zero_hat[c] = zero[c];
            }
        }
        let v1: Vec<f64> = scale
            .iter()
            .zip(&scale_hat)
            .map(|(&s, &sh)| s / sh)
            .collect();
        let v2: Vec<f64> = zero.iter().zip(&zero_hat).map(|(&z, &zh)| z - zh).collect();
        Ok(ReparamRecord {
            layer,
            bits: params.bits,
            scale,
            zero,
            scale_hat,
            zero_hat,
            v1,
            v2,
            degenerate,
        })
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Per-channel additive shift s ⊙ v2 applied before dividing by v1.
    pub fn shift(&self) -> Vec<f64> {
        self.scale
            .iter()
            .zip(&self.v2)
            .map(|(&s, &v2)| s * v2)
            .collect()
    }

    /// Clipped per-channel quantizer for the transformed activation.
    pub fn clipped_params(&self) -> QuantParams {
        QuantParams {
            bits: self.bits,
            kind: ParamsKind::Uniform {
                scale: self.scale_hat.clone(),
                zero: self.zero_hat.clone(),
                degenerate: self.degenerate.clone(),
            },
        }
    }

    /// Original per-channel quantizer for the untransformed activation.
    pub fn original_params(&self) -> QuantParams {
        QuantParams {
            bits: self.bits,
            kind: ParamsKind::Uniform {
                scale: self.scale.clone(),
                zero: self.zero.clone(),
                degenerate: self.degenerate.clone(),
            },
        }
    }

    /// Map per-channel activation ranges through the transform:
    /// bound' = (bound + s v2) / v1 (v1 > 0 keeps orientation).
    pub fn transform_ranges(&self, lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let shift = self.shift();
        let f = |b: &[f64]| -> Vec<f64> {
            b.iter()
                .enumerate()
                .map(|(c, &x)| (x + shift[c]) / self.v1[c])
                .collect()
        };
        (f(lo), f(hi))
    }
}

/// gamma' = gamma / v1, beta' = (beta + s v2) / v1.
pub fn fold_into_layernorm(
    gamma: &Tensor,
    beta: &Tensor,
    rec: &ReparamRecord,
) -> Result<(Tensor, Tensor)> {
    let d = rec.channels();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::ShapeMismatch {
            context: "layernorm fold",
            lhs: gamma.shape().to_vec(),
            rhs: vec![d],
        });
    }
    let shift = rec.shift();
    let mut g2 = gamma.clone();
    let mut b2 = beta.clone();
    for c in 0..d {
        g2.data_mut()[c] = gamma.data()[c] / rec.v1[c];
        b2.data_mut()[c] = (beta.data()[c] + shift[c]) / rec.v1[c];
    }
    Ok((g2, b2))
}

/// W' = diag(v1) W (row r scaled by v1_r), b' = b - (s v2)ᵀ W, so that
/// x' W' + b' == x W + b for x' = (x + s v2) / v1.
pub fn fold_into_next_linear(w: &Tensor, b: &Tensor, rec: &ReparamRecord) -> Result<(Tensor, Tensor)> {
    let d = rec.channels();
    if w.rows() != d || b.len() != w.cols() {
        return Err(Error::ShapeMismatch {
            context: "linear fold",
            lhs: w.shape().to_vec(),
            rhs: vec![d, b.len()],
        });
    }
    let shift = rec.shift();
    let mut w2 = w.clone();
    for r in 0..d {
        for c in 0..w.cols() {
            w2.set(r, c, w.at(r, c) * rec.v1[r]);
        }
    }
    let mut b2 = b.clone();
    for c in 0..w.cols() {
        let mut acc = 0.0;
        for r in 0..d {
            acc += shift[r] * w.at(r, c);
        }
        b2.data_mut()[c] = b.data()[c] - acc;
    }
    Ok((w2, b2))
}

/// Fold every record into a copy of the model. Records with kind Ln1 rewrite
/// `b{i}.ln1.*` and `b{i}.qkv.*`; Ln2 rewrites `b{i}.ln2.*` and `b{i}.fc1.*`.
pub fn apply_reparam(model: &ToyViT, records: &[ReparamRecord]) -> Result<ToyViT> {
    let mut out = model.clone();
    for rec in records {
        let bi = rec.layer.block;
        if bi >= model.config.blocks {
            return Err(Error::InvalidArgument(format!(
                "record for {} exceeds block count {}",
                rec.layer, model.config.blocks
            )));
        }
        let (ln, next) = match rec.layer.kind {
            LayerKind::Ln1 => ("ln1", "qkv"),
            LayerKind::Ln2 => ("ln2", "fc1"),
            _ => unreachable!("validated in from_params"),
        };
        let (g2, b2) = fold_into_layernorm(
            out.weight(&format!("b{bi}.{ln}.g")),
            out.weight(&format!("b{bi}.{ln}.b")),
            rec,
        )?;
        let (w2, nb2) = fold_into_next_linear(
            out.weight(&format!("b{bi}.{next}.w")),
            out.weight(&format!("b{bi}.{next}.b")),
            rec,
        )?;
        *out.weight_mut(&format!("b{bi}.{ln}.g")) = g2;
        *out.weight_mut(&format!("b{bi}.{ln}.b")) = b2;
        *out.weight_mut(&format!("b{bi}.{next}.w")) = w2;
        *out.weight_mut(&format!("b{bi}.{next}.b")) = nb2;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rnd;
    use crate::vit::{forward_image, init_weights, ForwardOptions, ModelConfig, QuantPlan, Slot};

    fn rec_from_raw(layer: LayerId, scale: Vec<f64>, zero: Vec<f64>, bits: u8) -> ReparamRecord {
        let d = scale.len();
        ReparamRecord::from_params(
            layer,
            &QuantParams {
                bits,
                kind: ParamsKind::Uniform {
                    scale,
                    zero,
                    degenerate: vec![false; d],
                },
            },
            ClipPolicy::default(),
        )
        .unwrap()
    }

    #[test]
    fn clip_band_example() {
        // nine 1.0s and one 10.0: mu = 1.9, sigma = 2.7, upper edge 7.3;
        // lower edge is negative so positive scales keep their floor
        let mut s = vec![1.0; 9];
        s.push(10.0);
        let clipped = clip_to_band(&s, 2.0, true);
        for c in &clipped[..9] {
            assert_eq!(*c, 1.0);
        }
        assert!((clipped[9] - 7.3).abs() < 1e-12);
    }

    #[test]
    fn clip_band_no_variance_is_identity() {
        let s = vec![0.5; 8];
        assert_eq!(clip_to_band(&s, 2.0, true), s);
    }

    #[test]
    fn identity_record_when_nothing_clips() {
        let rec = rec_from_raw(
            LayerId::new(0, LayerKind::Ln1),
            vec![1.0, 1.1, 0.9],
            vec![7.0, 8.0, 9.0],
            4,
        );
        // all inside the band: v1 = 1, v2 = 0
        for c in 0..3 {
            assert!((rec.v1[c] - 1.0).abs() < 1e-12);
            assert_eq!(rec.v2[c], 0.0);
        }
    }

    #[test]
    fn clipped_lattice_matches_original_lattice() {
        // quantizing x' = (x + s v2) / v1 with (s', z') must reproduce the
        // fake-quant of x with (s, z), exactly
        let mut s = vec![1.0; 9];
        s.push(10.0);
        let z: Vec<f64> = (0..10).map(|i| (i % 4) as f64 + 5.0).collect();
        let rec = rec_from_raw(LayerId::new(0, LayerKind::Ln1), s.clone(), z, 4);
        let orig = rec.original_params();
        let clipped = rec.clipped_params();
        let shift = rec.shift();

        let mut rng = rnd::rng_from_seed(9);
        let x = Tensor::new(vec![6, 10], rnd::normal_vec(&mut rng, 60, 2.0)).unwrap();
        let mut xt = x.clone();
        for (i, v) in xt.data_mut().iter_mut().enumerate() {
            let c = i % 10;
            *v = (*v + shift[c]) / rec.v1[c];
        }
        let fq_orig = orig.fake_quant(&x).unwrap();
        let fq_clip = clipped.fake_quant(&xt).unwrap();
        // undo the transform on the clipped result
        let mut back = fq_clip.clone();
        for (i, v) in back.data_mut().iter_mut().enumerate() {
            let c = i % 10;
            *v = *v * rec.v1[c] - shift[c];
        }
        for (a, b) in fq_orig.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn folding_preserves_full_precision_logits() {
        let cfg = ModelConfig {
            blocks: 2,
            embed_dim: 16,
            heads: 2,
            mlp_dim: 32,
            tokens: 16,
            classes: 4,
            patch_size: 2,
            image_size: 8,
            channels: 1,
            seed: 5,
        };
        let model = init_weights(&cfg).unwrap();
        let mut rng = rnd::rng_from_seed(11);
        let img = Tensor::new(vec![8, 8, 1], rnd::normal_vec(&mut rng, 64, 1.0)).unwrap();

        // synthetic records with real clipping pressure
        let mut records = Vec::new();
        for b in 0..cfg.blocks {
            for kind in [LayerKind::Ln1, LayerKind::Ln2] {
                let scale: Vec<f64> = (0..cfg.embed_dim)
                    .map(|c| if c == 3 { 8.0 } else { 0.5 + 0.01 * c as f64 })
                    .collect();
                let zero: Vec<f64> = (0..cfg.embed_dim).map(|c| (c % 10) as f64 + 3.0).collect();
                records.push(rec_from_raw(LayerId::new(b, kind), scale, zero, 4));
            }
        }
        let folded = apply_reparam(&model, &records).unwrap();
        assert!(records.iter().any(|r| r.v1.iter().any(|&v| (v - 1.0).abs() > 0.1)));

        let base = forward_image(&model, &img, ForwardOptions::default()).unwrap();
        let after = forward_image(&folded, &img, ForwardOptions::default()).unwrap();
        for (a, b) in base
            .logits_tensor()
            .data()
            .iter()
            .zip(after.logits_tensor().data())
        {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn folded_quantized_matches_original_per_channel_quantized() {
        // end-to-end: per-channel quantization of the original post-LN
        // activations == per-channel clipped quantization after folding
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
            seed: 7,
        };
        let model = init_weights(&cfg).unwrap();
        let mut rng = rnd::rng_from_seed(13);
        let img = Tensor::new(vec![8, 8, 1], rnd::normal_vec(&mut rng, 64, 1.0)).unwrap();

        // calibrate per-channel parameters from the model's own trace
        let trace = forward_image(&model, &img, ForwardOptions::default()).unwrap();
        let mut records = Vec::new();
        for (kind, var) in [
            (LayerKind::Ln1, trace.blocks[0].ln1),
            (LayerKind::Ln2, trace.blocks[0].ln2),
        ] {
            let act = trace.graph.value(var);
            let mut stats = crate::quant::CalibrationStats::new(cfg.embed_dim);
            stats.add(act).unwrap();
            let params = crate::quant::calibrate_uniform(
                &mut stats,
                4,
                crate::quant::Granularity::PerChannel,
                1.0,
            )
            .unwrap();
            records.push(
                ReparamRecord::from_params(LayerId::new(0, kind), &params, ClipPolicy::default())
                    .unwrap(),
            );
        }

        let mut plan_orig = QuantPlan::default();
        plan_orig.insert(LayerId::new(0, LayerKind::Qkv), Slot::Act, records[0].original_params());
        plan_orig.insert(LayerId::new(0, LayerKind::Fc1), Slot::Act, records[1].original_params());
        let mut plan_clip = QuantPlan::default();
        plan_clip.insert(LayerId::new(0, LayerKind::Qkv), Slot::Act, records[0].clipped_params());
        plan_clip.insert(LayerId::new(0, LayerKind::Fc1), Slot::Act, records[1].clipped_params());

        let folded = apply_reparam(&model, &records).unwrap();
        let a = forward_image(
            &model,
            &img,
            ForwardOptions { plan: Some(&plan_orig), ..Default::default() },
        )
        .unwrap();
        let b = forward_image(
            &folded,
            &img,
            ForwardOptions { plan: Some(&plan_clip), ..Default::default() },
        )
        .unwrap();
        for (x, y) in a
            .logits_tensor()
            .data()
            .iter()
            .zip(b.logits_tensor().data())
        {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn record_rejects_non_ln_sites() {
        let params = QuantParams {
            bits: 4,
            kind: ParamsKind::Uniform {
                scale: vec![1.0],
                zero: vec![0.0],
                degenerate: vec![false],
            },
        };
        let err = ReparamRecord::from_params(
            LayerId::new(0, LayerKind::Qkv),
            &params,
            ClipPolicy::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn range_transform_keeps_orientation() {
        let mut s = vec![1.0; 9];
        s.push(10.0);
        let rec = rec_from_raw(LayerId::new(0, LayerKind::Ln1), s, vec![7.0; 10], 4);
        let lo = vec![-2.0; 10];
        let hi = vec![3.0; 10];
        let (lo2, hi2) = rec.transform_ranges(&lo, &hi);
        for c in 0..10 {
            assert!(lo2[c] < hi2[c]);
        }
    }
}
