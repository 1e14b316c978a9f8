//! Run configuration: one TOML file drives every pipeline stage. Stage
//! artifacts embed a hash of this file's canonical serialization so stale
//! caches are rejected instead of silently mixed.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alloc::LambdaOrientation;
use crate::calibrate::CalibOptions;
use crate::crl::ClipPolicy;
use crate::data::TrainConfig;
use crate::error::{Error, Result};
use crate::qsa::{LossKind, SweepConfig};
use crate::vit::{LayerId, LayerKind, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub quant: QuantSection,
    pub crl: CrlSection,
    pub lrp: LrpSection,
    pub qsa: QsaSection,
    pub allocator: AllocSection,
    /// Default artifact directory; `--out` overrides it.
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            dataset: DatasetSection::default(),
            train: TrainConfig::default(),
            quant: QuantSection::default(),
            crl: CrlSection::default(),
            lrp: LrpSection::default(),
            qsa: QsaSection::default(),
            allocator: AllocSection::default(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// "synthetic" or "files".
    pub source: String,
    pub seed: u64,
    pub classes: usize,
    pub samples: usize,
    /// Samples held out from the tail for evaluation.
    pub eval_samples: usize,
    /// Store directory when source = "files".
    pub dir: Option<String>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: "synthetic".into(),
            seed: 0,
            classes: 10,
            samples: 1024,
            eval_samples: 256,
            dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    /// Near-lossless reference bit-width for non-mixed sites.
    pub default_bits: u8,
    /// Quantile for uniform activation ranges; 1.0 = exact min/max.
    pub percentile: f64,
    pub post_ln_per_channel: bool,
    /// Images drawn from the train split for range calibration.
    pub calib_samples: usize,
}

impl Default for QuantSection {
    fn default() -> Self {
        QuantSection {
            default_bits: 8,
            percentile: 1.0,
            post_ln_per_channel: false,
            calib_samples: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrlSection {
    pub enable: bool,
    /// Clip band half-width in channel standard deviations.
    pub k: f64,
    /// Bit-width of the reference per-channel parameters that drive the fold.
    pub reference_bits: u8,
}

impl Default for CrlSection {
    fn default() -> Self {
        CrlSection {
            enable: true,
            k: 2.0,
            reference_bits: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrpSection {
    /// Images scored for the importance table.
    pub samples: usize,
}

impl Default for LrpSection {
    fn default() -> Self {
        LrpSection { samples: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QsaSection {
    pub baseline_bits: u8,
    pub candidates: Vec<u8>,
    pub loss: LossKind,
    /// Images used for each loss evaluation.
    pub samples: usize,
}

impl Default for QsaSection {
    fn default() -> Self {
        let sweep = SweepConfig::default();
        QsaSection {
            baseline_bits: sweep.baseline_bits,
            candidates: sweep.candidates,
            loss: sweep.loss,
            samples: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocSection {
    pub candidates: Vec<u8>,
    /// Uniform reference bit-width the budgets are derived from.
    pub fixed_bits: u8,
    /// Layers excluded from the search, e.g. `[{ layer = "head", bits = 8 }]`.
    pub pins: Vec<PinEntry>,
    pub orientation: LambdaOrientation,
}

impl Default for AllocSection {
    fn default() -> Self {
        // the default search varies the two largest weight groups (qkv and
        // the MLP expansion) plus the cost-free activation re-codings; the
        // attention matmuls carry activation-only cost and would soak up the
        // bit-op budget at zero model-size cost, the output-side projections
        // (proj, fc2) write into the residual stream where quantization error
        // accumulates, and patch embedding / head follow the usual
        // first/last-layer convention — all of those stay at the reference
        // width
        let pin = |layer: &str| PinEntry {
            layer: layer.to_string(),
            bits: 4,
        };
        AllocSection {
            candidates: vec![3, 4, 5],
            fixed_bits: 4,
            pins: vec![
                pin("patch_embed"),
                pin("matmul1"),
                pin("matmul2"),
                pin("proj"),
                pin("fc2"),
                pin("head"),
            ],
            orientation: LambdaOrientation::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinEntry {
    pub layer: String,
    pub bits: u8,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        match self.dataset.source.as_str() {
            "synthetic" => {
                if self.dataset.classes != self.model.classes {
                    return Err(Error::Config(format!(
                        "dataset.classes ({}) must match model.classes ({})",
                        self.dataset.classes, self.model.classes
                    )));
                }
                if self.dataset.samples == 0 {
                    return Err(Error::Config("dataset.samples must be positive".into()));
                }
            }
            "files" => {
                if self.dataset.dir.is_none() {
                    return Err(Error::Config("dataset.dir required when source = \"files\"".into()));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "dataset.source must be \"synthetic\" or \"files\", got `{other}`"
                )))
            }
        }
        if self.dataset.eval_samples >= self.dataset.samples && self.dataset.source == "synthetic" {
            return Err(Error::Config(format!(
                "dataset.eval_samples ({}) must leave a train split (samples = {})",
                self.dataset.eval_samples, self.dataset.samples
            )));
        }
        if !(self.quant.percentile > 0.5 && self.quant.percentile <= 1.0) {
            return Err(Error::Config(format!(
                "quant.percentile must lie in (0.5, 1], got {}",
                self.quant.percentile
            )));
        }
        for (name, bits) in [
            ("quant.default_bits", self.quant.default_bits),
            ("crl.reference_bits", self.crl.reference_bits),
        ] {
            if !(1..=16).contains(&bits) {
                return Err(Error::Config(format!("{name} must lie in 1..=16, got {bits}")));
            }
        }
        if self.quant.calib_samples == 0 || self.lrp.samples == 0 || self.qsa.samples == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if self.crl.enable && !(self.crl.k > 0.0) {
            return Err(Error::Config(format!("crl.k must be positive, got {}", self.crl.k)));
        }
        self.sweep_config().validate()?;
        let alloc = &self.allocator;
        if alloc.candidates.is_empty() || !alloc.candidates.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "allocator.candidates must be nonempty and strictly increasing".into(),
            ));
        }
        if !alloc.candidates.contains(&alloc.fixed_bits) {
            return Err(Error::Config(format!(
                "allocator.fixed_bits ({}) not in candidates {:?}",
                alloc.fixed_bits, alloc.candidates
            )));
        }
        let mut pinned = BTreeSet::new();
        for pin in &alloc.pins {
            let ids = self.pin_targets(pin).ok_or_else(|| {
                Error::Config(format!("allocator.pins: unknown layer `{}`", pin.layer))
            })?;
            for id in ids {
                if id.block >= self.model.blocks && !id.kind.outside_blocks() {
                    return Err(Error::Config(format!(
                        "allocator.pins: `{}` is outside the {}-block model",
                        pin.layer, self.model.blocks
                    )));
                }
                if !pinned.insert(id) {
                    return Err(Error::Config(format!(
                        "allocator.pins: `{id}` pinned twice"
                    )));
                }
            }
            if !(1..=16).contains(&pin.bits) {
                return Err(Error::Config(format!(
                    "allocator.pins: bits for `{}` must lie in 1..=16, got {}",
                    pin.layer, pin.bits
                )));
            }
        }
        Ok(())
    }

    /// Sites a pin entry covers: a full id pins one site; a bare in-block
    /// kind token ("matmul1") pins that kind in every block.
    fn pin_targets(&self, entry: &PinEntry) -> Option<Vec<LayerId>> {
        if let Some(id) = LayerId::parse(&entry.layer) {
            return Some(vec![id]);
        }
        let kind = LayerKind::from_token(&entry.layer)?;
        if !LayerKind::PER_BLOCK.contains(&kind) {
            return None;
        }
        Some(
            (0..self.model.blocks)
                .map(|b| LayerId::new(b, kind))
                .collect(),
        )
    }

    pub fn calib_options(&self) -> CalibOptions {
        CalibOptions {
            percentile: self.quant.percentile,
            crl: self.crl.enable.then(|| ClipPolicy { k: self.crl.k }),
            crl_bits: self.crl.reference_bits,
            post_ln_per_channel: self.quant.post_ln_per_channel,
            ..CalibOptions::default()
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            baseline_bits: self.qsa.baseline_bits,
            candidates: self.qsa.candidates.clone(),
            loss: self.qsa.loss,
        }
    }

    /// Pin list resolved to layer ids; call after validate().
    pub fn pins(&self) -> Vec<(LayerId, u8)> {
        self.allocator
            .pins
            .iter()
            .filter_map(|p| {
                self.pin_targets(p)
                    .map(|ids| ids.into_iter().map(|id| (id, p.bits)).collect::<Vec<_>>())
            })
            .flatten()
            .collect()
    }

    /// Canonical serialization; field order is fixed by the struct, so the
    /// hash is stable across semantically equal files.
    pub fn canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        format!("{digest:x}")
    }
}
