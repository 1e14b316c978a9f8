//! Run report: one versioned TOML document plus CSV side-files per table.
//! The TOML is the machine-readable record; the CSVs exist for external
//! plotting. Everything except `generated_at` is deterministic for a fixed
//! config and seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alloc::{BitAssignment, Budget};
use crate::crl::ReparamRecord;
use crate::error::{Error, Result};
use crate::lrp::ImportanceTable;
use crate::qsa::SensitivityTable;
use crate::vit::{LayerId, LayerKind, ModelConfig};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub config_hash: String,
    /// Wall-clock stamp; the only field excluded from determinism checks.
    pub generated_at: String,
    pub train: TrainSummary,
    pub crl: Vec<CrlRow>,
    pub importance: Vec<ImportanceRow>,
    pub sensitivity: Vec<SensitivityRow>,
    pub allocation: AllocationSummary,
    pub eval: Vec<EvalRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub eval_accuracy: f64,
}

/// Per folded LayerNorm: scale-band statistics and clip counts per side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrlRow {
    pub layer: String,
    pub mu_s: f64,
    pub sigma_s: f64,
    pub clipped_low: usize,
    pub clipped_high: usize,
    pub degenerate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub layer: String,
    pub omega: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub kind: String,
    pub bits: u8,
    pub lambda: f64,
    pub delta_loss: f64,
    pub delta_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationSummary {
    pub objective: f64,
    pub size: u64,
    pub bitops: u64,
    pub budget_size: u64,
    pub budget_bitops: u64,
    pub bits: Vec<BitRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitRow {
    pub layer: String,
    pub bits: u8,
}

/// Accuracy and mean loss for one evaluated configuration ("fp",
/// "fixed<b>", "mixed").
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub accuracy: f64,
    pub mean_loss: f64,
}

pub fn crl_rows(records: &[ReparamRecord]) -> Vec<CrlRow> {
    records
        .iter()
        .map(|r| {
            let live: Vec<f64> = r
                .scale
                .iter()
                .zip(&r.degenerate)
                .filter(|(_, &d)| !d)
                .map(|(&s, _)| s)
                .collect();
            let n = live.len().max(1) as f64;
            let mu = live.iter().sum::<f64>() / n;
            let var = live.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / n;
            let mut low = 0;
            let mut high = 0;
            for ((&s, &sh), &d) in r.scale.iter().zip(&r.scale_hat).zip(&r.degenerate) {
                if d {
                    continue;
                }
                if sh > s {
                    low += 1;
                } else if sh < s {
                    high += 1;
                }
            }
            CrlRow {
                layer: r.layer.to_string(),
                mu_s: mu,
                sigma_s: var.sqrt(),
                clipped_low: low,
                clipped_high: high,
                degenerate: r.degenerate.iter().filter(|&&d| d).count(),
            }
        })
        .collect()
}

pub fn importance_rows(table: &ImportanceTable) -> Vec<ImportanceRow> {
    table
        .omega
        .iter()
        .map(|(id, &omega)| ImportanceRow {
            layer: id.to_string(),
            omega,
        })
        .collect()
}

pub fn sensitivity_rows(
    table: &SensitivityTable,
    accuracy_deltas: &BTreeMap<(LayerKind, u8), f64>,
) -> Vec<SensitivityRow> {
    table
        .lambda
        .iter()
        .map(|(&(kind, bits), &lambda)| SensitivityRow {
            kind: kind.token().to_string(),
            bits,
            lambda,
            delta_loss: table.deltas.get(&(kind, bits)).copied().unwrap_or(0.0),
            delta_accuracy: accuracy_deltas.get(&(kind, bits)).copied().unwrap_or(0.0),
        })
        .collect()
}

pub fn allocation_summary(
    layers: &[LayerId],
    assignment: &BitAssignment,
    budget: &Budget,
) -> AllocationSummary {
    AllocationSummary {
        objective: assignment.objective,
        size: assignment.size,
        bitops: assignment.bitops,
        budget_size: budget.size,
        budget_bitops: budget.bitops,
        bits: layers
            .iter()
            .zip(&assignment.bits)
            .map(|(id, &bits)| BitRow {
                layer: id.to_string(),
                bits,
            })
            .collect(),
    }
}

impl RunReport {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<RunReport> {
        let report: RunReport =
            toml::from_str(text).map_err(|e| Error::Parse {
                path: "run report".into(),
                message: e.to_string(),
            })?;
        if report.version != REPORT_VERSION {
            return Err(Error::Parse {
                path: "run report".into(),
                message: format!(
                    "unsupported report version {} (expected {REPORT_VERSION})",
                    report.version
                ),
            });
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<RunReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        RunReport::from_toml(&text)
    }

    /// Equality with the wall-clock stamp masked out.
    pub fn results_equal(&self, other: &RunReport) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.generated_at = String::new();
        b.generated_at = String::new();
        a == b
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Two-column human-readable importance table.
pub fn write_importance_table(path: &Path, table: &ImportanceTable) -> Result<()> {
    let mut out = String::from("layer omega\n");
    for (id, omega) in &table.omega {
        let _ = writeln!(out, "{id} {omega:.9}");
    }
    write_text(path, &out)
}

fn kinds_for_block(block: usize, blocks: usize) -> Vec<LayerKind> {
    LayerKind::QUANTIZED
        .into_iter()
        .filter(|k| {
            if k.outside_blocks() {
                // patch embed rides on block 0's row, head on the last
                (block == 0 && *k == LayerKind::PatchEmbed)
                    || (block + 1 == blocks && *k == LayerKind::Head)
            } else {
                true
            }
        })
        .collect()
}

/// Block x kind matrix of a per-layer map; cells outside the model are empty.
fn write_layer_matrix<T: std::fmt::Display>(
    path: &Path,
    values: &BTreeMap<LayerId, T>,
    config: &ModelConfig,
) -> Result<()> {
    let mut out = String::from("block");
    for kind in LayerKind::QUANTIZED {
        out.push(',');
        out.push_str(kind.token());
    }
    out.push('\n');
    for block in 0..config.blocks {
        let _ = write!(out, "b{block}");
        let present = kinds_for_block(block, config.blocks);
        for kind in LayerKind::QUANTIZED {
            out.push(',');
            if present.contains(&kind) {
                let id = LayerId::new(if kind.outside_blocks() { 0 } else { block }, kind);
                if let Some(v) = values.get(&id) {
                    let _ = write!(out, "{v}");
                }
            }
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// Importance heat-map data for external plotting.
pub fn write_importance_heatmap(
    path: &Path,
    table: &ImportanceTable,
    config: &ModelConfig,
) -> Result<()> {
    write_layer_matrix(path, &table.omega, config)
}

/// Chosen bit-width per layer, same matrix layout as the heat map.
pub fn write_bits_matrix(
    path: &Path,
    bits: &BTreeMap<LayerId, u8>,
    config: &ModelConfig,
) -> Result<()> {
    write_layer_matrix(path, bits, config)
}

/// Kind x bit matrices: normalized scores, raw loss deltas, accuracy deltas.
pub fn write_sensitivity_csv(
    path: &Path,
    rows: &[SensitivityRow],
    select: impl Fn(&SensitivityRow) -> f64,
) -> Result<()> {
    let mut bits: Vec<u8> = rows.iter().map(|r| r.bits).collect();
    bits.sort_unstable();
    bits.dedup();
    let mut out = String::from("kind");
    for b in &bits {
        let _ = write!(out, ",b{b}");
    }
    out.push('\n');
    for kind in LayerKind::QUANTIZED {
        out.push_str(kind.token());
        for &b in &bits {
            out.push(',');
            if let Some(row) = rows.iter().find(|r| r.kind == kind.token() && r.bits == b) {
                let _ = write!(out, "{:.9}", select(row));
            }
        }
        out.push('\n');
    }
    write_text(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> RunReport {
        RunReport {
            version: REPORT_VERSION,
            config_hash: "abc".into(),
            generated_at: "2026-08-26T00:00:00Z".into(),
            train: TrainSummary {
                epochs: 2,
                final_loss: 0.5,
                eval_accuracy: 0.9,
            },
            crl: vec![CrlRow {
                layer: "b0.ln1".into(),
                mu_s: 1.0,
                sigma_s: 0.1,
                clipped_low: 1,
                clipped_high: 2,
                degenerate: 0,
            }],
            importance: vec![ImportanceRow {
                layer: "head".into(),
                omega: 1.0,
            }],
            sensitivity: vec![SensitivityRow {
                kind: "qkv".into(),
                bits: 2,
                lambda: 1.0,
                delta_loss: 0.25,
                delta_accuracy: -0.05,
            }],
            allocation: AllocationSummary {
                objective: 1.5,
                size: 100,
                bitops: 200,
                budget_size: 120,
                budget_bitops: 220,
                bits: vec![BitRow {
                    layer: "head".into(),
                    bits: 4,
                }],
            },
            eval: vec![EvalRow {
                label: "fp".into(),
                accuracy: 1.0,
                mean_loss: 0.01,
            }],
        }
    }

    #[test]
    fn report_round_trips_through_toml() {
        let report = sample_report();
        let back = RunReport::from_toml(&report.to_toml()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn timing_field_is_masked_in_comparison() {
        let a = sample_report();
        let mut b = a.clone();
        b.generated_at = "later".into();
        assert_ne!(a, b);
        assert!(a.results_equal(&b));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut report = sample_report();
        report.version = 99;
        assert!(RunReport::from_toml(&report.to_toml()).is_err());
    }

    #[test]
    fn matrix_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let config = ModelConfig {
            blocks: 2,
            ..Default::default()
        };
        let mut bits = BTreeMap::new();
        for kind in LayerKind::PER_BLOCK {
            bits.insert(LayerId::new(0, kind), 4u8);
            bits.insert(LayerId::new(1, kind), 5u8);
        }
        bits.insert(LayerId::new(0, LayerKind::PatchEmbed), 8u8);
        bits.insert(LayerId::new(0, LayerKind::Head), 8u8);
        let path = dir.path().join("bits.csv");
        write_bits_matrix(&path, &bits, &config).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("block,"));
        // patch embed appears only on b0's row, head only on the last
        let header: Vec<&str> = lines[0].split(',').collect();
        let row0: Vec<&str> = lines[1].split(',').collect();
        let row1: Vec<&str> = lines[2].split(',').collect();
        let patch_col = header.iter().position(|&h| h == "patch_embed").unwrap();
        let head_col = header.iter().position(|&h| h == "head").unwrap();
        assert_eq!(row0[patch_col], "8");
        assert_eq!(row1[patch_col], "");
        assert_eq!(row0[head_col], "");
        assert_eq!(row1[head_col], "8");
        let qkv_col = header.iter().position(|&h| h == "qkv").unwrap();
        assert_eq!(row0[qkv_col], "4");
        assert_eq!(row1[qkv_col], "5");
    }

    #[test]
    fn sensitivity_csv_has_kind_rows_and_bit_columns() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            SensitivityRow {
                kind: "qkv".into(),
                bits: 2,
                lambda: 0.7,
                delta_loss: 1.4,
                delta_accuracy: -0.2,
            },
            SensitivityRow {
                kind: "qkv".into(),
                bits: 4,
                lambda: 0.3,
                delta_loss: 0.6,
                delta_accuracy: 0.0,
            },
        ];
        let path = dir.path().join("lambda.csv");
        write_sensitivity_csv(&path, &rows, |r| r.lambda).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "kind,b2,b4");
        let qkv = lines.iter().find(|l| l.starts_with("qkv,")).unwrap();
        assert!(qkv.starts_with("qkv,0.7"));
        assert_eq!(lines.len(), 1 + LayerKind::QUANTIZED.len());
    }
}
