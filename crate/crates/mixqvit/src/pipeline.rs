//! Stage orchestration. Each subcommand reads its predecessors' artifacts
//! from the stage cache, never recomputes them, and writes its own artifact
//! stamped with the run-config hash so stale caches abort instead of mixing.
//!
//! Stage order: synth-data -> calibrate -> importance -> sensitivity ->
//! allocate -> quantize -> eval -> report. Model training happens inside
//! `calibrate` (the pipeline quantizes a pretrained network; the toy model's
//! training is part of producing that network, not a separate stage).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::alloc::{budget_from_fixed, solve_exact, AllocationInstance, LayerSpec};
use crate::calibrate::{fit, Calibrator};
use crate::config::RunConfig;
use crate::data::{accuracy, mean_cross_entropy, synth_dataset, train, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::lrp::{contribution_scores, importance_scores, ImportanceTable};
use crate::qsa::{sweep, sweep_accuracy};
use crate::report::{
    allocation_summary, crl_rows, importance_rows, sensitivity_rows, write_bits_matrix,
    write_importance_heatmap, write_importance_table, write_sensitivity_csv, AllocationSummary,
    EvalRow, ImportanceRow, RunReport, SensitivityRow, TrainSummary, REPORT_VERSION,
};
use crate::vit::{init_weights, layer_registry, LayerId, LayerKind, QuantPlan, ToyViT};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Full objective: Omega and Lambda.
    #[default]
    OmegaLambda,
    /// Importance only; sensitivity forced to zero (Table-IV-style ablation).
    OmegaOnly,
}

impl Ablation {
    pub fn token(&self) -> &'static str {
        match self {
            Ablation::OmegaLambda => "omega-lambda",
            Ablation::OmegaOnly => "omega-only",
        }
    }

    pub fn parse(s: &str) -> Option<Ablation> {
        match s {
            "omega-lambda" => Some(Ablation::OmegaLambda),
            "omega-only" => Some(Ablation::OmegaOnly),
            _ => None,
        }
    }
}

pub struct Pipeline {
    pub config: RunConfig,
    pub out: PathBuf,
    pub cache: PathBuf,
    pub ablation: Ablation,
    hash: String,
}

#[derive(Serialize, Deserialize)]
struct TrainArtifact {
    config_hash: String,
    epochs: usize,
    final_loss: f64,
    eval_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct CalibArtifact {
    config_hash: String,
    calibrator: Calibrator,
}

#[derive(Serialize, Deserialize)]
struct ImportanceArtifact {
    config_hash: String,
    samples: usize,
    rows: Vec<ImportanceRow>,
}

#[derive(Serialize, Deserialize)]
struct SensitivityArtifact {
    config_hash: String,
    uniform_fallback: bool,
    rows: Vec<SensitivityRow>,
}

#[derive(Serialize, Deserialize)]
struct AllocationArtifact {
    config_hash: String,
    ablation: String,
    summary: AllocationSummary,
}

#[derive(Serialize, Deserialize)]
struct PlanArtifact {
    config_hash: String,
    ablation: String,
    plan: QuantPlan,
}

#[derive(Serialize, Deserialize)]
struct EvalArtifact {
    config_hash: String,
    ablation: String,
    rows: Vec<EvalRow>,
}

impl Pipeline {
    /// `seed` overrides the config's model/dataset/train seeds as a family,
    /// so one flag reseeds the whole run coherently.
    pub fn new(
        mut config: RunConfig,
        out: Option<PathBuf>,
        cache: Option<PathBuf>,
        seed: Option<u64>,
        ablation: Ablation,
    ) -> Result<Pipeline> {
        if let Some(s) = seed {
            config.model.seed = s;
            config.dataset.seed = s.wrapping_add(1);
            config.train.seed = s.wrapping_add(2);
        }
        config.validate()?;
        let out = out.unwrap_or_else(|| PathBuf::from(&config.output_dir));
        let cache = cache.unwrap_or_else(|| out.join("stages"));
        let hash = config.hash();
        Ok(Pipeline {
            config,
            out,
            cache,
            ablation,
            hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    fn write_artifact<T: Serialize>(&self, file: &str, artifact: &T) -> Result<()> {
        fs::create_dir_all(&self.cache).map_err(|e| Error::Io {
            path: self.cache.display().to_string(),
            source: e,
        })?;
        let path = self.cache.join(file);
        let text = toml::to_string_pretty(artifact).expect("artifact serializes");
        fs::write(&path, text).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    fn read_artifact<T: DeserializeOwned>(
        &self,
        file: &str,
        stage: &str,
        producer: &str,
    ) -> Result<T> {
        let path = self.cache.join(file);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: stage.into(),
                path: path.display().to_string(),
                producer: producer.into(),
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    fn check_hash(&self, found: &str, path: &Path) -> Result<()> {
        if found != self.hash {
            return Err(Error::ConfigHashMismatch {
                path: path.display().to_string(),
                found: found.to_string(),
                expected: self.hash.clone(),
            });
        }
        Ok(())
    }

    fn check_ablation(&self, found: &str, path: &Path) -> Result<()> {
        if found != self.ablation.token() {
            return Err(Error::ConfigHashMismatch {
                path: path.display().to_string(),
                found: format!("ablation {found}"),
                expected: format!("ablation {}", self.ablation.token()),
            });
        }
        Ok(())
    }

    fn read_store_checked(
        &self,
        dir: &str,
        stage: &str,
        producer: &str,
    ) -> Result<PathBuf> {
        let path = self.cache.join(dir);
        if !path.join("manifest.txt").exists() {
            return Err(Error::MissingArtifact {
                stage: stage.into(),
                path: path.display().to_string(),
                producer: producer.into(),
            });
        }
        let (_, meta) = io::read_store(&path)?;
        let found = meta.get("config_hash").cloned().unwrap_or_default();
        self.check_hash(&found, &path)?;
        Ok(path)
    }

    // ---- stage: synth-data -------------------------------------------------

    pub fn synth_data(&self) -> Result<Dataset> {
        let ds = &self.config.dataset;
        let data = match ds.source.as_str() {
            "synthetic" => synth_dataset(
                &self.config.model,
                &SynthConfig {
                    classes: ds.classes,
                    samples: ds.samples,
                    seed: ds.seed,
                    ..Default::default()
                },
            )?,
            "files" => io::load_dataset(Path::new(ds.dir.as_deref().unwrap()))?,
            _ => unreachable!("validated"),
        };
        let dir = self.cache.join("dataset");
        io::save_dataset(&dir, &data)?;
        self.stamp_store(&dir)?;
        Ok(data)
    }

    fn stamp_store(&self, dir: &Path) -> Result<()> {
        // re-read and re-write with the hash in the meta table
        let (tensors, mut meta) = io::read_store(dir)?;
        meta.insert("config_hash".into(), self.hash.clone());
        let refs: Vec<(String, &crate::tensor::Tensor)> =
            tensors.iter().map(|(k, v)| (k.clone(), v)).collect();
        io::write_store(dir, &refs, &meta)
    }

    fn load_dataset(&self, stage: &str) -> Result<Dataset> {
        let path = self.read_store_checked("dataset", stage, "synth-data")?;
        io::load_dataset(&path)
    }

    /// (train split, eval split).
    pub fn splits(&self, data: &Dataset) -> (Dataset, Dataset) {
        let n_eval = self.config.dataset.eval_samples.min(data.len());
        data.split(data.len() - n_eval)
    }

    fn head(data: &Dataset, n: usize) -> Dataset {
        let n = n.min(data.len());
        Dataset {
            images: data.images[..n].to_vec(),
            labels: data.labels[..n].to_vec(),
        }
    }

    // ---- stage: calibrate --------------------------------------------------

    /// Trains the toy model, fits quantizer ranges (folding LayerNorm
    /// parameters when enabled), and caches the folded working model.
    pub fn calibrate(&self) -> Result<()> {
        let data = self.load_dataset("calibrate")?;
        let (train_split, eval_split) = self.splits(&data);

        let mut model = init_weights(&self.config.model)?;
        let losses = train(&mut model, &train_split, &self.config.train)?;
        let eval_acc = accuracy(&model, &eval_split, None)?;
        self.write_artifact(
            "train.toml",
            &TrainArtifact {
                config_hash: self.hash.clone(),
                epochs: losses.len(),
                final_loss: *losses.last().unwrap_or(&f64::NAN),
                eval_accuracy: eval_acc,
            },
        )?;

        let calib_images = &train_split.images[..self
            .config
            .quant
            .calib_samples
            .min(train_split.len())];
        let (calibrator, working) = fit(&model, calib_images, &self.config.calib_options())?;

        let model_dir = self.cache.join("model");
        io::save_model(&model_dir, &working)?;
        self.stamp_store(&model_dir)?;
        self.write_artifact(
            "calibrator.toml",
            &CalibArtifact {
                config_hash: self.hash.clone(),
                calibrator,
            },
        )
    }

    fn load_model(&self, stage: &str) -> Result<ToyViT> {
        let path = self.read_store_checked("model", stage, "calibrate")?;
        io::load_model(&path)
    }

    fn load_calibrator(&self, stage: &str) -> Result<Calibrator> {
        let art: CalibArtifact = self.read_artifact("calibrator.toml", stage, "calibrate")?;
        self.check_hash(&art.config_hash, &self.cache.join("calibrator.toml"))?;
        Ok(art.calibrator)
    }

    fn load_train_summary(&self, stage: &str) -> Result<TrainSummary> {
        let art: TrainArtifact = self.read_artifact("train.toml", stage, "calibrate")?;
        self.check_hash(&art.config_hash, &self.cache.join("train.toml"))?;
        Ok(TrainSummary {
            epochs: art.epochs,
            final_loss: art.final_loss,
            eval_accuracy: art.eval_accuracy,
        })
    }

    // ---- stage: importance -------------------------------------------------

    pub fn importance(&self) -> Result<ImportanceTable> {
        let data = self.load_dataset("importance")?;
        let model = self.load_model("importance")?;
        let (train_split, _) = self.splits(&data);
        let sample = Self::head(&train_split, self.config.lrp.samples);
        let contributions = contribution_scores(&model, &sample.images)?;
        let table = importance_scores(&contributions)?;
        self.write_artifact(
            "importance.toml",
            &ImportanceArtifact {
                config_hash: self.hash.clone(),
                samples: contributions.samples,
                rows: importance_rows(&table),
            },
        )?;
        Ok(table)
    }

    fn load_importance(&self, stage: &str) -> Result<ImportanceTable> {
        let art: ImportanceArtifact = self.read_artifact("importance.toml", stage, "importance")?;
        self.check_hash(&art.config_hash, &self.cache.join("importance.toml"))?;
        let mut omega = BTreeMap::new();
        for row in &art.rows {
            let id = LayerId::parse(&row.layer).ok_or_else(|| Error::Parse {
                path: "importance.toml".into(),
                message: format!("unknown layer `{}`", row.layer),
            })?;
            omega.insert(id, row.omega);
        }
        Ok(ImportanceTable { omega })
    }

    // ---- stage: sensitivity ------------------------------------------------

    pub fn sensitivity(&self) -> Result<Vec<SensitivityRow>> {
        let data = self.load_dataset("sensitivity")?;
        let model = self.load_model("sensitivity")?;
        let calibrator = self.load_calibrator("sensitivity")?;
        let (train_split, _) = self.splits(&data);
        let sample = Self::head(&train_split, self.config.qsa.samples);
        let cfg = self.config.sweep_config();
        let table = sweep(&model, &calibrator, &sample, &cfg)?;
        let acc = sweep_accuracy(&model, &calibrator, &sample, &cfg)?;
        let rows = sensitivity_rows(&table, &acc);
        self.write_artifact(
            "sensitivity.toml",
            &SensitivityArtifact {
                config_hash: self.hash.clone(),
                uniform_fallback: table.uniform_fallback,
                rows: rows.clone(),
            },
        )?;
        Ok(rows)
    }

    fn load_lambda(&self, stage: &str) -> Result<BTreeMap<(LayerKind, u8), f64>> {
        let art: SensitivityArtifact =
            self.read_artifact("sensitivity.toml", stage, "sensitivity")?;
        self.check_hash(&art.config_hash, &self.cache.join("sensitivity.toml"))?;
        let mut lambda = BTreeMap::new();
        for row in &art.rows {
            let kind = LayerKind::from_token(&row.kind).ok_or_else(|| Error::Parse {
                path: "sensitivity.toml".into(),
                message: format!("unknown layer kind `{}`", row.kind),
            })?;
            lambda.insert((kind, row.bits), row.lambda);
        }
        Ok(lambda)
    }

    fn load_sensitivity_rows(&self, stage: &str) -> Result<Vec<SensitivityRow>> {
        let art: SensitivityArtifact =
            self.read_artifact("sensitivity.toml", stage, "sensitivity")?;
        self.check_hash(&art.config_hash, &self.cache.join("sensitivity.toml"))?;
        Ok(art.rows)
    }

    // ---- stage: allocate ---------------------------------------------------

    pub fn allocate(&self) -> Result<AllocationSummary> {
        let table = self.load_importance("allocate")?;
        let lambda = match self.ablation {
            Ablation::OmegaLambda => self.load_lambda("allocate")?,
            Ablation::OmegaOnly => BTreeMap::new(), // sensitivity forced to zero
        };
        let pins: BTreeMap<LayerId, u8> = self.config.pins().into_iter().collect();
        let registry = layer_registry(&self.config.model);
        for &b in self.config.allocator.candidates.iter() {
            if self.ablation == Ablation::OmegaLambda
                && !lambda.keys().any(|&(_, bit)| bit == b)
            {
                return Err(Error::Config(format!(
                    "allocator candidate bit {b} missing from the sensitivity sweep; \
                     add it to qsa.candidates"
                )));
            }
        }
        let layers: Vec<LayerSpec> = registry
            .iter()
            .map(|e| LayerSpec {
                id: e.id,
                weight_count: e.weight_count,
                macs: e.macs,
                omega: table.omega.get(&e.id).copied().unwrap_or(0.0),
                pinned: pins.get(&e.id).copied(),
            })
            .collect();
        let instance = AllocationInstance {
            layers: layers.clone(),
            candidates: self.config.allocator.candidates.clone(),
            lambda,
            orientation: self.config.allocator.orientation,
        };
        let budget = budget_from_fixed(&instance, self.config.allocator.fixed_bits)?;
        let assignment = solve_exact(&instance, &budget)?;
        let ids: Vec<LayerId> = layers.iter().map(|l| l.id).collect();
        let summary = allocation_summary(&ids, &assignment, &budget);
        self.write_artifact(
            "allocation.toml",
            &AllocationArtifact {
                config_hash: self.hash.clone(),
                ablation: self.ablation.token().into(),
                summary: summary.clone(),
            },
        )?;
        Ok(summary)
    }

    fn load_allocation(&self, stage: &str) -> Result<AllocationSummary> {
        let art: AllocationArtifact = self.read_artifact("allocation.toml", stage, "allocate")?;
        let path = self.cache.join("allocation.toml");
        self.check_hash(&art.config_hash, &path)?;
        self.check_ablation(&art.ablation, &path)?;
        Ok(art.summary)
    }

    fn bits_map(summary: &AllocationSummary) -> Result<BTreeMap<LayerId, u8>> {
        let mut bits = BTreeMap::new();
        for row in &summary.bits {
            let id = LayerId::parse(&row.layer).ok_or_else(|| Error::Parse {
                path: "allocation.toml".into(),
                message: format!("unknown layer `{}`", row.layer),
            })?;
            bits.insert(id, row.bits);
        }
        Ok(bits)
    }

    // ---- stage: quantize ---------------------------------------------------

    /// Materializes the mixed-precision plan and the fixed-bit reference plan.
    pub fn quantize(&self) -> Result<()> {
        let model = self.load_model("quantize")?;
        let calibrator = self.load_calibrator("quantize")?;
        let allocation = self.load_allocation("quantize")?;
        let bits = Self::bits_map(&allocation)?;
        let mixed = calibrator.plan(&model, &bits)?;
        let fixed = calibrator.uniform_plan(&model, self.config.allocator.fixed_bits)?;
        self.write_artifact(
            "plan_mixed.toml",
            &PlanArtifact {
                config_hash: self.hash.clone(),
                ablation: self.ablation.token().into(),
                plan: mixed,
            },
        )?;
        self.write_artifact(
            "plan_fixed.toml",
            &PlanArtifact {
                config_hash: self.hash.clone(),
                ablation: self.ablation.token().into(),
                plan: fixed,
            },
        )
    }

    fn load_plan(&self, file: &str, stage: &str) -> Result<QuantPlan> {
        let art: PlanArtifact = self.read_artifact(file, stage, "quantize")?;
        let path = self.cache.join(file);
        self.check_hash(&art.config_hash, &path)?;
        self.check_ablation(&art.ablation, &path)?;
        Ok(art.plan)
    }

    // ---- stage: eval -------------------------------------------------------

    pub fn eval(&self) -> Result<Vec<EvalRow>> {
        let data = self.load_dataset("eval")?;
        let model = self.load_model("eval")?;
        let mixed = self.load_plan("plan_mixed.toml", "eval")?;
        let fixed = self.load_plan("plan_fixed.toml", "eval")?;
        let (_, eval_split) = self.splits(&data);
        let mut rows = Vec::new();
        for (label, plan) in [
            ("fp".to_string(), None),
            (format!("fixed{}", self.config.allocator.fixed_bits), Some(&fixed)),
            ("mixed".to_string(), Some(&mixed)),
        ] {
            rows.push(EvalRow {
                label,
                accuracy: accuracy(&model, &eval_split, plan)?,
                mean_loss: mean_cross_entropy(&model, &eval_split, plan)?,
            });
        }
        self.write_artifact(
            "eval.toml",
            &EvalArtifact {
                config_hash: self.hash.clone(),
                ablation: self.ablation.token().into(),
                rows: rows.clone(),
            },
        )?;
        Ok(rows)
    }

    // ---- stage: report -----------------------------------------------------

    pub fn report(&self) -> Result<RunReport> {
        let train_summary = self.load_train_summary("report")?;
        let calibrator = self.load_calibrator("report")?;
        let importance = self.load_importance("report")?;
        let sensitivity = self.load_sensitivity_rows("report")?;
        let allocation = self.load_allocation("report")?;
        let eval_art: EvalArtifact = self.read_artifact("eval.toml", "report", "eval")?;
        let eval_path = self.cache.join("eval.toml");
        self.check_hash(&eval_art.config_hash, &eval_path)?;
        self.check_ablation(&eval_art.ablation, &eval_path)?;

        let report = RunReport {
            version: REPORT_VERSION,
            config_hash: self.hash.clone(),
            generated_at: unix_timestamp(),
            train: train_summary,
            crl: crl_rows(&calibrator.records),
            importance: importance_rows(&importance),
            sensitivity,
            allocation: allocation.clone(),
            eval: eval_art.rows,
        };

        fs::create_dir_all(&self.out).map_err(|e| Error::Io {
            path: self.out.display().to_string(),
            source: e,
        })?;
        report.save(&self.out.join("report.toml"))?;
        write_importance_table(&self.out.join("importance.txt"), &importance)?;
        write_importance_heatmap(
            &self.out.join("importance_heatmap.csv"),
            &importance,
            &self.config.model,
        )?;
        write_sensitivity_csv(&self.out.join("sensitivity_lambda.csv"), &report.sensitivity, |r| {
            r.lambda
        })?;
        write_sensitivity_csv(
            &self.out.join("sensitivity_delta_loss.csv"),
            &report.sensitivity,
            |r| r.delta_loss,
        )?;
        write_sensitivity_csv(
            &self.out.join("sensitivity_delta_accuracy.csv"),
            &report.sensitivity,
            |r| r.delta_accuracy,
        )?;
        write_bits_matrix(
            &self.out.join("bits_matrix.csv"),
            &Self::bits_map(&allocation)?,
            &self.config.model,
        )?;
        Ok(report)
    }

    /// Convenience for tests and one-shot runs: every stage in order.
    pub fn run_all(&self) -> Result<RunReport> {
        self.synth_data()?;
        self.calibrate()?;
        self.importance()?;
        self.sensitivity()?;
        self.allocate()?;
        self.quantize()?;
        self.eval()?;
        self.report()
    }
}

fn unix_timestamp() -> String {
    use std::time::{SystemTime, UNIX_EPOCH};
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    secs.to_string()
}

/// Rebuild a sensitivity-score table from report rows (used by tests and by
/// downstream consumers of a cached run).
pub fn lambda_from_rows(rows: &[SensitivityRow]) -> Result<BTreeMap<(LayerKind, u8), f64>> {
    let mut lambda = BTreeMap::new();
    for row in rows {
        let kind = LayerKind::from_token(&row.kind).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown layer kind `{}`", row.kind))
        })?;
        lambda.insert((kind, row.bits), row.lambda);
    }
    Ok(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.blocks = 1;
        c.model.embed_dim = 16;
        c.model.heads = 2;
        c.model.mlp_dim = 32;
        c.model.tokens = 16;
        c.model.classes = 4;
        c.model.image_size = 8;
        c.dataset.classes = 4;
        c.dataset.samples = 48;
        c.dataset.eval_samples = 16;
        c.train.epochs = 2;
        c.quant.calib_samples = 8;
        c.lrp.samples = 8;
        c.qsa.samples = 8;
        c.qsa.candidates = vec![3, 4, 6];
        c.qsa.baseline_bits = 4;
        c.allocator.candidates = vec![3, 4, 6];
        c
    }

    fn pipeline(dir: &Path) -> Pipeline {
        Pipeline::new(
            tiny_config(),
            Some(dir.join("out")),
            Some(dir.join("cache")),
            None,
            Ablation::OmegaLambda,
        )
        .unwrap()
    }

    #[test]
    fn stages_require_their_predecessors() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path());
        match p.calibrate() {
            Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "synth-data"),
            other => panic!("expected missing artifact, got {other:?}"),
        }
        p.synth_data().unwrap();
        match p.importance() {
            Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "calibrate"),
            other => panic!("expected missing artifact, got {other:?}"),
        }
    }

    #[test]
    fn full_pipeline_produces_a_report() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path());
        let report = p.run_all().unwrap();
        assert_eq!(report.version, REPORT_VERSION);
        assert_eq!(report.config_hash, p.config_hash());
        assert_eq!(report.eval.len(), 3);
        let omega_total: f64 = report.importance.iter().map(|r| r.omega).sum();
        assert!((omega_total - 1.0).abs() < 1e-9);
        assert!(report.allocation.size <= report.allocation.budget_size);
        assert!(report.allocation.bitops <= report.allocation.budget_bitops);
        for f in [
            "report.toml",
            "importance.txt",
            "importance_heatmap.csv",
            "sensitivity_lambda.csv",
            "sensitivity_delta_loss.csv",
            "sensitivity_delta_accuracy.csv",
            "bits_matrix.csv",
        ] {
            assert!(dir.path().join("out").join(f).exists(), "missing {f}");
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path());
        p.synth_data().unwrap();
        let mut other_cfg = tiny_config();
        other_cfg.train.epochs = 3;
        let p2 = Pipeline::new(
            other_cfg,
            Some(dir.path().join("out")),
            Some(dir.path().join("cache")),
            None,
            Ablation::OmegaLambda,
        )
        .unwrap();
        assert!(matches!(
            p2.calibrate(),
            Err(Error::ConfigHashMismatch { .. })
        ));
    }

    #[test]
    fn ablation_mismatch_is_rejected_downstream() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path());
        p.synth_data().unwrap();
        p.calibrate().unwrap();
        p.importance().unwrap();
        p.sensitivity().unwrap();
        p.allocate().unwrap();
        let flipped = Pipeline::new(
            tiny_config(),
            Some(dir.path().join("out")),
            Some(dir.path().join("cache")),
            None,
            Ablation::OmegaOnly,
        )
        .unwrap();
        assert!(matches!(
            flipped.quantize(),
            Err(Error::ConfigHashMismatch { .. })
        ));
    }
}
