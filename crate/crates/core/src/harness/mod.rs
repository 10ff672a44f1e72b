//! Experiment orchestration. Every stage writes its artifacts under the output
//! directory and records a fingerprint of its inputs in the run's
//! `manifest.json`; a stage whose fingerprint is unchanged is loaded instead
//! of recomputed.
//!
//! ```text
//! <out>/config.toml
//! <out>/original/seed-<s>/{model.bin, manifest.json}
//! <out>/runs/class-<k>/n-<N>/seed-<s>/
//!     manifest.json split.toml gold.bin
//!     twin/ features/ predictor/ methods/<m>/ reports/<m>.json
//! <out>/reports.csv <out>/sweep.csv <out>/report/
//! ```

mod config;
pub mod reference;
mod report;

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{ExperimentConfig, GoldPolicy, Profile, UnlearnPatch, UnlearnSection};
pub use report::{emit_report, render_tables, ReportFiles, Table};

use crate::data::{self, make_removal_split, DataSplit, TrainTest};
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, write_reports_csv, PartitionSizes, RunExtras, UnlearnReport};
use crate::features::{Feature, FeatureMatrix};
use crate::modeling::{build_model, load_checkpoint_expecting, save_checkpoint, train, TrainConfig, TrainedModel};
use crate::predictor::{train_predictor, ForgetPartition, PredictorConfig};
use crate::twin::{construct_twin, label_generalization, TwinProblem};
use crate::unlearn::{
    tmu_features, tmu_predict, unlearn_baseline, unlearn_with_partition, Method, TmuDiagnostics, TmuFeatures,
    UnlearnOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Data,
    Train,
    Gold,
    Twin,
    Features,
    Predict,
    Unlearn,
    Eval,
    Ablation,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Train => "train",
            Stage::Gold => "gold",
            Stage::Twin => "twin",
            Stage::Features => "features",
            Stage::Predict => "predict",
            Stage::Unlearn => "unlearn",
            Stage::Eval => "eval",
            Stage::Ablation => "ablation",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One independent removal experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunKey {
    pub class: usize,
    pub n_forget: usize,
    pub seed: u64,
}

impl RunKey {
    pub fn relative_dir(&self) -> PathBuf {
        PathBuf::from(format!("class-{}", self.class))
            .join(format!("n-{}", self.n_forget))
            .join(format!("seed-{}", self.seed))
    }
}

impl fmt::Display for RunKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "class {} n_forget {} seed {}", self.class, self.n_forget, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    pub status: StageStatus,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<serde_json::Value>,
}

/// Stage records of one directory, keyed by stage (and method where relevant).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(Self::FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageCounts {
    pub computed: usize,
    pub reused: usize,
}

/// A value together with the fingerprint of everything it was derived from.
#[derive(Debug, Clone)]
pub struct Artifact<T> {
    pub value: T,
    pub fingerprint: String,
}

/// Predictor accuracy for one feature subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub features: String,
    pub holdout_accuracy: Option<f64>,
    /// Agreement with the gold model's labels on `D_f`.
    pub forget_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub reports: Vec<UnlearnReport>,
    pub diagnostics: Option<TmuDiagnostics>,
    pub ablation: Option<Vec<AblationRow>>,
}

/// Mean metrics for one (size, method) point of the alignment-vs-size curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n_forget: usize,
    pub method: String,
    pub runs: usize,
    pub mean_acc_test: f64,
    pub mean_acc_forget: f64,
    pub mean_delta: Option<f64>,
    pub mean_activation_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub reports: Vec<UnlearnReport>,
    pub curve: Vec<CurvePoint>,
}

impl SweepResult {
    pub fn from_reports(reports: Vec<UnlearnReport>) -> Self {
        let curve = curve(&reports);
        Self { reports, curve }
    }

    pub fn point(&self, n_forget: usize, method: &str) -> Option<&CurvePoint> {
        self.curve.iter().find(|p| p.n_forget == n_forget && p.method == method)
    }

    pub fn write_curve(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.curve {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-(size, method) means; only runs that carry a value contribute to it.
pub fn curve(reports: &[UnlearnReport]) -> Vec<CurvePoint> {
    let mut groups: BTreeMap<(usize, usize, String), Vec<&UnlearnReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.n_forget, method_order(&r.method), r.method.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((n_forget, _, method), rs)| CurvePoint {
            n_forget,
            method,
            runs: rs.len(),
            mean_acc_test: mean(rs.iter().map(|r| r.acc_test)).unwrap_or(f64::NAN),
            mean_acc_forget: mean(rs.iter().map(|r| r.acc_forget)).unwrap_or(f64::NAN),
            mean_delta: mean(rs.iter().filter_map(|r| r.delta)),
            mean_activation_distance: mean(rs.iter().filter_map(|r| r.activation_distance)),
        })
        .collect()
}

/// Table order: gold first, then the methods in their declaration order.
pub(crate) fn method_order(name: &str) -> usize {
    if name == "gold" {
        return 0;
    }
    Method::ALL.iter().position(|m| m.name() == name).map_or(usize::MAX, |p| p + 1)
}

pub fn fingerprint(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config types serialize")
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub struct Experiment {
    config: ExperimentConfig,
    out: PathBuf,
    data: TrainTest,
    data_fp: String,
    counts: Cell<StageCounts>,
}

impl Experiment {
    /// Validates the config, loads the dataset and writes the resolved config
    /// to `<out>/config.toml`.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let out = config.out_dir.clone();
        let data = data::load(&config.dataset).map_err(|e| Error::Stage {
            stage: Stage::Data.name().into(),
            run: config.dataset.name.clone(),
            source: Box::new(e),
        })?;
        for &c in &config.forget_classes {
            if c >= data.train.num_classes() {
                return Err(Error::InvalidConfig(format!(
                    "forget class {c} out of range for {} classes",
                    data.train.num_classes()
                )));
            }
        }
        ensure_dir(&out)?;
        let path = out.join("config.toml");
        std::fs::write(&path, config.to_toml()?).map_err(|e| Error::io(&path, e))?;
        let data_fp = fingerprint(&[&data.train.fingerprint(), &data.test.fingerprint()]);
        Ok(Self { config, out, data, data_fp, counts: Cell::new(StageCounts::default()) })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn data(&self) -> &TrainTest {
        &self.data
    }

    pub fn counts(&self) -> StageCounts {
        self.counts.get()
    }

    pub fn run_dir(&self, key: &RunKey) -> PathBuf {
        self.out.join("runs").join(key.relative_dir())
    }

    pub fn original_dir(&self, seed: u64) -> PathBuf {
        self.out.join("original").join(format!("seed-{seed}"))
    }

    /// Every (class, seed) pair at the given sizes, sizes outermost.
    pub fn keys(&self, sizes: &[usize]) -> Vec<RunKey> {
        let mut keys = Vec::new();
        for &n_forget in sizes {
            for &class in &self.config.forget_classes {
                for &seed in &self.config.seeds {
                    keys.push(RunKey { class, n_forget, seed });
                }
            }
        }
        keys
    }

    fn bump(&self, computed: bool) {
        let mut c = self.counts.get();
        if computed {
            c.computed += 1;
        } else {
            c.reused += 1;
        }
        self.counts.set(c);
    }

    /// Loads the stage's outputs if its recorded fingerprint matches and every
    /// output file exists; otherwise computes, persists and records it.
    #[allow(clippy::too_many_arguments)]
    fn cached<T>(
        &self,
        dir: &Path,
        record: &str,
        stage: Stage,
        run: &str,
        fp: &str,
        outputs: &[&str],
        load: impl FnOnce() -> Result<T>,
        compute: impl FnOnce() -> Result<(T, Option<serde_json::Value>)>,
    ) -> Result<T> {
        let wrap = |e: Error| Error::Stage { stage: stage.name().into(), run: run.to_string(), source: Box::new(e) };
        ensure_dir(dir).map_err(wrap)?;
        let mut manifest = Manifest::load(dir).map_err(wrap)?;
        let hit = manifest.stages.get(record).is_some_and(|r| r.fingerprint == fp && r.status == StageStatus::Done)
            && outputs.iter().all(|o| dir.join(o).exists());
        if hit {
            match load() {
                Ok(v) => {
                    self.bump(false);
                    return Ok(v);
                }
                Err(e) => log::warn!("{run}: cached {record} unreadable ({e}); recomputing"),
            }
        }
        log::info!("{run}: computing {record}");
        let start = Instant::now();
        let result = compute();
        let seconds = start.elapsed().as_secs_f64();
        let (value, rec) = match result {
            Ok((v, diagnostics)) => (
                Ok(v),
                StageRecord { fingerprint: fp.into(), status: StageStatus::Done, seconds, error: None, diagnostics },
            ),
            Err(e) => {
                let rec = StageRecord {
                    fingerprint: fp.into(),
                    status: StageStatus::Failed,
                    seconds,
                    error: Some(e.to_string()),
                    diagnostics: None,
                };
                (Err(e), rec)
            }
        };
        manifest.stages.insert(record.to_string(), rec);
        manifest.save(dir).map_err(wrap)?;
        self.bump(true);
        value.map_err(wrap)
    }

    fn stage_seconds(&self, key: &RunKey, records: &[&str]) -> f64 {
        let m = Manifest::load(&self.run_dir(key)).unwrap_or_default();
        records.iter().filter_map(|r| m.stages.get(*r)).map(|r| r.seconds).sum()
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.config.train.clone() }
    }

    fn init_model(&self, seed: u64) -> Result<TrainedModel> {
        build_model(&self.config.arch, self.data.train.shape(), self.data.train.num_classes(), seed)
    }

    /// `M_o` for a seed, trained on the full training set and shared by every class.
    pub fn original(&self, seed: u64) -> Result<Artifact<TrainedModel>> {
        let dir = self.original_dir(seed);
        let cfg = self.train_config(seed);
        let fp = fingerprint(&["train", &self.data_fp, &json(&self.config.arch), &json(&cfg)]);
        let path = dir.join("model.bin");
        let value = self.cached(
            &dir,
            "train",
            Stage::Train,
            &format!("seed {seed}"),
            &fp,
            &["model.bin"],
            || load_checkpoint_expecting(&path, &self.config.arch),
            || {
                let model = train(&self.init_model(seed)?, &self.data.train, &cfg)?;
                save_checkpoint(&model, &path)?;
                Ok((model, None))
            },
        )?;
        Ok(Artifact { value, fingerprint: fp })
    }

    pub fn split(&self, key: &RunKey) -> Result<Artifact<DataSplit>> {
        let wrap = |e: Error| Error::Stage { stage: "split".into(), run: key.to_string(), source: Box::new(e) };
        let split =
            make_removal_split(&self.data.train, &self.data.test, key.class, key.n_forget, key.seed).map_err(wrap)?;
        let dir = self.run_dir(key);
        ensure_dir(&dir).map_err(wrap)?;
        let manifest = split.manifest(&self.data.train);
        manifest.save(&dir.join("split.toml")).map_err(wrap)?;
        let fp = fingerprint(&["split", &self.data_fp, &json(&manifest)]);
        Ok(Artifact { value: split, fingerprint: fp })
    }

    /// The model retrained without `D_f`, per the gold policy.
    pub fn gold(&self, key: &RunKey, split: &Artifact<DataSplit>) -> Result<Artifact<Option<TrainedModel>>> {
        let dir = self.run_dir(key);
        let path = dir.join("gold.bin");
        match self.config.gold {
            GoldPolicy::Skip => Ok(Artifact { value: None, fingerprint: "none".into() }),
            GoldPolicy::Load => {
                let model = load_checkpoint_expecting(&path, &self.config.arch).map_err(|e| Error::Stage {
                    stage: Stage::Gold.name().into(),
                    run: key.to_string(),
                    source: Box::new(e),
                })?;
                let fp = fingerprint(&["gold-load", &model.content_hash()]);
                Ok(Artifact { value: Some(model), fingerprint: fp })
            }
            GoldPolicy::Train => {
                let cfg = self.train_config(key.seed);
                let fp = fingerprint(&["gold", &split.fingerprint, &json(&self.config.arch), &json(&cfg)]);
                let model = self.cached(
                    &dir,
                    "gold",
                    Stage::Gold,
                    &key.to_string(),
                    &fp,
                    &["gold.bin"],
                    || load_checkpoint_expecting(&path, &self.config.arch),
                    || {
                        let model = train(&self.init_model(key.seed)?, &split.value.remain, &cfg)?;
                        save_checkpoint(&model, &path)?;
                        Ok((model, None))
                    },
                )?;
                Ok(Artifact { value: Some(model), fingerprint: fp })
            }
        }
    }

    pub fn twin(
        &self,
        key: &RunKey,
        original: &Artifact<TrainedModel>,
        split: &Artifact<DataSplit>,
    ) -> Result<Artifact<TwinProblem>> {
        let dir = self.run_dir(key);
        let cfg = &self.config.twin;
        let fp = fingerprint(&["twin", &original.fingerprint, &split.fingerprint, &json(cfg), &key.seed.to_string()]);
        let twin_dir = dir.join("twin");
        let value = self.cached(
            &dir,
            "twin",
            Stage::Twin,
            &key.to_string(),
            &fp,
            &["twin/twin.bin", "twin/twin.toml"],
            || TwinProblem::restore(&twin_dir, &original.value, &self.data.test, &split.value, cfg),
            || {
                let twin = construct_twin(&original.value, &self.data.test, &split.value, cfg, key.seed)?;
                twin.save(&twin_dir, key.seed)?;
                Ok((twin.clone(), Some(serde_json::to_value(twin.sizing)?)))
            },
        )?;
        Ok(Artifact { value, fingerprint: fp })
    }

    pub fn features(
        &self,
        key: &RunKey,
        original: &Artifact<TrainedModel>,
        split: &Artifact<DataSplit>,
        twin: &Artifact<TwinProblem>,
    ) -> Result<Artifact<TmuFeatures>> {
        let dir = self.run_dir(key);
        let tmu = &self.config.tmu;
        let fp = fingerprint(&[
            "features",
            &twin.fingerprint,
            &json(&tmu.features),
            &tmu.evaluate_holdout.to_string(),
            &key.seed.to_string(),
        ]);
        let fdir = dir.join("features");
        let mut outputs = vec!["features/curriculum.bin", "features/twin.csv", "features/forget.csv"];
        let with_holdout = tmu.evaluate_holdout && !twin.value.holdout.is_empty();
        if with_holdout {
            outputs.push("features/holdout.csv");
        }
        let value = self.cached(
            &dir,
            "features",
            Stage::Features,
            &key.to_string(),
            &fp,
            &outputs,
            || {
                Ok(TmuFeatures {
                    curriculum_model: load_checkpoint_expecting(&fdir.join("curriculum.bin"), &self.config.arch)?,
                    twin: FeatureMatrix::load(&fdir.join("twin.csv"))?,
                    holdout: if with_holdout { Some(FeatureMatrix::load(&fdir.join("holdout.csv"))?) } else { None },
                    forget: FeatureMatrix::load(&fdir.join("forget.csv"))?,
                })
            },
            || {
                let f = tmu_features(&original.value, &split.value, &twin.value, key.seed, tmu)?;
                ensure_dir(&fdir)?;
                save_checkpoint(&f.curriculum_model, &fdir.join("curriculum.bin"))?;
                f.twin.save(&fdir.join("twin.csv"))?;
                f.forget.save(&fdir.join("forget.csv"))?;
                if let Some(h) = &f.holdout {
                    h.save(&fdir.join("holdout.csv"))?;
                }
                Ok((f, None))
            },
        )?;
        Ok(Artifact { value, fingerprint: fp })
    }

    fn predictor_config(&self, seed: u64) -> PredictorConfig {
        PredictorConfig { seed, ..self.config.tmu.predictor.clone() }
    }

    pub fn predict(
        &self,
        key: &RunKey,
        split: &Artifact<DataSplit>,
        features: &Artifact<TmuFeatures>,
    ) -> Result<Artifact<(ForgetPartition, TmuDiagnostics)>> {
        let dir = self.run_dir(key);
        let pcfg = self.predictor_config(key.seed);
        let fp = fingerprint(&["predict", &features.fingerprint, &json(&pcfg)]);
        let pdir = dir.join("predictor");
        let read_json = |name: &str| -> Result<serde_json::Value> {
            let path = pdir.join(name);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok(serde_json::from_str(&text)?)
        };
        let write_json = |name: &str, v: &serde_json::Value| -> Result<()> {
            let path = pdir.join(name);
            std::fs::write(&path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(&path, e))
        };
        let value = self.cached(
            &dir,
            "predict",
            Stage::Predict,
            &key.to_string(),
            &fp,
            &["predictor/predictor.json", "predictor/partition.json", "predictor/diagnostics.json"],
            || {
                let partition = serde_json::from_value(read_json("partition.json")?)?;
                let diagnostics = serde_json::from_value(read_json("diagnostics.json")?)?;
                Ok((partition, diagnostics))
            },
            || {
                let f = &features.value;
                let (predictor, partition, diagnostics) =
                    tmu_predict(&split.value, &f.twin, f.holdout.as_ref(), &f.forget, &pcfg)?;
                ensure_dir(&pdir)?;
                predictor.save(&pdir.join("predictor.json"))?;
                write_json("partition.json", &serde_json::to_value(&partition)?)?;
                let diag = serde_json::to_value(&diagnostics)?;
                write_json("diagnostics.json", &diag)?;
                Ok(((partition, diagnostics), Some(diag)))
            },
        )?;
        Ok(Artifact { value, fingerprint: fp })
    }

    /// Unlearns with one method. TMU needs the predictor stage's partition.
    pub fn unlearn(
        &self,
        key: &RunKey,
        method: Method,
        original: &Artifact<TrainedModel>,
        split: &Artifact<DataSplit>,
        partition: Option<&Artifact<(ForgetPartition, TmuDiagnostics)>>,
    ) -> Result<Artifact<TrainedModel>> {
        let dir = self.run_dir(key);
        let cfg = self.config.method_config(method, key.seed);
        let upstream = match (method, partition) {
            (Method::Tmu, Some(p)) => p.fingerprint.clone(),
            (Method::Tmu, None) => {
                return Err(Error::Stage {
                    stage: Stage::Unlearn.name().into(),
                    run: key.to_string(),
                    source: Box::new(Error::InvalidConfig("tmu needs the predictor stage".into())),
                })
            }
            _ => String::new(),
        };
        let fp =
            fingerprint(&["unlearn", method.name(), &original.fingerprint, &split.fingerprint, &json(&cfg), &upstream]);
        let rel = format!("methods/{}", method.name());
        let mdir = dir.join(&rel);
        let model_rel = format!("{rel}/model.bin");
        let value = self.cached(
            &dir,
            &format!("unlearn:{}", method.name()),
            Stage::Unlearn,
            &key.to_string(),
            &fp,
            &[&model_rel],
            || load_checkpoint_expecting(&mdir.join("model.bin"), &self.config.arch),
            || {
                let out: UnlearnOutcome = match method {
                    Method::Tmu => {
                        let (part, _) = &partition.expect("checked above").value;
                        unlearn_with_partition(&original.value, &split.value, part, &cfg)?
                    }
                    _ => unlearn_baseline(&original.value, &split.value, &cfg)?,
                };
                ensure_dir(&mdir)?;
                save_checkpoint(&out.model, &mdir.join("model.bin"))?;
                let log_path = mdir.join("log.csv");
                let mut w = csv::Writer::from_path(&log_path)?;
                for row in &out.log {
                    w.serialize(row)?;
                }
                w.flush().map_err(|e| Error::io(&log_path, e))?;
                let diag = serde_json::json!({ "stopped_early": out.stopped_early, "epochs_run": out.log.len() });
                Ok((out.model, Some(diag)))
            },
        )?;
        Ok(Artifact { value, fingerprint: fp })
    }

    /// Scores an unlearned model (or the gold model itself, as `gold`).
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        &self,
        key: &RunKey,
        method: &str,
        model: &Artifact<TrainedModel>,
        gold: &Artifact<Option<TrainedModel>>,
        split: &Artifact<DataSplit>,
        partition: Option<&ForgetPartition>,
        wall_clock: f64,
    ) -> Result<UnlearnReport> {
        let dir = self.run_dir(key);
        let fp = fingerprint(&["eval", method, &model.fingerprint, &gold.fingerprint]);
        let rel = format!("reports/{method}.json");
        let path = dir.join(&rel);
        self.cached(
            &dir,
            &format!("eval:{method}"),
            Stage::Eval,
            &key.to_string(),
            &fp,
            &[&rel],
            || UnlearnReport::load(&path),
            || {
                let extras = RunExtras {
                    method: method.to_string(),
                    seed: key.seed,
                    partition: partition.map(|p| PartitionSizes { easy: p.easy.len(), hard: p.hard.len() }),
                    wall_clock,
                    config_fingerprint: model.fingerprint.clone(),
                };
                let report = evaluate_run(&model.value, gold.value.as_ref(), &split.value, extras)?;
                ensure_dir(&dir.join("reports"))?;
                report.save(&path)?;
                Ok((report, None))
            },
        )
    }

    /// Predictor accuracy with all features and with each feature alone.
    pub fn ablation(
        &self,
        key: &RunKey,
        features: &Artifact<TmuFeatures>,
        gold: &Artifact<Option<TrainedModel>>,
        split: &Artifact<DataSplit>,
    ) -> Result<Vec<AblationRow>> {
        let dir = self.run_dir(key);
        let pcfg = self.predictor_config(key.seed);
        let fp = fingerprint(&["ablation", &features.fingerprint, &json(&pcfg), &gold.fingerprint]);
        let path = dir.join("predictor/ablation.json");
        self.cached(
            &dir,
            "ablation",
            Stage::Ablation,
            &key.to_string(),
            &fp,
            &["predictor/ablation.json"],
            || {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                Ok(serde_json::from_str(&text)?)
            },
            || {
                let f = &features.value;
                let forget = match &gold.value {
                    Some(g) => {
                        let labels = label_generalization(g, &split.value.forget)?;
                        let mut fm = f.forget.clone();
                        fm.labels = Some(labels.iter().map(|l| l.label.is_easy()).collect());
                        Some(fm)
                    }
                    None => None,
                };
                let sets: Vec<Vec<Feature>> =
                    std::iter::once(Feature::ALL.to_vec()).chain(Feature::ALL.iter().map(|&x| vec![x])).collect();
                let mut rows = Vec::new();
                for set in sets {
                    let cfg = PredictorConfig { features: set.clone(), ..pcfg.clone() };
                    let (p, _) = train_predictor(&f.twin, &cfg)?;
                    rows.push(AblationRow {
                        features: set.iter().map(|x| x.name()).collect::<Vec<_>>().join("+"),
                        holdout_accuracy: f.holdout.as_ref().map(|h| p.accuracy(h)).transpose()?,
                        forget_accuracy: forget.as_ref().map(|fm| p.accuracy(fm)).transpose()?,
                    });
                }
                ensure_dir(&dir.join("predictor"))?;
                std::fs::write(&path, serde_json::to_string_pretty(&rows)?).map_err(|e| Error::io(&path, e))?;
                Ok((rows, None))
            },
        )
    }

    /// Runs one experiment through `upto`, reusing cached stages.
    pub fn run(&self, key: &RunKey, upto: Stage) -> Result<RunOutput> {
        let mut out = RunOutput::default();
        let original = self.original(key.seed)?;
        if upto == Stage::Train {
            return Ok(out);
        }
        let split = self.split(key)?;
        let gold = self.gold(key, &split)?;
        if upto == Stage::Gold {
            return Ok(out);
        }
        let methods = &self.config.methods;
        let wants_tmu =
            methods.contains(&Method::Tmu) || matches!(upto, Stage::Twin | Stage::Features | Stage::Predict);
        let mut features = None;
        let mut predicted = None;
        if wants_tmu || self.config.ablation {
            let twin = self.twin(key, &original, &split)?;
            if upto == Stage::Twin {
                return Ok(out);
            }
            let f = self.features(key, &original, &split, &twin)?;
            if upto == Stage::Features {
                return Ok(out);
            }
            let p = self.predict(key, &split, &f)?;
            out.diagnostics = Some(p.value.1.clone());
            if upto == Stage::Predict {
                return Ok(out);
            }
            features = Some(f);
            predicted = Some(p);
        }
        let mut models = Vec::new();
        for &m in methods {
            let model = self.unlearn(key, m, &original, &split, predicted.as_ref())?;
            models.push((m, model));
        }
        if upto == Stage::Unlearn {
            return Ok(out);
        }
        if let Some(g) = &gold.value {
            let art = Artifact { value: g.clone(), fingerprint: gold.fingerprint.clone() };
            let secs = self.stage_seconds(key, &["gold"]);
            out.reports.push(self.evaluate(key, "gold", &art, &gold, &split, None, secs)?);
        }
        for (m, model) in &models {
            let (partition, records): (_, &[&str]) = match m {
                Method::Tmu => {
                    (predicted.as_ref().map(|p| &p.value.0), &["twin", "features", "predict", "unlearn:tmu"])
                }
                _ => (None, &[]),
            };
            let own = [format!("unlearn:{}", m.name())];
            let own: Vec<&str> = own.iter().map(String::as_str).collect();
            let secs = self.stage_seconds(key, if records.is_empty() { &own } else { records });
            out.reports.push(self.evaluate(key, m.name(), model, &gold, &split, partition, secs)?);
        }
        if self.config.ablation {
            if let Some(f) = &features {
                out.ablation = Some(self.ablation(key, f, &gold, &split)?);
            }
        }
        Ok(out)
    }

    /// Writes `<out>/reports.csv` from every report persisted under `runs/`.
    pub fn write_reports(&self) -> Result<Vec<UnlearnReport>> {
        let reports = collect_reports(&self.out)?;
        write_reports_csv(&reports, &self.out.join("reports.csv"))?;
        Ok(reports)
    }
}

/// All classes and seeds at the configured `n_forget`.
pub fn run_experiment(exp: &Experiment) -> Result<Vec<UnlearnReport>> {
    let mut reports = Vec::new();
    for key in exp.keys(&[exp.config().n_forget]) {
        reports.extend(exp.run(&key, Stage::Eval)?.reports);
    }
    exp.write_reports()?;
    Ok(reports)
}

/// Runs every size in ascending order and writes `<out>/sweep.csv`.
pub fn sweep_forget_size(exp: &Experiment, sizes: &[usize]) -> Result<SweepResult> {
    if sizes.is_empty() || !sizes.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidConfig("sweep sizes must be non-empty and strictly ascending".into()));
    }
    let mut reports = Vec::new();
    for key in exp.keys(sizes) {
        reports.extend(exp.run(&key, Stage::Eval)?.reports);
    }
    exp.write_reports()?;
    let result = SweepResult::from_reports(reports);
    result.write_curve(&exp.out_dir().join("sweep.csv"))?;
    Ok(result)
}

/// Every `runs/**/reports/*.json` under `out`, ordered by size, class, seed
/// and method.
pub fn collect_reports(out: &Path) -> Result<Vec<UnlearnReport>> {
    fn walk(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, found)?;
            } else if p.extension().is_some_and(|x| x == "json")
                && p.parent().and_then(Path::file_name).is_some_and(|n| n == "reports")
            {
                found.push(p);
            }
        }
        Ok(())
    }
    let runs = out.join("runs");
    let mut paths = Vec::new();
    if runs.is_dir() {
        walk(&runs, &mut paths)?;
    }
    let mut reports: Vec<UnlearnReport> = paths.iter().map(|p| UnlearnReport::load(p)).collect::<Result<_>>()?;
    reports.sort_by_key(|r| (r.n_forget, r.forget_class, r.seed, method_order(&r.method)));
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: &str, n: usize, delta: Option<f64>, test: f64) -> UnlearnReport {
        UnlearnReport {
            method: method.into(),
            forget_class: 0,
            n_forget: n,
            seed: 0,
            acc_test: test,
            acc_forget: 50.0,
            acc_remain: 90.0,
            gold_acc_test: None,
            gold_acc_forget: None,
            delta,
            activation_distance: None,
            partition: None,
            wall_clock: 0.0,
            config_fingerprint: String::new(),
        }
    }

    #[test]
    fn curve_means_are_arithmetic_means() {
        let rs = vec![
            report("tmu", 100, Some(2.0), 80.0),
            report("tmu", 100, Some(5.0), 90.0),
            report("neggrad", 100, None, 70.0),
            report("tmu", 500, Some(7.0), 60.0),
        ];
        let s = SweepResult::from_reports(rs);
        assert_eq!(s.curve.len(), 3);
        let p = s.point(100, "tmu").unwrap();
        assert_eq!((p.runs, p.mean_delta, p.mean_acc_test), (2, Some(3.5), 85.0));
        assert_eq!(s.point(100, "neggrad").unwrap().mean_delta, None);
        assert_eq!(s.point(500, "tmu").unwrap().mean_delta, Some(7.0));
        assert_eq!(s.curve[0].method, "neggrad");
    }

    #[test]
    fn fingerprint_separates_parts() {
        assert_ne!(fingerprint(&["ab", "c"]), fingerprint(&["a", "bc"]));
        assert_eq!(fingerprint(&["x"]), fingerprint(&["x"]));
    }
}
