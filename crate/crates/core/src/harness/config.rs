use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetConfig, MixtureConfig};
use crate::error::{Error, Result};
use crate::modeling::{Arch, TrainConfig};
use crate::twin::TwinConfig;
use crate::unlearn::{FisherConfig, Method, TmuConfig, UnlearnConfig};

/// What to do about the gold model, the expensive oracle behind δ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoldPolicy {
    /// Retrain from scratch on `D_r` and cache per (class, size, seed).
    #[default]
    Train,
    /// Use an existing `gold.bin` in the run directory.
    Load,
    /// No gold model; reports carry no δ or activation distance.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
    /// Synthetic-mixture fixture used by the acceptance suite.
    Fixture,
}

impl Profile {
    pub fn config(self) -> ExperimentConfig {
        match self {
            Profile::Desk => ExperimentConfig::desk(),
            Profile::Paper => ExperimentConfig::paper(),
            Profile::Fixture => ExperimentConfig::fixture(),
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            "fixture" => Ok(Profile::Fixture),
            other => Err(Error::InvalidConfig(format!("unknown profile `{other}`"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
            Profile::Fixture => "fixture",
        })
    }
}

/// Optional overrides applied on top of [`UnlearnConfig::for_method`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnPatch {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retain_replay_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tmu_inner_method: Option<Method>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fisher: Option<FisherConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distill_temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forget_accuracy_target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub collapse_accuracy: Option<f64>,
}

impl UnlearnPatch {
    fn apply(&self, c: &mut UnlearnConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { c.$f = v.clone(); } )* };
        }
        set!(
            epochs,
            learning_rate,
            momentum,
            weight_decay,
            batch_size,
            retain_replay_fraction,
            tmu_inner_method,
            fisher,
            distill_temperature,
            forget_accuracy_target,
            collapse_accuracy
        );
    }
}

/// `[unlearn.common]` applies to every method, then the method's own table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnSection {
    pub common: UnlearnPatch,
    pub finetune: UnlearnPatch,
    pub neggrad: UnlearnPatch,
    pub randlabel: UnlearnPatch,
    pub badteacher: UnlearnPatch,
    pub fisher: UnlearnPatch,
    pub tmu: UnlearnPatch,
}

impl UnlearnSection {
    pub fn resolve(&self, method: Method, seed: u64) -> UnlearnConfig {
        let mut c = UnlearnConfig { seed, ..UnlearnConfig::for_method(method) };
        self.common.apply(&mut c);
        let own = match method {
            Method::Finetune => &self.finetune,
            Method::Neggrad => &self.neggrad,
            Method::Randlabel => &self.randlabel,
            Method::Badteacher => &self.badteacher,
            Method::Fisher => &self.fisher,
            Method::Tmu => &self.tmu,
        };
        own.apply(&mut c);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub arch: Arch,
    pub forget_classes: Vec<usize>,
    pub n_forget: usize,
    /// Forget-set sizes visited by `sweep`; `n_forget` is used when empty.
    pub sweep_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub gold: GoldPolicy,
    /// Also train single-feature predictors and score them.
    pub ablation: bool,
    /// Reference fixture the report is diffed against.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub twin: TwinConfig,
    pub tmu: TmuConfig,
    pub unlearn: UnlearnSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// CIFAR-10 subset, small ResNet, 40-epoch schedule, 3 classes × 3 seeds.
    pub fn desk() -> Self {
        Self {
            dataset: DatasetConfig { name: "cifar10".into(), train_subset: Some(20_000), ..DatasetConfig::default() },
            arch: Arch::from_name("resnet18-small").expect("registered"),
            forget_classes: vec![0, 1, 2],
            n_forget: 100,
            sweep_sizes: vec![100, 500],
            seeds: vec![0, 1, 2],
            methods: Method::ALL.to_vec(),
            gold: GoldPolicy::Train,
            ablation: false,
            reference: None,
            out_dir: PathBuf::from("runs/desk"),
            train: TrainConfig::default(),
            twin: TwinConfig::default(),
            tmu: TmuConfig { evaluate_holdout: true, ..TmuConfig::default() },
            unlearn: UnlearnSection::default(),
        }
    }

    /// Full CIFAR-10, ResNet-18, 200 epochs, every class.
    pub fn paper() -> Self {
        Self {
            dataset: DatasetConfig { name: "cifar10".into(), ..DatasetConfig::default() },
            arch: Arch::from_name("resnet18").expect("registered"),
            forget_classes: (0..10).collect(),
            sweep_sizes: vec![100, 500, 1000, 2000, 4000],
            seeds: vec![0],
            ablation: true,
            reference: Some("cifar10-resnet18-n100".into()),
            out_dir: PathBuf::from("runs/paper"),
            train: TrainConfig::paper(),
            ..Self::desk()
        }
    }

    /// Synthetic mixture with an MLP; trains long enough to memorize the
    /// atypical samples, which is what gives the gold model something to disagree on.
    pub fn fixture() -> Self {
        Self {
            dataset: DatasetConfig {
                name: "synthetic-mixture".into(),
                mixture: MixtureConfig::default(),
                ..DatasetConfig::default()
            },
            arch: Arch::from_name("mlp").expect("registered"),
            out_dir: PathBuf::from("runs/fixture"),
            train: TrainConfig {
                epochs: 60,
                learning_rate: 0.05,
                batch_size: 32,
                lr_milestones: vec![30, 45],
                ..TrainConfig::default()
            },
            ..Self::desk()
        }
    }

    /// Parses `text` as overrides on top of `base`; unknown keys are errors.
    pub fn from_toml_with_base(text: &str, base: &Self) -> Result<Self> {
        let overrides: toml::Table = toml::from_str(text)?;
        let mut merged = toml::Table::try_from(base)?;
        merge(&mut merged, overrides);
        let cfg: Self = merged.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: &Self) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_base(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.train.validate()?;
        self.twin.finetune.validate()?;
        self.tmu.features.attack.validate()?;
        self.tmu.predictor.validate()?;
        if self.seeds.is_empty() || self.forget_classes.is_empty() || self.methods.is_empty() {
            return bad("seeds, forget_classes and methods must be non-empty".into());
        }
        if self.n_forget == 0 || self.sweep_sizes.contains(&0) {
            return bad("forget-set sizes must be positive".into());
        }
        if !self.sweep_sizes.windows(2).all(|w| w[0] < w[1]) {
            return bad("sweep_sizes must be strictly ascending".into());
        }
        for &m in &self.methods {
            self.method_config(m, 0).validate()?;
        }
        if let Some(name) = &self.reference {
            super::reference::reference(name)?;
        }
        Ok(())
    }

    pub fn method_config(&self, method: Method, seed: u64) -> UnlearnConfig {
        self.unlearn.resolve(method, seed)
    }

    pub fn sizes(&self) -> Vec<usize> {
        if self.sweep_sizes.is_empty() {
            vec![self.n_forget]
        } else {
            self.sweep_sizes.clone()
        }
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
