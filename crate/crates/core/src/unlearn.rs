//! Unlearning methods: fine-tuning, negative gradient, random labels, bad
//! teacher, Fisher forgetting and the twin-problem pipeline.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DataSplit, LabeledDataset};
use crate::error::{Error, Result};
use crate::features::{extract_feature_matrix, train_curriculum_model, FeatureConfig, FeatureContext, FeatureMatrix};
use crate::modeling::{accuracy, accuracy_from_logits, build_model, finetune, minibatches, TrainConfig, TrainedModel};
use crate::nn::loss::{cross_entropy, distillation_kl, softmax_rows_t};
use crate::nn::optim::Sgd;
use crate::nn::Network;
use crate::predictor::{
    partition_forget_set, train_predictor, ForgetPartition, GenLabelPredictor, PredictorConfig, PredictorReport,
};
use crate::twin::{label_generalization, TwinProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Finetune,
    Neggrad,
    Randlabel,
    Badteacher,
    Fisher,
    Tmu,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Finetune, Method::Neggrad, Method::Randlabel, Method::Badteacher, Method::Fisher, Method::Tmu];

    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Neggrad => "neggrad",
            Method::Randlabel => "randlabel",
            Method::Badteacher => "badteacher",
            Method::Fisher => "fisher",
            Method::Tmu => "tmu",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FisherConfig {
    /// Noise scale: each parameter gets variance `noise_scale / (F + damping)`.
    pub noise_scale: f64,
    pub damping: f64,
    /// Estimate the Fisher on at most this many remaining samples.
    pub max_samples: Option<usize>,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self { noise_scale: 1e-4, damping: 1e-3, max_samples: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Fraction of `D_r` sampled as replay data each epoch.
    pub retain_replay_fraction: f64,
    pub tmu_inner_method: Method,
    pub fisher: FisherConfig,
    pub distill_temperature: f64,
    /// Negative gradient stops once forget-subset accuracy is at most this (percent).
    pub forget_accuracy_target: f64,
    /// Replay-batch accuracy (percent) below which a run is aborted as collapsed.
    pub collapse_accuracy: f64,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self::for_method(Method::Tmu)
    }
}

impl UnlearnConfig {
    /// Desk-scale defaults for each method.
    pub fn for_method(method: Method) -> Self {
        let base = Self {
            method,
            epochs: 5,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            retain_replay_fraction: 0.3,
            tmu_inner_method: Method::Neggrad,
            fisher: FisherConfig::default(),
            distill_temperature: 1.0,
            forget_accuracy_target: 5.0,
            collapse_accuracy: 20.0,
            seed: 0,
        };
        match method {
            Method::Finetune => Self { learning_rate: 0.02, ..base },
            Method::Neggrad | Method::Tmu => Self { learning_rate: 0.003, ..base },
            _ => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("unlearning needs at least one epoch".into());
        }
        if !(0.0..=1.0).contains(&self.retain_replay_fraction) {
            return bad(format!("retain_replay_fraction {} outside [0, 1]", self.retain_replay_fraction));
        }
        if self.learning_rate.is_nan()
            || self.learning_rate < 0.0
            || self.batch_size == 0
            || !(0.0..1.0).contains(&self.momentum)
        {
            return bad("learning_rate >= 0, batch_size > 0 and momentum in [0, 1) are required".into());
        }
        if !matches!(self.tmu_inner_method, Method::Neggrad | Method::Randlabel) {
            return bad(format!("tmu_inner_method must be neggrad or randlabel, not {}", self.tmu_inner_method));
        }
        if self.distill_temperature.is_nan() || self.distill_temperature <= 0.0 {
            return bad("distill_temperature must be positive".into());
        }
        if self.fisher.noise_scale < 0.0 || self.fisher.damping <= 0.0 {
            return bad("fisher noise_scale must be >= 0 and damping > 0".into());
        }
        Ok(())
    }

    fn sgd(&self, network: &Network) -> Sgd {
        Sgd::new(network.num_params(), self.momentum as f32, self.weight_decay as f32)
    }
}

/// One row of the per-epoch metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    /// Accuracy on the data being forgotten after the epoch, in percent.
    pub forget_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub model: TrainedModel,
    pub log: Vec<EpochMetrics>,
    pub stopped_early: bool,
}

impl UnlearnOutcome {
    fn unchanged(original: &TrainedModel, stage: &str) -> Self {
        Self { model: original.derived(original.network.clone(), stage), log: Vec::new(), stopped_early: false }
    }
}

fn check_subset(split: &DataSplit, subset: &LabeledDataset) -> Result<()> {
    let forget: std::collections::HashSet<usize> = split.forget.indices().iter().copied().collect();
    if let Some(i) = subset.indices().iter().find(|i| !forget.contains(i)) {
        return Err(Error::InvalidSplit(format!("sample {i} is not part of the forgetting data")));
    }
    Ok(())
}

/// Replay data for one epoch: a uniform share of `D_r` plus every sample of `extra`.
fn replay_sample(
    split: &DataSplit,
    extra: Option<&LabeledDataset>,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledDataset> {
    let n = ((fraction * split.remain.len() as f64).round() as usize).min(split.remain.len());
    let mut picks = sample(rng, split.remain.len(), n).into_vec();
    picks.sort_unstable();
    let replay = split.remain.select(&picks);
    match extra {
        Some(e) if !e.is_empty() => replay.concat(e),
        _ => Ok(replay),
    }
}

fn batch(data: &LabeledDataset, rows: &[usize]) -> (Array2<f32>, Vec<usize>) {
    (data.images().select(Axis(0), rows), rows.iter().map(|&r| data.labels()[r]).collect())
}

fn check_finite(loss: f64, stage: &str, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { stage: stage.to_string(), epoch, loss })
    }
}

/// Fine-tunes on `D_r` alone.
pub fn unlearn_finetune(original: &TrainedModel, split: &DataSplit, cfg: &UnlearnConfig) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        lr_milestones: vec![],
        lr_decay_factor: 1.0,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    let (model, log) = crate::modeling::train_with_log(original, &split.remain, &train_cfg)?;
    let mut model = model;
    if let Some(last) = model.provenance.history.last_mut() {
        *last = "unlearn:finetune".into();
    }
    let log = log
        .into_iter()
        .map(|e| EpochMetrics { epoch: e.epoch, steps: 0, mean_loss: e.mean_loss, forget_accuracy: None })
        .collect();
    Ok(UnlearnOutcome { model, log, stopped_early: false })
}

/// Gradient ascent on `forget_subset` interleaved with descent on replay data
/// (`D_r` share plus `extra_replay`); stops once the subset accuracy reaches the target.
pub fn unlearn_negative_gradient(
    original: &TrainedModel,
    split: &DataSplit,
    forget_subset: &LabeledDataset,
    extra_replay: Option<&LabeledDataset>,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    check_subset(split, forget_subset)?;
    const STAGE: &str = "unlearn:neggrad";
    if forget_subset.is_empty() {
        return Ok(UnlearnOutcome::unchanged(original, STAGE));
    }
    let mut net = original.network.clone();
    let mut sgd = cfg.sgd(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let forget_batch = cfg.batch_size.min(forget_subset.len());
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut forget_acc = accuracy_from_logits(&net.logits(forget_subset.images().view())?, forget_subset.labels());
    let mut stopped_early = forget_acc <= cfg.forget_accuracy_target;
    'epochs: for epoch in 0..cfg.epochs {
        if stopped_early {
            break;
        }
        let replay = replay_sample(split, extra_replay, cfg.retain_replay_fraction, &mut rng)?;
        let mut forget_batches = minibatches(forget_subset.len(), forget_batch, &mut rng).into_iter().cycle();
        let replay_batches =
            if replay.is_empty() { Vec::new() } else { minibatches(replay.len(), cfg.batch_size, &mut rng) };
        let n_steps = replay_batches.len().max(forget_subset.len().div_ceil(forget_batch));
        let mut total = 0.0;
        let mut steps = 0;
        for s in 0..n_steps {
            let mut grads = vec![0.0f32; net.num_params()];
            let mut loss = 0.0;
            if let Some(rows) = replay_batches.get(s) {
                let (x, y) = batch(&replay, rows);
                let (logits, tape) = net.forward_tape(x.view())?;
                let acc = accuracy_from_logits(&logits, &y);
                if acc < cfg.collapse_accuracy && step > 0 {
                    return Err(Error::Collapse { stage: STAGE.into(), step, accuracy: acc });
                }
                let (l, dl) = cross_entropy(&logits, &y);
                loss += l;
                grads = net.backward(&tape, &dl, false).params;
            }
            let rows = forget_batches.next().expect("cycle over a non-empty set");
            let (x, y) = batch(forget_subset, &rows);
            let (logits, tape) = net.forward_tape(x.view())?;
            let (l, dl) = cross_entropy(&logits, &y);
            loss -= l;
            let gf = net.backward(&tape, &dl, false).params;
            for (g, f) in grads.iter_mut().zip(&gf) {
                *g -= f;
            }
            check_finite(loss, STAGE, epoch)?;
            sgd.step(net.params_mut(), &grads, cfg.learning_rate as f32);
            total += loss;
            steps += 1;
            step += 1;
            forget_acc = accuracy_from_logits(&net.logits(forget_subset.images().view())?, forget_subset.labels());
            if forget_acc <= cfg.forget_accuracy_target {
                stopped_early = true;
                log.push(EpochMetrics {
                    epoch,
                    steps,
                    mean_loss: total / steps as f64,
                    forget_accuracy: Some(forget_acc),
                });
                break 'epochs;
            }
        }
        log.push(EpochMetrics {
            epoch,
            steps,
            mean_loss: total / steps.max(1) as f64,
            forget_accuracy: Some(forget_acc),
        });
    }
    Ok(UnlearnOutcome { model: original.derived(net, STAGE), log, stopped_early })
}

/// A label drawn uniformly from the classes other than `y`.
fn other_label(y: usize, k: usize, rng: &mut ChaCha8Rng) -> usize {
    let r = rng.random_range(0..k - 1);
    if r >= y {
        r + 1
    } else {
        r
    }
}

/// Trains on replay data plus `forget_subset` carrying labels redrawn every
/// epoch from the wrong classes; each step pairs one replay batch with one
/// relabeled forget batch.
pub fn unlearn_random_label(
    original: &TrainedModel,
    split: &DataSplit,
    forget_subset: &LabeledDataset,
    extra_replay: Option<&LabeledDataset>,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    check_subset(split, forget_subset)?;
    const STAGE: &str = "unlearn:randlabel";
    let k = original.num_classes();
    let mut net = original.network.clone();
    let mut sgd = cfg.sgd(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let forget_batch = cfg.batch_size.min(forget_subset.len().max(1));
    for epoch in 0..cfg.epochs {
        let replay = replay_sample(split, extra_replay, cfg.retain_replay_fraction, &mut rng)?;
        let wrong: Vec<usize> = forget_subset.labels().iter().map(|&y| other_label(y, k, &mut rng)).collect();
        let replay_batches =
            if replay.is_empty() { Vec::new() } else { minibatches(replay.len(), cfg.batch_size, &mut rng) };
        let mut forget_batches = if forget_subset.is_empty() {
            Vec::new()
        } else {
            minibatches(forget_subset.len(), forget_batch, &mut rng)
        }
        .into_iter()
        .cycle();
        let n_steps = replay_batches.len().max(forget_subset.len().div_ceil(forget_batch));
        let mut total = 0.0;
        for s in 0..n_steps {
            let mut grads = vec![0.0f32; net.num_params()];
            let mut loss = 0.0;
            if let Some(rows) = replay_batches.get(s) {
                let (x, y) = batch(&replay, rows);
                let (logits, tape) = net.forward_tape(x.view())?;
                let (l, dl) = cross_entropy(&logits, &y);
                loss += l;
                grads = net.backward(&tape, &dl, false).params;
            }
            if let Some(rows) = forget_batches.next() {
                let x = forget_subset.images().select(Axis(0), &rows);
                let y: Vec<usize> = rows.iter().map(|&r| wrong[r]).collect();
                let (logits, tape) = net.forward_tape(x.view())?;
                let (l, dl) = cross_entropy(&logits, &y);
                loss += l;
                for (g, f) in grads.iter_mut().zip(net.backward(&tape, &dl, false).params) {
                    *g += f;
                }
            }
            check_finite(loss, STAGE, epoch)?;
            sgd.step(net.params_mut(), &grads, cfg.learning_rate as f32);
            total += loss;
        }
        let forget_accuracy = if forget_subset.is_empty() {
            None
        } else {
            Some(accuracy_from_logits(&net.logits(forget_subset.images().view())?, forget_subset.labels()))
        };
        log.push(EpochMetrics { epoch, steps: n_steps, mean_loss: total / n_steps.max(1) as f64, forget_accuracy });
    }
    Ok(UnlearnOutcome { model: original.derived(net, STAGE), log, stopped_early: false })
}

/// Student-teacher unlearning: the student (initialized from the original)
/// distills a randomly initialized teacher on `forget_subset` and the original
/// model on replay data, one batch of each per step with equal weight.
pub fn unlearn_bad_teacher(
    original: &TrainedModel,
    split: &DataSplit,
    forget_subset: &LabeledDataset,
    extra_replay: Option<&LabeledDataset>,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    check_subset(split, forget_subset)?;
    const STAGE: &str = "unlearn:badteacher";
    let t = cfg.distill_temperature;
    let incompetent =
        build_model(&original.arch, original.network.input_shape(), original.num_classes(), cfg.seed ^ 0xbad7_eac4)?;
    let mut net = original.network.clone();
    let mut sgd = cfg.sgd(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let forget_batch = cfg.batch_size.min(forget_subset.len().max(1));
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let replay = replay_sample(split, extra_replay, cfg.retain_replay_fraction, &mut rng)?;
        let replay_batches =
            if replay.is_empty() { Vec::new() } else { minibatches(replay.len(), cfg.batch_size, &mut rng) };
        let mut forget_batches = if forget_subset.is_empty() {
            Vec::new()
        } else {
            minibatches(forget_subset.len(), forget_batch, &mut rng)
        }
        .into_iter()
        .cycle();
        let n_steps = replay_batches.len().max(forget_subset.len().div_ceil(forget_batch));
        let mut total = 0.0;
        for s in 0..n_steps {
            let mut grads = vec![0.0f32; net.num_params()];
            let mut loss = 0.0;
            if let Some(rows) = replay_batches.get(s) {
                let (x, _) = batch(&replay, rows);
                let teacher = softmax_rows_t(&original.network.logits(x.view())?, t);
                let (logits, tape) = net.forward_tape(x.view())?;
                let (l, dl) = distillation_kl(&logits, &teacher, t);
                loss += l;
                grads = net.backward(&tape, &dl, false).params;
            }
            if let Some(rows) = forget_batches.next() {
                let (x, _) = batch(forget_subset, &rows);
                let teacher = softmax_rows_t(&incompetent.network.logits(x.view())?, t);
                let (logits, tape) = net.forward_tape(x.view())?;
                let (l, dl) = distillation_kl(&logits, &teacher, t);
                loss += l;
                for (g, f) in grads.iter_mut().zip(net.backward(&tape, &dl, false).params) {
                    *g += f;
                }
            }
            check_finite(loss, STAGE, epoch)?;
            sgd.step(net.params_mut(), &grads, cfg.learning_rate as f32);
            total += loss;
        }
        let forget_accuracy = if forget_subset.is_empty() {
            None
        } else {
            Some(accuracy_from_logits(&net.logits(forget_subset.images().view())?, forget_subset.labels()))
        };
        log.push(EpochMetrics { epoch, steps: n_steps, mean_loss: total / n_steps.max(1) as f64, forget_accuracy });
    }
    Ok(UnlearnOutcome { model: original.derived(net, STAGE), log, stopped_early: false })
}

/// Diagonal empirical Fisher: mean over samples of the squared per-sample
/// gradient of `log p(y|x)`.
pub fn empirical_fisher(network: &Network, data: &LabeledDataset) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("Fisher estimation".into()));
    }
    let mut fisher = vec![0.0f64; network.num_params()];
    for i in 0..data.len() {
        let (x, y) = batch(data, &[i]);
        let (logits, tape) = network.forward_tape(x.view())?;
        let (_, dl) = cross_entropy(&logits, &y);
        for (f, g) in fisher.iter_mut().zip(network.backward(&tape, &dl, false).params) {
            *f += (g as f64) * (g as f64);
        }
    }
    let n = data.len() as f64;
    for f in &mut fisher {
        *f /= n;
        if !f.is_finite() {
            return Err(Error::NonFinite("Fisher entry".into()));
        }
    }
    Ok(fisher)
}

/// Per-parameter noise variance `alpha / (F + damping)`.
pub fn fisher_noise_variance(fisher: f64, alpha: f64, damping: f64) -> f64 {
    alpha / (fisher + damping)
}

/// Adds Gaussian noise scaled inversely to the Fisher information over `D_r`.
pub fn unlearn_fisher(original: &TrainedModel, split: &DataSplit, cfg: &UnlearnConfig) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    const STAGE: &str = "unlearn:fisher";
    if cfg.fisher.noise_scale == 0.0 {
        return Ok(UnlearnOutcome::unchanged(original, STAGE));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = match cfg.fisher.max_samples {
        Some(m) if m < split.remain.len() => {
            let mut picks = sample(&mut rng, split.remain.len(), m).into_vec();
            picks.sort_unstable();
            split.remain.select(&picks)
        }
        _ => split.remain.clone(),
    };
    let fisher = empirical_fisher(&original.network, &data)?;
    let mut net = original.network.clone();
    for (p, f) in net.params_mut().iter_mut().zip(&fisher) {
        let sd = fisher_noise_variance(*f, cfg.fisher.noise_scale, cfg.fisher.damping).sqrt();
        let z: f64 = StandardNormal.sample(&mut rng);
        *p += (sd * z) as f32;
    }
    Ok(UnlearnOutcome { model: original.derived(net, STAGE), log: Vec::new(), stopped_early: false })
}

/// Settings for the learned parts of the twin-problem pipeline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TmuConfig {
    pub features: FeatureConfig,
    pub predictor: PredictorConfig,
    /// Also score the predictor on test samples the twin model never saw.
    pub evaluate_holdout: bool,
}

/// What the pipeline learned on the way to the unlearned model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TmuDiagnostics {
    pub twin_size: usize,
    pub twin_easy_fraction: f64,
    pub predictor: PredictorReport,
    pub holdout_accuracy: Option<f64>,
    pub holdout_prior: Option<f64>,
    pub predicted_easy_fraction: f64,
    pub n_easy: usize,
    pub n_hard: usize,
    pub degenerate_all_easy: bool,
}

/// Runs the inner method on the hard subset with the easy subset replayed.
pub fn unlearn_with_partition(
    original: &TrainedModel,
    split: &DataSplit,
    partition: &ForgetPartition,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    let by_index: std::collections::HashMap<usize, usize> =
        split.forget.indices().iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let positions = |ids: &[usize]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|i| by_index.get(i).copied().ok_or_else(|| Error::InvalidSplit(format!("sample {i} not in D_f"))))
            .collect()
    };
    let easy = split.forget.select(&positions(&partition.easy)?);
    let hard = split.forget.select(&positions(&partition.hard)?);
    let inner = UnlearnConfig { method: cfg.tmu_inner_method, ..cfg.clone() };
    let mut out = if hard.is_empty() {
        log::warn!("every forget sample was predicted easy; only replay fine-tuning is applied");
        let data = split.remain.concat(&easy)?;
        let tc = TrainConfig {
            epochs: 1,
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            lr_milestones: vec![],
            lr_decay_factor: 1.0,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
        };
        let model = finetune(original, &data, &tc)?;
        UnlearnOutcome { model, log: Vec::new(), stopped_early: false }
    } else {
        match cfg.tmu_inner_method {
            Method::Randlabel => unlearn_random_label(original, split, &hard, Some(&easy), &inner)?,
            _ => unlearn_negative_gradient(original, split, &hard, Some(&easy), &inner)?,
        }
    };
    if let Some(last) = out.model.provenance.history.last_mut() {
        *last = "unlearn:tmu".into();
    }
    Ok(out)
}

/// Feature matrices the predictor is fitted on and applied to.
#[derive(Debug, Clone)]
pub struct TmuFeatures {
    pub curriculum_model: TrainedModel,
    /// Twin forget set, labelled by the twin gold model (`M_o`).
    pub twin: FeatureMatrix,
    pub holdout: Option<FeatureMatrix>,
    /// `D_f` measured in the context of `M_o`, standardized with the twin stats.
    pub forget: FeatureMatrix,
}

pub fn tmu_features(
    original: &TrainedModel,
    split: &DataSplit,
    twin: &TwinProblem,
    seed: u64,
    tmu: &TmuConfig,
) -> Result<TmuFeatures> {
    let m_r = train_curriculum_model(split, &twin.twin_forget, &original.arch, seed, &tmu.features)?;
    let twin_reference = split.full_train();
    let twin_ctx = FeatureContext { model: &twin.twin_model, reference: &twin_reference, curriculum_model: &m_r };
    let gen_labels = |samples: &LabeledDataset| -> Result<Vec<bool>> {
        Ok(label_generalization(&twin.gold_model, samples)?.into_iter().map(|l| l.label.is_easy()).collect())
    };
    let twin_features = extract_feature_matrix(
        &twin.twin_forget,
        &twin_ctx,
        &tmu.features,
        None,
        Some(gen_labels(&twin.twin_forget)?),
    )?;
    let holdout = if tmu.evaluate_holdout && !twin.holdout.is_empty() {
        let labels = gen_labels(&twin.holdout)?;
        Some(extract_feature_matrix(&twin.holdout, &twin_ctx, &tmu.features, Some(&twin_features.stats), Some(labels))?)
    } else {
        None
    };
    let ctx = FeatureContext { model: original, reference: &split.remain, curriculum_model: &m_r };
    let forget = extract_feature_matrix(&split.forget, &ctx, &tmu.features, Some(&twin_features.stats), None)?;
    Ok(TmuFeatures { curriculum_model: m_r, twin: twin_features, holdout, forget })
}

/// Fits the predictor on the twin features and partitions `D_f` with it.
pub fn tmu_predict(
    split: &DataSplit,
    twin: &FeatureMatrix,
    holdout: Option<&FeatureMatrix>,
    forget: &FeatureMatrix,
    cfg: &PredictorConfig,
) -> Result<(GenLabelPredictor, ForgetPartition, TmuDiagnostics)> {
    let (predictor, report) = train_predictor(twin, cfg)?;
    let (mut holdout_accuracy, mut holdout_prior) = (None, None);
    if let Some(fm) = holdout {
        holdout_prior = fm.labels.as_deref().map(crate::predictor::majority_accuracy);
        holdout_accuracy = Some(predictor.accuracy(fm)?);
    }
    let predictions = predictor.predict_labels(forget)?;
    let partition = partition_forget_set(split, &predictions)?;
    let twin_labels = twin.labels.as_deref().unwrap_or_default();
    let diagnostics = TmuDiagnostics {
        twin_size: twin.len(),
        twin_easy_fraction: twin_labels.iter().filter(|&&l| l).count() as f64 / twin_labels.len().max(1) as f64,
        predictor: report,
        holdout_accuracy,
        holdout_prior,
        predicted_easy_fraction: partition.easy.len() as f64 / partition.len().max(1) as f64,
        n_easy: partition.easy.len(),
        n_hard: partition.hard.len(),
        degenerate_all_easy: partition.hard.is_empty(),
    };
    Ok((predictor, partition, diagnostics))
}

/// The full pipeline: twin features, predictor, transfer to `D_f`, partition,
/// and the inner method on the predicted-hard samples.
pub fn unlearn_tmu(
    original: &TrainedModel,
    split: &DataSplit,
    twin: &TwinProblem,
    cfg: &UnlearnConfig,
    tmu: &TmuConfig,
) -> Result<(UnlearnOutcome, ForgetPartition, TmuDiagnostics)> {
    cfg.validate()?;
    let features = tmu_features(original, split, twin, cfg.seed, tmu)?;
    let pcfg = PredictorConfig { seed: cfg.seed, ..tmu.predictor.clone() };
    let (_, partition, diagnostics) =
        tmu_predict(split, &features.twin, features.holdout.as_ref(), &features.forget, &pcfg)?;
    let outcome = unlearn_with_partition(original, split, &partition, cfg)?;
    Ok((outcome, partition, diagnostics))
}

/// Dispatches a baseline by `cfg.method` over the whole forgetting set.
/// TMU needs a twin problem and goes through [`unlearn_tmu`].
pub fn unlearn_baseline(original: &TrainedModel, split: &DataSplit, cfg: &UnlearnConfig) -> Result<UnlearnOutcome> {
    match cfg.method {
        Method::Finetune => unlearn_finetune(original, split, cfg),
        Method::Neggrad => unlearn_negative_gradient(original, split, &split.forget, None, cfg),
        Method::Randlabel => unlearn_random_label(original, split, &split.forget, None, cfg),
        Method::Badteacher => unlearn_bad_teacher(original, split, &split.forget, None, cfg),
        Method::Fisher => unlearn_fisher(original, split, cfg),
        Method::Tmu => Err(Error::InvalidConfig("tmu needs a twin problem; use unlearn_tmu".into())),
    }
}

/// Accuracy on `D_f` restricted to the given sample indices, in percent.
pub fn subset_accuracy(model: &TrainedModel, split: &DataSplit, ids: &[usize]) -> Result<Option<f64>> {
    if ids.is_empty() {
        return Ok(None);
    }
    let wanted: std::collections::HashSet<usize> = ids.iter().copied().collect();
    let pos: Vec<usize> = (0..split.forget.len()).filter(|&p| wanted.contains(&split.forget.indices()[p])).collect();
    Ok(Some(accuracy(model, &split.forget.select(&pos))?))
}
