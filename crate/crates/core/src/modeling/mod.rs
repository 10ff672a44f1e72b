//! Architecture registry, supervised training, inference and checkpoints.

mod arch;
mod checkpoint;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use arch::{Arch, ARCH_NAMES};
pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointMeta, FORMAT_VERSION};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::loss::{cross_entropy, cross_entropy_per_sample, softmax_rows};
use crate::nn::optim::{step_lr, Sgd};
use crate::nn::{ImageShape, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale schedule: 40 epochs, decayed by 10x at epochs 20 and 30.
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: vec![20, 30],
            lr_decay_factor: 0.1,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 200 epochs with the learning rate divided by 10 after 100 and 150 epochs.
    pub fn paper() -> Self {
        Self { epochs: 200, lr_milestones: vec![100, 150], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_milestones must be strictly increasing");
        }
        if self.lr_milestones.last().is_some_and(|&m| m >= self.epochs.max(1)) {
            return bad("lr_milestones must be below epochs");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(self.learning_rate, self.lr_decay_factor, &self.lr_milestones, epoch)
    }
}

/// Where a model's weights came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Fingerprint of the dataset of the most recent training stage.
    pub dataset_fingerprint: Option<String>,
    pub config: Option<TrainConfig>,
    /// Total epochs across all stages.
    pub epochs: usize,
    /// Stage names in order, e.g. `["train", "finetune"]`.
    pub history: Vec<String>,
}

/// A classifier together with its architecture, seed and provenance.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub arch: Arch,
    pub network: Network,
    pub seed: u64,
    pub provenance: Provenance,
}

impl TrainedModel {
    pub fn num_classes(&self) -> usize {
        self.network.num_classes()
    }

    /// Git-style content hash (`sha256("blob <len>\0" ++ weights)`) of the weights.
    pub fn content_hash(&self) -> String {
        let params = self.network.params();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", params.len() * 4).as_bytes());
        for p in params {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn derived(&self, network: Network, stage: &str) -> Self {
        let mut provenance = self.provenance.clone();
        provenance.history.push(stage.to_string());
        Self { arch: self.arch.clone(), network, seed: self.seed, provenance }
    }
}

/// Builds an untrained model with deterministic initialization.
pub fn build_model(arch: &Arch, input: ImageShape, num_classes: usize, seed: u64) -> Result<TrainedModel> {
    Ok(TrainedModel {
        arch: arch.clone(),
        network: arch.build(input, num_classes, seed)?,
        seed,
        provenance: Provenance::default(),
    })
}

/// Model outputs for a batch.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Array2<f32>,
    pub probabilities: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f32>) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

pub fn argmax_rows(logits: &Array2<f32>) -> Vec<usize> {
    logits.rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
}

pub fn predict(model: &TrainedModel, batch: ArrayView2<f32>) -> Result<Prediction> {
    let logits = model.network.logits(batch)?;
    let probabilities = softmax_rows(&logits);
    let labels = argmax_rows(&logits);
    Ok(Prediction { logits, probabilities, labels })
}

/// Percentage of samples whose argmax prediction equals the label.
pub fn accuracy(model: &TrainedModel, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("accuracy on `{}`", data.name())));
    }
    let logits = model.network.logits(data.images().view())?;
    Ok(accuracy_from_logits(&logits, data.labels()))
}

pub(crate) fn accuracy_from_logits(logits: &Array2<f32>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    100.0 * correct as f64 / labels.len() as f64
}

/// Mean cross-entropy of `model` on `data`.
pub fn mean_loss(model: &TrainedModel, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("loss on `{}`", data.name())));
    }
    let logits = model.network.logits(data.images().view())?;
    let losses = cross_entropy_per_sample(&logits, data.labels());
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Shuffled minibatches of positions `0..n`.
pub(crate) fn minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// One cross-entropy SGD step on the given rows; returns the batch loss.
pub(crate) fn sgd_step(
    network: &mut Network,
    sgd: &mut Sgd,
    images: &Array2<f32>,
    labels: &[usize],
    rows: &[usize],
    lr: f64,
) -> Result<f64> {
    let x = images.select(Axis(0), rows);
    let y: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    let (logits, tape) = network.forward_tape(x.view())?;
    let (loss, dl) = cross_entropy(&logits, &y);
    let back = network.backward(&tape, &dl, false);
    sgd.step(network.params_mut(), &back.params, lr as f32);
    Ok(loss)
}

/// Per-epoch training record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

fn fit(
    model: &TrainedModel,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    stage: &str,
) -> Result<(TrainedModel, Vec<EpochLog>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("{stage} on `{}`", data.name())));
    }
    if data.num_classes() > model.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes but the model outputs {}",
            data.num_classes(),
            model.num_classes()
        )));
    }
    let mut network = model.network.clone();
    let mut sgd = Sgd::new(network.num_params(), cfg.momentum as f32, cfg.weight_decay as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        let mut seen = 0usize;
        for rows in minibatches(data.len(), cfg.batch_size, &mut rng) {
            let loss = sgd_step(&mut network, &mut sgd, data.images(), data.labels(), &rows, lr)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { stage: stage.to_string(), epoch, loss });
            }
            total += loss * rows.len() as f64;
            seen += rows.len();
        }
        let mean_loss = total / seen as f64;
        log::debug!("{stage} epoch {epoch}: lr {lr:.5} loss {mean_loss:.4}");
        log.push(EpochLog { epoch, lr, mean_loss });
    }
    let mut out = model.derived(network, stage);
    out.provenance.dataset_fingerprint = Some(data.fingerprint());
    out.provenance.config = Some(cfg.clone());
    out.provenance.epochs += cfg.epochs;
    Ok((out, log))
}

/// Supervised training with SGD, momentum, weight decay and the step schedule.
pub fn train(model: &TrainedModel, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    fit(model, data, cfg, "train").map(|(m, _)| m)
}

pub fn train_with_log(
    model: &TrainedModel,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, Vec<EpochLog>)> {
    fit(model, data, cfg, "train")
}

/// Warm-started training of an existing model on new data.
pub fn finetune(model: &TrainedModel, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    fit(model, data, cfg, "finetune").map(|(m, _)| m)
}
