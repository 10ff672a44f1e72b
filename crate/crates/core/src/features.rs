//! Per-sample discriminative features: nearest-neighbour distance (NF),
//! adversarial sensitivity (AF) and curriculum loss (CF).

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DataSplit, LabeledDataset};
use crate::error::{Error, Result};
use crate::modeling::{build_model, train, Arch, TrainConfig, TrainedModel};
use crate::nn::loss::{cross_entropy, cross_entropy_between, cross_entropy_per_sample, softmax_rows};

pub const NUM_FEATURES: usize = 3;
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = ["nf", "af", "cf"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Nf,
    Af,
    Cf,
}

impl Feature {
    pub const ALL: [Feature; NUM_FEATURES] = [Feature::Nf, Feature::Af, Feature::Cf];

    pub fn column(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        FEATURE_NAMES[self.column()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// L-infinity budget in pixel units.
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `epsilon / 4`.
    pub step_size: Option<f64>,
    /// Score `H(s(x), s(x̃))` instead of `H(s(x̃), s(x))`.
    pub swap_orientation: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { epsilon: 4.0 / 255.0, steps: 10, step_size: None, swap_orientation: false }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig("attack epsilon must be finite and >= 0".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("attack needs at least one step".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub attack: AttackConfig,
    /// Neighbours averaged by NF.
    pub neighbors: usize,
    /// Share of `D_r ∪ D_f` in the curriculum model's training set.
    pub curriculum_fraction: f64,
    /// Training schedule of the curriculum model; `seed` is overridden per run.
    pub curriculum: TrainConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig::default(),
            neighbors: 5,
            curriculum_fraction: 0.3,
            curriculum: TrainConfig { epochs: 1, lr_milestones: vec![], ..TrainConfig::default() },
        }
    }
}

pub fn penultimate_embedding(model: &TrainedModel, samples: &LabeledDataset) -> Result<Array2<f32>> {
    model.network.embed(samples.images().view())
}

/// Mean of the `k` smallest values (of all values when fewer than `k`).
pub fn top_k_mean(distances: &[f64], k: usize) -> f64 {
    if distances.is_empty() || k == 0 {
        return 0.0;
    }
    let mut d = distances.to_vec();
    let k = k.min(d.len());
    d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    let mut head = d[..k].to_vec();
    // fixed summation order regardless of the partition's arrangement
    head.sort_by(|a, b| a.total_cmp(b));
    head.iter().sum::<f64>() / k as f64
}

fn l2(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Mean Euclidean distance from `x` to its `k` nearest rows of `reference`.
pub fn nearest_distance_feature(x: ArrayView1<f32>, reference: &Array2<f32>, k: usize) -> Result<f64> {
    if reference.nrows() == 0 {
        return Err(Error::EmptyDataset("nearest-distance reference".into()));
    }
    if reference.nrows() < k {
        log::warn!("nearest-distance reference has {} < {k} samples; averaging all", reference.nrows());
    }
    let d: Vec<f64> = reference.rows().into_iter().map(|r| l2(x, r)).collect();
    Ok(top_k_mean(&d, k))
}

/// NF for every sample, each measured against the `reference` samples sharing
/// its label, in the embedding space of `model`.
pub fn nearest_distance_features(
    model: &TrainedModel,
    samples: &LabeledDataset,
    reference: &LabeledDataset,
    k: usize,
) -> Result<Vec<f64>> {
    let emb = penultimate_embedding(model, samples)?;
    let mut by_class: Vec<Option<Array2<f32>>> = vec![None; model.num_classes()];
    let mut out = Vec::with_capacity(samples.len());
    for (row, &y) in emb.rows().into_iter().zip(samples.labels()) {
        if by_class[y].is_none() {
            let picks = reference.positions_of_class(y);
            if picks.is_empty() {
                return Err(Error::EmptyDataset(format!("no reference samples of class {y}")));
            }
            by_class[y] = Some(penultimate_embedding(model, &reference.select(&picks))?);
        }
        out.push(nearest_distance_feature(row, by_class[y].as_ref().unwrap(), k)?);
    }
    Ok(out)
}

fn projection_bounds(x: f32, eps: f64) -> (f32, f32) {
    let x = x as f64;
    let mut hi = (x + eps) as f32;
    if hi as f64 > x + eps {
        hi = hi.next_down();
    }
    let mut lo = (x - eps) as f32;
    if (lo as f64) < x - eps {
        lo = lo.next_up();
    }
    (lo.max(0.0), hi.min(1.0))
}

/// Untargeted L-infinity PGD from the clean point (no random start),
/// ascending the cross-entropy of the true labels.
pub fn pgd_attack(model: &TrainedModel, x: &Array2<f32>, labels: &[usize], cfg: &AttackConfig) -> Result<Array2<f32>> {
    cfg.validate()?;
    let mut adv = x.clone();
    if cfg.epsilon == 0.0 {
        return Ok(adv);
    }
    let bounds: Vec<(f32, f32)> = x.iter().map(|&v| projection_bounds(v, cfg.epsilon)).collect();
    let step = cfg.step() as f32;
    for _ in 0..cfg.steps {
        let (logits, tape) = model.network.forward_tape(adv.view())?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits during adversarial attack".into()));
        }
        let (_, dl) = cross_entropy(&logits, labels);
        let g = model.network.backward(&tape, &dl, true).input.expect("input gradient requested");
        for ((a, &gi), &(lo, hi)) in adv.iter_mut().zip(g.iter()).zip(&bounds) {
            let moved = *a + step * gi.signum() * (gi != 0.0) as u8 as f32;
            *a = moved.clamp(lo, hi);
        }
    }
    Ok(adv)
}

const ATTACK_BATCH: usize = 256;

/// AF for every sample: `H(s(x̃), s(x))` with `x̃` the PGD adversarial example.
pub fn adversarial_features(model: &TrainedModel, samples: &LabeledDataset, cfg: &AttackConfig) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    let mut start = 0;
    while start < samples.len() {
        let end = (start + ATTACK_BATCH).min(samples.len());
        let x = samples.images().slice(s![start..end, ..]).to_owned();
        let y = &samples.labels()[start..end];
        let adv = pgd_attack(model, &x, y, cfg)?;
        let clean = softmax_rows(&model.network.logits(x.view())?);
        let attacked = softmax_rows(&model.network.logits(adv.view())?);
        for (pa, pc) in attacked.rows().into_iter().zip(clean.rows()) {
            let v = if cfg.swap_orientation { cross_entropy_between(pc, pa) } else { cross_entropy_between(pa, pc) };
            out.push(v);
        }
        start = end;
    }
    Ok(out)
}

/// Trains a freshly initialized model for a few epochs on a uniform share of
/// `D_r ∪ D_f` plus the twin forget set.
pub fn train_curriculum_model(
    split: &DataSplit,
    twin_forget: &LabeledDataset,
    arch: &Arch,
    seed: u64,
    cfg: &FeatureConfig,
) -> Result<TrainedModel> {
    let pool = split.full_train();
    let n = (cfg.curriculum_fraction * pool.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, pool.len(), n.min(pool.len())).into_vec();
    picks.sort_unstable();
    let data = pool.select(&picks).concat(twin_forget)?.renamed("curriculum");
    let init = build_model(arch, pool.shape(), pool.num_classes(), seed)?;
    let train_cfg = TrainConfig { seed, ..cfg.curriculum.clone() };
    train(&init, &data, &train_cfg)
}

/// CF for every sample: cross-entropy of the curriculum model.
pub fn curriculum_loss_features(m_r: &TrainedModel, samples: &LabeledDataset) -> Result<Vec<f64>> {
    let logits = m_r.network.logits(samples.images().view())?;
    Ok(cross_entropy_per_sample(&logits, samples.labels()))
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
}

impl NormStats {
    /// Population mean and standard deviation of each column; a zero
    /// deviation is replaced by 1 so constant columns standardize to 0.
    pub fn fit(rows: &[[f64; NUM_FEATURES]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset("feature rows".into()));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; NUM_FEATURES];
        let mut std = [0.0; NUM_FEATURES];
        for j in 0..NUM_FEATURES {
            mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    /// Content fingerprint over the exact bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn apply(&self, row: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        std::array::from_fn(|j| (row[j] - self.mean[j]) / self.std[j])
    }
}

/// Raw feature rows with the statistics used to standardize them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub indices: Vec<usize>,
    pub rows: Vec<[f64; NUM_FEATURES]>,
    /// `Some(true)` = easy, when generalization labels are known.
    pub labels: Option<Vec<bool>>,
    pub stats: NormStats,
    /// Hash of the model and reference data the features were measured in.
    pub context: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StatsSidecar {
    stats: NormStats,
    fingerprint: String,
    context: String,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Standardized values of the selected columns, one row per sample.
    pub fn standardized(&self, features: &[Feature]) -> Array2<f32> {
        let mut out = Array2::<f32>::zeros((self.len(), features.len()));
        for (mut dst, row) in out.axis_iter_mut(Axis(0)).zip(&self.rows) {
            let z = self.stats.apply(row);
            for (d, f) in dst.iter_mut().zip(features) {
                *d = z[f.column()] as f32;
            }
        }
        out
    }

    pub fn column(&self, f: Feature) -> Vec<f64> {
        self.rows.iter().map(|r| r[f.column()]).collect()
    }

    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            indices: positions.iter().map(|&p| self.indices[p]).collect(),
            rows: positions.iter().map(|&p| self.rows[p]).collect(),
            labels: self.labels.as_ref().map(|l| positions.iter().map(|&p| l[p]).collect()),
            stats: self.stats.clone(),
            context: self.context.clone(),
        }
    }

    pub fn stats_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".stats.json");
        PathBuf::from(s)
    }

    /// CSV `index,nf,af,cf[,label]` plus a JSON stats sidecar. Floats are
    /// written in shortest round-trip form, so reloading is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let mut header = vec!["index", "nf", "af", "cf"];
        if self.labels.is_some() {
            header.push("label");
        }
        w.write_record(&header)?;
        for (i, (&index, row)) in self.indices.iter().zip(&self.rows).enumerate() {
            let mut rec = vec![index.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            if let Some(l) = &self.labels {
                rec.push(if l[i] { "easy" } else { "hard" }.to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let side = Self::stats_path(path);
        let sidecar = StatsSidecar {
            stats: self.stats.clone(),
            fingerprint: self.stats.fingerprint(),
            context: self.context.clone(),
        };
        let mut f = std::fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
        f.write_all(serde_json::to_string_pretty(&sidecar)?.as_bytes()).map_err(|e| Error::io(&side, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = Self::stats_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: StatsSidecar = serde_json::from_str(&text)?;
        if sidecar.fingerprint != sidecar.stats.fingerprint() {
            return Err(Error::Format(format!("{} fingerprint does not match its stats", side.display())));
        }
        let mut r = csv::Reader::from_path(path)?;
        let has_label = r.headers()?.iter().any(|h| h == "label");
        let mut indices = Vec::new();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));
        for rec in r.records() {
            let rec = rec?;
            indices.push(rec[0].parse::<usize>().map_err(|e| bad(e.to_string()))?);
            let mut row = [0.0; NUM_FEATURES];
            for (j, v) in row.iter_mut().enumerate() {
                *v = rec[j + 1].parse::<f64>().map_err(|e| bad(e.to_string()))?;
            }
            rows.push(row);
            if has_label {
                labels.push(match &rec[4] {
                    "easy" => true,
                    "hard" => false,
                    other => return Err(bad(format!("unknown label `{other}`"))),
                });
            }
        }
        Ok(Self { indices, rows, labels: has_label.then_some(labels), stats: sidecar.stats, context: sidecar.context })
    }
}

/// Models a feature matrix is measured with.
pub struct FeatureContext<'a> {
    /// Supplies embeddings and logits: the twin model when fitting, the
    /// original model at transfer time.
    pub model: &'a TrainedModel,
    /// Training data of `model` that NF neighbours are drawn from.
    pub reference: &'a LabeledDataset,
    pub curriculum_model: &'a TrainedModel,
}

impl FeatureContext<'_> {
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.model.content_hash());
        h.update(self.reference.fingerprint());
        h.update(self.curriculum_model.content_hash());
        hex::encode(&h.finalize()[..8])
    }
}

/// Computes NF, AF and CF for `samples`. With `stats = None` the z-score
/// statistics are fitted on these rows; otherwise the given ones are kept.
pub fn extract_feature_matrix(
    samples: &LabeledDataset,
    ctx: &FeatureContext<'_>,
    cfg: &FeatureConfig,
    stats: Option<&NormStats>,
    labels: Option<Vec<bool>>,
) -> Result<FeatureMatrix> {
    if let Some(l) = &labels {
        if l.len() != samples.len() {
            return Err(Error::CountMismatch { expected: samples.len(), actual: l.len() });
        }
    }
    let nf = nearest_distance_features(ctx.model, samples, ctx.reference, cfg.neighbors)?;
    let af = adversarial_features(ctx.model, samples, &cfg.attack)?;
    let cf = curriculum_loss_features(ctx.curriculum_model, samples)?;
    let rows: Vec<[f64; NUM_FEATURES]> = (0..samples.len()).map(|i| [nf[i], af[i], cf[i]]).collect();
    if let Some(bad) = rows.iter().flatten().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::NonFinite(format!("feature value {bad}")));
    }
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::fit(&rows)?,
    };
    Ok(FeatureMatrix { indices: samples.indices().to_vec(), rows, labels, stats, context: ctx.fingerprint() })
}
