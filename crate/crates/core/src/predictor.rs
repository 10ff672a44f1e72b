//! Binary easy/hard classifier trained on the twin problem and transferred to
//! the forgetting data.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataSplit;
use crate::error::{Error, Result};
use crate::features::{Feature, FeatureMatrix, NormStats};
use crate::modeling::minibatches;
use crate::nn::optim::Sgd;
use crate::nn::{ImageShape, Network, NetworkBuilder};
use crate::twin::GenLabel;

pub const HIDDEN: [usize; 2] = [64, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub threshold: f64,
    /// Share of the labeled rows held out for validation (stratified).
    pub validation_fraction: f64,
    pub features: Vec<Feature>,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 16,
            threshold: 0.5,
            validation_fraction: 0.2,
            features: Feature::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("predictor threshold must be in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 1)");
        }
        if self.features.is_empty() {
            return bad("predictor needs at least one feature");
        }
        if self.batch_size == 0 || !(0.0..1.0).contains(&self.momentum) {
            return bad("predictor batch_size must be positive and momentum in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GenLabelPredictor {
    network: Network,
    pub features: Vec<Feature>,
    pub threshold: f64,
    pub seed: u64,
    pub stats: NormStats,
    pub stats_fingerprint: String,
}

/// Accuracies measured while fitting, in percent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
    /// Accuracy of always predicting the majority label on the validation rows.
    pub validation_prior: Option<f64>,
    pub n_train: usize,
    pub n_validation: usize,
    pub train_easy_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelPrediction {
    pub index: usize,
    pub label: GenLabel,
    pub p_easy: f64,
}

fn mlp(inputs: usize, seed: u64) -> Network {
    let mut b = NetworkBuilder::new(ImageShape::new(1, 1, inputs));
    for h in HIDDEN {
        b.dense(h).relu();
    }
    b.finish(1, seed)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Positions split into (train, validation), stratified by label.
pub fn stratified_split(labels: &[bool], validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [true, false] {
        let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        pos.shuffle(&mut rng);
        let n_val = (validation_fraction * pos.len() as f64).round() as usize;
        // keep at least one of each label for fitting
        let n_val = n_val.min(pos.len().saturating_sub(1));
        val.extend_from_slice(&pos[..n_val]);
        train.extend_from_slice(&pos[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Fits the predictor on a stratified share of the labeled rows and reports
/// accuracy on the rest.
pub fn train_predictor(
    features: &FeatureMatrix,
    cfg: &PredictorConfig,
) -> Result<(GenLabelPredictor, PredictorReport)> {
    cfg.validate()?;
    let labels = features
        .labels
        .as_ref()
        .ok_or_else(|| Error::DegenerateLabels("predictor training needs labeled features".into()))?;
    let n_easy = labels.iter().filter(|&&l| l).count();
    if n_easy == 0 || n_easy == labels.len() {
        return Err(Error::DegenerateLabels(format!(
            "{n_easy} of {} rows are easy; both labels are required",
            labels.len()
        )));
    }
    let (train_pos, val_pos) = stratified_split(labels, cfg.validation_fraction, cfg.seed);
    let fit_rows = features.select(&train_pos);
    let predictor = fit(&fit_rows, cfg)?;
    let y_fit = fit_rows.labels.as_ref().unwrap();
    let mut report = PredictorReport {
        train_accuracy: predictor.accuracy(&fit_rows)?,
        n_train: train_pos.len(),
        n_validation: val_pos.len(),
        train_easy_fraction: y_fit.iter().filter(|&&l| l).count() as f64 / y_fit.len() as f64,
        ..Default::default()
    };
    if !val_pos.is_empty() {
        let val = features.select(&val_pos);
        report.validation_accuracy = Some(predictor.accuracy(&val)?);
        report.validation_prior = Some(majority_accuracy(val.labels.as_ref().unwrap()));
    }
    Ok((predictor, report))
}

/// Accuracy of the constant majority-label predictor, in percent.
pub fn majority_accuracy(labels: &[bool]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let easy = labels.iter().filter(|&&l| l).count();
    100.0 * easy.max(labels.len() - easy) as f64 / labels.len() as f64
}

fn fit(rows: &FeatureMatrix, cfg: &PredictorConfig) -> Result<GenLabelPredictor> {
    let x = rows.standardized(&cfg.features);
    let y: Vec<f64> = rows.labels.as_ref().unwrap().iter().map(|&l| l as u8 as f64).collect();
    let n = y.len() as f64;
    let n_pos = y.iter().sum::<f64>();
    // inverse-frequency weights, normalized so the weights average to 1
    let w_pos = n / (2.0 * n_pos);
    let w_neg = n / (2.0 * (n - n_pos));
    let mut network = mlp(cfg.features.len(), cfg.seed);
    let mut sgd = Sgd::new(network.num_params(), cfg.momentum as f32, cfg.weight_decay as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        for rows in minibatches(y.len(), cfg.batch_size, &mut rng) {
            let xb = x.select(Axis(0), &rows);
            let (z, tape) = network.forward_tape(xb.view())?;
            let mut dz = Array2::<f32>::zeros(z.raw_dim());
            let mut loss = 0.0;
            for (k, &r) in rows.iter().enumerate() {
                let p = sigmoid(z[[k, 0]] as f64);
                let w = if y[r] > 0.5 { w_pos } else { w_neg };
                loss -= w * (y[r] * p.max(1e-12).ln() + (1.0 - y[r]) * (1.0 - p).max(1e-12).ln());
                dz[[k, 0]] = (w * (p - y[r]) / rows.len() as f64) as f32;
            }
            if !loss.is_finite() {
                return Err(Error::Divergence { stage: "predictor".into(), epoch, loss });
            }
            let back = network.backward(&tape, &dz, false);
            sgd.step(network.params_mut(), &back.params, cfg.learning_rate as f32);
        }
    }
    Ok(GenLabelPredictor {
        network,
        features: cfg.features.clone(),
        threshold: cfg.threshold,
        seed: cfg.seed,
        stats_fingerprint: rows.stats.fingerprint(),
        stats: rows.stats.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct Persisted {
    features: Vec<Feature>,
    threshold: f64,
    seed: u64,
    stats: NormStats,
    stats_fingerprint: String,
    params: Vec<f32>,
}

impl GenLabelPredictor {
    pub fn params(&self) -> &[f32] {
        self.network.params()
    }

    /// `P(easy)` for each row.
    pub fn probabilities(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        let fp = features.stats.fingerprint();
        if fp != self.stats_fingerprint {
            return Err(Error::StatsMismatch { expected: self.stats_fingerprint.clone(), actual: fp });
        }
        let z = self.network.logits(features.standardized(&self.features).view())?;
        Ok(z.column(0).iter().map(|&v| sigmoid(v as f64)).collect())
    }

    pub fn predict_labels(&self, features: &FeatureMatrix) -> Result<Vec<LabelPrediction>> {
        Ok(self
            .probabilities(features)?
            .into_iter()
            .zip(&features.indices)
            .map(|(p_easy, &index)| LabelPrediction { index, label: self.decide(p_easy), p_easy })
            .collect())
    }

    /// Easy iff `p_easy >= threshold`.
    pub fn decide(&self, p_easy: f64) -> GenLabel {
        if p_easy >= self.threshold {
            GenLabel::Easy
        } else {
            GenLabel::Hard
        }
    }

    /// Percentage of labeled rows predicted correctly.
    pub fn accuracy(&self, features: &FeatureMatrix) -> Result<f64> {
        let labels = features
            .labels
            .as_ref()
            .ok_or_else(|| Error::DegenerateLabels("accuracy needs labeled features".into()))?;
        if labels.is_empty() {
            return Err(Error::EmptyDataset("predictor accuracy".into()));
        }
        let preds = self.predict_labels(features)?;
        let hits = preds.iter().zip(labels).filter(|(p, &l)| p.label.is_easy() == l).count();
        Ok(100.0 * hits as f64 / labels.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let p = Persisted {
            features: self.features.clone(),
            threshold: self.threshold,
            seed: self.seed,
            stats: self.stats.clone(),
            stats_fingerprint: self.stats_fingerprint.clone(),
            params: self.network.params().to_vec(),
        };
        std::fs::write(path, serde_json::to_string(&p)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Persisted = serde_json::from_str(&text)?;
        let mut network = mlp(p.features.len(), p.seed);
        network.set_params(p.params)?;
        Ok(Self {
            network,
            features: p.features,
            threshold: p.threshold,
            seed: p.seed,
            stats: p.stats,
            stats_fingerprint: p.stats_fingerprint,
        })
    }
}

/// Indices of `D_f` split by predicted generalization label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgetPartition {
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
}

impl ForgetPartition {
    pub fn len(&self) -> usize {
        self.easy.len() + self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits the forgetting data by predicted label. Predictions must cover
/// every `D_f` sample exactly once.
pub fn partition_forget_set(split: &DataSplit, predictions: &[LabelPrediction]) -> Result<ForgetPartition> {
    if predictions.len() != split.forget.len() {
        return Err(Error::CountMismatch { expected: split.forget.len(), actual: predictions.len() });
    }
    let mut by_index = std::collections::HashMap::new();
    for p in predictions {
        if by_index.insert(p.index, p.label).is_some() {
            return Err(Error::InvalidSplit(format!("duplicate prediction for sample {}", p.index)));
        }
    }
    let mut part = ForgetPartition::default();
    for &i in split.forget.indices() {
        match by_index.get(&i) {
            Some(GenLabel::Easy) => part.easy.push(i),
            Some(GenLabel::Hard) => part.hard.push(i),
            None => return Err(Error::InvalidSplit(format!("no prediction for forget sample {i}"))),
        }
    }
    Ok(part)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn separable(n: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            // label = sign of nf, with a margin; a quarter of rows are "hard"
            let easy = i % 4 != 0;
            let nf = if easy { rng.random_range(0.2..1.0) } else { rng.random_range(-1.0..-0.2) };
            rows.push([nf + 2.0, rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]);
            labels.push(easy);
        }
        let stats = NormStats::fit(&rows).unwrap();
        FeatureMatrix { indices: (0..n).collect(), rows, labels: Some(labels), stats, context: String::new() }
    }

    #[test]
    fn separable_features_are_learned() {
        let fm = separable(80, 1);
        let cfg = PredictorConfig { validation_fraction: 0.0, ..Default::default() };
        let (p, report) = train_predictor(&fm, &cfg).unwrap();
        assert_eq!(report.train_accuracy, 100.0);
        assert_eq!(p.accuracy(&fm).unwrap(), 100.0);
    }

    #[test]
    fn same_seed_same_weights() {
        let fm = separable(40, 2);
        let a = train_predictor(&fm, &PredictorConfig::default()).unwrap().0;
        let b = train_predictor(&fm, &PredictorConfig::default()).unwrap().0;
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn single_class_labels_are_rejected() {
        let mut fm = separable(10, 0);
        fm.labels = Some(vec![true; 10]);
        assert!(matches!(train_predictor(&fm, &PredictorConfig::default()), Err(Error::DegenerateLabels(_))));
    }

    #[test]
    fn threshold_is_inclusive() {
        let fm = separable(20, 0);
        let (p, _) = train_predictor(&fm, &PredictorConfig { epochs: 1, ..Default::default() }).unwrap();
        assert_eq!(p.decide(0.5), GenLabel::Easy);
        assert_eq!(p.decide(0.4999999), GenLabel::Hard);
    }

    #[test]
    fn foreign_stats_are_refused() {
        let fm = separable(20, 0);
        let (p, _) = train_predictor(&fm, &PredictorConfig { epochs: 1, ..Default::default() }).unwrap();
        let other = FeatureMatrix { stats: NormStats::fit(&fm.rows[..5]).unwrap(), ..fm.clone() };
        assert!(matches!(p.predict_labels(&other), Err(Error::StatsMismatch { .. })));
    }

    #[test]
    fn permuting_rows_permutes_outputs() {
        let fm = separable(20, 3);
        let (p, _) = train_predictor(&fm, &PredictorConfig { epochs: 5, ..Default::default() }).unwrap();
        let order: Vec<usize> = (0..20).rev().collect();
        let a = p.predict_labels(&fm).unwrap();
        let b = p.predict_labels(&fm.select(&order)).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(a[i], b[k]);
        }
    }

    #[test]
    fn save_and_load_agree() {
        let fm = separable(20, 3);
        let (p, _) = train_predictor(&fm, &PredictorConfig { epochs: 3, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.save(&path).unwrap();
        let q = GenLabelPredictor::load(&path).unwrap();
        assert_eq!(p.probabilities(&fm).unwrap(), q.probabilities(&fm).unwrap());
    }

    #[test]
    fn stratified_split_keeps_both_labels() {
        let labels: Vec<bool> = (0..50).map(|i| i % 10 != 0).collect();
        let (tr, va) = stratified_split(&labels, 0.2, 0);
        assert_eq!(tr.len() + va.len(), 50);
        assert_eq!(va.iter().filter(|&&i| !labels[i]).count(), 1);
        assert_eq!(va.len(), 10);
    }

    #[test]
    fn partition_counts() {
        use crate::data::{make_removal_split, synthetic::class_mixture, MixtureConfig};
        let tt = class_mixture(&MixtureConfig { train_per_class: 120, test_per_class: 1, ..Default::default() });
        let split = make_removal_split(&tt.train, &tt.test, 0, 100, 0).unwrap();
        let preds: Vec<LabelPrediction> = split
            .forget
            .indices()
            .iter()
            .enumerate()
            .map(|(k, &index)| LabelPrediction {
                index,
                label: if k < 92 { GenLabel::Easy } else { GenLabel::Hard },
                p_easy: 0.0,
            })
            .collect();
        let part = partition_forget_set(&split, &preds).unwrap();
        assert_eq!((part.easy.len(), part.hard.len()), (92, 8));
        assert!(partition_forget_set(&split, &preds[1..]).is_err());
    }
}
