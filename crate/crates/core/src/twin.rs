//! The twin unlearning problem: the original model fine-tuned on a
//! ratio-matched test subset, whose gold model is the original model itself.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{resize_to, DataSplit, LabeledDataset, TwinSizing};
use crate::error::{Error, Result};
use crate::modeling::{argmax_rows, finetune, load_checkpoint_expecting, save_checkpoint, TrainConfig, TrainedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinConfig {
    pub finetune: TrainConfig,
    /// Top up with augmented copies when the test set is smaller than the twin size.
    pub augment: bool,
    /// Extra samples drawn from `D_r ∪ D_f` per twin sample during fine-tuning;
    /// 0 fine-tunes on the test subset alone.
    pub replay_mix: f64,
}

impl Default for TwinConfig {
    fn default() -> Self {
        Self {
            finetune: TrainConfig {
                epochs: 5,
                learning_rate: 0.01,
                momentum: 0.9,
                weight_decay: 5e-4,
                lr_milestones: vec![],
                lr_decay_factor: 0.1,
                batch_size: 16,
                seed: 0,
            },
            augment: true,
            replay_mix: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwinProblem {
    pub twin_model: TrainedModel,
    pub twin_forget: LabeledDataset,
    pub gold_model: TrainedModel,
    pub sizing: TwinSizing,
    /// Test samples left out of `twin_forget`; never seen by the twin model.
    pub holdout: LabeledDataset,
}

/// Persisted description of a twin problem next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinManifest {
    pub sizing: TwinSizing,
    pub twin_forget_indices: Vec<usize>,
    pub twin_forget_augmented: Vec<bool>,
    pub twin_hash: String,
    pub gold_hash: String,
    pub seed: u64,
}

pub fn construct_twin(
    original: &TrainedModel,
    test_set: &LabeledDataset,
    split: &DataSplit,
    cfg: &TwinConfig,
    seed: u64,
) -> Result<TwinProblem> {
    let (sizing, twin_forget, holdout) = twin_sets(test_set, split, cfg, seed)?;

    let ft_data = if cfg.replay_mix > 0.0 {
        let pool = split.full_train();
        let n = ((cfg.replay_mix * twin_forget.len() as f64).round() as usize).min(pool.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7265_706c_6179);
        let mut picks = sample(&mut rng, pool.len(), n).into_vec();
        picks.sort_unstable();
        twin_forget.concat(&pool.select(&picks))?
    } else {
        twin_forget.clone()
    };
    let ft_cfg = TrainConfig { seed, ..cfg.finetune.clone() };
    let twin_model = if ft_data.is_empty() {
        original.derived(original.network.clone(), "finetune")
    } else {
        finetune(original, &ft_data, &ft_cfg)?
    };
    if twin_forget.len() != sizing.n_twin_forget {
        return Err(Error::CountMismatch { expected: sizing.n_twin_forget, actual: twin_forget.len() });
    }
    Ok(TwinProblem { twin_model, twin_forget, gold_model: original.clone(), sizing, holdout })
}

/// Sizes and draws the twin forget set; the rest of the test set is the holdout.
pub fn twin_sets(
    test_set: &LabeledDataset,
    split: &DataSplit,
    cfg: &TwinConfig,
    seed: u64,
) -> Result<(TwinSizing, LabeledDataset, LabeledDataset)> {
    let sizing = TwinSizing::new(split.remain.len(), split.forget.len())?;
    let twin_forget = resize_to(test_set, sizing.n_twin_forget, seed, cfg.augment)?.renamed("twin-forget");
    let used: HashSet<usize> = twin_forget.indices().iter().copied().collect();
    let rest: Vec<usize> = (0..test_set.len()).filter(|&p| !used.contains(&test_set.indices()[p])).collect();
    let holdout = test_set.select(&rest).renamed("twin-holdout");
    Ok((sizing, twin_forget, holdout))
}

impl TwinProblem {
    /// Rebuilds a saved twin problem from `dir`. The twin sets are redrawn and
    /// must match the manifest; the checkpoints must match its hashes.
    pub fn restore(
        dir: &Path,
        original: &TrainedModel,
        test_set: &LabeledDataset,
        split: &DataSplit,
        cfg: &TwinConfig,
    ) -> Result<Self> {
        let manifest = TwinManifest::load(&dir.join("twin.toml"))?;
        let twin_model = load_checkpoint_expecting(&dir.join("twin.bin"), &original.arch)?;
        let (sizing, twin_forget, holdout) = twin_sets(test_set, split, cfg, manifest.seed)?;
        if twin_forget.indices() != manifest.twin_forget_indices.as_slice()
            || twin_forget.augmented() != manifest.twin_forget_augmented.as_slice()
        {
            return Err(Error::CheckpointMismatch("twin forget set differs from the saved manifest".into()));
        }
        if manifest.twin_hash != twin_model.content_hash() || manifest.gold_hash != original.content_hash() {
            return Err(Error::CheckpointMismatch(
                "twin or original model hash differs from the saved manifest".into(),
            ));
        }
        Ok(Self { twin_model, twin_forget, gold_model: original.clone(), sizing, holdout })
    }

    pub fn manifest(&self, seed: u64) -> TwinManifest {
        TwinManifest {
            sizing: self.sizing,
            twin_forget_indices: self.twin_forget.indices().to_vec(),
            twin_forget_augmented: self.twin_forget.augmented().to_vec(),
            twin_hash: self.twin_model.content_hash(),
            gold_hash: self.gold_model.content_hash(),
            seed,
        }
    }

    /// Writes `twin.bin` (+ sidecar) and `twin.toml` into `dir`.
    pub fn save(&self, dir: &Path, seed: u64) -> Result<TwinManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&self.twin_model, &dir.join("twin.bin"))?;
        let manifest = self.manifest(seed);
        let path = dir.join("twin.toml");
        std::fs::write(&path, toml::to_string(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

impl TwinManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(toml::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenLabel {
    Easy,
    Hard,
}

impl GenLabel {
    pub fn is_easy(self) -> bool {
        self == GenLabel::Easy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneralizationLabel {
    pub index: usize,
    pub label: GenLabel,
}

/// Easy iff `gold` classifies the sample correctly. Inference only.
pub fn label_generalization(gold: &TrainedModel, samples: &LabeledDataset) -> Result<Vec<GeneralizationLabel>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let logits = gold.network.logits(samples.images().view())?;
    Ok(argmax_rows(&logits)
        .into_iter()
        .zip(samples.labels())
        .zip(samples.indices())
        .map(|((p, &y), &index)| GeneralizationLabel {
            index,
            label: if p == y { GenLabel::Easy } else { GenLabel::Hard },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::class_mixture;
    use crate::data::{make_removal_split, MixtureConfig};
    use crate::modeling::{accuracy, build_model, train, Arch};

    fn setup() -> (crate::data::TrainTest, DataSplit, TrainedModel) {
        let tt = class_mixture(&MixtureConfig { train_per_class: 40, test_per_class: 20, ..Default::default() });
        let split = make_removal_split(&tt.train, &tt.test, 3, 10, 1).unwrap();
        let m = build_model(&Arch::Mlp { hidden: vec![32] }, tt.train.shape(), 10, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            lr_milestones: vec![],
            batch_size: 32,
            learning_rate: 0.05,
            ..Default::default()
        };
        let m = train(&m, &split.full_train(), &cfg).unwrap();
        (tt, split, m)
    }

    #[test]
    fn twin_is_sized_and_gold_is_original() {
        let (tt, split, m) = setup();
        let twin = construct_twin(&m, &tt.test, &split, &TwinConfig::default(), 4).unwrap();
        // 10 * 400 / 390 = 10.26
        assert_eq!(twin.twin_forget.len(), 10);
        assert_eq!(twin.sizing.n_twin_forget, 10);
        assert!(twin.sizing.ratios_match());
        assert_eq!(twin.gold_model.content_hash(), m.content_hash());
        assert_eq!(twin.holdout.len() + twin.twin_forget.len(), tt.test.len());
        let a = accuracy(&twin.twin_model, &twin.twin_forget).unwrap();
        let b = accuracy(&m, &twin.twin_forget).unwrap();
        assert!(a >= b, "{a} < {b}");
    }

    #[test]
    fn easy_fraction_equals_gold_accuracy() {
        let (tt, _, m) = setup();
        let labels = label_generalization(&m, &tt.test).unwrap();
        let easy = labels.iter().filter(|l| l.label.is_easy()).count();
        let acc = accuracy(&m, &tt.test).unwrap();
        assert_eq!(100.0 * easy as f64 / labels.len() as f64, acc);
        assert_eq!(labels, label_generalization(&m, &tt.test).unwrap());
    }

    #[test]
    fn constant_wrong_model_labels_everything_hard() {
        let (tt, _, m) = setup();
        let mut net = m.network.clone();
        let n = net.num_params();
        let mut p = vec![0.0; n];
        p[n - 1] = 1.0; // always class 9
        net.set_params(p).unwrap();
        let wrong = m.derived(net, "constant");
        let not_nine: Vec<usize> = (0..tt.test.len()).filter(|&i| tt.test.labels()[i] != 9).collect();
        let labels = label_generalization(&wrong, &tt.test.select(&not_nine)).unwrap();
        assert!(labels.iter().all(|l| l.label == GenLabel::Hard));
    }

    #[test]
    fn manifest_round_trips() {
        let (tt, split, m) = setup();
        let twin = construct_twin(&m, &tt.test, &split, &TwinConfig::default(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = twin.save(dir.path(), 4).unwrap();
        assert_eq!(TwinManifest::load(&dir.path().join("twin.toml")).unwrap(), written);
    }
}
