use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};

/// Partition of a training set into remaining and forgetting data, plus the
/// held-out test set.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub remain: LabeledDataset,
    pub forget: LabeledDataset,
    pub test: LabeledDataset,
    pub forget_class: usize,
    pub seed: u64,
}

/// Everything needed to re-create a split without re-running sampling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub forget_class: usize,
    pub forget_indices: Vec<usize>,
    pub train_fingerprint: String,
}

/// Draws `n_forget` samples of `forget_class` uniformly (by `seed`) as the
/// forgetting data; every other training sample is remaining data.
pub fn make_removal_split(
    train: &LabeledDataset,
    test: &LabeledDataset,
    forget_class: usize,
    n_forget: usize,
    seed: u64,
) -> Result<DataSplit> {
    if forget_class >= train.num_classes() {
        return Err(Error::InvalidSplit(format!("class {forget_class} outside [0, {})", train.num_classes())));
    }
    let class_positions = train.positions_of_class(forget_class);
    if n_forget >= class_positions.len() {
        return Err(Error::InvalidSplit(format!(
            "cannot forget {n_forget} of the {} samples of class {forget_class}; \
             only a strict subset of a class can be forgotten",
            class_positions.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> =
        sample(&mut rng, class_positions.len(), n_forget).into_iter().map(|i| class_positions[i]).collect();
    chosen.sort_unstable();
    Ok(partition(train, test, forget_class, seed, &chosen))
}

fn partition(
    train: &LabeledDataset,
    test: &LabeledDataset,
    forget_class: usize,
    seed: u64,
    forget_positions: &[usize],
) -> DataSplit {
    let mut is_forget = vec![false; train.len()];
    for &p in forget_positions {
        is_forget[p] = true;
    }
    let remain: Vec<usize> = (0..train.len()).filter(|&i| !is_forget[i]).collect();
    DataSplit {
        remain: train.select(&remain),
        forget: train.select(forget_positions),
        test: test.clone(),
        forget_class,
        seed,
    }
}

impl DataSplit {
    pub fn manifest(&self, train: &LabeledDataset) -> SplitManifest {
        SplitManifest {
            seed: self.seed,
            forget_class: self.forget_class,
            forget_indices: self.forget.indices().to_vec(),
            train_fingerprint: train.fingerprint(),
        }
    }

    /// Re-creates a split from its manifest.
    pub fn from_manifest(train: &LabeledDataset, test: &LabeledDataset, manifest: &SplitManifest) -> Result<Self> {
        if manifest.train_fingerprint != train.fingerprint() {
            return Err(Error::InvalidSplit("manifest was written for a different training set".into()));
        }
        let by_index: std::collections::HashMap<usize, usize> =
            train.indices().iter().enumerate().map(|(p, &i)| (i, p)).collect();
        let mut positions = Vec::with_capacity(manifest.forget_indices.len());
        for i in &manifest.forget_indices {
            let p = *by_index.get(i).ok_or_else(|| Error::InvalidSplit(format!("index {i} not in training set")))?;
            if train.labels()[p] != manifest.forget_class {
                return Err(Error::InvalidSplit(format!("index {i} is not of the forget class")));
            }
            positions.push(p);
        }
        Ok(partition(train, test, manifest.forget_class, manifest.seed, &positions))
    }

    /// Remaining plus forgetting data, i.e. the original training set (up to order).
    pub fn full_train(&self) -> LabeledDataset {
        self.remain.concat(&self.forget).expect("split halves share shape")
    }

    /// Verifies the partition invariants against the training set it came from.
    pub fn check_partition(&self, train: &LabeledDataset) -> Result<()> {
        let mut seen = vec![0u8; train.len()];
        let by_index: std::collections::HashMap<usize, usize> =
            train.indices().iter().enumerate().map(|(p, &i)| (i, p)).collect();
        for &i in self.remain.indices().iter().chain(self.forget.indices()) {
            let p = *by_index.get(&i).ok_or_else(|| Error::InvalidSplit(format!("index {i} not in training set")))?;
            seen[p] += 1;
        }
        if let Some(p) = seen.iter().position(|&c| c != 1) {
            return Err(Error::InvalidSplit(format!(
                "training index {} appears {} times across remain and forget",
                train.indices()[p],
                seen[p]
            )));
        }
        if self.forget.labels().iter().any(|&y| y != self.forget_class) {
            return Err(Error::InvalidSplit("forget set contains another class".into()));
        }
        let class_total = train.positions_of_class(self.forget_class).len();
        if self.forget.len() >= class_total {
            return Err(Error::InvalidSplit("forget set is the whole class".into()));
        }
        Ok(())
    }
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(toml::from_str(&text)?)
    }
}

/// Forgetting ratios of the original and twin problems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwinSizing {
    pub n_forget: usize,
    pub n_remain: usize,
    pub n_twin_forget: usize,
    pub ratio_original: f64,
    pub ratio_twin: f64,
}

impl TwinSizing {
    pub fn new(n_remain: usize, n_forget: usize) -> Result<Self> {
        let n_twin_forget = size_twin_forget_set(n_remain, n_forget)?;
        Ok(Self {
            n_forget,
            n_remain,
            n_twin_forget,
            ratio_original: n_forget as f64 / n_remain as f64,
            ratio_twin: n_twin_forget as f64 / (n_remain + n_forget) as f64,
        })
    }

    /// Whether the twin ratio is within integer-rounding slack of the original.
    pub fn ratios_match(&self) -> bool {
        (self.ratio_twin - self.ratio_original).abs() <= 1.0 / (self.n_remain + self.n_forget) as f64 + 1e-12
    }
}

/// Size of the test subset used to build the twin model so that
/// `n_twin / (n_remain + n_forget) = n_forget / n_remain`, rounded half to even.
pub fn size_twin_forget_set(n_remain: usize, n_forget: usize) -> Result<usize> {
    if n_remain == 0 {
        return Err(Error::InvalidSplit("remaining set is empty".into()));
    }
    let num = n_forget as u128 * (n_remain + n_forget) as u128;
    let den = n_remain as u128;
    let (q, r) = (num / den, num % den);
    let q = match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    };
    Ok(q as usize)
}
