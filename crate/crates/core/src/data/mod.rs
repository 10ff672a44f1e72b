//! Labeled datasets, removal splits, twin-set sizing and augmentation.

mod augment;
mod cifar;
mod dataset;
mod split;
pub mod synthetic;

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment_image, crop_padding, resize_to};
pub use cifar::{load_cifar10, load_cifar100};
pub use dataset::{DatasetSummary, LabeledDataset, TrainTest};
pub use split::{make_removal_split, size_twin_forget_set, DataSplit, SplitManifest, TwinSizing};
pub use synthetic::{GaussConfig, MixtureConfig};

use crate::error::{Error, Result};

pub const REGISTERED: &[&str] = &["cifar10", "cifar100", "synthetic-gauss", "synthetic-mixture"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub root: PathBuf,
    /// Uniformly subsample the training portion to this many samples.
    pub train_subset: Option<usize>,
    pub subset_seed: u64,
    pub gauss: GaussConfig,
    pub mixture: MixtureConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: "synthetic-mixture".into(),
            root: PathBuf::from("data"),
            train_subset: None,
            subset_seed: 0,
            gauss: GaussConfig::default(),
            mixture: MixtureConfig::default(),
        }
    }
}

/// Loads a registered dataset with default generator settings.
pub fn load_dataset(name: &str, root: &Path) -> Result<TrainTest> {
    load(&DatasetConfig { name: name.into(), root: root.into(), ..DatasetConfig::default() })
}

pub fn load(cfg: &DatasetConfig) -> Result<TrainTest> {
    let mut tt = match cfg.name.as_str() {
        "cifar10" => load_cifar10(&cfg.root)?,
        "cifar100" => load_cifar100(&cfg.root)?,
        "synthetic-gauss" => synthetic::gaussian_blobs(&cfg.gauss),
        "synthetic-mixture" => synthetic::class_mixture(&cfg.mixture),
        other => return Err(Error::UnknownDataset(other.to_string())),
    };
    if let Some(n) = cfg.train_subset {
        if n < tt.train.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.subset_seed);
            let mut picks = sample(&mut rng, tt.train.len(), n).into_vec();
            picks.sort_unstable();
            tt.train = tt.train.select(&picks);
        }
    }
    Ok(tt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_is_rejected() {
        assert!(matches!(load_dataset("mnist", Path::new(".")), Err(Error::UnknownDataset(_))));
    }

    #[test]
    fn subset_keeps_source_indices() {
        let cfg = DatasetConfig { train_subset: Some(100), ..DatasetConfig::default() };
        let tt = load(&cfg).unwrap();
        assert_eq!(tt.train.len(), 100);
        assert!(tt.train.indices().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(tt.train.fingerprint(), load(&cfg).unwrap().train.fingerprint());
    }
}
