//! Generated fixture datasets.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, TrainTest};
use crate::nn::ImageShape;

/// Two 2-D Gaussian blobs centred at (0.3, 0.3) and (0.7, 0.7).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub std: f64,
    pub seed: u64,
}

impl Default for GaussConfig {
    fn default() -> Self {
        Self { n_train: 400, n_test: 200, std: 0.08, seed: 17 }
    }
}

pub fn gaussian_blobs(cfg: &GaussConfig) -> TrainTest {
    let shape = ImageShape::new(1, 1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |n: usize| {
        let mut x = Array2::<f32>::zeros((n, 2));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % 2;
            let centre = if y == 0 { 0.3 } else { 0.7 };
            for j in 0..2 {
                let z: f64 = rng.sample(StandardNormal);
                x[[i, j]] = (centre + cfg.std * z).clamp(0.0, 1.0) as f32;
            }
            labels.push(y);
        }
        (x, labels)
    };
    let (xt, yt) = draw(cfg.n_train);
    let (xs, ys) = draw(cfg.n_test);
    TrainTest {
        train: LabeledDataset::new("synthetic-gauss", 2, shape, xt, yt).expect("valid fixture"),
        test: LabeledDataset::new("synthetic-gauss", 2, shape, xs, ys).expect("valid fixture"),
    }
}

/// Long-tailed class mixture: each class is a tight Gaussian cluster around a
/// random centre, except that a fraction of samples are atypical and drawn
/// uniformly from the whole cube. Atypical samples can only be classified by
/// memorizing them, which is what makes some forget samples "hard".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub cluster_std: f64,
    pub atypical_fraction: f64,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            height: 4,
            width: 4,
            channels: 2,
            train_per_class: 600,
            test_per_class: 200,
            cluster_std: 0.08,
            atypical_fraction: 0.12,
            seed: 7,
        }
    }
}

impl MixtureConfig {
    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.height, self.width, self.channels)
    }
}

pub fn class_mixture(cfg: &MixtureConfig) -> TrainTest {
    let shape = cfg.shape();
    let d = shape.len();
    let k = cfg.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centres: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(0.25..0.75)).collect()).collect();
    let draw = |per_class: usize, rng: &mut ChaCha8Rng| {
        let n = per_class * k;
        let mut x = Array2::<f32>::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % k;
            let atypical = rng.random_bool(cfg.atypical_fraction);
            for j in 0..d {
                let v = if atypical {
                    rng.random_range(0.0..1.0)
                } else {
                    let z: f64 = rng.sample(StandardNormal);
                    centres[y][j] + cfg.cluster_std * z
                };
                x[[i, j]] = v.clamp(0.0, 1.0) as f32;
            }
            labels.push(y);
        }
        (x, labels)
    };
    let (xt, yt) = draw(cfg.train_per_class, &mut rng);
    let mut test_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7e57);
    let (xs, ys) = draw(cfg.test_per_class, &mut test_rng);
    TrainTest {
        train: LabeledDataset::new("synthetic-mixture", k, shape, xt, yt).expect("valid fixture"),
        test: LabeledDataset::new("synthetic-mixture", k, shape, xs, ys).expect("valid fixture"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_have_requested_sizes_and_range() {
        let tt = gaussian_blobs(&GaussConfig::default());
        assert_eq!(tt.train.len(), 400);
        assert_eq!(tt.test.len(), 200);
        assert_eq!(tt.train.num_classes(), 2);
        assert!(tt.train.images().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mixture_is_balanced_and_deterministic() {
        let cfg = MixtureConfig { train_per_class: 20, test_per_class: 5, ..MixtureConfig::default() };
        let a = class_mixture(&cfg);
        assert_eq!(a.train.class_counts(), vec![20; 10]);
        assert_eq!(a.test.len(), 50);
        assert_eq!(a.train.fingerprint(), class_mixture(&cfg).train.fingerprint());
    }
}
