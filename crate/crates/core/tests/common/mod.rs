//! Property checks shared by the property suite and the acceptance target.
//! Each check drives its own deterministic proptest runner and returns the
//! shrunk counterexample on failure.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmu_core::data::LabeledDataset;
use tmu_core::data::{make_removal_split, size_twin_forget_set, DataSplit, TwinSizing};
use tmu_core::eval::{activation_distance, UnlearnReport};
use tmu_core::features::{
    adversarial_features, curriculum_loss_features, nearest_distance_features, penultimate_embedding, AttackConfig,
};
use tmu_core::harness::{run_experiment, Experiment, ExperimentConfig};
use tmu_core::modeling::{build_model, Arch, TrainConfig, TrainedModel};
use tmu_core::modeling::{load_checkpoint, save_checkpoint};
use tmu_core::nn::ImageShape;

pub type Check = Result<(), String>;

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn check<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Check
where
    S::Value: std::fmt::Debug,
{
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

pub const SHAPE: ImageShape = ImageShape::new(4, 4, 2);

/// Uniform pixels in [0, 1) with the given labels.
pub fn random_dataset(seed: u64, labels: Vec<usize>, classes: usize, shape: ImageShape) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Array2::from_shape_fn((labels.len(), shape.len()), |_| rng.random::<f32>());
    LabeledDataset::new("random", classes, shape, images, labels).unwrap()
}

/// A freshly initialized model with weights scaled so softmax outputs are far
/// from uniform.
pub fn random_model(arch: &Arch, classes: usize, seed: u64, scale: f32) -> TrainedModel {
    let mut m = build_model(arch, SHAPE, classes, seed).unwrap();
    for p in m.network.params_mut() {
        *p *= scale;
    }
    m
}

fn arch_strategy() -> impl Strategy<Value = Arch> {
    prop_oneof![
        prop::collection::vec(2usize..12, 1..3).prop_map(|hidden| Arch::Mlp { hidden }),
        (1usize..4).prop_map(|width| Arch::AllCnn { width }),
        (1usize..3).prop_map(|width| Arch::ResNet18 { width }),
    ]
}

fn oracle_softmax(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// The twin forget-set size is the exact ratio-matched target rounded half to
/// even, so it sits within 1/2 sample of it.
pub fn twin_rounding_slack(cases: u32) -> Check {
    check(cases, (1usize..2_000_000, 0usize..200_000), |(n_remain, n_forget)| {
        let n = size_twin_forget_set(n_remain, n_forget).unwrap() as u128;
        let (nr, target_num) = (n_remain as u128, n_forget as u128 * (n_remain + n_forget) as u128);
        // |n - target| <= 1/2  <=>  |2 n nr - 2 num| <= nr
        let gap = (2 * n * nr).abs_diff(2 * target_num);
        prop_assert!(gap <= nr, "n={n} n_remain={n_remain} n_forget={n_forget}");
        if gap == nr {
            prop_assert_eq!(n % 2, 0, "ties round to even");
        }
        let s = TwinSizing::new(n_remain, n_forget).unwrap();
        prop_assert!(s.ratios_match());
        Ok(())
    })
}

/// With a zero budget, AF reduces to the entropy of the clean prediction.
pub fn af_zero_budget_is_entropy(cases: u32) -> Check {
    let strategy = (arch_strategy(), any::<u64>(), 2usize..11, 1usize..20, 0.5f32..6.0);
    check(cases, strategy, |(arch, seed, classes, n, scale)| {
        let model = random_model(&arch, classes, seed, scale);
        let labels = (0..n).map(|i| (i * 7 + seed as usize) % classes).collect();
        let data = random_dataset(seed ^ 0x5eed, labels, classes, SHAPE);
        let cfg = AttackConfig { epsilon: 0.0, ..AttackConfig::default() };
        let af = adversarial_features(&model, &data, &cfg).unwrap();
        let logits = model.network.logits(data.images().view()).unwrap();
        for (v, row) in af.iter().zip(logits.rows()) {
            let p = oracle_softmax(&row.to_vec());
            let h: f64 = -p.iter().map(|&q| q * q.max(1e-12).ln()).sum::<f64>();
            prop_assert!((v - h).abs() <= 1e-6, "af {v} entropy {h}");
        }
        Ok(())
    })
}

/// A model whose logits are all equal has cross-entropy `ln K` on any sample.
pub fn cf_uniform_logits_is_ln_k(cases: u32) -> Check {
    check(cases, (arch_strategy(), any::<u64>(), 2usize..120, 1usize..20), |(arch, seed, classes, n)| {
        let mut model = build_model(&arch, SHAPE, classes, seed).unwrap();
        let zeros = vec![0.0; model.network.num_params()];
        model.network.set_params(zeros).unwrap();
        let labels = (0..n).map(|i| (i * 3 + seed as usize) % classes).collect();
        let data = random_dataset(seed, labels, classes, SHAPE);
        for v in curriculum_loss_features(&model, &data).unwrap() {
            prop_assert!((v - (classes as f64).ln()).abs() <= 1e-6, "cf {v} vs ln {classes}");
        }
        Ok(())
    })
}

/// NF against a brute-force scan: every same-class distance, sorted, first k averaged.
pub fn nf_matches_brute_force(cases: u32) -> Check {
    let strategy = (any::<u64>(), 2usize..4, 1usize..8, prop::collection::vec(0usize..3, 10), 0.5f32..4.0);
    check(cases, strategy, |(seed, classes, k, raw, scale)| {
        let model = random_model(&Arch::Mlp { hidden: vec![6, 5] }, classes, seed, scale);
        let sample_labels: Vec<usize> = raw.iter().map(|&y| y % classes).collect();
        // every class appears in the reference
        let ref_labels: Vec<usize> = (0..10).map(|i| if i < classes { i } else { raw[i] % classes }).collect();
        let samples = random_dataset(seed, sample_labels.clone(), classes, SHAPE);
        let reference = random_dataset(seed.wrapping_add(1), ref_labels.clone(), classes, SHAPE);
        let got = nearest_distance_features(&model, &samples, &reference, k).unwrap();

        let es = penultimate_embedding(&model, &samples).unwrap();
        let er = penultimate_embedding(&model, &reference).unwrap();
        for (i, &y) in sample_labels.iter().enumerate() {
            let mut d: Vec<f64> = (0..10)
                .filter(|&j| ref_labels[j] == y)
                .map(|j| {
                    es.row(i).iter().zip(er.row(j)).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>().sqrt()
                })
                .collect();
            d.sort_by(f64::total_cmp);
            let m = k.min(d.len());
            let want = d[..m].iter().sum::<f64>() / m as f64;
            prop_assert!((got[i] - want).abs() <= 1e-9 * want.max(1.0), "sample {i}: {} vs {want}", got[i]);
        }
        Ok(())
    })
}

/// Activation distance is a pseudometric on models of one architecture.
pub fn activation_distance_pseudometric(cases: u32) -> Check {
    let strategy = (arch_strategy(), any::<u64>(), 2usize..6, 1usize..16);
    check(cases, strategy, |(arch, seed, classes, n)| {
        let models: Vec<TrainedModel> =
            (0..3).map(|i| random_model(&arch, classes, seed.wrapping_add(i), 1.0 + i as f32)).collect();
        let data = random_dataset(seed, (0..n).map(|i| i % classes).collect(), classes, SHAPE);
        let d = |a: usize, b: usize| activation_distance(&models[a], &models[b], &data).unwrap();
        for a in 0..3 {
            prop_assert_eq!(d(a, a), 0.0);
            for b in 0..3 {
                prop_assert!(d(a, b) >= 0.0);
                prop_assert_eq!(d(a, b), d(b, a));
                for c in 0..3 {
                    prop_assert!(d(a, c) <= d(a, b) + d(b, c) + 1e-9);
                }
            }
        }
        Ok(())
    })
}

/// Remaining and forgetting data partition the training set, and a split is
/// a pure function of its seed.
pub fn split_disjointness(cases: u32) -> Check {
    let strategy = (any::<u64>(), 2usize..6, prop::collection::vec(0usize..6, 20..200), 0usize..6, 0.0f64..1.0);
    check(cases, strategy, |(seed, classes, raw, class, frac)| {
        let labels: Vec<usize> = raw.iter().map(|&y| y % classes).collect();
        let class = class % classes;
        let count = labels.iter().filter(|&&y| y == class).count();
        prop_assume!(count >= 2);
        let n_forget = 1 + ((count - 2) as f64 * frac) as usize;
        let train = random_dataset(seed, labels.clone(), classes, SHAPE);
        let test = random_dataset(seed ^ 1, (0..10).map(|i| i % classes).collect(), classes, SHAPE);
        let split = make_removal_split(&train, &test, class, n_forget, seed).unwrap();
        let remain: BTreeSet<usize> = split.remain.indices().iter().copied().collect();
        let forget: BTreeSet<usize> = split.forget.indices().iter().copied().collect();
        prop_assert_eq!(forget.len(), n_forget);
        prop_assert_eq!(remain.len(), split.remain.len());
        prop_assert!(remain.is_disjoint(&forget));
        let all: BTreeSet<usize> = remain.union(&forget).copied().collect();
        prop_assert_eq!(all, (0..labels.len()).collect::<BTreeSet<_>>());
        prop_assert!(split.forget.labels().iter().all(|&y| y == class));
        prop_assert_eq!(split.test.indices(), test.indices());
        prop_assert!(split.check_partition(&train).is_ok());
        let again = make_removal_split(&train, &test, class, n_forget, seed).unwrap();
        prop_assert_eq!(again.forget.indices(), split.forget.indices());
        let restored = DataSplit::from_manifest(&train, &test, &split.manifest(&train)).unwrap();
        prop_assert_eq!(restored.remain.indices(), split.remain.indices());
        Ok(())
    })
}

/// Saving and loading reproduces every parameter bit and every logit.
pub fn checkpoint_round_trip(cases: u32) -> Check {
    check(cases, (arch_strategy(), any::<u64>(), 2usize..12, -8.0f32..8.0), |(arch, seed, classes, scale)| {
        let model = random_model(&arch, classes, seed, scale);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let bits = |m: &TrainedModel| m.network.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&model), bits(&loaded));
        prop_assert_eq!(&loaded.arch, &arch);
        prop_assert_eq!(model.content_hash(), loaded.content_hash());
        let data = random_dataset(seed, (0..5).map(|i| i % classes).collect(), classes, SHAPE);
        let a = model.network.logits(data.images().view()).unwrap();
        let b = loaded.network.logits(data.images().view()).unwrap();
        prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let again = dir.path().join("again.bin");
        save_checkpoint(&loaded, &again).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        Ok(())
    })
}

/// A small end-to-end configuration on the synthetic mixture.
pub fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::fixture();
    cfg.dataset.mixture.train_per_class = 60;
    cfg.dataset.mixture.test_per_class = 20;
    cfg.arch = Arch::Mlp { hidden: vec![32, 16] };
    cfg.forget_classes = vec![2, 5];
    cfg.seeds = vec![0, 1];
    cfg.n_forget = 10;
    cfg.ablation = true;
    cfg.train = TrainConfig {
        epochs: 6,
        learning_rate: 0.05,
        batch_size: 32,
        lr_milestones: vec![4],
        ..TrainConfig::default()
    };
    cfg.twin.finetune.epochs = 2;
    cfg.tmu.predictor.epochs = 5;
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Two runs of the same configuration write byte-identical artifacts. Only
/// timing differs: manifests (stage seconds), per-run report JSON and
/// `reports.csv` (wall clock) are compared with timing removed, and
/// `config.toml` records the output directory.
pub fn deterministic_reruns() -> Check {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment(&Experiment::new(tiny_config(a.path())).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let rb = run_experiment(&Experiment::new(tiny_config(b.path())).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let untimed = |mut r: Vec<UnlearnReport>| {
        r.iter_mut().for_each(|r| r.wall_clock = 0.0);
        r
    };
    if untimed(ra) != untimed(rb) {
        return Err("reports differ".into());
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    if fa != fb {
        return Err(format!("file sets differ: {fa:?} vs {fb:?}"));
    }
    let mut compared = 0;
    for f in &fa {
        let name = f.file_name().unwrap().to_str().unwrap();
        let timed = name == "manifest.json"
            || name == "reports.csv"
            || name == "config.toml"
            || f.parent().and_then(Path::file_name).is_some_and(|p| p == "reports");
        if timed {
            continue;
        }
        if std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap() {
            return Err(format!("{} differs between runs", f.display()));
        }
        compared += 1;
    }
    let blobs = fa.iter().filter(|f| f.extension().is_some_and(|e| e == "bin")).count();
    let csvs = fa.iter().filter(|f| f.starts_with("runs") && f.extension().is_some_and(|e| e == "csv")).count();
    if blobs == 0 || csvs == 0 || compared == 0 {
        return Err("nothing to compare".into());
    }
    Ok(())
}
