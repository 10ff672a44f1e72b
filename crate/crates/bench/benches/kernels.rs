use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use tmu_core::data::synthetic::class_mixture;
use tmu_core::data::{make_removal_split, MixtureConfig, TrainTest};
use tmu_core::features::{adversarial_features, nearest_distance_features, AttackConfig};
use tmu_core::modeling::{build_model, train, Arch, TrainConfig, TrainedModel};
use tmu_core::unlearn::{unlearn_baseline, Method, UnlearnConfig};

fn fixture() -> TrainTest {
    class_mixture(&MixtureConfig { train_per_class: 100, test_per_class: 40, ..MixtureConfig::default() })
}

fn images() -> TrainTest {
    class_mixture(&MixtureConfig {
        height: 16,
        width: 16,
        channels: 3,
        train_per_class: 16,
        test_per_class: 4,
        ..MixtureConfig::default()
    })
}

fn trained(data: &TrainTest, arch: &Arch) -> TrainedModel {
    let init = build_model(arch, data.train.shape(), data.train.num_classes(), 0).unwrap();
    let cfg = TrainConfig { epochs: 2, learning_rate: 0.05, batch_size: 32, ..TrainConfig::default() };
    train(&init, &data.train, &cfg).unwrap()
}

fn training(c: &mut Criterion) {
    let data = fixture();
    let init = build_model(&Arch::Mlp { hidden: vec![256, 128] }, data.train.shape(), 10, 0).unwrap();
    let one_epoch = TrainConfig { epochs: 1, learning_rate: 0.05, batch_size: 32, ..TrainConfig::default() };
    c.bench_function("mlp_epoch_1000", |b| b.iter(|| train(&init, &data.train, &one_epoch).unwrap()));

    let img = images();
    let conv = build_model(&Arch::ResNet18 { width: 8 }, img.train.shape(), 10, 0).unwrap();
    let x = img.train.images().view();
    c.bench_function("resnet18_w8_forward_160x16x16", |b| b.iter(|| conv.network.logits(x).unwrap()));
}

fn features(c: &mut Criterion) {
    let data = fixture();
    let model = trained(&data, &Arch::Mlp { hidden: vec![64, 32] });
    let attack = AttackConfig::default();
    c.bench_function("pgd_af_400", |b| b.iter(|| adversarial_features(&model, &data.test, &attack).unwrap()));
    c.bench_function("nf_400_vs_1000", |b| {
        b.iter(|| nearest_distance_features(&model, &data.test, &data.train, 5).unwrap())
    });
}

fn unlearning(c: &mut Criterion) {
    let data = fixture();
    let model = trained(&data, &Arch::Mlp { hidden: vec![64, 32] });
    let split = make_removal_split(&data.train, &data.test, 3, 20, 0).unwrap();
    let mut group = c.benchmark_group("unlearn");
    group.sample_size(10);
    for m in [Method::Neggrad, Method::Badteacher, Method::Fisher] {
        let cfg = UnlearnConfig::for_method(m);
        group.bench_function(m.name(), |b| {
            b.iter_batched(|| model.clone(), |o| unlearn_baseline(&o, &split, &cfg).unwrap(), BatchSize::LargeInput)
        });
    }
    group.finish();
}

criterion_group!(benches, training, features, unlearning);
criterion_main!(benches);
