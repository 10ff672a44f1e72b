use std::path::Path;

use tmu_core::eval::read_reports_csv;
use tmu_core::harness::reference::reference;
use tmu_core::harness::{
    emit_report, run_experiment, sweep_forget_size, Experiment, ExperimentConfig, GoldPolicy, Manifest, RunKey, Stage,
    StageStatus, Table,
};
use tmu_core::modeling::{Arch, TrainConfig};
use tmu_core::unlearn::Method;
use tmu_core::Error;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::fixture();
    cfg.dataset.mixture.train_per_class = 60;
    cfg.dataset.mixture.test_per_class = 20;
    cfg.arch = Arch::Mlp { hidden: vec![32, 16] };
    cfg.forget_classes = vec![1];
    cfg.seeds = vec![0];
    cfg.n_forget = 10;
    cfg.sweep_sizes = vec![10, 20];
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

fn key(cfg: &ExperimentConfig) -> RunKey {
    RunKey { class: cfg.forget_classes[0], n_forget: cfg.n_forget, seed: cfg.seeds[0] }
}

#[test]
fn one_class_yields_gold_and_six_method_reports() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(tiny(dir.path())).unwrap();
    let reports = run_experiment(&exp).unwrap();
    let methods: Vec<&str> = reports.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["gold", "finetune", "neggrad", "randlabel", "badteacher", "fisher", "tmu"]);
    assert!(reports.iter().all(|r| r.delta.is_some() && r.n_forget == 10 && r.forget_class == 1));
    assert_eq!(reports[0].delta, Some(0.0));
    let tmu = reports.last().unwrap();
    let part = tmu.partition.as_ref().unwrap();
    assert_eq!(part.easy + part.hard, 10);
    assert!(dir.path().join("config.toml").exists());
    assert!(dir.path().join("original/seed-0/model.bin").exists());
    assert_eq!(read_reports_csv(&dir.path().join("reports.csv")).unwrap(), reports);
    let manifest = Manifest::load(&exp.run_dir(&key(exp.config()))).unwrap();
    for stage in ["gold", "twin", "features", "predict", "unlearn:tmu", "eval:tmu", "eval:gold"] {
        assert_eq!(manifest.stages[stage].status, StageStatus::Done, "{stage}");
    }
}

#[test]
fn rerun_reuses_every_stage_and_edits_invalidate_downstream_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let first = run_experiment(&Experiment::new(cfg.clone()).unwrap()).unwrap();

    let again = Experiment::new(cfg.clone()).unwrap();
    assert_eq!(run_experiment(&again).unwrap(), first);
    assert_eq!(again.counts().computed, 0);
    assert!(again.counts().reused > 0);

    let mut tweaked = cfg.clone();
    tweaked.unlearn.tmu.learning_rate = Some(0.001);
    let exp = Experiment::new(tweaked).unwrap();
    let reports = run_experiment(&exp).unwrap();
    assert_eq!(exp.counts().computed, 2, "only unlearn:tmu and eval:tmu rerun");
    assert_eq!(reports[..6], first[..6]);

    let mut tweaked = cfg;
    tweaked.tmu.predictor.epochs = 7;
    let exp = Experiment::new(tweaked).unwrap();
    run_experiment(&exp).unwrap();
    assert_eq!(exp.counts().computed, 3, "predict, unlearn:tmu and eval:tmu rerun");
}

#[test]
fn skipping_gold_gives_reports_without_delta() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.gold = GoldPolicy::Skip;
    cfg.methods = vec![Method::Finetune, Method::Tmu];
    let reports = run_experiment(&Experiment::new(cfg).unwrap()).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.delta.is_none() && r.activation_distance.is_none()));
}

#[test]
fn loading_a_missing_gold_model_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.gold = GoldPolicy::Load;
    let err = run_experiment(&Experiment::new(cfg).unwrap()).unwrap_err();
    assert_eq!(err.stage(), Some("gold"));
}

#[test]
fn failed_stage_is_recorded_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.methods = vec![Method::Neggrad];
    cfg.unlearn.neggrad.collapse_accuracy = Some(100.0);
    cfg.unlearn.neggrad.learning_rate = Some(1.0);
    cfg.unlearn.neggrad.forget_accuracy_target = Some(-1.0);
    let exp = Experiment::new(cfg).unwrap();
    let err = run_experiment(&exp).unwrap_err();
    assert_eq!(err.stage(), Some("unlearn"));
    let manifest = Manifest::load(&exp.run_dir(&key(exp.config()))).unwrap();
    let rec = &manifest.stages["unlearn:neggrad"];
    assert_eq!(rec.status, StageStatus::Failed);
    assert!(rec.error.as_deref().unwrap().contains("collapse"));
    assert_eq!(manifest.stages["gold"].status, StageStatus::Done);
}

#[test]
fn sweep_has_one_curve_row_per_size_and_method() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.methods = vec![Method::Finetune, Method::Tmu];
    let exp = Experiment::new(cfg.clone()).unwrap();
    let sweep = sweep_forget_size(&exp, &[10, 20]).unwrap();
    assert_eq!(sweep.curve.len(), 2 * 3);
    let mut rows = csv::Reader::from_path(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(rows.records().count(), 6);
    for p in &sweep.curve {
        let ds: Vec<f64> = sweep
            .reports
            .iter()
            .filter(|r| r.n_forget == p.n_forget && r.method == p.method)
            .filter_map(|r| r.delta)
            .collect();
        assert_eq!(p.mean_delta, Some(ds.iter().sum::<f64>() / ds.len() as f64));
    }
    assert!(sweep_forget_size(&exp, &[20, 10]).is_err());

    let single = tempfile::tempdir().unwrap();
    cfg.out_dir = single.path().to_path_buf();
    let exp = Experiment::new(cfg).unwrap();
    let s = sweep_forget_size(&exp, &[10]).unwrap();
    assert_eq!(s.reports, run_experiment(&exp).unwrap());
}

#[test]
fn report_tables_plots_and_reference_diff() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(emit_report(dir.path(), None), Err(Error::EmptyDataset(_))));
    let mut cfg = tiny(dir.path());
    cfg.forget_classes = vec![0, 1];
    cfg.ablation = true;
    let exp = Experiment::new(cfg).unwrap();
    sweep_forget_size(&exp, &[10, 20]).unwrap();
    let refr = reference("cifar10-resnet18-n100").unwrap();
    let files = emit_report(dir.path(), Some(&refr)).unwrap();

    let md = std::fs::read_to_string(&files.markdown).unwrap();
    let stems: Vec<&str> = files.tables.iter().map(|(s, _)| s.as_str()).collect();
    assert_eq!(
        stems,
        ["alignment-n10", "activation-n10", "alignment-n20", "activation-n20", "ablation-n10", "ablation-n20"]
    );
    for (stem, path) in &files.tables {
        let title = md
            .lines()
            .filter_map(|l| l.strip_prefix("### "))
            .nth(files.tables.iter().position(|(s, _)| s == stem).unwrap())
            .unwrap();
        let t = Table::read_csv(path, title).unwrap();
        assert!(md.contains(&t.to_markdown()), "{stem} CSV does not reproduce the markdown");
    }
    let t = Table::read_csv(&files.tables[0].1, "x").unwrap();
    assert_eq!(t.rows.len(), 3);
    assert_eq!(t.rows[2][0], "Avg");
    assert_eq!(t.header.iter().filter(|h| h.ends_with('δ')).count(), 6);
    for p in &files.plots {
        assert!(std::fs::metadata(p).unwrap().len() > 0);
    }
    let diff = std::fs::read_to_string(files.reference_diff.unwrap()).unwrap();
    assert!(diff.contains("| Class 0 | tmu.delta |"));
    // The reference is at |D_f| = 100, which this run did not use.
    assert!(diff.contains("| Class 1 | gold.test | - | 85.27 | - |"));
}

#[test]
fn stage_names_cover_the_cli_subcommands() {
    let names: Vec<&str> =
        [Stage::Train, Stage::Gold, Stage::Twin, Stage::Features, Stage::Predict, Stage::Unlearn, Stage::Eval]
            .iter()
            .map(|s| s.name())
            .collect();
    assert_eq!(names, ["train", "gold", "twin", "features", "predict", "unlearn", "eval"]);
}
