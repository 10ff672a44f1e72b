use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use tmu_core::eval::UnlearnReport;
use tmu_core::harness::reference::{reference, reference_names};
use tmu_core::harness::{
    emit_report, sweep_forget_size, Experiment, ExperimentConfig, Profile, RunKey, Stage, SweepResult,
};
use tmu_core::unlearn::Method;

/// Twin machine unlearning benchmark runner.
#[derive(Parser, Debug)]
#[command(name = "tmu", version, args_override_self = true)]
struct Cli {
    /// TOML overrides merged onto the profile.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; defaults to the profile's.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Parallel worker processes, one per (class, seed).
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    workers: usize,
    /// desk, paper or fixture.
    #[arg(long, global = true, default_value = "desk")]
    profile: Profile,
    /// Run only this forget class.
    #[arg(long, global = true, hide = true)]
    class: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the original model for every seed.
    Train,
    /// Retrain without the forget set.
    Gold(RunArgs),
    /// Build the twin model.
    Twin(RunArgs),
    /// Extract NF/AF/CF features for the twin and forget sets.
    Features(RunArgs),
    /// Fit the generalization-label predictor and partition the forget set.
    Predict(RunArgs),
    /// Run the unlearning methods.
    Unlearn(RunArgs),
    /// Evaluate every method against the gold model.
    Eval(RunArgs),
    /// Repeat the experiment over several forget-set sizes.
    Sweep(SweepArgs),
    /// Render tables and plots from persisted reports.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Forget-set size; defaults to the config's `n_forget`.
    #[arg(long)]
    n_forget: Option<usize>,
    /// Comma-separated subset of methods.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
}

#[derive(Args, Debug, Clone)]
struct SweepArgs {
    /// Ascending forget-set sizes; defaults to the config's `sweep_sizes`.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
}

#[derive(Args, Debug, Clone)]
struct ReportArgs {
    /// Reference table to diff against; defaults to the config's.
    #[arg(long, conflicts_with = "no_reference")]
    reference: Option<String>,
    #[arg(long)]
    no_reference: bool,
    /// List the bundled reference tables and exit.
    #[arg(long)]
    list_references: bool,
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::Train => Stage::Train,
            Command::Gold(_) => Stage::Gold,
            Command::Twin(_) => Stage::Twin,
            Command::Features(_) => Stage::Features,
            Command::Predict(_) => Stage::Predict,
            Command::Unlearn(_) => Stage::Unlearn,
            Command::Eval(_) | Command::Sweep(_) => Stage::Eval,
            Command::Report(_) => return None,
        })
    }
}

/// Marks failures that happen before any pipeline stage runs.
#[derive(Debug)]
struct ConfigStage;

impl std::fmt::Display for ConfigStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("invalid configuration")
    }
}

fn resolve_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let base = cli.profile.config();
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, &base).with_context(|| format!("loading {}", path.display()))?,
        None => base,
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(class) = cli.class {
        cfg.forget_classes = vec![class];
    }
    match &cli.command {
        Command::Gold(a)
        | Command::Twin(a)
        | Command::Features(a)
        | Command::Predict(a)
        | Command::Unlearn(a)
        | Command::Eval(a) => {
            if let Some(n) = a.n_forget {
                cfg.n_forget = n;
            }
            if !a.methods.is_empty() {
                cfg.methods = a.methods.clone();
            }
        }
        Command::Sweep(a) => {
            if !a.sizes.is_empty() {
                cfg.sweep_sizes = a.sizes.clone();
            }
            if !a.methods.is_empty() {
                cfg.methods = a.methods.clone();
            }
        }
        Command::Train | Command::Report(_) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_reports(reports: &[UnlearnReport]) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
    println!(
        "{:<11} {:>5} {:>6} {:>4} {:>9} {:>9} {:>7} {:>7}",
        "method", "class", "n", "seed", "acc_test", "acc_f", "delta", "ad"
    );
    for r in reports {
        println!(
            "{:<11} {:>5} {:>6} {:>4} {:>9.2} {:>9.2} {:>7} {:>7}",
            r.method,
            r.forget_class,
            r.n_forget,
            r.seed,
            r.acc_test,
            r.acc_forget,
            fmt(r.delta),
            fmt(r.activation_distance)
        );
    }
}

/// Runs one (class, seed) per child process, at most `workers` at a time.
fn run_workers(cli: &Cli, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let exe = std::env::current_exe().context("locating the tmu executable")?;
    let args: Vec<_> = std::env::args_os().skip(1).collect();
    let jobs: Vec<(usize, u64)> =
        cfg.forget_classes.iter().flat_map(|&c| cfg.seeds.iter().map(move |&s| (c, s))).collect();
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..cli.workers.min(jobs.len()) {
            scope.spawn(|| {
                while let Some(&(class, seed)) = jobs.get(next.fetch_add(1, Ordering::SeqCst)) {
                    let status = std::process::Command::new(&exe)
                        .args(&args)
                        .args(["--workers", "1", "--class", &class.to_string(), "--seed", &seed.to_string()])
                        .status();
                    let failed = match status {
                        Ok(s) if s.success() => None,
                        Ok(s) => Some(format!("class {class} seed {seed}: worker exited with {s}")),
                        Err(e) => Some(format!("class {class} seed {seed}: could not start worker: {e}")),
                    };
                    failures.lock().unwrap().extend(failed);
                }
            });
        }
    });
    let failures = failures.into_inner().unwrap();
    if !failures.is_empty() {
        bail!("{}", failures.join("\n"));
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Command::Report(a) = &cli.command {
        if a.list_references {
            for name in reference_names() {
                println!("{name}: {}", reference(name)?.description);
            }
            return Ok(());
        }
    }
    let cfg = resolve_config(cli).context(ConfigStage)?;
    let Some(stage) = cli.command.stage() else {
        let Command::Report(a) = &cli.command else { unreachable!() };
        let name = if a.no_reference { None } else { a.reference.clone().or_else(|| cfg.reference.clone()) };
        let table = name.as_deref().map(reference).transpose()?;
        let files = emit_report(&cfg.out_dir, table.as_ref())?;
        println!("{}", files.markdown.display());
        for (_, p) in &files.tables {
            println!("{}", p.display());
        }
        for p in files.plots.iter().chain(&files.reference_diff) {
            println!("{}", p.display());
        }
        return Ok(());
    };

    let exp = Experiment::new(cfg.clone())?;
    if stage == Stage::Train {
        for &seed in &cfg.seeds {
            exp.original(seed)?;
        }
        return Ok(());
    }
    let sizes = match &cli.command {
        Command::Sweep(_) => cfg.sizes(),
        _ => vec![cfg.n_forget],
    };
    let parallel = cli.workers > 1 && cli.class.is_none() && cfg.forget_classes.len() * cfg.seeds.len() > 1;
    if parallel {
        for &seed in &cfg.seeds {
            exp.original(seed)?;
        }
        run_workers(cli, &cfg)?;
        // Workers overwrite config.toml with their single-class view.
        std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
        if stage == Stage::Eval {
            let wanted: Vec<RunKey> = exp.keys(&sizes);
            let reports: Vec<UnlearnReport> = exp
                .write_reports()?
                .into_iter()
                .filter(|r| wanted.contains(&RunKey { class: r.forget_class, n_forget: r.n_forget, seed: r.seed }))
                .collect();
            if matches!(cli.command, Command::Sweep(_)) {
                SweepResult::from_reports(reports.clone()).write_curve(&cfg.out_dir.join("sweep.csv"))?;
            }
            print_reports(&reports);
        }
        return Ok(());
    }

    if let Command::Sweep(_) = cli.command {
        let sweep = sweep_forget_size(&exp, &sizes)?;
        print_reports(&sweep.reports);
        return Ok(());
    }
    let mut reports = Vec::new();
    for key in exp.keys(&sizes) {
        let out = exp.run(&key, stage)?;
        if stage == Stage::Predict {
            if let Some(d) = out.diagnostics {
                let holdout = d.holdout_accuracy.map_or("-".into(), |a| format!("{:.1}%", 100.0 * a));
                println!("{key}: easy {} hard {} holdout accuracy {holdout}", d.n_easy, d.n_hard);
            }
        }
        reports.extend(out.reports);
    }
    if stage == Stage::Eval {
        exp.write_reports()?;
        print_reports(&reports);
    }
    log::info!("{} stages computed, {} reused", exp.counts().computed, exp.counts().reused);
    Ok(())
}

/// The error chain, skipping causes whose text a parent already includes.
fn message(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = e
                .chain()
                .find_map(|c| c.downcast_ref::<tmu_core::Error>().and_then(|e| e.stage().map(str::to_string)))
                .or_else(|| e.downcast_ref::<ConfigStage>().map(|_| "config".to_string()))
                .unwrap_or_else(|| cli.command.stage().map_or("report", Stage::name).to_string());
            eprintln!("error in stage {stage}: {}", message(&e));
            ExitCode::FAILURE
        }
    }
}
