// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line driver for training, detection and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;

use carla::config::{derive_seed, RunConfig};
use carla::dataset::{
    load_benchmark_or_entity, normalize, save_benchmark, sliding_windows, synthesize_benchmark,
    BenchmarkEntity, NormStats,
};
use carla::error::ErrorKind;
use carla::eval::{benchmark_report, EvalReport};
use carla::inject::RandomSource;
use carla::pipeline::{
    self, load_selfsup, prepare, random_baseline_report, read_scores, run_ablation,
    run_benchmark, run_detect, write_report, Ablation, StageSelection,
};
use carla::{CarlaError, Result};

#[derive(Parser, Debug)]
#[command(name = "carla", version, about = "Contrastive anomaly detection for time series")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic benchmark.
    Synth(SynthArgs),
    /// Show one window before and after anomaly injection.
    InjectPreview(PreviewArgs),
    /// Train one or both stages; stage two also scores the test split.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "all")]
        stage: StageSelection,
    },
    /// Score test series with trained classifiers.
    Detect(RunArgs),
    /// Evaluate score files against the test labels.
    Eval(EvalArgs),
    /// Print a stored report as markdown.
    Report(ReportArgs),
    /// Run the base configuration and one variant per switch.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// drop-anomaly-type:<type>, positive:noise|temporal,
        /// loss:no-inconsistency or loss:no-entropy. Repeatable.
        #[arg(long = "switch", required = true)]
        switches: Vec<Ablation>,
    },
    /// Train, detect and evaluate in one go.
    Pipeline(RunArgs),
}

/// Config resolution: file, then named flags, then `--set` assignments.
#[derive(Args, Debug, Clone, Default)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Benchmark directory (with manifest.json) or a single entity directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    window_size: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long)]
    entropy_weight: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    pretext_epochs: Option<usize>,
    #[arg(long)]
    selfsup_epochs: Option<usize>,
    /// Any config field as `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Single-threaded numerics.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    entities: usize,
    #[arg(long, default_value_t = 5000)]
    length: usize,
    #[arg(long, default_value_t = 3)]
    dims: usize,
    #[arg(long, default_value_t = 0.05)]
    anomaly_ratio: f64,
}

#[derive(Args, Debug)]
struct PreviewArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Training window to inject into.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Entity name; defaults to the first one.
    #[arg(long)]
    entity: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Data the scores were computed on.
    #[arg(long)]
    data: PathBuf,
    /// Run directory holding `<entity>/scores.csv`.
    #[arg(long)]
    run: PathBuf,
    /// Where to write the report; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also evaluate N(0, 1) scores drawn with this seed.
    #[arg(long)]
    baseline_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// `report.json`, or a directory containing one.
    path: PathBuf,
    /// A second report to print alongside, e.g. a baseline.
    #[arg(long)]
    compare: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut sets: Vec<String> = Vec::new();
        let mut flag = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push(format!("{key}={v}"));
            }
        };
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("window_size", self.window_size.map(|v| v.to_string()));
        flag("stride", self.stride.map(|v| v.to_string()));
        flag("selfsup.classes", self.classes.map(|v| v.to_string()));
        flag("selfsup.neighbors", self.neighbors.map(|v| v.to_string()));
        flag("selfsup.entropy_weight", self.entropy_weight.map(float_literal));
        flag("pretext.margin", self.margin.map(float_literal));
        flag("pretext.epochs", self.pretext_epochs.map(|v| v.to_string()));
        flag("selfsup.epochs", self.selfsup_epochs.map(|v| v.to_string()));
        for s in sets.iter().chain(&self.overrides) {
            config.apply_override(s)?;
        }
        if let Some(d) = &self.data {
            config.data = Some(d.clone());
        }
        if let Some(o) = &self.out {
            config.out = Some(o.clone());
        }
        config.validate()?;
        Ok(config)
    }
}

fn float_literal(v: f64) -> String {
    format!("{v:?}")
}

fn need(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| CarlaError::Config(format!("no {what} given; pass --{what} or set it in the config")))
}

fn load_data(config: &RunConfig) -> Result<Vec<BenchmarkEntity>> {
    load_benchmark_or_entity(&need(&config.data, "data")?)
}

fn single_threaded() -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build_global()
        .map_err(|e| CarlaError::Config(format!("thread pool: {e}")))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CarlaError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CarlaError::io(path, e))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let entities = synthesize_benchmark(a.seed, a.entities, a.length, a.dims, a.anomaly_ratio)?;
    save_benchmark(&entities, &a.out)?;
    println!("wrote {} entities to {}", entities.len(), a.out.display());
    Ok(())
}

fn cmd_preview(a: &PreviewArgs) -> Result<()> {
    let config = a.run.resolve()?;
    let entities = match &config.data {
        Some(_) => load_data(&config)?,
        None => synthesize_benchmark(config.seed, 1, (config.window_size * 4).max(100), 3, 0.05)?,
    };
    let entity = match &a.entity {
        Some(name) => entities
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| CarlaError::Data(format!("no entity named {name:?}")))?,
        None => &entities[0],
    };
    let train = if config.normalize {
        normalize(&entity.train, &NormStats::fit(&entity.train))?
    } else {
        entity.train.clone()
    };
    let views = sliding_windows(&train, config.window_size, config.stride)?;
    let view = *views.get(a.index).ok_or_else(|| {
        CarlaError::Data(format!("window {} out of range ({} windows)", a.index, views.len()))
    })?;
    let w = train.window(view);
    let mut rng = RandomSource::seed_from_u64(derive_seed(config.seed, "inject-preview"));
    let (injected, spec) = config.injector()?.inject(&w, &mut rng);

    let mut csv = String::from("t");
    for d in 0..w.dims() {
        let _ = write!(csv, ",w_{d},injected_{d}");
    }
    csv.push('\n');
    for t in 0..w.len() {
        let _ = write!(csv, "{t}");
        for d in 0..w.dims() {
            let _ = write!(csv, ",{},{}", w.get(t, d), injected.get(t, d));
        }
        csv.push('\n');
    }
    let spec_json = serde_json::to_string_pretty(&spec)?;
    match &config.out {
        Some(out) => {
            write_file(&out.join("preview.csv"), &csv)?;
            write_file(&out.join("spec.json"), &spec_json)?;
            println!("wrote preview.csv and spec.json to {}", out.display());
        }
        None => {
            print!("{csv}");
            println!("{spec_json}");
        }
    }
    Ok(())
}

fn print_summary(report: &EvalReport) {
    println!(
        "pooled F1 {:.4} (P {:.4} R {:.4}) | AU-PR {:.4} ± {:.4} | PA-F1* {:.4}",
        report.pooled.f1,
        report.pooled.precision,
        report.pooled.recall,
        report.aupr_mean,
        report.aupr_std,
        report.pooled_point_adjusted.f1
    );
}

fn cmd_train(run: &RunArgs, stages: StageSelection) -> Result<()> {
    let config = run.resolve()?;
    let out = need(&config.out, "out")?;
    let entities = load_data(&config)?;
    let outcome = run_benchmark(&entities, &config, stages, Some(&out))?;
    match &outcome.report {
        Some(r) => print_summary(r),
        None => println!("stage one done for {} entities", entities.len()),
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn cmd_detect(run: &RunArgs) -> Result<()> {
    let config = run.resolve()?;
    let out = need(&config.out, "out")?;
    for entity in &load_data(&config)? {
        let dir = out.join(&entity.name);
        let prep = prepare(entity, &config).map_err(|e| e.in_stage("prepare", &entity.name))?;
        let (classifier, majority) =
            load_selfsup(&dir.join("selfsup")).map_err(|e| e.in_stage("detect", &entity.name))?;
        run_detect(&prep, &classifier, majority, &config, Some(&dir))?;
        info!("entity {}: scored", entity.name);
    }
    println!("scores written under {}", out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let entities = load_benchmark_or_entity(&a.data)?;
    let mut scored = Vec::with_capacity(entities.len());
    for e in &entities {
        let scores = read_scores(&a.run.join(&e.name).join("scores.csv"))?;
        if scores.len() != e.test.labels.len() {
            return Err(CarlaError::Data(format!(
                "entity {}: {} scores for {} labels",
                e.name,
                scores.len(),
                e.test.labels.len()
            )));
        }
        scored.push((e.name.clone(), scores, e.test.labels.clone()));
    }
    let report = benchmark_report(&scored)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    write_report(&report, "Detection report", &out)?;
    print_summary(&report);
    if let Some(seed) = a.baseline_seed {
        let baseline = random_baseline_report(&entities, seed)?;
        write_report(&baseline, "Random N(0, 1) baseline", &out.join("baseline"))?;
        print!("baseline: ");
        print_summary(&baseline);
    }
    Ok(())
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let file = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| CarlaError::io(&file, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let report = read_report(&a.path)?;
    println!("{}", report.to_markdown(&a.path.display().to_string()));
    if let Some(other) = &a.compare {
        let baseline = read_report(other)?;
        println!("{}", baseline.to_markdown(&other.display().to_string()));
        println!(
            "pooled F1 difference {:+.4}, AU-PR mean difference {:+.4}",
            report.pooled.f1 - baseline.pooled.f1,
            report.aupr_mean - baseline.aupr_mean
        );
    }
    Ok(())
}

fn cmd_ablate(run: &RunArgs, switches: &[Ablation]) -> Result<()> {
    let config = run.resolve()?;
    let out = need(&config.out, "out")?;
    let entities = load_data(&config)?;
    let results = run_ablation(&entities, &config, switches, Some(&out))?;
    print!("{}", pipeline::ablation_table(&results));
    Ok(())
}

fn cmd_pipeline(run: &RunArgs) -> Result<()> {
    let config = run.resolve()?;
    let out = need(&config.out, "out")?;
    let entities = load_data(&config)?;
    let outcome = run_benchmark(&entities, &config, StageSelection::All, Some(&out))?;
    let report = outcome.report.expect("stage two ran");
    print_summary(&report);
    println!("outputs in {}", out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let deterministic = match &cli.command {
        Command::Train { run, .. } | Command::Ablate { run, .. } => run.deterministic,
        Command::Detect(run) | Command::Pipeline(run) => run.deterministic,
        Command::InjectPreview(p) => p.run.deterministic,
        _ => false,
    };
    if deterministic {
        single_threaded()?;
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::InjectPreview(a) => cmd_preview(a),
        Command::Train { run, stage } => cmd_train(run, *stage),
        Command::Detect(run) => cmd_detect(run),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Ablate { run, switches } => cmd_ablate(run, switches),
        Command::Pipeline(run) => cmd_pipeline(run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}
