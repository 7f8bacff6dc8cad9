// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end driver: both training stages, detection and evaluation for
//! every entity of a benchmark, with artifacts written per entity.
//!
//! Output layout under the run directory:
//!
//! ```text
//! <entity>/pretext/{checkpoint.bin, neighbors.json, loss_history.csv}
//! <entity>/selfsup/{checkpoint.bin, loss_history.csv}
//! <entity>/{scores.csv, labels.csv}
//! report.json, report.md, manifest.json
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{derive_seed, RunConfig};
use crate::dataset::{normalize, sliding_windows, BenchmarkEntity, NormStats, TimeSeries, Window};
use crate::encoder::{Classifier, Encoder};
use crate::error::{CarlaError, Result};
use crate::eval::{benchmark_report, random_scores, EvalReport};
use crate::infer::{project_scores, score_series, Detection, Projection};
use crate::inject::{AnomalySpec, AnomalyType};
use crate::neighbors::NeighborSets;
use crate::pretext::{mine_pool_neighbors, train_pretext, NeighborPool, PositiveSampling, Triplet};
use crate::selfsup::{majority_class, train_selfsup, ClassAssignment, LossParts, PoolView};

/// Element type used for training and inference.
pub type Real = f32;

/// Which training stages to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageSelection {
    Pretext,
    Selfsup,
    All,
}

impl FromStr for StageSelection {
    type Err = CarlaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretext" => Ok(Self::Pretext),
            "selfsup" => Ok(Self::Selfsup),
            "all" => Ok(Self::All),
            other => Err(CarlaError::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Normalized data of one entity, ready for training and scoring.
pub struct Prepared {
    pub name: String,
    pub train_windows: Vec<Window>,
    pub test: TimeSeries,
    pub labels: Vec<u8>,
    pub dims: usize,
}

pub fn prepare(entity: &BenchmarkEntity, config: &RunConfig) -> Result<Prepared> {
    let ws = config.window_size;
    for (split, len) in [("train", entity.train.len()), ("test", entity.test.series.len())] {
        if ws > len {
            return Err(CarlaError::Data(format!(
                "window size {ws} exceeds {split} length {len}"
            )));
        }
    }
    let (train, test) = if config.normalize {
        let stats = NormStats::fit(&entity.train);
        (
            normalize(&entity.train, &stats)?,
            normalize(&entity.test.series, &stats)?,
        )
    } else {
        (entity.train.clone(), entity.test.series.clone())
    };
    let train_windows = sliding_windows(&train, ws, config.stride)?
        .into_iter()
        .map(|v| train.window(v))
        .collect();
    Ok(Prepared {
        name: entity.name.clone(),
        train_windows,
        test,
        labels: entity.test.labels.clone(),
        dims: entity.dims(),
    })
}

fn stage<T>(r: Result<T>, stage: &str, entity: &str) -> Result<T> {
    r.map_err(|e| e.in_stage(stage, entity))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CarlaError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CarlaError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CarlaError::io(path, e))
}

/// Stored triplet: the negative is rebuilt by replaying `spec` on the anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub spec: AnomalySpec,
}

/// Contents of `neighbors.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborFile {
    pub pool: NeighborPool,
    pub nearest: Vec<Vec<usize>>,
    pub furthest: Vec<Vec<usize>>,
    pub triplets: Vec<StoredTriplet>,
}

pub struct PretextArtifacts {
    pub encoder: Encoder<Real>,
    pub triplets: Vec<Triplet>,
    pub pool: NeighborPool,
    pub neighbors: NeighborSets,
    pub history: Vec<f64>,
}

pub struct SelfSupArtifacts {
    pub classifier: Classifier<Real>,
    pub assignment: ClassAssignment,
    pub history: Vec<LossParts>,
}

fn entity_seed(config: &RunConfig, entity: &str, label: &str) -> u64 {
    derive_seed(config.seed, &format!("{entity}/{label}"))
}

pub fn run_pretext(prep: &Prepared, config: &RunConfig, dir: Option<&Path>) -> Result<PretextArtifacts> {
    let name = &prep.name;
    let seed = entity_seed(config, name, "pretext");
    let outcome = stage(
        train_pretext::<Real>(
            &prep.train_windows,
            config.encoder_config(prep.dims),
            &config.pretext,
            &config.injector()?,
            seed,
        ),
        "pretext",
        name,
    )?;
    let neighbors = stage(
        mine_pool_neighbors(
            &outcome.encoder,
            &prep.train_windows,
            &outcome.triplets,
            &outcome.pool,
            config.selfsup.neighbors,
            config.eval_batch,
        ),
        "neighbors",
        name,
    )?;
    let artifacts = PretextArtifacts {
        encoder: outcome.encoder,
        triplets: outcome.triplets,
        pool: outcome.pool,
        neighbors,
        history: outcome.history,
    };
    if let Some(dir) = dir {
        stage(write_pretext(&artifacts, config, seed, dir), "pretext", name)?;
    }
    Ok(artifacts)
}

fn write_pretext(a: &PretextArtifacts, config: &RunConfig, seed: u64, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let meta = CheckpointMeta {
        seed,
        epoch: config.pretext.epochs,
        ..Default::default()
    };
    checkpoint::save_encoder(&dir.join("checkpoint.bin"), &a.encoder, &meta)?;
    let file = NeighborFile {
        pool: a.pool.clone(),
        nearest: a.neighbors.nearest.clone(),
        furthest: a.neighbors.furthest.clone(),
        triplets: a
            .triplets
            .iter()
            .map(|t| StoredTriplet {
                anchor: t.anchor_idx,
                positive: t.positive_idx,
                spec: t.spec.clone(),
            })
            .collect(),
    };
    write_text(&dir.join("neighbors.json"), &serde_json::to_string(&file)?)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in a.history.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", e + 1);
    }
    write_text(&dir.join("loss_history.csv"), &csv)
}

/// Reloads stage-one outputs written by [`run_pretext`].
pub fn load_pretext(prep: &Prepared, dir: &Path) -> Result<PretextArtifacts> {
    let (encoder, _) = checkpoint::load_encoder::<Real>(&dir.join("checkpoint.bin"))?;
    let file: NeighborFile = serde_json::from_str(&read_text(&dir.join("neighbors.json"))?)?;
    let m = prep.train_windows.len();
    let mut triplets = Vec::with_capacity(file.triplets.len());
    for t in &file.triplets {
        if t.anchor >= m || t.positive >= m {
            return Err(CarlaError::Data(format!(
                "neighbors.json refers to window {} but only {m} training windows exist",
                t.anchor.max(t.positive)
            )));
        }
        triplets.push(Triplet {
            anchor_idx: t.anchor,
            positive_idx: t.positive,
            positive_window: None,
            negative: t.spec.apply(&prep.train_windows[t.anchor]),
            spec: t.spec.clone(),
        });
    }
    if file.pool.len() != 2 * triplets.len() || file.nearest.len() != file.pool.len() {
        return Err(CarlaError::Data("neighbors.json is internally inconsistent".into()));
    }
    Ok(PretextArtifacts {
        encoder,
        triplets,
        pool: file.pool,
        neighbors: NeighborSets {
            nearest: file.nearest,
            furthest: file.furthest,
        },
        history: Vec::new(),
    })
}

pub fn run_selfsup(
    prep: &Prepared,
    pretext: &PretextArtifacts,
    config: &RunConfig,
    dir: Option<&Path>,
) -> Result<SelfSupArtifacts> {
    let name = &prep.name;
    let seed = entity_seed(config, name, "selfsup");
    let view = PoolView {
        windows: &prep.train_windows,
        triplets: &pretext.triplets,
        pool: &pretext.pool,
    };
    let outcome = stage(
        train_selfsup(&pretext.encoder, view, &pretext.neighbors, &config.selfsup, seed),
        "selfsup",
        name,
    )?;
    let assignment = stage(
        majority_class(&outcome.classifier, view, config.eval_batch),
        "selfsup",
        name,
    )?;
    info!(
        "{name}: majority class {} holds {} of {} anchors",
        assignment.majority,
        assignment.counts[assignment.majority],
        assignment.classes.len()
    );
    let artifacts = SelfSupArtifacts {
        classifier: outcome.classifier,
        assignment,
        history: outcome.history,
    };
    if let Some(dir) = dir {
        stage(write_selfsup(&artifacts, config, seed, dir), "selfsup", name)?;
    }
    Ok(artifacts)
}

fn write_selfsup(a: &SelfSupArtifacts, config: &RunConfig, seed: u64, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let meta = CheckpointMeta {
        seed,
        epoch: config.selfsup.epochs,
        majority_class: Some(a.assignment.majority),
        class_counts: Some(a.assignment.counts.clone()),
    };
    checkpoint::save_classifier(&dir.join("checkpoint.bin"), &a.classifier, &meta)?;
    let mut csv = String::from("epoch,total,consistency,inconsistency,entropy\n");
    for (e, l) in a.history.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            e + 1,
            l.total,
            l.consistency,
            l.inconsistency,
            l.entropy
        );
    }
    write_text(&dir.join("loss_history.csv"), &csv)
}

/// Reloads the classifier and its majority class.
pub fn load_selfsup(dir: &Path) -> Result<(Classifier<Real>, usize)> {
    let (classifier, header) = checkpoint::load_classifier::<Real>(&dir.join("checkpoint.bin"))?;
    let majority = header
        .majority_class
        .ok_or_else(|| CarlaError::Checkpoint("checkpoint has no majority class".into()))?;
    Ok((classifier, majority))
}

pub fn run_detect(
    prep: &Prepared,
    classifier: &Classifier<Real>,
    majority: usize,
    config: &RunConfig,
    dir: Option<&Path>,
) -> Result<Detection> {
    let detection = stage(
        score_series(
            classifier,
            majority,
            &prep.test,
            config.window_size,
            config.projection,
            config.eval_batch,
        ),
        "detect",
        &prep.name,
    )?;
    if let Some(dir) = dir {
        stage(write_detection(&detection, config, dir), "detect", &prep.name)?;
    }
    Ok(detection)
}

fn write_detection(d: &Detection, config: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut scores = String::from("index,score\n");
    for (t, s) in d.points.scores.iter().enumerate() {
        let _ = writeln!(scores, "{t},{s}");
    }
    write_text(&dir.join("scores.csv"), &scores)?;
    // Window labels spread over points like the scores.
    let window_labels: Vec<f64> = d.window_labels.iter().map(|&l| f64::from(l)).collect();
    let projected = project_scores(
        &window_labels,
        d.points.len(),
        config.window_size,
        Projection::Causal,
    )?;
    let mut labels = String::from("index,label\n");
    for (t, l) in projected.scores.iter().enumerate() {
        let _ = writeln!(labels, "{t},{}", *l as u8);
    }
    write_text(&dir.join("labels.csv"), &labels)
}

/// Reads a `scores.csv` written by detection.
pub fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CarlaError::Data(format!("{}: {e}", path.display())))?;
    let mut scores = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CarlaError::Data(format!("{}: {e}", path.display())))?;
        let value = record
            .get(1)
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| {
                CarlaError::Data(format!("{}: bad score on row {}", path.display(), i + 1))
            })?;
        scores.push(value);
    }
    Ok(scores)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub pretext_secs: f64,
    pub selfsup_secs: f64,
    pub detect_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityManifest {
    pub name: String,
    /// SHA-256 over the entity's train values, test values and labels.
    pub data_sha256: String,
    pub artifacts: Vec<PathBuf>,
    pub timings: StageTimings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: RunConfig,
    pub stage: StageSelection,
    pub entities: Vec<EntityManifest>,
    pub total_secs: f64,
}

/// Content hash of an entity's numeric data.
pub fn entity_hash(entity: &BenchmarkEntity) -> String {
    let mut h = Sha256::new();
    h.update(entity.name.as_bytes());
    for series in [&entity.train, &entity.test.series] {
        h.update((series.len() as u64).to_le_bytes());
        h.update((series.dims() as u64).to_le_bytes());
        for v in series.values() {
            h.update(v.to_le_bytes());
        }
    }
    h.update(&entity.test.labels);
    hex::encode(h.finalize())
}

/// Result of running one entity through the selected stages.
pub struct EntityOutcome {
    pub pretext: Option<PretextArtifacts>,
    pub selfsup: Option<SelfSupArtifacts>,
    pub detection: Option<Detection>,
    pub manifest: EntityManifest,
}

/// Runs the selected stages for one entity. With `Selfsup`, stage-one
/// outputs are read from `dir`. Detection runs whenever stage two does.
pub fn run_entity(
    entity: &BenchmarkEntity,
    config: &RunConfig,
    stages: StageSelection,
    dir: Option<&Path>,
) -> Result<EntityOutcome> {
    let name = &entity.name;
    let prep = stage(prepare(entity, config), "prepare", name)?;
    let mut timings = StageTimings::default();
    let mut artifacts = Vec::new();
    let sub = |s: &str| dir.map(|d| d.join(s));

    let start = Instant::now();
    let pretext = match stages {
        StageSelection::Selfsup => {
            let d = sub("pretext").ok_or_else(|| {
                CarlaError::Config("stage two alone needs an output directory with stage-one results".into())
            })?;
            stage(load_pretext(&prep, &d), "selfsup", name)?
        }
        _ => {
            let a = run_pretext(&prep, config, sub("pretext").as_deref())?;
            timings.pretext_secs = start.elapsed().as_secs_f64();
            artifacts.extend(["pretext/checkpoint.bin", "pretext/neighbors.json", "pretext/loss_history.csv"]);
            a
        }
    };

    let (selfsup, detection) = if stages == StageSelection::Pretext {
        (None, None)
    } else {
        let start = Instant::now();
        let s = run_selfsup(&prep, &pretext, config, sub("selfsup").as_deref())?;
        timings.selfsup_secs = start.elapsed().as_secs_f64();
        artifacts.extend(["selfsup/checkpoint.bin", "selfsup/loss_history.csv"]);
        let start = Instant::now();
        let d = run_detect(&prep, &s.classifier, s.assignment.majority, config, dir)?;
        timings.detect_secs = start.elapsed().as_secs_f64();
        artifacts.extend(["scores.csv", "labels.csv"]);
        (Some(s), Some(d))
    };

    let prefix = PathBuf::from(name);
    Ok(EntityOutcome {
        pretext: Some(pretext),
        selfsup,
        detection,
        manifest: EntityManifest {
            name: name.clone(),
            data_sha256: entity_hash(entity),
            artifacts: if dir.is_some() {
                artifacts.into_iter().map(|a| prefix.join(a)).collect()
            } else {
                Vec::new()
            },
            timings,
        },
    })
}

pub struct BenchmarkOutcome {
    pub entities: Vec<EntityOutcome>,
    pub report: Option<EvalReport>,
    pub manifest: RunManifest,
}

fn report_title(config: &RunConfig) -> String {
    format!(
        "Detection report (window {}, {} classes, seed {})",
        config.window_size, config.selfsup.classes, config.seed
    )
}

pub fn write_report(report: &EvalReport, title: &str, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_text(&dir.join("report.json"), &serde_json::to_string_pretty(report)?)?;
    write_text(&dir.join("report.md"), &report.to_markdown(title))
}

/// Runs every entity and, when stage two ran, evaluates the scores.
pub fn run_benchmark(
    entities: &[BenchmarkEntity],
    config: &RunConfig,
    stages: StageSelection,
    out: Option<&Path>,
) -> Result<BenchmarkOutcome> {
    config.validate()?;
    if entities.is_empty() {
        return Err(CarlaError::Data("benchmark has no entities".into()));
    }
    let start = Instant::now();
    let mut outcomes = Vec::with_capacity(entities.len());
    for entity in entities {
        info!("entity {}: starting", entity.name);
        let dir = out.map(|o| o.join(&entity.name));
        outcomes.push(run_entity(entity, config, stages, dir.as_deref())?);
    }
    let report = if stages == StageSelection::Pretext {
        None
    } else {
        let scored: Vec<(String, Vec<f64>, Vec<u8>)> = entities
            .iter()
            .zip(&outcomes)
            .map(|(e, o)| {
                let d = o.detection.as_ref().expect("detection ran");
                (e.name.clone(), d.points.scores.clone(), e.test.labels.clone())
            })
            .collect();
        Some(benchmark_report(&scored)?)
    };
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        stage: stages,
        entities: outcomes.iter().map(|o| o.manifest.clone()).collect(),
        total_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(out) = out {
        create_dir(out)?;
        if let Some(report) = &report {
            write_report(report, &report_title(config), out)?;
        }
        write_text(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
        config.save(&out.join("config.toml"))?;
    }
    Ok(BenchmarkOutcome {
        entities: outcomes,
        report,
        manifest,
    })
}

/// Evaluates N(0, 1) scores drawn independently for every entity.
pub fn random_baseline_report(entities: &[BenchmarkEntity], seed: u64) -> Result<EvalReport> {
    let scored: Vec<(String, Vec<f64>, Vec<u8>)> = entities
        .iter()
        .map(|e| {
            let s = random_scores(e.test.labels.len(), derive_seed(seed, &format!("{}/random", e.name)));
            (e.name.clone(), s, e.test.labels.clone())
        })
        .collect();
    benchmark_report(&scored)
}

/// One configuration change for an ablation run.
#[derive(Clone, Debug, PartialEq)]
pub enum Ablation {
    DropAnomalyType(AnomalyType),
    Positive(PositiveSampling),
    NoInconsistency,
    NoEntropy,
}

impl FromStr for Ablation {
    type Err = CarlaError;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || CarlaError::Config(format!("unknown ablation switch {s:?}"));
        let (kind, arg) = s.split_once(':').ok_or_else(unknown)?;
        match (kind, arg) {
            ("drop-anomaly-type", t) => Ok(Self::DropAnomalyType(t.parse()?)),
            ("positive", "noise") => Ok(Self::Positive(PositiveSampling::Noise { sigma: 0.01 })),
            ("positive", "temporal") => Ok(Self::Positive(PositiveSampling::Temporal)),
            ("loss", "no-inconsistency") => Ok(Self::NoInconsistency),
            ("loss", "no-entropy") => Ok(Self::NoEntropy),
            _ => Err(unknown()),
        }
    }
}

impl Ablation {
    pub fn label(&self) -> String {
        match self {
            Self::DropAnomalyType(t) => format!("drop-anomaly-type:{}", t.name()),
            Self::Positive(PositiveSampling::Temporal) => "positive:temporal".into(),
            Self::Positive(PositiveSampling::Noise { .. }) => "positive:noise".into(),
            Self::NoInconsistency => "loss:no-inconsistency".into(),
            Self::NoEntropy => "loss:no-entropy".into(),
        }
    }

    pub fn apply(&self, config: &mut RunConfig) -> Result<()> {
        match self {
            Self::DropAnomalyType(t) => {
                config.injection.types.retain(|x| x != t);
                config.injector()?;
            }
            Self::Positive(p) => config.pretext.positive = *p,
            Self::NoInconsistency => config.selfsup.inconsistency = false,
            Self::NoEntropy => config.selfsup.entropy_weight = 0.0,
        }
        Ok(())
    }
}

/// Runs the unchanged configuration and then one run per switch, all with
/// the same root seed. Each run writes to `<out>/<label>/`.
pub fn run_ablation(
    entities: &[BenchmarkEntity],
    base: &RunConfig,
    switches: &[Ablation],
    out: Option<&Path>,
) -> Result<Vec<(String, EvalReport)>> {
    let mut runs = vec![("full".to_string(), base.clone())];
    for s in switches {
        let mut c = base.clone();
        s.apply(&mut c)?;
        runs.push((s.label(), c));
    }
    let mut results = Vec::new();
    for (label, config) in runs {
        info!("ablation run {label}");
        let dir = out.map(|o| o.join(label.replace(':', "_")));
        let outcome = run_benchmark(entities, &config, StageSelection::All, dir.as_deref())?;
        results.push((label, outcome.report.expect("stage two ran")));
    }
    if let Some(out) = out {
        write_text(&out.join("ablation.md"), &ablation_table(&results))?;
        write_text(&out.join("ablation.json"), &serde_json::to_string_pretty(&results)?)?;
    }
    Ok(results)
}

pub fn ablation_table(results: &[(String, EvalReport)]) -> String {
    let mut s = String::from("| Run | Prec | Rec | F1 | AU-PR | PA-F1* |\n|---|---|---|---|---|---|\n");
    for (label, r) in results {
        let _ = writeln!(
            s,
            "| {label} | {:.4} | {:.4} | {:.4} | {:.4} ± {:.4} | {:.4} |",
            r.pooled.precision,
            r.pooled.recall,
            r.pooled.f1,
            r.aupr_mean,
            r.aupr_std,
            r.pooled_point_adjusted.f1
        );
    }
    s.push_str("\n\\* point-adjusted, inflated.\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthesize_entity;

    fn tiny_config() -> RunConfig {
        let mut c = RunConfig {
            seed: 3,
            window_size: 16,
            stride: 4,
            eval_batch: 64,
            ..Default::default()
        };
        c.encoder.channels = vec![4, 8];
        c.encoder.rep_dim = 8;
        c.pretext.epochs = 2;
        c.pretext.batch_size = 16;
        c.pretext.proximity = 3;
        c.selfsup.epochs = 2;
        c.selfsup.batch_size = 32;
        c.selfsup.classes = 3;
        c.selfsup.neighbors = 2;
        c
    }

    #[test]
    fn ablation_switches_parse() {
        assert_eq!(
            "drop-anomaly-type:seasonal".parse::<Ablation>().unwrap(),
            Ablation::DropAnomalyType(AnomalyType::Seasonal)
        );
        let mut c = RunConfig::default();
        "positive:noise".parse::<Ablation>().unwrap().apply(&mut c).unwrap();
        assert_eq!(c.pretext.positive, PositiveSampling::Noise { sigma: 0.01 });
        "loss:no-entropy".parse::<Ablation>().unwrap().apply(&mut c).unwrap();
        assert_eq!(c.selfsup.entropy_weight, 0.0);
        "drop-anomaly-type:seasonal".parse::<Ablation>().unwrap().apply(&mut c).unwrap();
        assert!(!c.injection.types.contains(&AnomalyType::Seasonal));
        assert!("loss:bogus".parse::<Ablation>().is_err());
        assert!("nothing".parse::<Ablation>().is_err());
    }

    #[test]
    fn staged_run_matches_single_run() {
        let entity = synthesize_entity(5, 400, 2, 0.05).unwrap();
        let config = tiny_config();
        let tmp = tempfile::tempdir().unwrap();
        let staged = tmp.path().join("staged");
        run_benchmark(std::slice::from_ref(&entity), &config, StageSelection::Pretext, Some(&staged)).unwrap();
        assert!(staged.join(&entity.name).join("pretext/neighbors.json").exists());
        assert!(!staged.join(&entity.name).join("scores.csv").exists());
        let second =
            run_benchmark(std::slice::from_ref(&entity), &config, StageSelection::Selfsup, Some(&staged)).unwrap();
        let whole = run_benchmark(std::slice::from_ref(&entity), &config, StageSelection::All, None).unwrap();
        assert_eq!(second.report, whole.report);
        let scores = read_scores(&staged.join(&entity.name).join("scores.csv")).unwrap();
        assert_eq!(scores.len(), entity.test.labels.len());
    }

    #[test]
    fn oversized_window_names_the_entity() {
        let entity = synthesize_entity(1, 100, 1, 0.05).unwrap();
        let config = RunConfig::default();
        let err = run_benchmark(&[entity], &config, StageSelection::All, None)
            .err()
            .unwrap();
        let msg = err.to_string();
        assert!(msg.contains("[prepare] synthetic-1"), "{msg}");
        assert!(msg.contains("window size 200"), "{msg}");
    }
}
