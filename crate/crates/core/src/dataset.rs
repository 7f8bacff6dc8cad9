// SPDX-License-Identifier: MIT OR Apache-2.0

//! Series containers, normalization, windowing and the on-disk entity layout.
//!
//! An entity directory holds `train.csv` and `test.csv` (header `d0,...`),
//! `test_labels.csv` (header `label`) and an optional `meta.json`. A benchmark
//! is a directory of entity directories plus a `manifest.json`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CarlaError, Result};
use crate::inject::{self, AnomalyType, SeasonalFactor};

/// A multivariate series stored row-major (`len` timesteps by `dims` columns).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    values: Vec<f64>,
    len: usize,
    dims: usize,
    dim_names: Option<Vec<String>>,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, len: usize, dims: usize) -> Result<Self> {
        if len == 0 || dims == 0 {
            return Err(CarlaError::Data(format!(
                "series must have at least one timestep and one dimension (got {len}x{dims})"
            )));
        }
        if values.len() != len * dims {
            return Err(CarlaError::Shape(format!(
                "expected {} values for a {len}x{dims} series, got {}",
                len * dims,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(CarlaError::Data(format!(
                "non-finite value at timestep {}, dimension {}",
                pos / dims,
                pos % dims
            )));
        }
        Ok(Self {
            values,
            len,
            dims,
            dim_names: None,
        })
    }

    /// Builds a series from per-dimension columns of equal length.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let dims = columns.len();
        let len = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != len) {
            return Err(CarlaError::Shape("columns have different lengths".into()));
        }
        let mut values = Vec::with_capacity(len * dims);
        for t in 0..len {
            values.extend(columns.iter().map(|c| c[t]));
        }
        Self::new(values, len, dims)
    }

    pub fn with_dim_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.dims {
            return Err(CarlaError::Shape(format!(
                "{} dimension names for {} dimensions",
                names.len(),
                self.dims
            )));
        }
        self.dim_names = Some(names);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn dim_names(&self) -> Option<&[String]> {
        self.dim_names.as_deref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, d: usize) -> f64 {
        self.values[t * self.dims + d]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dims..(t + 1) * self.dims]
    }

    pub fn column(&self, d: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.get(t, d)).collect()
    }

    /// Copies the timesteps covered by `view` into a channel-major window.
    pub fn window(&self, view: WindowView) -> Window {
        let mut data = Vec::with_capacity(view.length * self.dims);
        for d in 0..self.dims {
            data.extend((view.start..view.start + view.length).map(|t| self.get(t, d)));
        }
        Window {
            dims: self.dims,
            len: view.length,
            data,
        }
    }
}

/// A series with point-level ground truth (1 = anomalous).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeries {
    pub series: TimeSeries,
    pub labels: Vec<u8>,
}

impl LabeledSeries {
    pub fn new(series: TimeSeries, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != series.len() {
            return Err(CarlaError::Shape(format!(
                "{} labels for a series of length {}",
                labels.len(),
                series.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(CarlaError::Data(format!("label {bad} is not 0 or 1")));
        }
        Ok(Self { series, labels })
    }

    pub fn anomaly_fraction(&self) -> f64 {
        self.labels.iter().map(|&l| l as f64).sum::<f64>() / self.labels.len() as f64
    }
}

/// A window position inside a series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowView {
    pub start: usize,
    pub length: usize,
}

/// A materialized window stored channel-major: `data[d * len + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    dims: usize,
    len: usize,
    data: Vec<f64>,
}

impl Window {
    pub fn new(dims: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims * len {
            return Err(CarlaError::Shape(format!(
                "window of {dims}x{len} needs {} values, got {}",
                dims * len,
                data.len()
            )));
        }
        Ok(Self { dims, len, data })
    }

    /// Builds a window from per-dimension channels of equal length.
    pub fn from_channels(channels: &[Vec<f64>]) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(CarlaError::Shape("channels have different lengths".into()));
        }
        Self::new(channels.len(), len, channels.concat())
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, d: usize) -> &[f64] {
        &self.data[d * self.len..(d + 1) * self.len]
    }

    pub fn channel_mut(&mut self, d: usize) -> &mut [f64] {
        &mut self.data[d * self.len..(d + 1) * self.len]
    }

    pub fn get(&self, t: usize, d: usize) -> f64 {
        self.data[d * self.len + t]
    }
}

/// One benchmark entity: a clean-ish training series and a labeled test series.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkEntity {
    pub name: String,
    pub train: TimeSeries,
    pub test: LabeledSeries,
}

impl BenchmarkEntity {
    pub fn new(name: impl Into<String>, train: TimeSeries, test: LabeledSeries) -> Result<Self> {
        let name = name.into();
        if train.dims() != test.series.dims() {
            return Err(CarlaError::Shape(format!(
                "entity {name}: train has {} dimensions, test has {}",
                train.dims(),
                test.series.dims()
            )));
        }
        Ok(Self { name, train, test })
    }

    pub fn dims(&self) -> usize {
        self.train.dims()
    }
}

/// Per-dimension z-score statistics fitted on a training series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and standard deviation per dimension.
    pub fn fit(series: &TimeSeries) -> Self {
        let n = series.len() as f64;
        let mut mean = vec![0.0; series.dims()];
        for t in 0..series.len() {
            for (m, v) in mean.iter_mut().zip(series.row(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; series.dims()];
        for t in 0..series.len() {
            for ((s, v), m) in var.iter_mut().zip(series.row(t)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Self { mean, std }
    }

    pub fn identity(dims: usize) -> Self {
        Self {
            mean: vec![0.0; dims],
            std: vec![1.0; dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    /// Dimensions whose training standard deviation is zero.
    pub fn zero_std_dims(&self) -> Vec<usize> {
        self.std
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == 0.0)
            .map(|(d, _)| d)
            .collect()
    }

    fn scale(&self, d: usize) -> f64 {
        if self.std[d] > 0.0 {
            self.std[d]
        } else {
            1.0
        }
    }
}

fn check_stats(series: &TimeSeries, stats: &NormStats) -> Result<()> {
    if stats.dims() != series.dims() || stats.std.len() != stats.mean.len() {
        return Err(CarlaError::Shape(format!(
            "normalization stats have {} dimensions, series has {}",
            stats.dims(),
            series.dims()
        )));
    }
    Ok(())
}

/// Z-scores every dimension; zero-variance dimensions are only centered.
pub fn normalize(series: &TimeSeries, stats: &NormStats) -> Result<TimeSeries> {
    check_stats(series, stats)?;
    let dims = series.dims();
    let values = series
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let d = i % dims;
            (v - stats.mean[d]) / stats.scale(d)
        })
        .collect();
    let mut out = TimeSeries::new(values, series.len(), dims)?;
    out.dim_names = series.dim_names.clone();
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(series: &TimeSeries, stats: &NormStats) -> Result<TimeSeries> {
    check_stats(series, stats)?;
    let dims = series.dims();
    let values = series
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let d = i % dims;
            v * stats.scale(d) + stats.mean[d]
        })
        .collect();
    let mut out = TimeSeries::new(values, series.len(), dims)?;
    out.dim_names = series.dim_names.clone();
    Ok(out)
}

/// Number of windows of size `window_size` taken every `stride` steps.
pub fn window_count(len: usize, window_size: usize, stride: usize) -> usize {
    if window_size == 0 || stride == 0 || window_size > len {
        0
    } else {
        (len - window_size) / stride + 1
    }
}

/// Overlapping windows over `series` in temporal order.
pub fn sliding_windows(
    series: &TimeSeries,
    window_size: usize,
    stride: usize,
) -> Result<Vec<WindowView>> {
    if window_size == 0 || stride == 0 {
        return Err(CarlaError::Config(format!(
            "window size and stride must be positive (got {window_size}, {stride})"
        )));
    }
    if window_size > series.len() {
        return Err(CarlaError::Data(format!(
            "window size {window_size} exceeds series length {}",
            series.len()
        )));
    }
    let count = window_count(series.len(), window_size, stride);
    Ok((0..count)
        .map(|i| WindowView {
            start: i * stride,
            length: window_size,
        })
        .collect())
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct EntityMeta {
    name: Option<String>,
    dim_names: Option<Vec<String>>,
}

/// Benchmark manifest listing entity directory names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub entities: Vec<String>,
}

fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = record
            .iter()
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    CarlaError::Data(format!(
                        "{}: non-numeric cell {cell:?} on data row {}",
                        path.display(),
                        i + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

fn csv_error(path: &Path, e: csv::Error) -> CarlaError {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => CarlaError::io(path, io),
            _ => unreachable!(),
        },
        csv::ErrorKind::UnequalLengths { .. } => {
            CarlaError::Data(format!("{}: ragged rows ({e})", path.display()))
        }
        _ => CarlaError::Data(format!("{}: {e}", path.display())),
    }
}

fn read_series(path: &Path) -> Result<TimeSeries> {
    let (header, rows) = read_numeric_csv(path)?;
    if rows.is_empty() {
        return Err(CarlaError::Data(format!("{}: no data rows", path.display())));
    }
    let dims = header.len();
    let len = rows.len();
    TimeSeries::new(rows.concat(), len, dims)
        .map_err(|e| CarlaError::Data(format!("{}: {e}", path.display())))
}

fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let (header, rows) = read_numeric_csv(path)?;
    if header.len() != 1 {
        return Err(CarlaError::Data(format!(
            "{}: expected a single `label` column",
            path.display()
        )));
    }
    rows.iter()
        .enumerate()
        .map(|(i, r)| match r[0] {
            0.0 => Ok(0),
            1.0 => Ok(1),
            v => Err(CarlaError::Data(format!(
                "{}: label {v} on row {} is not 0 or 1",
                path.display(),
                i + 1
            ))),
        })
        .collect()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| CarlaError::io(path, e))
}

fn series_csv(series: &TimeSeries) -> String {
    let mut out = (0..series.dims())
        .map(|d| format!("d{d}"))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for t in 0..series.len() {
        let row: Vec<String> = series.row(t).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Reads one entity directory.
pub fn load_entity(dir: &Path) -> Result<BenchmarkEntity> {
    let train = read_series(&dir.join("train.csv"))?;
    let test = read_series(&dir.join("test.csv"))?;
    let labels = read_labels(&dir.join("test_labels.csv"))?;
    let meta_path = dir.join("meta.json");
    let meta: EntityMeta = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| CarlaError::io(&meta_path, e))?;
        serde_json::from_str(&text)?
    } else {
        EntityMeta::default()
    };
    let name = meta.name.unwrap_or_else(|| {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "entity".to_string())
    });
    let (train, test) = match meta.dim_names {
        Some(names) => (
            train.with_dim_names(names.clone())?,
            test.with_dim_names(names)?,
        ),
        None => (train, test),
    };
    let test = LabeledSeries::new(test, labels)
        .map_err(|e| CarlaError::Data(format!("entity {name}: {e}")))?;
    BenchmarkEntity::new(name, train, test)
}

/// Writes one entity directory, creating it if needed.
pub fn save_entity(entity: &BenchmarkEntity, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CarlaError::io(dir, e))?;
    write_file(&dir.join("train.csv"), &series_csv(&entity.train))?;
    write_file(&dir.join("test.csv"), &series_csv(&entity.test.series))?;
    let mut labels = String::from("label\n");
    for l in &entity.test.labels {
        labels.push_str(if *l == 1 { "1\n" } else { "0\n" });
    }
    write_file(&dir.join("test_labels.csv"), &labels)?;
    let meta = EntityMeta {
        name: Some(entity.name.clone()),
        dim_names: entity.train.dim_names().map(<[String]>::to_vec),
    };
    write_file(&dir.join("meta.json"), &serde_json::to_string_pretty(&meta)?)
}

/// Reads every entity listed in `manifest.json`.
pub fn load_benchmark(dir: &Path) -> Result<Vec<BenchmarkEntity>> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| CarlaError::io(&path, e))?;
    let manifest: BenchmarkManifest = serde_json::from_str(&text)?;
    if manifest.entities.is_empty() {
        return Err(CarlaError::Data(format!("{}: no entities", path.display())));
    }
    manifest
        .entities
        .iter()
        .map(|name| load_entity(&dir.join(name)))
        .collect()
}

/// Loads either a benchmark directory (with `manifest.json`) or a single entity.
pub fn load_benchmark_or_entity(dir: &Path) -> Result<Vec<BenchmarkEntity>> {
    if dir.join("manifest.json").exists() {
        load_benchmark(dir)
    } else {
        Ok(vec![load_entity(dir)?])
    }
}

pub fn save_benchmark(entities: &[BenchmarkEntity], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CarlaError::io(dir, e))?;
    for entity in entities {
        save_entity(entity, &dir.join(&entity.name))?;
    }
    let manifest = BenchmarkManifest {
        entities: entities.iter().map(|e| e.name.clone()).collect(),
    };
    write_file(
        &dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )
}

struct Sinusoid {
    period: f64,
    amplitude: f64,
    phase: f64,
}

/// Generates a seeded entity: a clean periodic training series and a test
/// series of the same process carrying injected subsequence anomalies.
///
/// Labels mark exactly the timesteps whose values were changed.
pub fn synthesize_entity(
    seed: u64,
    len: usize,
    dims: usize,
    anomaly_ratio: f64,
) -> Result<BenchmarkEntity> {
    if len < 20 || dims == 0 || !(anomaly_ratio > 0.0 && anomaly_ratio < 0.5) {
        return Err(CarlaError::Config(format!(
            "degenerate synthesis parameters: length {len}, dims {dims}, ratio {anomaly_ratio}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let components: Vec<Vec<Sinusoid>> = (0..dims)
        .map(|_| {
            (0..rng.gen_range(1..=3))
                .map(|_| Sinusoid {
                    period: rng.gen_range(20.0..120.0),
                    amplitude: rng.gen_range(0.5..1.5),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                })
                .collect()
        })
        .collect();
    let offsets: Vec<f64> = (0..dims).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let noise = Normal::new(0.0, 0.05).expect("valid normal");

    let generate = |start: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..dims)
            .map(|d| {
                (start..start + len)
                    .map(|t| {
                        let clean: f64 = components[d]
                            .iter()
                            .map(|c| {
                                c.amplitude
                                    * (std::f64::consts::TAU * t as f64 / c.period + c.phase).sin()
                            })
                            .sum();
                        offsets[d] + clean + noise.sample(rng)
                    })
                    .collect()
            })
            .collect()
    };
    let train_cols = generate(0, &mut rng);
    let mut test_cols = generate(len, &mut rng);
    let clean_test = test_cols.clone();

    let min_seg = (len / 250).clamp(2, 20);
    let max_seg = (len / 50).clamp(min_seg, 100);
    let target = (anomaly_ratio * len as f64).round().max(1.0) as usize;
    let mut segments: Vec<(usize, usize)> = Vec::new();
    let mut labels = vec![0u8; len];
    let mut labeled = 0usize;
    let mut attempts = 0usize;
    let subsequence_types = [
        AnomalyType::Seasonal,
        AnomalyType::Trend,
        AnomalyType::Shapelet,
    ];
    while labeled < target {
        attempts += 1;
        if attempts > 10_000 {
            return Err(CarlaError::Config(format!(
                "could not place anomalies covering {target} of {len} points"
            )));
        }
        let seg_len = rng.gen_range(min_seg..=max_seg);
        if seg_len + 2 >= len {
            continue;
        }
        let start = rng.gen_range(1..len - seg_len - 1);
        let end = start + seg_len; // inclusive
        let gap = min_seg;
        if segments
            .iter()
            .any(|&(s, e)| start <= e + gap && s <= end + gap)
        {
            continue;
        }
        segments.push((start, end));

        let ctx_start = start.saturating_sub(seg_len);
        let ctx_end = (end + 1 + seg_len).min(len);
        let affected = inject::choose_dims(dims, &mut rng);
        for &d in &affected {
            let kind = subsequence_types[rng.gen_range(0..subsequence_types.len())];
            let mut ctx = test_cols[d][ctx_start..ctx_end].to_vec();
            let (s, e) = (start - ctx_start, end - ctx_start);
            match kind {
                AnomalyType::Seasonal => {
                    let factor = SeasonalFactor::ALL[rng.gen_range(0..SeasonalFactor::ALL.len())];
                    inject::inject_seasonal(&mut ctx, s, e + 1, factor);
                }
                AnomalyType::Trend => {
                    let b = rng.gen_range(3.0..=5.0);
                    inject::inject_trend(&mut ctx, s, e, b);
                }
                _ => inject::inject_shapelet(&mut ctx, s, e),
            }
            test_cols[d][ctx_start..ctx_end].copy_from_slice(&ctx);
        }
        for (t, label) in labels.iter_mut().enumerate().take(ctx_end).skip(ctx_start) {
            if *label == 0 && (0..dims).any(|d| test_cols[d][t] != clean_test[d][t]) {
                *label = 1;
                labeled += 1;
            }
        }
    }

    let train = TimeSeries::from_columns(&train_cols)?;
    let test = LabeledSeries::new(TimeSeries::from_columns(&test_cols)?, labels)?;
    BenchmarkEntity::new(format!("synthetic-{seed}"), train, test)
}

/// Several synthesized entities with seeds derived from `seed`.
pub fn synthesize_benchmark(
    seed: u64,
    entities: usize,
    len: usize,
    dims: usize,
    anomaly_ratio: f64,
) -> Result<Vec<BenchmarkEntity>> {
    (0..entities)
        .map(|i| {
            let mut entity = synthesize_entity(
                crate::config::derive_seed(seed, &format!("synth/{i}")),
                len,
                dims,
                anomaly_ratio,
            )?;
            entity.name = format!("entity-{i}");
            Ok(entity)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(cols: &[Vec<f64>]) -> TimeSeries {
        TimeSeries::from_columns(cols).unwrap()
    }

    #[test]
    fn window_starts_follow_count_formula() {
        let s = series(&[vec![0.0; 5]]);
        let starts: Vec<_> = sliding_windows(&s, 3, 1)
            .unwrap()
            .iter()
            .map(|v| v.start)
            .collect();
        assert_eq!(starts, vec![0, 1, 2]);

        let s = series(&[vec![0.0; 200]]);
        assert_eq!(sliding_windows(&s, 200, 1).unwrap().len(), 1);

        let s = series(&[vec![0.0; 10]]);
        let starts: Vec<_> = sliding_windows(&s, 4, 2)
            .unwrap()
            .iter()
            .map(|v| v.start)
            .collect();
        assert_eq!(starts, vec![0, 2, 4, 6]);
    }

    #[test]
    fn window_larger_than_series_is_rejected() {
        let s = series(&[vec![0.0; 4]]);
        assert!(sliding_windows(&s, 5, 1).is_err());
    }

    #[test]
    fn normalize_examples() {
        let s = series(&[vec![5.0, 5.0, 5.0]]);
        let stats = NormStats::fit(&s);
        assert_eq!(stats.zero_std_dims(), vec![0]);
        assert_eq!(normalize(&s, &stats).unwrap().values(), &[0.0, 0.0, 0.0]);

        let s = series(&[vec![7.0]]);
        let stats = NormStats {
            mean: vec![5.0],
            std: vec![2.0],
        };
        assert_eq!(normalize(&s, &stats).unwrap().values(), &[1.0]);

        let s = series(&[vec![1.5, -2.0], vec![3.0, 4.0]]);
        assert_eq!(normalize(&s, &NormStats::identity(2)).unwrap(), s);
    }

    #[test]
    fn normalize_rejects_dim_mismatch() {
        let s = series(&[vec![1.0], vec![2.0]]);
        assert!(normalize(&s, &NormStats::identity(3)).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(TimeSeries::new(vec![1.0, f64::NAN], 2, 1).is_err());
        assert!(TimeSeries::new(vec![f64::INFINITY], 1, 1).is_err());
    }

    #[test]
    fn window_is_channel_major() {
        let s = series(&[vec![1.0, 2.0, 3.0], vec![10.0, 20.0, 30.0]]);
        let w = s.window(WindowView {
            start: 1,
            length: 2,
        });
        assert_eq!(w.as_slice(), &[2.0, 3.0, 20.0, 30.0]);
        assert_eq!(w.channel(1), &[20.0, 30.0]);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = synthesize_entity(7, 2000, 3, 0.05).unwrap();
        let b = synthesize_entity(7, 2000, 3, 0.05).unwrap();
        assert_eq!(a, b);
        let c = synthesize_entity(8, 2000, 3, 0.05).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn synthesis_hits_requested_ratio() {
        let e = synthesize_entity(3, 20_000, 2, 0.05).unwrap();
        let frac = e.test.anomaly_fraction();
        assert!((0.03..=0.07).contains(&frac), "fraction {frac}");
        assert_eq!(e.train.len(), 20_000);
    }

    #[test]
    fn synthesis_supports_univariate() {
        let e = synthesize_entity(1, 1000, 1, 0.05).unwrap();
        assert_eq!(e.dims(), 1);
        assert!(e.test.labels.contains(&1));
    }

    #[test]
    fn synthesis_rejects_degenerate_parameters() {
        assert!(synthesize_entity(1, 1000, 0, 0.05).is_err());
        assert!(synthesize_entity(1, 1000, 2, 0.0).is_err());
        assert!(synthesize_entity(1, 1000, 2, 0.5).is_err());
        assert!(synthesize_entity(1, 5, 2, 0.1).is_err());
    }
}
