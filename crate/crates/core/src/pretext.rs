// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stage one: triplet training of the encoder and construction of the
//! neighbour pool.
//!
//! For every window `i >= y` the anchor is window `i`, the positive is a window
//! `r` steps earlier with `r` uniform in `[1, y]`, and the negative is the
//! anchor with an injected anomaly.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Window;
use crate::encoder::{windows_to_tensor, Encoder, EncoderConfig};
use crate::error::{CarlaError, Result};
use crate::inject::{AnomalySpec, Injector, RandomSource};
use crate::neighbors::{mine_neighbors, NeighborSets};
use crate::nn::{Adam, Matrix, Parameterized, Scalar};

/// How the positive of each triplet is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PositiveSampling {
    /// A window up to `proximity` steps before the anchor.
    Temporal,
    /// The anchor plus i.i.d. normal noise.
    Noise { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretextConfig {
    pub margin: f64,
    pub proximity: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub positive: PositiveSampling,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            proximity: 10,
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-4,
            positive: PositiveSampling::Temporal,
        }
    }
}

impl PretextConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(CarlaError::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if self.proximity == 0 {
            return Err(CarlaError::Config("proximity range must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CarlaError::Config("pretext batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CarlaError::Config("pretext learning rate must be > 0".into()));
        }
        if let PositiveSampling::Noise { sigma } = self.positive {
            if !(sigma >= 0.0) {
                return Err(CarlaError::Config("noise sigma must be >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub anchor_idx: usize,
    pub positive_idx: usize,
    /// Materialized positive when it is not one of the original windows.
    pub positive_window: Option<Window>,
    pub negative: Window,
    pub spec: AnomalySpec,
}

impl Triplet {
    pub fn positive<'a>(&'a self, windows: &'a [Window]) -> &'a Window {
        self.positive_window
            .as_ref()
            .unwrap_or(&windows[self.positive_idx])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    /// Index of the original window this entry was derived from.
    pub source: usize,
    pub is_anchor: bool,
}

/// Entry `2k` is the anchor of triplet `k`; entry `2k + 1` is its negative.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborPool {
    pub entries: Vec<PoolEntry>,
}

impl NeighborPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The window behind pool entry `j`.
    pub fn window<'a>(&self, j: usize, windows: &'a [Window], triplets: &'a [Triplet]) -> &'a Window {
        let entry = self.entries[j];
        if entry.is_anchor {
            &windows[entry.source]
        } else {
            &triplets[j / 2].negative
        }
    }

    pub fn windows<'a>(&self, windows: &'a [Window], triplets: &'a [Triplet]) -> Vec<&'a Window> {
        (0..self.len())
            .map(|j| self.window(j, windows, triplets))
            .collect()
    }

    pub fn anchor_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_anchor)
            .map(|(j, _)| j)
    }
}

/// One triplet per anchor `i` in `[y, m)`, with the pool built alongside.
pub fn build_triplets(
    windows: &[Window],
    config: &PretextConfig,
    injector: &Injector,
    rng: &mut RandomSource,
) -> Result<(Vec<Triplet>, NeighborPool)> {
    let (m, y) = (windows.len(), config.proximity);
    if m < y + 1 {
        return Err(CarlaError::Data(format!(
            "need at least {} windows for proximity {y}, got {m}",
            y + 1
        )));
    }
    let mut triplets = Vec::with_capacity(m - y);
    let mut entries = Vec::with_capacity(2 * (m - y));
    for i in y..m {
        let (positive_idx, positive_window) = match config.positive {
            PositiveSampling::Temporal => (i - rng.gen_range(1..=y), None),
            PositiveSampling::Noise { sigma } => {
                let normal = Normal::new(0.0, sigma)
                    .map_err(|e| CarlaError::Config(format!("noise sigma: {e}")))?;
                let w = &windows[i];
                let data = w.as_slice().iter().map(|v| v + normal.sample(rng)).collect();
                (i, Some(Window::new(w.dims(), w.len(), data)?))
            }
        };
        let (negative, spec) = injector.inject(&windows[i], rng);
        triplets.push(Triplet {
            anchor_idx: i,
            positive_idx,
            positive_window,
            negative,
            spec,
        });
        entries.push(PoolEntry {
            source: i,
            is_anchor: true,
        });
        entries.push(PoolEntry {
            source: i,
            is_anchor: false,
        });
    }
    Ok((triplets, NeighborPool { entries }))
}

fn squared_distance<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// Mean over the batch of `max(|a-p|^2 - |a-n|^2 + margin, 0)`.
pub fn triplet_loss<S: Scalar>(a: &Matrix<S>, p: &Matrix<S>, n: &Matrix<S>, margin: f64) -> f64 {
    triplet_loss_with_grad(a, p, n, margin).0
}

/// Loss and its gradients with respect to the anchor, positive and negative rows.
pub fn triplet_loss_with_grad<S: Scalar>(
    a: &Matrix<S>,
    p: &Matrix<S>,
    n: &Matrix<S>,
    margin: f64,
) -> (f64, [Matrix<S>; 3]) {
    assert!(a.rows == p.rows && a.rows == n.rows && a.cols == p.cols && a.cols == n.cols);
    let (rows, cols) = (a.rows, a.cols);
    let mut grads = [
        Matrix::zeros(rows, cols),
        Matrix::zeros(rows, cols),
        Matrix::zeros(rows, cols),
    ];
    if rows == 0 {
        return (0.0, grads);
    }
    let scale = 2.0 / rows as f64;
    let mut total = 0.0;
    for r in 0..rows {
        let (ar, pr, nr) = (a.row(r), p.row(r), n.row(r));
        let hinge = squared_distance(ar, pr) - squared_distance(ar, nr) + margin;
        if hinge <= 0.0 {
            continue;
        }
        total += hinge;
        for c in 0..cols {
            let (av, pv, nv) = (ar[c].as_f64(), pr[c].as_f64(), nr[c].as_f64());
            grads[0].row_mut(r)[c] = S::from_f64_lossy(scale * (nv - pv));
            grads[1].row_mut(r)[c] = S::from_f64_lossy(scale * (pv - av));
            grads[2].row_mut(r)[c] = S::from_f64_lossy(scale * (av - nv));
        }
    }
    (total / rows as f64, grads)
}

fn split_rows<S: Scalar>(m: &Matrix<S>, parts: usize) -> Vec<Matrix<S>> {
    let rows = m.rows / parts;
    m.data
        .chunks(rows * m.cols)
        .map(|chunk| Matrix::from_vec(rows, m.cols, chunk.to_vec()))
        .collect()
}

fn stack_rows<S: Scalar>(parts: &[Matrix<S>]) -> Matrix<S> {
    let cols = parts[0].cols;
    let data: Vec<S> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
    Matrix::from_vec(data.len() / cols, cols, data)
}

/// One optimizer step on a batch of triplets; returns the batch loss.
pub fn pretext_step<S: Scalar>(
    encoder: &mut Encoder<S>,
    optimizer: &mut Adam,
    windows: &[Window],
    batch: &[&Triplet],
    margin: f64,
) -> Result<f64> {
    let mut stacked: Vec<&Window> = Vec::with_capacity(3 * batch.len());
    stacked.extend(batch.iter().map(|t| &windows[t.anchor_idx]));
    stacked.extend(batch.iter().map(|t| t.positive(windows)));
    stacked.extend(batch.iter().map(|t| &t.negative));
    let x = windows_to_tensor::<S>(&stacked)?;
    encoder.zero_grad();
    let (reps, cache) = encoder.forward_train(&x)?;
    let parts = split_rows(&reps, 3);
    let (loss, grads) = triplet_loss_with_grad(&parts[0], &parts[1], &parts[2], margin);
    if !loss.is_finite() {
        return Err(CarlaError::Numeric(format!("non-finite triplet loss {loss}")));
    }
    encoder.backward(&cache, &stack_rows(&grads));
    optimizer.step(encoder);
    Ok(loss)
}

/// Trained encoder together with everything stage two needs.
pub struct PretextOutcome<S> {
    pub encoder: Encoder<S>,
    pub triplets: Vec<Triplet>,
    pub pool: NeighborPool,
    /// Mean triplet loss per epoch.
    pub history: Vec<f64>,
}

/// Builds triplets and trains a freshly initialized encoder on them.
pub fn train_pretext<S: Scalar>(
    windows: &[Window],
    encoder_config: EncoderConfig,
    config: &PretextConfig,
    injector: &Injector,
    seed: u64,
) -> Result<PretextOutcome<S>> {
    config.validate()?;
    let mut rng = RandomSource::seed_from_u64(seed);
    let (triplets, pool) = build_triplets(windows, config, injector, &mut rng)?;
    let mut encoder = Encoder::<S>::new(encoder_config, rng.gen())?;
    let mut optimizer = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Triplet> = chunk.iter().map(|&k| &triplets[k]).collect();
            let loss = pretext_step(&mut encoder, &mut optimizer, windows, &batch, config.margin)
                .map_err(|e| match e {
                    CarlaError::Numeric(msg) => {
                        CarlaError::Numeric(format!("epoch {}: {msg}", epoch + 1))
                    }
                    other => other,
                })?;
            weighted += loss * chunk.len() as f64;
            debug!("pretext epoch {} batch loss {loss:.6}", epoch + 1);
        }
        let mean = weighted / triplets.len() as f64;
        info!("pretext epoch {}/{}: loss {mean:.6}", epoch + 1, config.epochs);
        history.push(mean);
    }
    Ok(PretextOutcome {
        encoder,
        triplets,
        pool,
        history,
    })
}

/// Squared anchor-positive and anchor-negative distances for every triplet.
pub fn triplet_distances<S: Scalar>(
    encoder: &Encoder<S>,
    windows: &[Window],
    triplets: &[Triplet],
    batch: usize,
) -> Result<Vec<(f64, f64)>> {
    let anchors: Vec<&Window> = triplets.iter().map(|t| &windows[t.anchor_idx]).collect();
    let positives: Vec<&Window> = triplets.iter().map(|t| t.positive(windows)).collect();
    let negatives: Vec<&Window> = triplets.iter().map(|t| &t.negative).collect();
    let a = encoder.encode_windows(&anchors, batch)?;
    let p = encoder.encode_windows(&positives, batch)?;
    let n = encoder.encode_windows(&negatives, batch)?;
    Ok((0..triplets.len())
        .map(|r| (squared_distance(a.row(r), p.row(r)), squared_distance(a.row(r), n.row(r))))
        .collect())
}

/// Encodes every pool entry and mines `q` nearest and furthest neighbours.
pub fn mine_pool_neighbors<S: Scalar>(
    encoder: &Encoder<S>,
    windows: &[Window],
    triplets: &[Triplet],
    pool: &NeighborPool,
    q: usize,
    batch: usize,
) -> Result<NeighborSets> {
    let reps = encoder.encode_windows(&pool.windows(windows, triplets), batch)?;
    mine_neighbors(&reps.to_f64_rows(), q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_windows(m: usize, len: usize) -> Vec<Window> {
        (0..m)
            .map(|i| {
                let data = (0..len).map(|t| ((i + t) as f64 * 0.3).sin()).collect();
                Window::new(1, len, data).unwrap()
            })
            .collect()
    }

    fn rows(v: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_f64_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn triplet_count_and_pool_layout() {
        let windows = ramp_windows(100, 8);
        let mut rng = RandomSource::seed_from_u64(1);
        let (triplets, pool) =
            build_triplets(&windows, &PretextConfig::default(), &Injector::default(), &mut rng)
                .unwrap();
        assert_eq!(triplets.len(), 90);
        assert_eq!(pool.len(), 180);
        for (k, t) in triplets.iter().enumerate() {
            let r = t.anchor_idx - t.positive_idx;
            assert!((1..=10).contains(&r));
            assert_eq!(pool.entries[2 * k], PoolEntry { source: t.anchor_idx, is_anchor: true });
            assert_eq!(pool.entries[2 * k + 1], PoolEntry { source: t.anchor_idx, is_anchor: false });
            assert_eq!(t.spec.apply(&windows[t.anchor_idx]), t.negative);
        }
    }

    #[test]
    fn proximity_one_uses_previous_window() {
        let windows = ramp_windows(5, 8);
        let config = PretextConfig {
            proximity: 1,
            ..Default::default()
        };
        let mut rng = RandomSource::seed_from_u64(2);
        let (triplets, _) =
            build_triplets(&windows, &config, &Injector::default(), &mut rng).unwrap();
        assert_eq!(triplets.len(), 4);
        assert!(triplets.iter().all(|t| t.positive_idx + 1 == t.anchor_idx));
    }

    #[test]
    fn too_few_windows_is_an_error() {
        let windows = ramp_windows(10, 8);
        let mut rng = RandomSource::seed_from_u64(0);
        let err = build_triplets(&windows, &PretextConfig::default(), &Injector::default(), &mut rng);
        assert!(err.is_err());
    }

    #[test]
    fn noise_positive_stays_close_to_anchor() {
        let windows = ramp_windows(20, 16);
        let config = PretextConfig {
            positive: PositiveSampling::Noise { sigma: 0.01 },
            ..Default::default()
        };
        let mut rng = RandomSource::seed_from_u64(3);
        let (triplets, _) =
            build_triplets(&windows, &config, &Injector::default(), &mut rng).unwrap();
        for t in &triplets {
            let p = t.positive(&windows);
            let a = &windows[t.anchor_idx];
            assert_ne!(p, a);
            let max = p.as_slice().iter().zip(a.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(max < 0.1);
        }
    }

    #[test]
    fn hinge_examples() {
        let a = rows(&[&[0.0, 0.0]]);
        let at_margin = rows(&[&[1.0, 0.0]]);
        assert_eq!(triplet_loss(&a, &a, &at_margin, 1.0), 0.0);

        let p = rows(&[&[1.0, 1.0]]);
        let n = rows(&[&[1.0, 0.0]]);
        assert!((triplet_loss(&a, &p, &n, 1.0) - 2.0).abs() < 1e-12);

        let far = rows(&[&[2.0, 1.0]]);
        assert_eq!(triplet_loss(&a, &a, &far, 1.0), 0.0);

        let zeros = rows(&[&[0.0; 3], &[0.0; 3]]);
        assert_eq!(triplet_loss(&zeros, &zeros, &zeros, 0.7), 0.7);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = rows(&[&[0.3, -0.2, 0.5], &[1.0, 0.0, 0.1]]);
        let p = rows(&[&[0.9, 0.4, -0.1], &[0.2, 0.3, 0.3]]);
        let n = rows(&[&[0.1, -0.1, 0.4], &[1.5, 0.5, -0.5]]);
        let (_, grads) = triplet_loss_with_grad(&a, &p, &n, 1.0);
        let inputs = [a, p, n];
        let h = 1e-6;
        for which in 0..3 {
            for idx in 0..6 {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[which].data[idx] += h;
                minus[which].data[idx] -= h;
                let fd = (triplet_loss(&plus[0], &plus[1], &plus[2], 1.0)
                    - triplet_loss(&minus[0], &minus[1], &minus[2], 1.0))
                    / (2.0 * h);
                assert!((fd - grads[which].data[idx]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn training_reduces_loss_deterministically() {
        let windows = ramp_windows(60, 16);
        let enc = EncoderConfig {
            channels: vec![4, 8],
            rep_dim: 8,
            window_size: 16,
            ..Default::default()
        };
        let config = PretextConfig {
            epochs: 6,
            batch_size: 16,
            learning_rate: 1e-2,
            proximity: 3,
            ..Default::default()
        };
        let run = || train_pretext::<f64>(&windows, enc.clone(), &config, &Injector::default(), 11).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        assert!(a.history.last().unwrap() < a.history.first().unwrap());
        let sets = mine_pool_neighbors(&a.encoder, &windows, &a.triplets, &a.pool, 3, 32).unwrap();
        assert_eq!(sets.len(), a.pool.len());
        assert_eq!(sets.q(), 3);
    }
}
