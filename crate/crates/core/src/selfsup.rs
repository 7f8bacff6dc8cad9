// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stage two: self-supervised classification over the neighbour pool.
//!
//! The classifier shares the pretext encoder as its backbone. Its loss pulls
//! the class distribution of each pool entry towards those of its nearest
//! neighbours, pushes it away from its furthest neighbours, and rewards
//! diverse class usage across a batch.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::dataset::Window;
use crate::encoder::{windows_to_tensor, Classifier, Encoder};
use crate::error::{CarlaError, Result};
use crate::inject::RandomSource;
use crate::neighbors::NeighborSets;
use crate::nn::{Adam, Matrix, Parameterized, Scalar};
use crate::pretext::{NeighborPool, Triplet};

/// Which reading of the loss to optimize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    /// Furthest-neighbour similarity enters through `-log(1 - sim)` and the
    /// entropy of mean class usage is maximized.
    #[default]
    Stable,
    /// Furthest-neighbour `-log(sim)` is subtracted and `sum p log p` is
    /// subtracted, exactly as the formulas are written.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfSupConfig {
    pub classes: usize,
    pub neighbors: usize,
    pub entropy_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub formulation: Formulation,
    pub log_eps: f64,
    /// Neighbours of each kind sampled per entry and step; `0` means all `Q`.
    pub neighbors_per_step: usize,
    pub inconsistency: bool,
}

impl Default for SelfSupConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            neighbors: 5,
            entropy_weight: 5.0,
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-4,
            formulation: Formulation::Stable,
            log_eps: 1e-8,
            neighbors_per_step: 1,
            inconsistency: true,
        }
    }
}

impl SelfSupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CarlaError::Config(format!("need C >= 2, got {}", self.classes)));
        }
        if self.neighbors == 0 {
            return Err(CarlaError::Config("need Q >= 1".into()));
        }
        if !(self.entropy_weight >= 0.0) {
            return Err(CarlaError::Config("entropy weight must be >= 0".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(CarlaError::Config(
                "self-supervised batch size and learning rate must be positive".into(),
            ));
        }
        if !(self.log_eps > 0.0) {
            return Err(CarlaError::Config("log epsilon must be > 0".into()));
        }
        Ok(())
    }

    fn per_step(&self) -> usize {
        match self.neighbors_per_step {
            0 => self.neighbors,
            k => k.min(self.neighbors),
        }
    }
}

/// Dot product of two class distributions.
pub fn similarity(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * b).sum()
}

fn neighbor_log_sum(probs: &[Vec<f64>], sets: &[Vec<usize>], eps: f64, f: impl Fn(f64) -> f64) -> f64 {
    let total: f64 = sets
        .iter()
        .enumerate()
        .flat_map(|(j, ns)| ns.iter().map(move |&n| (j, n)))
        .map(|(j, n)| -f(similarity(&probs[j], &probs[n])).max(eps).ln())
        .sum();
    total / probs.len() as f64
}

/// `-(1/|B|) sum_j sum_{n in N_j} log max(sim, eps)`.
pub fn consistency_loss(probs: &[Vec<f64>], nearest: &[Vec<usize>], eps: f64) -> f64 {
    neighbor_log_sum(probs, nearest, eps, |s| s)
}

/// Furthest-neighbour term as it enters the total with a `+` sign (stable)
/// or before being subtracted (literal).
pub fn inconsistency_loss(
    probs: &[Vec<f64>],
    furthest: &[Vec<usize>],
    eps: f64,
    formulation: Formulation,
) -> f64 {
    match formulation {
        Formulation::Stable => neighbor_log_sum(probs, furthest, eps, |s| 1.0 - s),
        Formulation::Literal => neighbor_log_sum(probs, furthest, eps, |s| s),
    }
}

/// Batch-mean class distribution.
pub fn mean_distribution(probs: &[Vec<f64>]) -> Vec<f64> {
    let c = probs.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; c];
    for p in probs {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= probs.len() as f64);
    mean
}

/// Shannon entropy of the batch-mean class distribution.
pub fn entropy_reg(probs: &[Vec<f64>]) -> f64 {
    -mean_distribution(probs)
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub consistency: f64,
    pub inconsistency: f64,
    pub entropy: f64,
    pub total: f64,
}

fn combine(consistency: f64, inconsistency: f64, entropy: f64, config: &SelfSupConfig) -> LossParts {
    let inc = if config.inconsistency { inconsistency } else { 0.0 };
    let total = match config.formulation {
        Formulation::Stable => consistency + inc - config.entropy_weight * entropy,
        // -beta * sum(p log p) = +beta * H
        Formulation::Literal => consistency - inc + config.entropy_weight * entropy,
    };
    LossParts {
        consistency,
        inconsistency,
        entropy,
        total,
    }
}

/// Full-pool objective with every stored neighbour.
pub fn total_loss(probs: &[Vec<f64>], sets: &NeighborSets, config: &SelfSupConfig) -> LossParts {
    combine(
        consistency_loss(probs, &sets.nearest, config.log_eps),
        inconsistency_loss(probs, &sets.furthest, config.log_eps, config.formulation),
        entropy_reg(probs),
        config,
    )
}

/// The pairs one mini-batch contributes, as row indices into its probability matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPairs {
    /// Rows `0..anchors` are the entries whose terms are summed; the entropy
    /// term is taken over these rows.
    pub anchors: usize,
    pub nearest: Vec<(usize, usize)>,
    pub furthest: Vec<(usize, usize)>,
    /// Weight of each pair term.
    pub pair_weight: f64,
}

/// Loss of one batch and its gradient with respect to every probability.
pub fn total_loss_with_grad<S: Scalar>(
    probs: &Matrix<S>,
    pairs: &BatchPairs,
    config: &SelfSupConfig,
) -> (LossParts, Matrix<S>) {
    let eps = config.log_eps;
    let c = probs.cols;
    let p = probs.to_f64_rows();
    let mut grad = vec![vec![0.0; c]; probs.rows];
    let w = pairs.pair_weight;

    let add_pair = |grad: &mut Vec<Vec<f64>>, i: usize, j: usize, ds: f64| {
        for k in 0..c {
            grad[i][k] += ds * p[j][k];
            grad[j][k] += ds * p[i][k];
        }
    };

    let mut consistency = 0.0;
    for &(i, j) in &pairs.nearest {
        let s = similarity(&p[i], &p[j]);
        consistency -= w * s.max(eps).ln();
        if s > eps {
            add_pair(&mut grad, i, j, -w / s);
        }
    }

    let mut inconsistency = 0.0;
    for &(i, j) in &pairs.furthest {
        let s = similarity(&p[i], &p[j]);
        let ds = match config.formulation {
            Formulation::Stable => {
                let q = 1.0 - s;
                inconsistency -= w * q.max(eps).ln();
                if q > eps {
                    w / q
                } else {
                    0.0
                }
            }
            Formulation::Literal => {
                inconsistency -= w * s.max(eps).ln();
                // Subtracted in the total.
                if s > eps {
                    w / s
                } else {
                    0.0
                }
            }
        };
        if config.inconsistency {
            add_pair(&mut grad, i, j, ds);
        }
    }

    let anchors = pairs.anchors;
    let mean = mean_distribution(&p[..anchors]);
    let entropy = -mean
        .iter()
        .filter(|&&m| m > 0.0)
        .map(|m| m * m.ln())
        .sum::<f64>();
    // d(-beta H)/dp_rk = beta (ln m_k + 1) / anchors; the literal form flips the sign.
    let sign = match config.formulation {
        Formulation::Stable => 1.0,
        Formulation::Literal => -1.0,
    };
    for (k, m) in mean.iter().enumerate() {
        let d = sign * config.entropy_weight * (m.max(eps).ln() + 1.0) / anchors as f64;
        for row in grad.iter_mut().take(anchors) {
            row[k] += d;
        }
    }

    let parts = combine(consistency, inconsistency, entropy, config);
    (parts, Matrix::from_f64_rows(&grad))
}

/// Classifier with the per-epoch loss record.
pub struct SelfSupOutcome<S> {
    pub classifier: Classifier<S>,
    pub history: Vec<LossParts>,
}

/// Source windows for stage two.
#[derive(Clone, Copy)]
pub struct PoolView<'a> {
    pub windows: &'a [Window],
    pub triplets: &'a [Triplet],
    pub pool: &'a NeighborPool,
}

impl<'a> PoolView<'a> {
    fn window(&self, j: usize) -> &'a Window {
        self.pool.window(j, self.windows, self.triplets)
    }
}

fn sample_neighbors(list: &[usize], k: usize, rng: &mut RandomSource) -> Vec<usize> {
    if k >= list.len() {
        list.to_vec()
    } else {
        list.choose_multiple(rng, k).copied().collect()
    }
}

/// One optimizer step on a batch of pool entries.
pub fn selfsup_step<S: Scalar>(
    classifier: &mut Classifier<S>,
    optimizer: &mut Adam,
    view: PoolView<'_>,
    sets: &NeighborSets,
    batch: &[usize],
    config: &SelfSupConfig,
    rng: &mut RandomSource,
) -> Result<LossParts> {
    let k = config.per_step();
    let b = batch.len();
    let mut rows: Vec<usize> = batch.to_vec();
    let mut nearest = Vec::with_capacity(b * k);
    let mut furthest = Vec::with_capacity(b * k);
    for (r, &j) in batch.iter().enumerate() {
        for n in sample_neighbors(&sets.nearest[j], k, rng) {
            nearest.push((r, rows.len()));
            rows.push(n);
        }
        if config.inconsistency {
            for f in sample_neighbors(&sets.furthest[j], k, rng) {
                furthest.push((r, rows.len()));
                rows.push(f);
            }
        }
    }
    let windows: Vec<&Window> = rows.iter().map(|&j| view.window(j)).collect();
    let x = windows_to_tensor::<S>(&windows)?;
    classifier.zero_grad();
    let (probs, cache) = classifier.forward_train(&x)?;
    // Sampling k of Q neighbours: rescale so each term estimates the full sum.
    let pairs = BatchPairs {
        anchors: b,
        nearest,
        furthest,
        pair_weight: sets.q() as f64 / (k as f64 * b as f64),
    };
    let (parts, grad) = total_loss_with_grad(&probs, &pairs, config);
    if !parts.total.is_finite() {
        return Err(CarlaError::Numeric(format!(
            "non-finite self-supervised loss {}",
            parts.total
        )));
    }
    classifier.backward(&cache, &grad);
    optimizer.step(classifier);
    Ok(parts)
}

/// Trains a classifier whose backbone starts from the pretext encoder.
pub fn train_selfsup<S: Scalar>(
    encoder: &Encoder<S>,
    view: PoolView<'_>,
    sets: &NeighborSets,
    config: &SelfSupConfig,
    seed: u64,
) -> Result<SelfSupOutcome<S>> {
    config.validate()?;
    if sets.len() != view.pool.len() {
        return Err(CarlaError::Shape(format!(
            "neighbour sets cover {} entries but the pool has {}",
            sets.len(),
            view.pool.len()
        )));
    }
    let mut rng = RandomSource::seed_from_u64(seed);
    let mut classifier = Classifier::new(encoder.clone(), config.classes, rng.gen())?;
    let mut optimizer = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..view.pool.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        for chunk in order.chunks(config.batch_size) {
            let parts = selfsup_step(&mut classifier, &mut optimizer, view, sets, chunk, config, &mut rng)
                .map_err(|e| match e {
                    CarlaError::Numeric(msg) => {
                        CarlaError::Numeric(format!("epoch {}: {msg}", epoch + 1))
                    }
                    other => other,
                })?;
            let w = chunk.len() as f64;
            sum.consistency += parts.consistency * w;
            sum.inconsistency += parts.inconsistency * w;
            sum.entropy += parts.entropy * w;
            sum.total += parts.total * w;
            debug!("selfsup epoch {} batch loss {:.6}", epoch + 1, parts.total);
        }
        let n = order.len() as f64;
        let mean = LossParts {
            consistency: sum.consistency / n,
            inconsistency: sum.inconsistency / n,
            entropy: sum.entropy / n,
            total: sum.total / n,
        };
        info!(
            "selfsup epoch {}/{}: total {:.6} (cons {:.4}, incons {:.4}, entropy {:.4})",
            epoch + 1,
            config.epochs,
            mean.total,
            mean.consistency,
            mean.inconsistency,
            mean.entropy
        );
        history.push(mean);
    }
    Ok(SelfSupOutcome {
        classifier,
        history,
    })
}

/// Per-window classes and the majority class among anchors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassAssignment {
    pub classes: Vec<usize>,
    pub counts: Vec<usize>,
    pub majority: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Majority class from probability rows; ties go to the lowest class index.
pub fn assign_classes(probs: &[Vec<f64>], classes: usize) -> Result<ClassAssignment> {
    if probs.is_empty() {
        return Err(CarlaError::Data("no windows to assign classes to".into()));
    }
    let assigned: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let mut counts = vec![0; classes];
    for &c in &assigned {
        counts[c] += 1;
    }
    let majority = argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    Ok(ClassAssignment {
        classes: assigned,
        counts,
        majority,
    })
}

/// Classifies the anchor entries of the pool (never injected negatives) and
/// returns the most populous class.
pub fn majority_class<S: Scalar>(
    classifier: &Classifier<S>,
    view: PoolView<'_>,
    batch: usize,
) -> Result<ClassAssignment> {
    let anchors: Vec<&Window> = view.pool.anchor_indices().map(|j| view.window(j)).collect();
    let probs = classifier.predict_windows(&anchors, batch)?;
    assign_classes(&probs.to_f64_rows(), classifier.classes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(c: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; c];
        v[k] = 1.0;
        v
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&one_hot(3, 1), &one_hot(3, 1)), 1.0);
        assert_eq!(similarity(&one_hot(3, 0), &one_hot(3, 2)), 0.0);
        let u = vec![0.1; 10];
        assert!((similarity(&u, &u) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn consistency_examples() {
        let probs = vec![one_hot(4, 2); 3];
        let nn = vec![vec![1], vec![2], vec![0]];
        assert_eq!(consistency_loss(&probs, &nn, 1e-8), 0.0);

        let half = vec![vec![0.5, 0.5], vec![1.0, 0.0]];
        // sim(0,1) = sim(1,0) = 0.5
        let nn = vec![vec![1], vec![0]];
        assert!((consistency_loss(&half, &nn, 1e-8) - 2f64.ln()).abs() < 1e-12);

        let orth = vec![one_hot(2, 0), one_hot(2, 1)];
        let v = consistency_loss(&orth, &nn, 1e-8);
        assert!((v - (-(1e-8f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn inconsistency_examples() {
        let orth = vec![one_hot(2, 0), one_hot(2, 1)];
        let f = vec![vec![1], vec![0]];
        assert_eq!(inconsistency_loss(&orth, &f, 1e-8, Formulation::Stable), 0.0);
        let half = vec![vec![0.5, 0.5], vec![1.0, 0.0]];
        assert!((inconsistency_loss(&half, &f, 1e-8, Formulation::Stable) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(
            inconsistency_loss(&half, &f, 1e-8, Formulation::Literal),
            consistency_loss(&half, &f, 1e-8)
        );
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy_reg(&[vec![0.1; 10]]) - 10f64.ln()).abs() < 1e-12);
        assert_eq!(entropy_reg(&[one_hot(5, 3)]), 0.0);
        assert!((entropy_reg(&[one_hot(2, 0), one_hot(2, 1)]) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_assignment_total() {
        // Ten entries, one per class; each nearest neighbour is itself-class,
        // each furthest neighbour is another class.
        let probs: Vec<Vec<f64>> = (0..10).map(|k| one_hot(10, k)).collect();
        let mut dup = probs.clone();
        dup.extend(probs.clone());
        let nearest = (0..20).map(|j| vec![(j + 10) % 20]).collect();
        let furthest = (0..20).map(|j| vec![(j + 1) % 20]).collect();
        let sets = NeighborSets { nearest, furthest };
        let parts = total_loss(&dup, &sets, &SelfSupConfig::default());
        assert!((parts.total + 5.0 * 10f64.ln()).abs() < 1e-9);

        let no_entropy = SelfSupConfig {
            entropy_weight: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&dup, &sets, &no_entropy).total, 0.0);
    }

    #[test]
    fn batch_loss_matches_full_pool_loss() {
        let probs = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.3, 0.3, 0.4],
            vec![0.25, 0.5, 0.25],
        ];
        let sets = NeighborSets {
            nearest: vec![vec![2, 3], vec![3, 0], vec![0, 1], vec![1, 2]],
            furthest: vec![vec![1, 3], vec![0, 2], vec![1, 3], vec![0, 2]],
        };
        for formulation in [Formulation::Stable, Formulation::Literal] {
            let config = SelfSupConfig {
                formulation,
                ..Default::default()
            };
            let pairs = BatchPairs {
                anchors: 4,
                nearest: (0..4).flat_map(|j| sets.nearest[j].iter().map(move |&n| (j, n))).collect(),
                furthest: (0..4).flat_map(|j| sets.furthest[j].iter().map(move |&n| (j, n))).collect(),
                pair_weight: 0.25,
            };
            let (batch, _) = total_loss_with_grad(&Matrix::<f64>::from_f64_rows(&probs), &pairs, &config);
            let full = total_loss(&probs, &sets, &config);
            assert!((batch.total - full.total).abs() < 1e-12);
        }
    }

    #[test]
    fn probability_gradient_matches_finite_differences() {
        let probs = Matrix::<f64>::from_f64_rows(&[
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.5, 0.3],
            vec![0.1, 0.1, 0.8],
            vec![0.3, 0.4, 0.3],
        ]);
        let pairs = BatchPairs {
            anchors: 2,
            nearest: vec![(0, 3), (1, 2)],
            furthest: vec![(0, 2), (1, 3)],
            pair_weight: 0.5,
        };
        for formulation in [Formulation::Stable, Formulation::Literal] {
            let config = SelfSupConfig {
                formulation,
                ..Default::default()
            };
            let (_, grad) = total_loss_with_grad(&probs, &pairs, &config);
            let h = 1e-6;
            for idx in 0..probs.data.len() {
                let mut plus = probs.clone();
                let mut minus = probs.clone();
                plus.data[idx] += h;
                minus.data[idx] -= h;
                let fd = (total_loss_with_grad(&plus, &pairs, &config).0.total
                    - total_loss_with_grad(&minus, &pairs, &config).0.total)
                    / (2.0 * h);
                assert!((fd - grad.data[idx]).abs() < 1e-5, "{formulation:?} idx {idx}");
            }
        }
    }

    #[test]
    fn majority_ties_go_to_lowest_class() {
        let probs = vec![
            one_hot(3, 1),
            one_hot(3, 2),
            one_hot(3, 1),
            one_hot(3, 2),
        ];
        let a = assign_classes(&probs, 3).unwrap();
        assert_eq!(a.counts, vec![0, 2, 2]);
        assert_eq!(a.majority, 1);

        let single = assign_classes(&[one_hot(4, 3)], 4).unwrap();
        assert_eq!(single.majority, 3);

        let counts = assign_classes(
            &[one_hot(3, 0), one_hot(3, 0), one_hot(3, 1), one_hot(3, 0)],
            3,
        )
        .unwrap();
        assert_eq!(counts.majority, 0);
    }
}
