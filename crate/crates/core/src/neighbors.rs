// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exact nearest and furthest neighbour mining in representation space.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CarlaError, Result};

/// `nearest[j]` and `furthest[j]` each hold `q` indices, closest (or furthest) first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborSets {
    pub nearest: Vec<Vec<usize>>,
    pub furthest: Vec<Vec<usize>>,
}

impl NeighborSets {
    pub fn len(&self) -> usize {
        self.nearest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nearest.is_empty()
    }

    pub fn q(&self) -> usize {
        self.nearest.first().map_or(0, Vec::len)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn closer(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn farther(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn top_q(
    mut candidates: Vec<(f64, usize)>,
    q: usize,
    order: fn(&(f64, usize), &(f64, usize)) -> Ordering,
) -> Vec<usize> {
    if q < candidates.len() {
        candidates.select_nth_unstable_by(q - 1, order);
        candidates.truncate(q);
    }
    candidates.sort_unstable_by(order);
    candidates.into_iter().map(|(_, i)| i).collect()
}

/// Brute-force `q` nearest and `q` furthest neighbours of every row.
///
/// Distances are Euclidean, each point is excluded from its own sets, and
/// equal distances are broken by the lower index.
pub fn mine_neighbors(reps: &[Vec<f64>], q: usize) -> Result<NeighborSets> {
    let n = reps.len();
    if q == 0 || q >= n {
        return Err(CarlaError::Config(format!(
            "need 1 <= Q < pool size, got Q={q} for {n} points"
        )));
    }
    let (nearest, furthest): (Vec<_>, Vec<_>) = (0..n)
        .into_par_iter()
        .map(|j| {
            let candidates: Vec<(f64, usize)> = (0..n)
                .filter(|&i| i != j)
                .map(|i| (squared_distance(&reps[j], &reps[i]), i))
                .collect();
            (
                top_q(candidates.clone(), q, closer),
                top_q(candidates, q, farther),
            )
        })
        .unzip();
    Ok(NeighborSets { nearest, furthest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points() {
        let reps = vec![vec![0.0], vec![1.0], vec![10.0]];
        let sets = mine_neighbors(&reps, 1).unwrap();
        assert_eq!(sets.nearest[0], vec![1]);
        assert_eq!(sets.furthest[0], vec![2]);
        assert_eq!(sets.nearest[2], vec![1]);
        assert_eq!(sets.furthest[2], vec![0]);
    }

    #[test]
    fn ties_break_by_lower_index() {
        let reps = vec![vec![0.0], vec![1.0], vec![-1.0], vec![1.0]];
        let sets = mine_neighbors(&reps, 2).unwrap();
        assert_eq!(sets.nearest[0], vec![1, 2]);
        assert_eq!(sets.furthest[2], vec![1, 3]);
    }

    #[test]
    fn exhaustive_q_covers_everything() {
        let reps: Vec<Vec<f64>> = (0..7).map(|i| vec![(i as f64).sin(), i as f64]).collect();
        let sets = mine_neighbors(&reps, 6).unwrap();
        for j in 0..7 {
            let mut all = sets.nearest[j].clone();
            all.push(j);
            all.sort_unstable();
            assert_eq!(all, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rejects_oversized_q() {
        let reps = vec![vec![0.0], vec![1.0]];
        assert!(mine_neighbors(&reps, 2).is_err());
        assert!(mine_neighbors(&reps, 0).is_err());
    }
}
