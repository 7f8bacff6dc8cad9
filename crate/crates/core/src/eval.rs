// SPDX-License-Identifier: MIT OR Apache-2.0

//! Point-level evaluation: best-F1 threshold sweep, average precision,
//! pooled confusion counts across entities and point adjustment.
//!
//! A point is predicted anomalous when its score is `>= threshold`.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CarlaError, Result};
use crate::inject::RandomSource;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `0` when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `0` when there are no positive labels.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    fn add(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(CarlaError::Shape(format!(
            "length mismatch: {a} predictions vs {b} labels"
        )));
    }
    Ok(())
}

fn check_positives(labels: &[u8]) -> Result<()> {
    if !labels.iter().any(|&l| l != 0) {
        return Err(CarlaError::Data(
            "no positive labels; recall is undefined".into(),
        ));
    }
    Ok(())
}

pub fn confusion(labels: &[u8], preds: &[u8]) -> Result<ConfusionCounts> {
    check_lengths(preds.len(), labels.len())?;
    let mut c = ConfusionCounts::default();
    for (&l, &p) in labels.iter().zip(preds) {
        match (l != 0, p != 0) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn threshold_predictions(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= threshold)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall at every distinct score, in ascending threshold order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<CurvePoint>,
}

/// Counts at each distinct threshold, from the highest score down.
fn descending_counts(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, ConfusionCounts)>> {
    check_lengths(scores.len(), labels.len())?;
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(CarlaError::Data(format!("score {bad} is not a number")));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count() as u64;
    let negatives = labels.len() as u64 - positives;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut k = 0;
    while k < order.len() {
        let threshold = scores[order[k]];
        while k < order.len() && scores[order[k]] == threshold {
            if labels[order[k]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        out.push((
            threshold,
            ConfusionCounts {
                tp,
                fp,
                tn: negatives - fp,
                fn_: positives - tp,
            },
        ));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestF1 {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

/// Best F1 over every distinct score used as threshold; ties go to the lower threshold.
pub fn best_f1_sweep(scores: &[f64], labels: &[u8]) -> Result<(BestF1, PrCurve)> {
    check_positives(labels)?;
    let sweep = descending_counts(scores, labels)?;
    let mut best: Option<(f64, ConfusionCounts)> = None;
    for &(t, c) in &sweep {
        if best.is_none_or(|(_, b)| c.f1() >= b.f1()) {
            best = Some((t, c));
        }
    }
    let (threshold, counts) = best.expect("non-empty scores");
    let curve = PrCurve {
        points: sweep
            .iter()
            .rev()
            .map(|(t, c)| CurvePoint {
                threshold: *t,
                precision: c.precision(),
                recall: c.recall(),
            })
            .collect(),
    };
    Ok((
        BestF1 {
            threshold,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            counts,
        },
        curve,
    ))
}

/// Average precision: `sum_k (R_k - R_{k-1}) P_k` over descending thresholds.
pub fn aupr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_positives(labels)?;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (_, c) in descending_counts(scores, labels)? {
        let r = c.recall();
        area += (r - prev_recall) * c.precision();
        prev_recall = r;
    }
    Ok(area)
}

pub fn fpr(counts: &ConfusionCounts) -> Result<f64> {
    if counts.fp + counts.tn == 0 {
        return Err(CarlaError::Numeric(
            "false-positive rate undefined without negative labels".into(),
        ));
    }
    Ok(ratio(counts.fp, counts.fp + counts.tn))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledMetrics {
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Sums the confusion matrices, then derives precision, recall and F1.
pub fn aggregate(counts: &[ConfusionCounts]) -> Result<PooledMetrics> {
    if counts.is_empty() {
        return Err(CarlaError::Data("nothing to aggregate".into()));
    }
    let mut total = ConfusionCounts::default();
    counts.iter().for_each(|c| total.add(c));
    Ok(PooledMetrics {
        counts: total,
        precision: total.precision(),
        recall: total.recall(),
        f1: total.f1(),
    })
}

/// Maximal runs `[start, end)` of positive labels.
pub fn anomaly_runs(labels: &[u8]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut t = 0;
    while t < labels.len() {
        if labels[t] != 0 {
            let start = t;
            while t < labels.len() && labels[t] != 0 {
                t += 1;
            }
            runs.push((start, t));
        } else {
            t += 1;
        }
    }
    runs
}

/// Marks a whole labelled run as detected when any point inside it is.
pub fn point_adjust(preds: &[u8], labels: &[u8]) -> Result<Vec<u8>> {
    check_lengths(preds.len(), labels.len())?;
    let mut out = preds.to_vec();
    for (s, e) in anomaly_runs(labels) {
        if preds[s..e].iter().any(|&p| p != 0) {
            out[s..e].iter_mut().for_each(|p| *p = 1);
        }
    }
    Ok(out)
}

/// Scores whose thresholding equals point-adjusting the thresholded raw
/// scores: every point of a labelled run takes the run maximum.
pub fn point_adjust_scores(scores: &[f64], labels: &[u8]) -> Result<Vec<f64>> {
    check_lengths(scores.len(), labels.len())?;
    let mut out = scores.to_vec();
    for (s, e) in anomaly_runs(labels) {
        let max = scores[s..e].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out[s..e].iter_mut().for_each(|v| *v = max);
    }
    Ok(out)
}

/// I.i.d. standard normal scores.
pub fn random_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = RandomSource::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityMetrics {
    pub name: String,
    pub points: usize,
    pub prevalence: f64,
    pub best: BestF1,
    pub aupr: f64,
    /// At the best-F1 threshold; `None` when the entity has no normal points.
    pub fpr: Option<f64>,
    /// Best F1 after point adjustment. Inflated; never used for selection.
    pub point_adjusted: BestF1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entities: Vec<EntityMetrics>,
    pub pooled: PooledMetrics,
    pub pooled_fpr: Option<f64>,
    pub pooled_point_adjusted: PooledMetrics,
    pub aupr_mean: f64,
    /// Population standard deviation across entities.
    pub aupr_std: f64,
}

pub fn entity_metrics(name: &str, scores: &[f64], labels: &[u8]) -> Result<EntityMetrics> {
    let (best, _) = best_f1_sweep(scores, labels)?;
    let (point_adjusted, _) = best_f1_sweep(&point_adjust_scores(scores, labels)?, labels)?;
    Ok(EntityMetrics {
        name: name.to_string(),
        points: labels.len(),
        prevalence: ratio(labels.iter().filter(|&&l| l != 0).count() as u64, labels.len() as u64),
        aupr: aupr(scores, labels)?,
        fpr: fpr(&best.counts).ok(),
        best,
        point_adjusted,
    })
}

/// Per-entity metrics at each entity's own best threshold, pooled counts and
/// AU-PR mean and spread.
pub fn benchmark_report(entities: &[(String, Vec<f64>, Vec<u8>)]) -> Result<EvalReport> {
    if entities.is_empty() {
        return Err(CarlaError::Data("no entities to evaluate".into()));
    }
    let metrics = entities
        .iter()
        .map(|(name, scores, labels)| {
            entity_metrics(name, scores, labels)
                .map_err(|e| CarlaError::Data(format!("entity {name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled = aggregate(&metrics.iter().map(|m| m.best.counts).collect::<Vec<_>>())?;
    let pooled_point_adjusted =
        aggregate(&metrics.iter().map(|m| m.point_adjusted.counts).collect::<Vec<_>>())?;
    let n = metrics.len() as f64;
    let aupr_mean = metrics.iter().map(|m| m.aupr).sum::<f64>() / n;
    let aupr_std = (metrics
        .iter()
        .map(|m| (m.aupr - aupr_mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(EvalReport {
        entities: metrics,
        pooled_fpr: fpr(&pooled.counts).ok(),
        pooled,
        pooled_point_adjusted,
        aupr_mean,
        aupr_std,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn to_markdown(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {title}\n");
        let _ = writeln!(
            s,
            "| Entity | Prec | Rec | F1 | AU-PR | FPR | Threshold | PA-Prec* | PA-Rec* | PA-F1* |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|");
        for m in &self.entities {
            let _ = writeln!(
                s,
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {:.6} | {:.4} | {:.4} | {:.4} |",
                m.name,
                m.best.precision,
                m.best.recall,
                m.best.f1,
                m.aupr,
                opt(m.fpr),
                m.best.threshold,
                m.point_adjusted.precision,
                m.point_adjusted.recall,
                m.point_adjusted.f1,
            );
        }
        let _ = writeln!(
            s,
            "| **pooled** | {:.4} | {:.4} | {:.4} | {:.4} ± {:.4} | {} | | {:.4} | {:.4} | {:.4} |",
            self.pooled.precision,
            self.pooled.recall,
            self.pooled.f1,
            self.aupr_mean,
            self.aupr_std,
            opt(self.pooled_fpr),
            self.pooled_point_adjusted.precision,
            self.pooled_point_adjusted.recall,
            self.pooled_point_adjusted.f1,
        );
        let _ = writeln!(
            s,
            "\nPooled scores come from summed confusion matrices. AU-PR is mean ± population std across entities.\n\
             \\* Point-adjusted columns count a whole anomaly segment as found when any point in it is flagged. \
             They overstate detection quality and are not used to pick thresholds."
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY_LABELS: [u8; 12] = [0, 1, 1, 1, 1, 1, 1, 1, 0, 0, 1, 0];
    const TOY_PREDS: [u8; 12] = [0, 0, 0, 1, 1, 0, 0, 0, 1, 0, 0, 0];

    #[test]
    fn confusion_examples() {
        let c = confusion(&[1; 4], &[1; 4]).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (4, 0, 0, 0));
        let c = confusion(&[0; 3], &[1; 3]).unwrap();
        assert_eq!(c.fp, 3);
        assert!(confusion(&[0; 3], &[1; 2]).is_err());
    }

    #[test]
    fn toy_sequence_before_and_after_adjustment() {
        let c = confusion(&TOY_LABELS, &TOY_PREDS).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (2, 1, 3, 6));
        let adjusted = point_adjust(&TOY_PREDS, &TOY_LABELS).unwrap();
        assert_eq!(adjusted, vec![0, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0]);
        let c = confusion(&TOY_LABELS, &adjusted).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (7, 1, 3, 1));
        assert_eq!(c.f1(), 0.875);
    }

    #[test]
    fn adjustment_edge_cases() {
        let labels = [0, 1, 1, 0];
        assert_eq!(point_adjust(&[0; 4], &labels).unwrap(), vec![0; 4]);
        assert_eq!(point_adjust(&[1, 0, 1, 1], &[0; 4]).unwrap(), vec![1, 0, 1, 1]);
    }

    #[test]
    fn sweep_examples() {
        let (best, curve) = best_f1_sweep(&[0.1, 0.9, 0.8, 0.2], &[0, 1, 1, 0]).unwrap();
        assert_eq!(best.f1, 1.0);
        assert_eq!(best.threshold, 0.8);
        assert_eq!(curve.points.len(), 4);
        assert!(curve.points.windows(2).all(|w| w[0].recall >= w[1].recall));

        let labels = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
        let (best, _) = best_f1_sweep(&[0.5; 10], &labels).unwrap();
        assert!((best.f1 - 0.6 / 1.3).abs() < 1e-12);

        let (best, _) = best_f1_sweep(&[0.3, 0.1, 0.2], &[1, 1, 1]).unwrap();
        assert_eq!((best.f1, best.threshold), (1.0, 0.1));

        assert!(best_f1_sweep(&[0.1, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn sweep_ties_prefer_lower_threshold() {
        // thresholds 0.9 and 0.6 both give F1 = 2/3
        let scores = [0.9, 0.8, 0.7, 0.6];
        let labels = [1, 0, 0, 1];
        let at_high = confusion(&labels, &threshold_predictions(&scores, 0.9)).unwrap();
        assert!((at_high.f1() - 2.0 / 3.0).abs() < 1e-12);
        let (best, _) = best_f1_sweep(&scores, &labels).unwrap();
        assert!((best.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(best.threshold, 0.6);
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[0.1, 0.9, 0.8, 0.2], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(aupr(&[0.9, 0.1, 0.2, 0.3], &[1, 0, 0, 0]).unwrap(), 1.0);
        // ranking: pos, neg, pos -> (1/2)*1 + (1/2)*(2/3)
        let v = aupr(&[0.9, 0.5, 0.1], &[1, 0, 1]).unwrap();
        assert!((v - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn fpr_examples() {
        let c = |fp, tn| ConfusionCounts { tp: 0, fp, tn, fn_: 0 };
        assert_eq!(fpr(&c(1, 3)).unwrap(), 0.25);
        assert_eq!(fpr(&c(0, 3)).unwrap(), 0.0);
        assert_eq!(fpr(&c(2, 0)).unwrap(), 1.0);
        assert!(fpr(&c(0, 0)).is_err());
    }

    #[test]
    fn pooled_is_not_mean_of_f1() {
        let a = ConfusionCounts { tp: 1, fp: 0, tn: 0, fn_: 0 };
        let b = ConfusionCounts { tp: 0, fp: 1, tn: 0, fn_: 1 };
        let pooled = aggregate(&[a, b]).unwrap();
        assert_eq!((pooled.precision, pooled.recall, pooled.f1), (0.5, 0.5, 0.5));
        let big = ConfusionCounts { tp: 90, fp: 10, tn: 900, fn_: 0 };
        let small = ConfusionCounts { tp: 0, fp: 5, tn: 90, fn_: 5 };
        let pooled = aggregate(&[big, small]).unwrap().f1;
        let mean = (big.f1() + small.f1()) / 2.0;
        assert!((pooled - mean).abs() > 0.1);
        assert_eq!(aggregate(&[a, a]).unwrap().f1, aggregate(&[a]).unwrap().f1);
    }

    #[test]
    fn random_scores_are_seeded() {
        assert_eq!(random_scores(100, 5), random_scores(100, 5));
        assert_ne!(random_scores(100, 5), random_scores(100, 6));
    }

    #[test]
    fn report_arithmetic() {
        let mk = |scores: Vec<f64>, labels: Vec<u8>| ("e".to_string(), scores, labels);
        let one = benchmark_report(&[mk(vec![0.1, 0.9, 0.4, 0.3], vec![0, 1, 0, 1])]).unwrap();
        assert_eq!(one.pooled.counts, one.entities[0].best.counts);
        assert_eq!(one.aupr_std, 0.0);
        assert!(one.to_markdown("t").contains("pooled"));
    }
}
