// SPDX-License-Identifier: MIT OR Apache-2.0

//! Window labels and scores from a trained classifier, and their projection
//! onto individual timesteps.

use serde::{Deserialize, Serialize};

use crate::dataset::{sliding_windows, TimeSeries, Window};
use crate::encoder::Classifier;
use crate::error::{CarlaError, Result};
use crate::nn::Scalar;

/// `0` (normal) iff the majority class is among the most probable classes.
pub fn window_label(probs: &[f64], majority: usize) -> u8 {
    let pm = probs[majority];
    u8::from(probs.iter().any(|&p| p > pm))
}

pub fn window_score(probs: &[f64], majority: usize) -> f64 {
    (1.0 - probs[majority]).clamp(0.0, 1.0)
}

/// How window scores become point scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    /// Each point takes the score of the window ending at it; points before
    /// the first full window take the first window's score.
    #[default]
    Causal,
    /// Each point takes the mean score of every window covering it.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointScoreSeries {
    pub scores: Vec<f64>,
}

impl PointScoreSeries {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Spreads stride-1 window scores over a series of length `len`.
pub fn project_scores(
    window_scores: &[f64],
    len: usize,
    window_size: usize,
    projection: Projection,
) -> Result<PointScoreSeries> {
    if window_size == 0 || window_size > len {
        return Err(CarlaError::Data(format!(
            "window size {window_size} does not fit a series of length {len}"
        )));
    }
    let m = len - window_size + 1;
    if window_scores.len() != m {
        return Err(CarlaError::Shape(format!(
            "expected {m} window scores for length {len}, got {}",
            window_scores.len()
        )));
    }
    let scores = match projection {
        Projection::Causal => (0..len)
            .map(|t| window_scores[(t + 1).saturating_sub(window_size)])
            .collect(),
        Projection::Mean => {
            let mut prefix = vec![0.0; m + 1];
            for (i, s) in window_scores.iter().enumerate() {
                prefix[i + 1] = prefix[i] + s;
            }
            (0..len)
                .map(|t| {
                    let lo = (t + 1).saturating_sub(window_size);
                    let hi = t.min(m - 1);
                    (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64
                })
                .collect()
        }
    };
    Ok(PointScoreSeries { scores })
}

/// Class probabilities of every stride-1 window of `series`.
pub fn window_probabilities<S: Scalar>(
    classifier: &Classifier<S>,
    series: &TimeSeries,
    window_size: usize,
    batch: usize,
) -> Result<Vec<Vec<f64>>> {
    let views = sliding_windows(series, window_size, 1)?;
    let mut out = Vec::with_capacity(views.len());
    for chunk in views.chunks(batch.max(1)) {
        let windows: Vec<Window> = chunk.iter().map(|&v| series.window(v)).collect();
        let refs: Vec<&Window> = windows.iter().collect();
        out.extend(classifier.predict_windows(&refs, batch)?.to_f64_rows());
    }
    Ok(out)
}

/// Point scores and window labels of a test series.
pub struct Detection {
    pub points: PointScoreSeries,
    pub window_scores: Vec<f64>,
    pub window_labels: Vec<u8>,
}

pub fn score_series<S: Scalar>(
    classifier: &Classifier<S>,
    majority: usize,
    series: &TimeSeries,
    window_size: usize,
    projection: Projection,
    batch: usize,
) -> Result<Detection> {
    if majority >= classifier.classes() {
        return Err(CarlaError::Config(format!(
            "majority class {majority} out of range for {} classes",
            classifier.classes()
        )));
    }
    let probs = window_probabilities(classifier, series, window_size, batch)?;
    let window_scores: Vec<f64> = probs.iter().map(|p| window_score(p, majority)).collect();
    let window_labels = probs.iter().map(|p| window_label(p, majority)).collect();
    let points = project_scores(&window_scores, series.len(), window_size, projection)?;
    Ok(Detection {
        points,
        window_scores,
        window_labels,
    })
}
