// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic anomaly injection used to build negative samples.
//!
//! Two point types (`Global`, `Contextual`) replace one value with a spike
//! several standard deviations from a local mean. Three subsequence types
//! (`Seasonal`, `Trend`, `Shapelet`) rewrite a contiguous segment. Every
//! random draw is returned in an [`AnomalySpec`] so an injection can be
//! inspected or replayed.
//!
//! Index conventions: `Seasonal` works on the half-open segment `[s, e)`,
//! `Trend` and `Shapelet` on the closed segment `[s, e]`. Statistics are
//! population (divide-by-n) moments.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Window;
use crate::error::CarlaError;

/// Seeded generator used for every random draw in the crate.
pub type RandomSource = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyType {
    Global,
    Contextual,
    Seasonal,
    Trend,
    Shapelet,
}

impl AnomalyType {
    pub const ALL: [AnomalyType; 5] = [
        AnomalyType::Seasonal,
        AnomalyType::Trend,
        AnomalyType::Global,
        AnomalyType::Contextual,
        AnomalyType::Shapelet,
    ];

    pub fn is_point(self) -> bool {
        matches!(self, AnomalyType::Global | AnomalyType::Contextual)
    }

    pub fn name(self) -> &'static str {
        match self {
            AnomalyType::Global => "global",
            AnomalyType::Contextual => "contextual",
            AnomalyType::Seasonal => "seasonal",
            AnomalyType::Trend => "trend",
            AnomalyType::Shapelet => "shapelet",
        }
    }
}

impl fmt::Display for AnomalyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnomalyType {
    type Err = CarlaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AnomalyType::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CarlaError::Config(format!("unknown anomaly type {s:?}")))
    }
}

/// Frequency factor for the seasonal anomaly, kept as an exact fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeasonalFactor {
    pub numerator: usize,
    pub denominator: usize,
}

impl SeasonalFactor {
    pub const ALL: [SeasonalFactor; 4] = [
        SeasonalFactor::new(1, 3),
        SeasonalFactor::new(1, 2),
        SeasonalFactor::new(2, 1),
        SeasonalFactor::new(3, 1),
    ];

    pub const fn new(numerator: usize, denominator: usize) -> Self {
        Self {
            numerator,
            denominator,
        }
    }

    pub fn value(self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    /// `floor(offset * k)` without floating-point rounding.
    fn scale(self, offset: usize) -> usize {
        offset * self.numerator / self.denominator
    }
}

/// What was done to one dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimInjection {
    pub dim: usize,
    pub anomaly_type: AnomalyType,
    /// `g`, `x` or `b` in `[3, 5]`, or the seasonal factor as a real.
    pub coefficient: Option<f64>,
    /// Spike direction for point anomalies (+1 or -1).
    pub sign: Option<i8>,
    /// Mean and standard deviation the injection was scaled by.
    pub local_mean: Option<f64>,
    pub local_std: Option<f64>,
    /// Half-open range of timesteps the injection may have changed.
    pub region: (usize, usize),
}

/// Full record of one call to [`Injector::inject`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    /// Start point shared by all affected dimensions.
    pub start: usize,
    /// End point (exclusive for seasonal, inclusive for trend and shapelet).
    pub end: usize,
    pub dims: Vec<usize>,
    pub injections: Vec<DimInjection>,
}

impl AnomalySpec {
    /// Re-applies the recorded draws to `w`, reproducing the injected window.
    pub fn apply(&self, w: &Window) -> Window {
        let mut out = w.clone();
        for inj in &self.injections {
            let (s, e) = (self.start, self.end);
            let channel = out.channel_mut(inj.dim);
            match inj.anomaly_type {
                AnomalyType::Global | AnomalyType::Contextual => {
                    let mean = inj.local_mean.unwrap_or(0.0);
                    let std = inj.local_std.unwrap_or(0.0);
                    let sign = inj.sign.unwrap_or(1) as f64;
                    channel[s] = mean + sign * inj.coefficient.unwrap_or(0.0) * std;
                }
                AnomalyType::Seasonal => {
                    let k = SeasonalFactor::ALL
                        .into_iter()
                        .find(|f| Some(f.value()) == inj.coefficient)
                        .unwrap_or(SeasonalFactor::new(1, 1));
                    inject_seasonal(channel, s, e, k);
                }
                AnomalyType::Trend => {
                    let shift = inj.coefficient.unwrap_or(0.0) * inj.local_std.unwrap_or(0.0);
                    channel[s..=e].iter_mut().for_each(|v| *v += shift);
                }
                AnomalyType::Shapelet => inject_shapelet(channel, s, e),
            }
        }
        out
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Replaces `channel[s]` with `mean ± g·std` of the whole channel.
pub fn inject_global(channel: &mut [f64], s: usize, g: f64, positive: bool) -> (f64, f64) {
    let (mean, std) = mean_std(channel);
    channel[s] = if positive { mean + g * std } else { mean - g * std };
    (mean, std)
}

/// Replaces `channel[s]` with `mean ± x·std` of the context `[ctx_start, ctx_end)`.
pub fn inject_contextual(
    channel: &mut [f64],
    s: usize,
    x: f64,
    positive: bool,
    ctx_start: usize,
    ctx_end: usize,
) -> (f64, f64) {
    let (mean, std) = mean_std(&channel[ctx_start..ctx_end]);
    channel[s] = if positive { mean + x * std } else { mean - x * std };
    (mean, std)
}

/// Resamples `[s, e)` at a different frequency, reading from the original values.
pub fn inject_seasonal(channel: &mut [f64], s: usize, e: usize, k: SeasonalFactor) {
    let n = e - s;
    let original = channel[s..e].to_vec();
    for t in s..e {
        let scaled = k.scale(t - s);
        let src = if k.numerator > k.denominator {
            scaled % n
        } else if k.numerator < k.denominator {
            scaled
        } else {
            t - s
        };
        channel[t] = original[src];
    }
}

/// Shifts `[s, e]` by `b` standard deviations of the whole channel.
pub fn inject_trend(channel: &mut [f64], s: usize, e: usize, b: f64) -> f64 {
    let (_, std) = mean_std(channel);
    channel[s..=e].iter_mut().for_each(|v| *v += b * std);
    std
}

/// Flattens `[s, e]` to the value at `s`.
pub fn inject_shapelet(channel: &mut [f64], s: usize, e: usize) {
    let level = channel[s];
    channel[s..=e].iter_mut().for_each(|v| *v = level);
}

/// Largest number of dimensions one injection may touch.
pub fn max_affected_dims(dims: usize) -> usize {
    if dims <= 10 {
        1
    } else {
        dims.div_ceil(10)
    }
}

/// Distinct, sorted dimension indices to inject into.
pub fn choose_dims(dims: usize, rng: &mut RandomSource) -> Vec<usize> {
    let count = rng.gen_range(1..=max_affected_dims(dims));
    let mut chosen = index::sample(rng, dims, count).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Draws anomaly types from a configurable pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Injector {
    types: Vec<AnomalyType>,
}

impl Default for Injector {
    fn default() -> Self {
        Self {
            types: AnomalyType::ALL.to_vec(),
        }
    }
}

impl Injector {
    pub fn new(types: Vec<AnomalyType>) -> crate::Result<Self> {
        if types.is_empty() {
            return Err(CarlaError::Config("anomaly type pool is empty".into()));
        }
        Ok(Self { types })
    }

    /// Pool with every type except `dropped`.
    pub fn without(dropped: &[AnomalyType]) -> crate::Result<Self> {
        Self::new(
            AnomalyType::ALL
                .into_iter()
                .filter(|t| !dropped.contains(t))
                .collect(),
        )
    }

    pub fn types(&self) -> &[AnomalyType] {
        &self.types
    }

    /// Returns an anomalous copy of `w` and the record of every draw.
    ///
    /// # Panics
    /// If the window has fewer than two timesteps.
    pub fn inject(&self, w: &Window, rng: &mut RandomSource) -> (Window, AnomalySpec) {
        let len = w.len();
        assert!(len >= 2, "injection needs a window of at least 2 steps");
        let dims = choose_dims(w.dims(), rng);

        // `span = e - s`; the closed segment [s, e] then covers at most 90% of the window.
        let max_span = ((len as f64 * 0.9).floor() as usize)
            .saturating_sub(1)
            .max(1);
        let span = rng.gen_range(1..=max_span.min(len - 1));
        let start = rng.gen_range(0..len - span);
        let end = start + span;

        let mut out = w.clone();
        let mut injections = Vec::with_capacity(dims.len());
        for &d in &dims {
            let kind = self.types[rng.gen_range(0..self.types.len())];
            let channel = out.channel_mut(d);
            let inj = match kind {
                AnomalyType::Global => {
                    let g = rng.gen_range(3.0..=5.0);
                    let positive = rng.gen_bool(0.5);
                    let (mean, std) = inject_global(channel, start, g, positive);
                    DimInjection {
                        dim: d,
                        anomaly_type: kind,
                        coefficient: Some(g),
                        sign: Some(if positive { 1 } else { -1 }),
                        local_mean: Some(mean),
                        local_std: Some(std),
                        region: (start, start + 1),
                    }
                }
                AnomalyType::Contextual => {
                    let x = rng.gen_range(3.0..=5.0);
                    let positive = rng.gen_bool(0.5);
                    let (mean, std) = inject_contextual(channel, start, x, positive, start, end + 1);
                    DimInjection {
                        dim: d,
                        anomaly_type: kind,
                        coefficient: Some(x),
                        sign: Some(if positive { 1 } else { -1 }),
                        local_mean: Some(mean),
                        local_std: Some(std),
                        region: (start, start + 1),
                    }
                }
                AnomalyType::Seasonal => {
                    let k = SeasonalFactor::ALL[rng.gen_range(0..SeasonalFactor::ALL.len())];
                    inject_seasonal(channel, start, end, k);
                    DimInjection {
                        dim: d,
                        anomaly_type: kind,
                        coefficient: Some(k.value()),
                        sign: None,
                        local_mean: None,
                        local_std: None,
                        region: (start, end),
                    }
                }
                AnomalyType::Trend => {
                    let b = rng.gen_range(3.0..=5.0);
                    let std = inject_trend(channel, start, end, b);
                    DimInjection {
                        dim: d,
                        anomaly_type: kind,
                        coefficient: Some(b),
                        sign: None,
                        local_mean: None,
                        local_std: Some(std),
                        region: (start, end + 1),
                    }
                }
                AnomalyType::Shapelet => {
                    inject_shapelet(channel, start, end);
                    DimInjection {
                        dim: d,
                        anomaly_type: kind,
                        coefficient: None,
                        sign: None,
                        local_mean: None,
                        local_std: None,
                        region: (start, end + 1),
                    }
                }
            };
            injections.push(inj);
        }
        let spec = AnomalySpec {
            start,
            end,
            dims,
            injections,
        };
        (out, spec)
    }
}

/// [`Injector::inject`] with the full five-type pool.
pub fn inject_anomaly(w: &Window, rng: &mut RandomSource) -> (Window, AnomalySpec) {
    Injector::default().inject(w, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> RandomSource {
        RandomSource::seed_from_u64(seed)
    }

    #[test]
    fn global_spike_examples() {
        let mut w = vec![-1.0, 1.0, -1.0, 1.0];
        inject_global(&mut w, 2, 3.0, true);
        assert_eq!(w, vec![-1.0, 1.0, 3.0, 1.0]);

        let mut w = vec![2.0; 5];
        inject_global(&mut w, 1, 4.0, false);
        assert_eq!(w, vec![2.0; 5]);

        // mean 2, population std 4
        let mut w = vec![0.0, 0.0, 10.0, 0.0, 0.0];
        let (m, s) = inject_global(&mut w, 2, 5.0, false);
        assert_eq!((m, s), (2.0, 4.0));
        assert_eq!(w[2], -18.0);
    }

    #[test]
    fn contextual_spike_examples() {
        let mut w = vec![9.0, 3.0, 3.0, 3.0, 9.0];
        inject_contextual(&mut w, 2, 4.0, true, 1, 4);
        assert_eq!(w[2], 3.0);

        let mut w = vec![0.0, 2.0, 7.0];
        inject_contextual(&mut w, 0, 3.0, true, 0, 2);
        assert_eq!(w[0], 4.0);

        let base = vec![0.3, -1.2, 2.5, 0.0, 1.1];
        let (mut a, mut b) = (base.clone(), base.clone());
        inject_global(&mut a, 3, 4.2, false);
        inject_contextual(&mut b, 3, 4.2, false, 0, base.len());
        assert_eq!(a, b);
    }

    #[test]
    fn seasonal_index_formula() {
        let mut w = vec![1.0, 2.0, 3.0, 4.0];
        inject_seasonal(&mut w, 0, 4, SeasonalFactor::new(2, 1));
        assert_eq!(w, vec![1.0, 3.0, 1.0, 3.0]);

        let mut w = vec![1.0, 2.0, 3.0, 4.0];
        inject_seasonal(&mut w, 0, 4, SeasonalFactor::new(1, 2));
        assert_eq!(w, vec![1.0, 1.0, 2.0, 2.0]);

        for k in SeasonalFactor::ALL {
            let mut w = vec![0.5; 7];
            inject_seasonal(&mut w, 1, 6, k);
            assert_eq!(w, vec![0.5; 7]);
        }
    }

    #[test]
    fn seasonal_leaves_outside_untouched() {
        let mut w: Vec<f64> = (0..10).map(f64::from).collect();
        inject_seasonal(&mut w, 3, 7, SeasonalFactor::new(3, 1));
        assert_eq!(&w[..3], &[0.0, 1.0, 2.0]);
        assert_eq!(&w[7..], &[7.0, 8.0, 9.0]);
        // offsets 0..4 times 3 mod 4 -> 0, 3, 2, 1
        assert_eq!(&w[3..7], &[3.0, 6.0, 5.0, 4.0]);
    }

    #[test]
    fn trend_examples() {
        let mut w = vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        inject_trend(&mut w, 1, 3, 3.0);
        assert_eq!(w, vec![1.0, 2.0, 4.0, 2.0, 1.0, -1.0]);

        let mut w = vec![4.0; 4];
        inject_trend(&mut w, 0, 3, 5.0);
        assert_eq!(w, vec![4.0; 4]);

        let mut w = vec![0.0, 1.0, 0.0, 1.0];
        inject_trend(&mut w, 1, 2, 4.0);
        assert_eq!(w, vec![0.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn shapelet_examples() {
        let mut w = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        inject_shapelet(&mut w, 1, 3);
        assert_eq!(w, vec![1.0, 2.0, 2.0, 2.0, 5.0]);

        let mut w = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        inject_shapelet(&mut w, 0, 4);
        assert_eq!(w, vec![1.0; 5]);

        let mut w = vec![0.0, 7.0, 7.0, 7.0, 1.0];
        inject_shapelet(&mut w, 1, 3);
        assert_eq!(w, vec![0.0, 7.0, 7.0, 7.0, 1.0]);
    }

    #[test]
    fn dim_count_bounds() {
        let mut r = rng(1);
        assert_eq!(choose_dims(1, &mut r), vec![0]);
        for _ in 0..200 {
            assert_eq!(choose_dims(10, &mut r).len(), 1);
        }
        let mut seen = [false; 7];
        for _ in 0..2000 {
            let dims = choose_dims(55, &mut r);
            assert!((1..=6).contains(&dims.len()));
            assert!(dims.windows(2).all(|p| p[0] < p[1]));
            seen[dims.len()] = true;
        }
        assert!(seen[1..=6].iter().all(|&s| s), "every count in [1, 6] drawn");
    }

    #[test]
    fn constant_window_trend_is_identity() {
        let w = Window::new(1, 16, vec![2.5; 16]).unwrap();
        let injector = Injector::new(vec![AnomalyType::Trend]).unwrap();
        let (out, spec) = injector.inject(&w, &mut rng(4));
        assert_eq!(out, w);
        assert_eq!(spec.dims, vec![0]);
    }

    #[test]
    fn injection_is_deterministic_and_replayable() {
        let data: Vec<f64> = (0..3 * 40).map(|i| (i as f64 * 0.37).sin()).collect();
        let w = Window::new(3, 40, data).unwrap();
        for seed in 0..50 {
            let (a, spec_a) = inject_anomaly(&w, &mut rng(seed));
            let (b, spec_b) = inject_anomaly(&w, &mut rng(seed));
            assert_eq!(a, b);
            assert_eq!(spec_a, spec_b);
            assert_eq!(spec_a.apply(&w), a);
        }
    }

    #[test]
    fn anomaly_type_parses() {
        assert_eq!("Seasonal".parse::<AnomalyType>().unwrap(), AnomalyType::Seasonal);
        assert!("spike".parse::<AnomalyType>().is_err());
        assert!(Injector::new(vec![]).is_err());
        assert_eq!(
            Injector::without(&[AnomalyType::Seasonal]).unwrap().types().len(),
            4
        );
    }
}
