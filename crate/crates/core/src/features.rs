//! Per-sample statistical summaries and Fisher-score class separability.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesSample;
use crate::error::FeatureError;

/// Variance guard in the Fisher-score denominator.
pub const FISHER_EPSILON: f64 = 1e-12;

/// Default number of features kept per class pair.
pub const DEFAULT_TOP_N: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub variance: f64,
    pub std_dev: f64,
    pub median: f64,
    /// Lag (in steps) of the strongest autocorrelation peak, if any.
    pub dominant_period: Option<usize>,
    /// Least-squares trend, value units per step. Absent when `w < 2`.
    pub slope: Option<f64>,
    pub mean_crossings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub channels: Vec<ChannelStats>,
}

pub const FEATURE_FIELDS: [&str; 9] = [
    "min",
    "max",
    "mean",
    "variance",
    "std_dev",
    "median",
    "dominant_period",
    "slope",
    "mean_crossings",
];

impl ChannelStats {
    fn field(&self, name: &str) -> Option<f64> {
        match name {
            "min" => Some(self.min),
            "max" => Some(self.max),
            "mean" => Some(self.mean),
            "variance" => Some(self.variance),
            "std_dev" => Some(self.std_dev),
            "median" => Some(self.median),
            "dominant_period" => self.dominant_period.map(|p| p as f64),
            "slope" => self.slope,
            "mean_crossings" => Some(self.mean_crossings as f64),
            _ => None,
        }
    }
}

impl StatsSummary {
    /// Every scalar feature as `("ch<c>.<field>", value)`, channels 1-based.
    pub fn scalar_features(&self) -> Vec<(String, Option<f64>)> {
        self.channels
            .iter()
            .enumerate()
            .flat_map(|(c, ch)| {
                FEATURE_FIELDS
                    .iter()
                    .map(move |f| (format!("ch{}.{f}", c + 1), ch.field(f)))
            })
            .collect()
    }

    /// Prompt-facing rendering, one line per channel.
    pub fn render(&self) -> String {
        self.channels
            .iter()
            .enumerate()
            .map(|(c, ch)| {
                let period = ch
                    .dominant_period
                    .map_or_else(|| "none".to_string(), |p| format!("{p} steps"));
                let slope = ch.slope.map_or_else(|| "n/a".to_string(), fmt_value);
                format!(
                    "Channel {}: min={}, max={}, mean={}, variance={}, std={}, median={}, \
                     dominant period={}, trend slope={} per step, mean crossings={}",
                    c + 1,
                    fmt_value(ch.min),
                    fmt_value(ch.max),
                    fmt_value(ch.mean),
                    fmt_value(ch.variance),
                    fmt_value(ch.std_dev),
                    fmt_value(ch.median),
                    period,
                    slope,
                    ch.mean_crossings
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Fixed-precision number formatting used in prompts and bank bullets.
pub fn fmt_value(v: f64) -> String {
    let s = format!("{v:.4}");
    if s == "-0.0000" {
        "0.0000".to_string()
    } else {
        s
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_variance(xs: &[f64], mu: f64) -> f64 {
    xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn slope(xs: &[f64], mu: f64) -> f64 {
    let n = xs.len() as f64;
    let t_mean = (n - 1.0) / 2.0;
    let (num, den) = xs
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(num, den), (t, x)| {
            let dt = t as f64 - t_mean;
            (num + dt * (x - mu), den + dt * dt)
        });
    num / den
}

/// Normalized (biased) autocorrelation of the mean-centred series at `lag`.
fn autocorrelation(centered: &[f64], energy: f64, lag: usize) -> f64 {
    let s: f64 = centered
        .iter()
        .zip(&centered[lag..])
        .map(|(a, b)| a * b)
        .sum();
    s / energy
}

fn dominant_period(xs: &[f64], mu: f64) -> Option<usize> {
    let centered: Vec<f64> = xs.iter().map(|x| x - mu).collect();
    let energy: f64 = centered.iter().map(|d| d * d).sum();
    if energy <= 1e-20 * xs.len() as f64 * mu.powi(2).max(1.0) {
        return None;
    }
    let max_lag = xs.len() / 2;
    if max_lag < 2 {
        return None;
    }
    let acf: Vec<f64> = (0..=max_lag + 1)
        .map(|l| autocorrelation(&centered, energy, l))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for lag in 2..=max_lag {
        let r = acf[lag];
        let is_peak = acf[lag - 1] < r && r >= acf[lag + 1] && r > 0.0;
        if is_peak && best.map_or(true, |(_, b)| r > b) {
            best = Some((lag, r));
        }
    }
    best.map(|(lag, _)| lag)
}

fn mean_crossings(xs: &[f64], mu: f64) -> usize {
    xs.windows(2)
        .filter(|w| (w[0] - mu) * (w[1] - mu) < 0.0)
        .count()
}

fn channel_stats(xs: &[f64]) -> ChannelStats {
    let mu = mean(xs);
    let variance = population_variance(xs, mu);
    let enough = xs.len() >= 2;
    ChannelStats {
        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: mu,
        variance,
        std_dev: variance.sqrt(),
        median: median(xs),
        dominant_period: if enough { dominant_period(xs, mu) } else { None },
        slope: enough.then(|| slope(xs, mu)),
        mean_crossings: mean_crossings(xs, mu),
    }
}

pub fn summarize(sample: &TimeSeriesSample) -> Result<StatsSummary, FeatureError> {
    if sample.values.is_empty() || sample.values.iter().any(Vec::is_empty) {
        return Err(FeatureError::EmptyInput);
    }
    Ok(StatsSummary {
        channels: sample.values.iter().map(|c| channel_stats(c)).collect(),
    })
}

/// `(μa − μb)² / (σa² + σb² + ε)` with population variances.
pub fn fisher_score(values_a: &[f64], values_b: &[f64]) -> Result<f64, FeatureError> {
    if values_a.is_empty() || values_b.is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    let (ma, mb) = (mean(values_a), mean(values_b));
    let (va, vb) = (
        population_variance(values_a, ma),
        population_variance(values_b, mb),
    );
    Ok((ma - mb).powi(2) / (va + vb + FISHER_EPSILON))
}

/// Threshold between two class means, weighted so that it sits the same
/// number of standard deviations from each mean.
pub fn decision_threshold(mean_a: f64, std_a: f64, mean_b: f64, std_b: f64) -> f64 {
    if std_a + std_b < 1e-9 {
        (mean_a + mean_b) / 2.0
    } else {
        (mean_a * std_b + mean_b * std_a) / (std_a + std_b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub feature: String,
    pub raw_score: f64,
    pub normalized_score: f64,
    pub threshold: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Label of the class with the larger feature mean (first class on ties).
    pub higher_class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub class_pair: (String, String),
    pub ranked_features: Vec<RankedFeature>,
}

impl SeparabilityReport {
    /// One human-readable descriptor line per retained feature.
    pub fn descriptors(&self) -> Vec<String> {
        let (a, b) = &self.class_pair;
        self.ranked_features
            .iter()
            .map(|f| {
                let lower = if &f.higher_class == a { b } else { a };
                let (hi_mean, lo_mean) = if &f.higher_class == a {
                    (f.mean_a, f.mean_b)
                } else {
                    (f.mean_b, f.mean_a)
                };
                format!(
                    "Class '{a}' vs class '{b}': {} (normalized Fisher score {:.3}) separates them; \
                     decision threshold {}: values above suggest '{}' (class mean {}), \
                     values below suggest '{}' (class mean {}).",
                    f.feature,
                    f.normalized_score,
                    fmt_value(f.threshold),
                    f.higher_class,
                    fmt_value(hi_mean),
                    lower,
                    fmt_value(lo_mean),
                )
            })
            .collect()
    }
}

fn feature_columns(summaries: &[StatsSummary]) -> BTreeMap<usize, (String, Vec<f64>)> {
    let mut columns: BTreeMap<usize, (String, Vec<f64>)> = BTreeMap::new();
    for s in summaries {
        for (i, (name, value)) in s.scalar_features().into_iter().enumerate() {
            let entry = columns.entry(i).or_insert_with(|| (name, Vec::new()));
            if let Some(v) = value {
                entry.1.push(v);
            }
        }
    }
    // Sorting makes every statistic independent of sample order.
    for (_, values) in columns.values_mut() {
        values.sort_by(f64::total_cmp);
    }
    columns
}

/// Scores every scalar feature for one class pair, max-normalizes the raw
/// Fisher scores and keeps the `top_n` best.
pub fn rank_features(
    train: &BTreeMap<String, Vec<StatsSummary>>,
    pair: (&str, &str),
    top_n: usize,
) -> Result<SeparabilityReport, FeatureError> {
    let get = |label: &str| {
        train
            .get(label)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| FeatureError::UnknownClass(label.to_string()))
    };
    let cols_a = feature_columns(get(pair.0)?);
    let cols_b = feature_columns(get(pair.1)?);

    let mut ranked = Vec::new();
    for (idx, (name, a)) in &cols_a {
        let Some((_, b)) = cols_b.get(idx) else { continue };
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let raw = fisher_score(a, b)?;
        let (ma, mb) = (mean(a), mean(b));
        let (sa, sb) = (
            population_variance(a, ma).sqrt(),
            population_variance(b, mb).sqrt(),
        );
        ranked.push((
            *idx,
            RankedFeature {
                feature: name.clone(),
                raw_score: raw,
                normalized_score: 0.0,
                threshold: decision_threshold(ma, sa, mb, sb),
                mean_a: ma,
                mean_b: mb,
                higher_class: if mb > ma { pair.1 } else { pair.0 }.to_string(),
            },
        ));
    }
    let max_raw = ranked
        .iter()
        .map(|(_, f)| f.raw_score)
        .fold(0.0_f64, f64::max);
    for (_, f) in &mut ranked {
        f.normalized_score = if max_raw > 0.0 { f.raw_score / max_raw } else { 0.0 };
    }
    ranked.sort_by(|(ia, a), (ib, b)| {
        b.normalized_score
            .total_cmp(&a.normalized_score)
            .then(ia.cmp(ib))
    });
    Ok(SeparabilityReport {
        class_pair: (pair.0.to_string(), pair.1.to_string()),
        ranked_features: ranked.into_iter().take(top_n).map(|(_, f)| f).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uni(values: Vec<f64>) -> TimeSeriesSample {
        TimeSeriesSample::univariate("s", "a", values).unwrap()
    }

    #[test]
    fn constant_series() {
        let s = summarize(&uni(vec![1.0; 4])).unwrap();
        let c = &s.channels[0];
        assert_eq!((c.mean, c.variance, c.mean_crossings), (1.0, 0.0, 0));
        assert_eq!(c.slope, Some(0.0));
        assert_eq!(c.dominant_period, None);
    }

    #[test]
    fn ramp_series() {
        let c = &summarize(&uni(vec![0.0, 1.0, 2.0, 3.0])).unwrap().channels[0];
        assert!((c.mean - 1.5).abs() < 1e-12);
        assert!((c.variance - 1.25).abs() < 1e-12);
        assert!((c.slope.unwrap() - 1.0).abs() < 1e-12);
        assert!((c.median - 1.5).abs() < 1e-12);
        assert_eq!(c.mean_crossings, 1);
    }

    #[test]
    fn single_step_has_no_trend_or_period() {
        let c = &summarize(&uni(vec![3.0])).unwrap().channels[0];
        assert_eq!((c.slope, c.dominant_period), (None, None));
    }

    #[test]
    fn empty_sample_rejected() {
        let s = TimeSeriesSample {
            sample_id: "x".into(),
            label: "a".into(),
            values: vec![vec![]],
        };
        assert_eq!(summarize(&s), Err(FeatureError::EmptyInput));
    }

    #[test]
    fn fisher_examples() {
        assert_eq!(fisher_score(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let f = fisher_score(&[0.0, 2.0], &[4.0, 6.0]).unwrap();
        assert!((f - 8.0).abs() < 1e-9);
        let big = fisher_score(&[0.0, 0.0], &[2.0, 2.0]).unwrap();
        assert!(big.is_finite() && big > 1e12);
        assert_eq!(fisher_score(&[], &[1.0]), Err(FeatureError::EmptyInput));
    }

    #[test]
    fn thresholds() {
        assert_eq!(decision_threshold(0.0, 1.0, 4.0, 1.0), 2.0);
        assert_eq!(decision_threshold(0.0, 0.0, 4.0, 0.0), 2.0);
        // Closer to the tighter class.
        assert!((decision_threshold(0.0, 1.0, 4.0, 3.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_unknown_class() {
        let train = BTreeMap::new();
        assert_eq!(
            rank_features(&train, ("a", "b"), 3),
            Err(FeatureError::UnknownClass("a".into()))
        );
    }

    #[test]
    fn mean_shift_ranks_first() {
        // Two classes that differ only by an offset: every location feature
        // separates them equally, spread features not at all.
        let base = [vec![0.0, 1.0, 0.0, -1.0], vec![0.0, 2.0, 0.0, -2.0], vec![0.0, 1.5, 0.0, -1.5]];
        let mut train = BTreeMap::new();
        for (label, offset) in [("a", 0.0), ("b", 10.0)] {
            let sums = base
                .iter()
                .map(|v| summarize(&uni(v.iter().map(|x| x + offset).collect())).unwrap())
                .collect();
            train.insert(label.to_string(), sums);
        }
        let report = rank_features(&train, ("a", "b"), 3).unwrap();
        let top = &report.ranked_features[0];
        assert_eq!(top.normalized_score, 1.0);
        assert!(["ch1.min", "ch1.max", "ch1.mean", "ch1.median"].contains(&top.feature.as_str()));
        assert_eq!(top.higher_class, "b");
        assert!(report.ranked_features.len() == 3);
        assert!(report.descriptors()[0].contains(&fmt_value(top.threshold)));
    }
}
