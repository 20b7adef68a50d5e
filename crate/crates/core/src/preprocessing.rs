//! Data-engineering rules: tail imputation for continuous variables,
//! conditional-probability encoding for high-cardinality categoricals and
//! the intraoperative time-series cleaning pipeline.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::TimeSeries;
use crate::error::{Error, Result};
use crate::stats;

/// Minimum number of finite values before tail imputation is applied.
pub const TAIL_IMPUTE_MIN_N: usize = 20;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TailImputation {
    pub tail_imputed_low: usize,
    pub tail_imputed_high: usize,
}

/// Replaces values above the 99th percentile by uniform draws on
/// `[p95, p99.5]` and values below the 1st percentile by uniform draws on
/// `[p0.5, p5]`. Percentiles come from the original vector; non-finite
/// entries (missing values) are passed through untouched.
pub fn impute_tails(values: &[f64], seed: u64) -> (Vec<f64>, TailImputation) {
    let sorted = stats::sorted_finite(values);
    let mut out = values.to_vec();
    let mut report = TailImputation::default();
    if sorted.len() < TAIL_IMPUTE_MIN_N {
        return (out, report);
    }
    let q = |p: f64| stats::quantile_sorted(&sorted, p);
    let (p0_5, p1, p5) = (q(0.005), q(0.01), q(0.05));
    let (p95, p99, p99_5) = (q(0.95), q(0.99), q(0.995));
    let mut rng = stats::rng(seed);
    for v in out.iter_mut().filter(|v| v.is_finite()) {
        if *v > p99 {
            *v = uniform(&mut rng, p95, p99_5);
            report.tail_imputed_high += 1;
        } else if *v < p1 {
            *v = uniform(&mut rng, p0_5, p5);
            report.tail_imputed_low += 1;
        }
    }
    (out, report)
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Log-likelihood-ratio encoding of a categorical variable:
/// `ln[P(X = level | Y = 1) / P(X = level | Y = 0)]` with Laplace smoothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalEncoder {
    pub variable: String,
    /// level -> (count among events, count among non-events)
    pub levels: BTreeMap<String, (usize, usize)>,
    pub alpha: f64,
    pub n_events: usize,
    pub n_nonevents: usize,
}

impl CategoricalEncoder {
    pub fn fit(variable: &str, levels: &[&str], outcomes: &[bool], alpha: f64) -> Result<Self> {
        if levels.len() != outcomes.len() {
            return Err(Error::RowMisalignment(format!(
                "{} levels vs {} outcomes for `{variable}`",
                levels.len(),
                outcomes.len()
            )));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("smoothing alpha must be >= 0, got {alpha}")));
        }
        let n_events = outcomes.iter().filter(|&&y| y).count();
        let n_nonevents = outcomes.len() - n_events;
        if n_events == 0 || n_nonevents == 0 {
            return Err(Error::DegenerateOutcome(format!("encoder `{variable}`")));
        }
        let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (&level, &y) in levels.iter().zip(outcomes) {
            let c = counts.entry(level.to_string()).or_default();
            if y {
                c.0 += 1;
            } else {
                c.1 += 1;
            }
        }
        Ok(Self {
            variable: variable.to_string(),
            levels: counts,
            alpha,
            n_events,
            n_nonevents,
        })
    }

    /// Encoded value of `level`; unseen levels map to 0.
    pub fn encode(&self, level: &str) -> f64 {
        let Some(&(c1, c0)) = self.levels.get(level) else {
            return 0.0;
        };
        let k = self.levels.len() as f64;
        let p1 = (c1 as f64 + self.alpha) / (self.n_events as f64 + self.alpha * k);
        let p0 = (c0 as f64 + self.alpha) / (self.n_nonevents as f64 + self.alpha * k);
        if p1 == p0 {
            return 0.0;
        }
        (p1 / p0).ln()
    }

    /// Digest of the fitted counts; used to check that encoding never mutates
    /// the encoder.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.variable.as_bytes());
        for (level, (c1, c0)) in &self.levels {
            h.update(level.as_bytes());
            h.update(c1.to_le_bytes());
            h.update(c0.to_le_bytes());
        }
        h.update(self.alpha.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleaningConfig {
    /// Moving-average width in samples.
    pub window_w: usize,
    /// Robust-SD multiple above which a sample is an extreme value.
    pub extreme_sd: f64,
    /// Robust-SD multiple for isolated peaks and valleys.
    pub peak_sd: f64,
    /// Fraction of samples trimmed from each tail.
    pub tail_fraction: f64,
    /// A series with fewer samples than this after cleaning is unusable.
    pub min_samples: usize,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            window_w: 15,
            extreme_sd: 4.0,
            peak_sd: 3.0,
            tail_fraction: 0.005,
            min_samples: 31,
        }
    }
}

/// Per-signal tallies of each cleaning step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalCleaning {
    pub series: usize,
    pub unusable: usize,
    pub truncated_samples: usize,
    pub duplicates_merged: usize,
    pub range_rejected: usize,
    pub tail_rejected: usize,
    pub knn_repaired: usize,
    pub peaks_smoothed: usize,
}

impl SignalCleaning {
    pub fn merge(&mut self, other: &SignalCleaning) {
        self.series += other.series;
        self.unusable += other.unusable;
        self.truncated_samples += other.truncated_samples;
        self.duplicates_merged += other.duplicates_merged;
        self.range_rejected += other.range_rejected;
        self.tail_rejected += other.tail_rejected;
        self.knn_repaired += other.knn_repaired;
        self.peaks_smoothed += other.peaks_smoothed;
    }
}

/// Cohort-level audit of every cleaning rule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub signals: BTreeMap<String, SignalCleaning>,
    pub variables: BTreeMap<String, TailImputation>,
}

impl CleaningReport {
    pub fn add_signal(&mut self, signal: &str, tally: &SignalCleaning) {
        self.signals.entry(signal.to_string()).or_default().merge(tally);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanedSeries {
    pub series: TimeSeries,
    pub report: SignalCleaning,
    pub usable: bool,
}

/// Runs the cleaning pipeline on one signal of one surgery:
///
/// 1. truncate to `[surgery_start, surgery_end]`;
/// 2. average samples sharing a timestamp;
/// 3. drop values outside the signal's valid range;
/// 4. drop the `floor(tail_fraction * n)` largest and smallest values;
/// 5. replace extremes (more than `extreme_sd` robust SDs from the median) by
///    the mean of their five nearest-in-time unflagged neighbours;
/// 6. replace isolated single-sample peaks/valleys by the centered moving
///    average of their neighbours;
/// 7. flag the series unusable when fewer than `min_samples` remain.
///
/// Repairs change values, never timestamps.
pub fn clean_time_series(ts: &TimeSeries, surgery_start: f64, surgery_end: f64, cfg: &CleaningConfig) -> CleanedSeries {
    let mut report = SignalCleaning {
        series: 1,
        ..Default::default()
    };

    // (1)
    let mut samples: Vec<(f64, f64)> = ts
        .samples
        .iter()
        .copied()
        .filter(|&(t, v)| t >= surgery_start && t <= surgery_end && t.is_finite() && !v.is_nan())
        .collect();
    report.truncated_samples = ts.samples.len() - samples.len();
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));

    // (2)
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(samples.len());
    let mut i = 0;
    while i < samples.len() {
        let t = samples[i].0;
        let mut j = i;
        let mut sum = 0.0;
        while j < samples.len() && samples[j].0 == t {
            sum += samples[j].1;
            j += 1;
        }
        merged.push((t, sum / (j - i) as f64));
        report.duplicates_merged += j - i - 1;
        i = j;
    }

    // (3)
    let (lo, hi) = ts.valid_range;
    let before = merged.len();
    merged.retain(|&(_, v)| v >= lo && v <= hi);
    report.range_rejected = before - merged.len();

    // (4)
    let k = (cfg.tail_fraction * merged.len() as f64).floor() as usize;
    if k > 0 && merged.len() > 2 * k {
        let mut order: Vec<usize> = (0..merged.len()).collect();
        order.sort_by(|&a, &b| merged[a].1.total_cmp(&merged[b].1).then(a.cmp(&b)));
        let mut keep = vec![true; merged.len()];
        for &idx in order[..k].iter().chain(&order[order.len() - k..]) {
            keep[idx] = false;
        }
        let mut it = keep.iter();
        merged.retain(|_| *it.next().unwrap());
        report.tail_rejected = 2 * k;
    }

    // (5)
    if merged.len() >= 2 {
        let values: Vec<f64> = merged.iter().map(|s| s.1).collect();
        let (med, rsd) = stats::robust_sd(&values);
        let scale = rsd.max(1e-9 * (1.0 + med.abs()));
        let flagged: Vec<bool> = values.iter().map(|v| (v - med).abs() > cfg.extreme_sd * scale).collect();
        let repairs: Vec<(usize, f64)> = (0..merged.len())
            .filter(|&i| flagged[i])
            .filter_map(|i| nearest_unflagged_mean(&merged, &flagged, i, 5).map(|m| (i, m)))
            .collect();
        report.knn_repaired = repairs.len();
        for (i, m) in repairs {
            merged[i].1 = m;
        }
    }

    // (6)
    if merged.len() >= 3 {
        let values: Vec<f64> = merged.iter().map(|s| s.1).collect();
        let (med, rsd) = stats::robust_sd(&values);
        let thr = cfg.peak_sd * rsd.max(1e-9 * (1.0 + med.abs()));
        let half = cfg.window_w.max(1) / 2;
        let mut repaired = values.clone();
        for i in 1..values.len() - 1 {
            let dl = values[i] - values[i - 1];
            let dr = values[i] - values[i + 1];
            let peak = dl > thr && dr > thr;
            let valley = dl < -thr && dr < -thr;
            if peak || valley {
                let a = i.saturating_sub(half);
                let b = (i + half).min(values.len() - 1);
                let neighbours: Vec<f64> = (a..=b).filter(|&j| j != i).map(|j| values[j]).collect();
                repaired[i] = stats::mean(&neighbours);
                report.peaks_smoothed += 1;
            }
        }
        for (s, v) in merged.iter_mut().zip(repaired) {
            s.1 = v;
        }
    }

    // (7)
    let usable = merged.len() >= cfg.min_samples;
    if !usable {
        report.unusable = 1;
    }
    CleanedSeries {
        series: TimeSeries::new(ts.signal.clone(), merged, ts.valid_range),
        report,
        usable,
    }
}

/// Mean of the `k` unflagged samples nearest in time to sample `i`; on equal
/// distance the later sample is preferred.
fn nearest_unflagged_mean(samples: &[(f64, f64)], flagged: &[bool], i: usize, k: usize) -> Option<f64> {
    let t0 = samples[i].0;
    let mut candidates: Vec<(f64, f64, f64)> = samples
        .iter()
        .zip(flagged)
        .filter(|(_, &f)| !f)
        .map(|(&(t, v), _)| ((t - t0).abs(), -t, v))
        .collect();
    if candidates.is_empty() {
        return None;
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let take = candidates.len().min(k);
    Some(candidates[..take].iter().map(|c| c.2).sum::<f64>() / take as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn constant_vector_unchanged() {
        let v = vec![3.5; 100];
        let (out, r) = impute_tails(&v, 1);
        assert_eq!(out, v);
        assert_eq!(r, TailImputation::default());
    }

    #[test]
    fn short_vector_unchanged() {
        let v: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        assert_eq!(impute_tails(&v, 1).0, v);
    }

    #[test]
    fn imputed_values_stay_within_outer_percentiles() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::<f64>::new(0.0, 10.0).unwrap();
        let v: Vec<f64> = (0..1000).map(|_| normal.sample(&mut rng).powi(3)).collect();
        // independent percentile oracle: sort and interpolate by hand
        let mut s = v.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pct = |p: f64| {
            let pos = p * 999.0;
            let (l, f) = (pos.floor() as usize, pos - pos.floor());
            s[l] * (1.0 - f) + s[(l + 1).min(999)] * f
        };
        let (out, r) = impute_tails(&v, 9);
        assert!(out.iter().all(|&x| x >= pct(0.005) && x <= pct(0.995)));
        assert_eq!(r.tail_imputed_high, 10);
        assert_eq!(r.tail_imputed_low, 10);
        assert_eq!(impute_tails(&v, 9).0, out);
    }

    #[test]
    fn missing_values_pass_through() {
        let mut v: Vec<f64> = (0..50).map(f64::from).collect();
        v[3] = f64::NAN;
        let (out, _) = impute_tails(&v, 2);
        assert!(out[3].is_nan());
        assert_eq!(out[10], 10.0);
    }

    #[test]
    fn encoder_log_ratio() {
        let mut levels = vec!["a"; 8];
        levels.extend(vec!["b"; 12]);
        let mut outcomes = vec![true; 20];
        levels.extend(vec!["a"; 2]);
        levels.extend(vec!["b"; 18]);
        outcomes.extend(vec![false; 20]);
        let enc = CategoricalEncoder::fit("x", &levels, &outcomes, 0.0).unwrap();
        assert!((enc.encode("a") - (0.4f64 / 0.1).ln()).abs() < 1e-12);
        assert!((enc.encode("a") - 1.386).abs() < 1e-3);
        assert_eq!(enc.encode("zzz"), 0.0);

        let tiny = CategoricalEncoder::fit("x", &levels, &outcomes, 1e-9).unwrap();
        assert!((tiny.encode("a") - 1.386).abs() < 1e-3);
    }

    #[test]
    fn encoder_symmetric_level_is_zero() {
        let levels = ["a", "b", "a", "b"];
        let outcomes = [true, true, false, false];
        let enc = CategoricalEncoder::fit("x", &levels, &outcomes, 1.0).unwrap();
        assert_eq!(enc.encode("a"), 0.0);
        assert_eq!(enc.encode("b"), 0.0);
    }

    #[test]
    fn encoder_rejects_single_class() {
        assert!(matches!(
            CategoricalEncoder::fit("x", &["a", "b"], &[true, true], 1.0),
            Err(Error::DegenerateOutcome(_))
        ));
    }

    #[test]
    fn encoding_does_not_touch_counts() {
        let enc = CategoricalEncoder::fit("x", &["a", "b", "c"], &[true, false, true], 1.0).unwrap();
        let before = enc.state_digest();
        for l in ["a", "b", "c", "unseen"] {
            enc.encode(l);
        }
        assert_eq!(before, enc.state_digest());
    }

    fn series(values: &[f64], range: (f64, f64)) -> TimeSeries {
        TimeSeries::new("map", values.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect(), range)
    }

    #[test]
    fn five_nearest_neighbour_repair() {
        let ts = series(&[60.0, 62.0, 61.0, 300.0, 63.0, 62.0, 61.0], (0.0, 400.0));
        let out = clean_time_series(&ts, 0.0, 10.0, &CleaningConfig::default());
        assert_eq!(out.report.knn_repaired, 1);
        assert!((out.series.samples[3].1 - 61.8).abs() < 1e-12);
        assert_eq!(out.series.times(), ts.times());
        assert!(!out.usable);
    }

    #[test]
    fn series_outside_surgery_is_unusable() {
        let ts = series(&[80.0; 40], (20.0, 200.0));
        let out = clean_time_series(&ts, 100.0, 200.0, &CleaningConfig::default());
        assert!(!out.usable);
        assert_eq!(out.report.truncated_samples, 40);
        assert!(out.series.is_empty());
    }

    #[test]
    fn clean_series_only_loses_tails() {
        let values: Vec<f64> = (0..200).map(|i| 80.0 + 5.0 * (i as f64 / 15.0).sin()).collect();
        let ts = series(&values, (20.0, 200.0));
        let out = clean_time_series(&ts, 0.0, 1000.0, &CleaningConfig::default());
        assert!(out.usable);
        let r = out.report;
        assert_eq!(r.tail_rejected, 2);
        assert_eq!(
            (r.truncated_samples, r.duplicates_merged, r.range_rejected, r.knn_repaired, r.peaks_smoothed),
            (0, 0, 0, 0, 0)
        );
        assert_eq!(out.series.len(), 198);
        // oracle: the single largest and smallest values are the ones removed
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        let min = values.iter().cloned().fold(f64::MAX, f64::min);
        assert!(out.series.values().iter().all(|&v| v < max && v > min));
        for &(t, v) in &out.series.samples {
            assert_eq!(v, values[t as usize]);
        }
    }

    #[test]
    fn duplicates_and_range() {
        let ts = TimeSeries::new("map", vec![(0.0, 70.0), (0.0, 80.0), (1.0, 500.0), (2.0, 72.0)], (20.0, 200.0));
        let out = clean_time_series(&ts, 0.0, 5.0, &CleaningConfig::default());
        assert_eq!(out.report.duplicates_merged, 1);
        assert_eq!(out.report.range_rejected, 1);
        assert_eq!(out.series.samples, vec![(0.0, 75.0), (2.0, 72.0)]);
    }

    #[test]
    fn isolated_peak_is_smoothed() {
        let mut values: Vec<f64> = (0..60).map(|i| 80.0 + (i % 3) as f64).collect();
        values[30] = 88.0;
        let ts = series(&values, (20.0, 200.0));
        let cfg = CleaningConfig {
            extreme_sd: 100.0,
            ..Default::default()
        };
        let out = clean_time_series(&ts, 0.0, 100.0, &cfg);
        assert_eq!(out.report.peaks_smoothed, 1);
        let v = out.series.samples.iter().find(|s| s.0 == 30.0).unwrap().1;
        assert!((80.0..=82.0).contains(&v));
    }
}
