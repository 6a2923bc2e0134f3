//! Feature rows, double normalization, chronological splits and lookback
//! windows.
//!
//! Feature order is fixed: rssi, snr, air_temperature, air_humidity,
//! air_pressure. The target is soil_moisture.

use std::collections::{BTreeMap, BTreeSet};
use std::io;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::neural::Matrix;
use crate::reading::{SeriesPoint, AIR_HUMIDITY, AIR_PRESSURE, AIR_TEMPERATURE, RSSI, SNR, SOIL_MOISTURE};
use crate::time::{Duration, Timestamp};

pub const NUM_FEATURES: usize = 5;
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [RSSI, SNR, AIR_TEMPERATURE, AIR_HUMIDITY, AIR_PRESSURE];
pub const TARGET_NAME: &str = SOIL_MOISTURE;
pub const DATASET_HEADER: [&str; 7] = [
    "timestamp",
    RSSI,
    SNR,
    AIR_TEMPERATURE,
    AIR_HUMIDITY,
    AIR_PRESSURE,
    SOIL_MOISTURE,
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeatureError {
    #[error("missing metric {0}")]
    MissingMetric(String),
    #[error("too few rows: need {need}, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("feature {} is constant on the training split", FEATURE_NAMES[*.0])]
    ConstantFeature(usize),
    #[error("target is constant on the training split")]
    ConstantTarget,
    #[error("series too short for lookback {lookback}: no contiguous run longer than it")]
    TooShort { lookback: usize },
    #[error("invalid split: {0}")]
    BadSplit(String),
    #[error("non-finite value at {0}")]
    NonFinite(Timestamp),
    #[error("dataset csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub timestamp: Timestamp,
    pub features: [f64; NUM_FEATURES],
    pub target: f64,
}

impl FeatureRow {
    pub fn is_finite(&self) -> bool {
        self.target.is_finite() && self.features.iter().all(|v| v.is_finite())
    }
}

/// Joins per-metric series onto the cadence grid.
///
/// Ticks are multiples of `cadence` counted from the Unix epoch. A tick
/// produces a row when every feature and the target have a point within
/// `tolerance`; the nearest point wins and the earlier one on a tie.
pub fn align(
    sources: &BTreeMap<String, Vec<SeriesPoint>>,
    cadence: Duration,
    tolerance: Duration,
) -> Result<Vec<FeatureRow>, FeatureError> {
    assert!(cadence.micros() > 0, "cadence must be positive");
    let mut series: Vec<Vec<SeriesPoint>> = Vec::with_capacity(NUM_FEATURES + 1);
    for name in FEATURE_NAMES.iter().chain(std::iter::once(&TARGET_NAME)) {
        let mut s = sources
            .get(*name)
            .ok_or_else(|| FeatureError::MissingMetric((*name).to_owned()))?
            .clone();
        s.sort_by_key(|p| p.timestamp);
        series.push(s);
    }

    // Every row needs a target point within tolerance, so only ticks near a
    // target point are candidates.
    let c = cadence.micros();
    let tol = tolerance.micros();
    let mut ticks = BTreeSet::new();
    for p in &series[NUM_FEATURES] {
        let t = p.timestamp.micros();
        let first = (t - tol).div_euclid(c) + i64::from((t - tol).rem_euclid(c) != 0);
        let last = (t + tol).div_euclid(c);
        ticks.extend(first..=last);
    }

    let mut rows = Vec::with_capacity(ticks.len());
    'tick: for k in ticks {
        let tick = Timestamp::from_micros(k * c);
        let mut values = [0.0; NUM_FEATURES + 1];
        for (slot, s) in values.iter_mut().zip(&series) {
            match nearest(s, tick, tol) {
                Some(v) => *slot = v,
                None => continue 'tick,
            }
        }
        let mut features = [0.0; NUM_FEATURES];
        features.copy_from_slice(&values[..NUM_FEATURES]);
        let row = FeatureRow {
            timestamp: tick,
            features,
            target: values[NUM_FEATURES],
        };
        if !row.is_finite() {
            return Err(FeatureError::NonFinite(tick));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn nearest(sorted: &[SeriesPoint], tick: Timestamp, tol: i64) -> Option<f64> {
    let idx = sorted.partition_point(|p| p.timestamp < tick);
    let mut best: Option<(i64, f64)> = None;
    for i in [idx.wrapping_sub(1), idx] {
        if let Some(p) = sorted.get(i) {
            let d = (p.timestamp.micros() - tick.micros()).abs();
            if d <= tol && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, p.value));
            }
        }
    }
    best.map(|(_, v)| v)
}

/// Mean-centering followed by min-max scaling, fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; NUM_FEATURES],
    /// Minimum of the centered feature.
    pub min: [f64; NUM_FEATURES],
    /// Maximum of the centered feature.
    pub max: [f64; NUM_FEATURES],
    pub target_min: f64,
    pub target_max: f64,
}

pub fn fit_norm(train: &[FeatureRow]) -> Result<NormStats, FeatureError> {
    if train.len() < 2 {
        return Err(FeatureError::TooFewRows { need: 2, got: train.len() });
    }
    let n = train.len() as f64;
    let mut mean = [0.0; NUM_FEATURES];
    for r in train {
        for j in 0..NUM_FEATURES {
            mean[j] += r.features[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut min = [f64::INFINITY; NUM_FEATURES];
    let mut max = [f64::NEG_INFINITY; NUM_FEATURES];
    let (mut target_min, mut target_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in train {
        for j in 0..NUM_FEATURES {
            let c = r.features[j] - mean[j];
            min[j] = min[j].min(c);
            max[j] = max[j].max(c);
        }
        target_min = target_min.min(r.target);
        target_max = target_max.max(r.target);
    }
    if let Some(j) = (0..NUM_FEATURES).find(|&j| max[j] <= min[j]) {
        return Err(FeatureError::ConstantFeature(j));
    }
    if target_max <= target_min {
        return Err(FeatureError::ConstantTarget);
    }
    Ok(NormStats {
        mean,
        min,
        max,
        target_min,
        target_max,
    })
}

impl NormStats {
    pub fn normalize_features(&self, x: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        std::array::from_fn(|j| ((x[j] - self.mean[j]) - self.min[j]) / (self.max[j] - self.min[j]))
    }

    pub fn denormalize_features(&self, x: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        std::array::from_fn(|j| x[j] * (self.max[j] - self.min[j]) + self.min[j] + self.mean[j])
    }

    pub fn normalize_target(&self, t: f64) -> f64 {
        (t - self.target_min) / self.target_range()
    }

    pub fn denormalize_target(&self, t: f64) -> f64 {
        t * self.target_range() + self.target_min
    }

    pub fn target_range(&self) -> f64 {
        self.target_max - self.target_min
    }

    /// Hex SHA-256 over the exact bit patterns of every statistic.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let all = self
            .mean
            .iter()
            .chain(&self.min)
            .chain(&self.max)
            .chain([&self.target_min, &self.target_max]);
        for v in all {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Normalized copy of `row`. Values outside the training range are not clipped.
pub fn apply_norm(stats: &NormStats, row: &FeatureRow) -> FeatureRow {
    FeatureRow {
        timestamp: row.timestamp,
        features: stats.normalize_features(&row.features),
        target: stats.normalize_target(row.target),
    }
}

pub fn inverse_norm(stats: &NormStats, row: &FeatureRow) -> FeatureRow {
    FeatureRow {
        timestamp: row.timestamp,
        features: stats.denormalize_features(&row.features),
        target: stats.denormalize_target(row.target),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f > 0.0 && *f < 1.0)) {
            return Err(FeatureError::BadSplit(format!("fractions must lie in (0,1): {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(FeatureError::BadSplit(format!("fractions must sum to 1: {parts:?}")));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes: floor for train and val, test takes the rest.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize), FeatureError> {
        self.validate()?;
        // The epsilon keeps products like 0.29 * 100 = 28.999999999999996 on the
        // intended integer.
        let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
        let train = floor(self.train);
        let val = floor(self.val);
        let test = n.saturating_sub(train + val);
        if train == 0 || val == 0 || test == 0 {
            return Err(FeatureError::TooFewRows { need: 3, got: n });
        }
        Ok((train, val, test))
    }
}

pub fn split<'a, T>(rows: &'a [T], spec: &SplitSpec) -> Result<(&'a [T], &'a [T], &'a [T]), FeatureError> {
    let (train, val, _) = spec.sizes(rows.len())?;
    let (a, rest) = rows.split_at(train);
    let (b, c) = rest.split_at(val);
    Ok((a, b, c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    /// `L × NUM_FEATURES`, oldest row first.
    pub inputs: Matrix<f64>,
    pub target: f64,
    /// Index into the source rows of the row whose target is predicted.
    pub target_index: usize,
}

/// Lookback windows over cadence-contiguous runs.
///
/// Inside each run of `n` contiguous rows there are `n - lookback` samples;
/// no window straddles a gap.
pub fn window(rows: &[FeatureRow], lookback: usize, cadence: Duration) -> Result<Vec<WindowedSample>, FeatureError> {
    assert!(lookback >= 1, "lookback must be at least 1");
    let mut out = Vec::new();
    for (start, end) in contiguous_runs(rows, cadence) {
        for i in start..end.saturating_sub(lookback).max(start) {
            let mut data = Vec::with_capacity(lookback * NUM_FEATURES);
            for r in &rows[i..i + lookback] {
                data.extend_from_slice(&r.features);
            }
            out.push(WindowedSample {
                inputs: Matrix::from_vec(lookback, NUM_FEATURES, data).expect("sized above"),
                target: rows[i + lookback].target,
                target_index: i + lookback,
            });
        }
    }
    if out.is_empty() {
        return Err(FeatureError::TooShort { lookback });
    }
    Ok(out)
}

/// Half-open index ranges of maximal runs spaced exactly by `cadence`.
pub fn contiguous_runs(rows: &[FeatureRow], cadence: Duration) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=rows.len() {
        if i == rows.len() || rows[i].timestamp.since(rows[i - 1].timestamp) != cadence {
            if i > start {
                runs.push((start, i));
            }
            start = i;
        }
    }
    runs
}

pub fn write_dataset_csv<W: io::Write>(rows: &[FeatureRow], out: W) -> Result<(), FeatureError> {
    let csv_err = |e: csv::Error| FeatureError::Csv(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DATASET_HEADER).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.timestamp.to_rfc3339()];
        rec.extend(r.features.iter().map(f64::to_string));
        rec.push(r.target.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| FeatureError::Csv(e.to_string()))
}

pub fn read_dataset_csv<R: io::Read>(input: R) -> Result<Vec<FeatureRow>, FeatureError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| FeatureError::Csv(e.to_string()))?.clone();
    if header.iter().ne(DATASET_HEADER.iter().copied()) {
        return Err(FeatureError::Csv(format!(
            "expected header {}, got {}",
            DATASET_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| FeatureError::Csv(e.to_string()))?;
        let bad = |what: &str| FeatureError::Csv(format!("record {}: bad {what}", line + 1));
        let timestamp = Timestamp::parse_rfc3339(&rec[0]).map_err(|_| bad("timestamp"))?;
        let mut vals = [0.0; NUM_FEATURES + 1];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = rec[k + 1].trim().parse().map_err(|_| bad(DATASET_HEADER[k + 1]))?;
        }
        let row = FeatureRow {
            timestamp,
            features: std::array::from_fn(|j| vals[j]),
            target: vals[NUM_FEATURES],
        };
        if !row.is_finite() {
            return Err(FeatureError::NonFinite(timestamp));
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEN_MIN: Duration = Duration::from_mins(10);

    fn row(min: i64, f: [f64; 5], t: f64) -> FeatureRow {
        FeatureRow {
            timestamp: Timestamp::from_secs(min * 60),
            features: f,
            target: t,
        }
    }

    fn ramp(n: usize) -> Vec<FeatureRow> {
        (0..n)
            .map(|i| {
                let x = i as f64;
                row(10 * i as i64, [x, 2.0 * x, -x, x * x, 1000.0 + x], 300.0 + x)
            })
            .collect()
    }

    fn sources(ticks_min: &[i64], skip: Option<(&str, i64)>) -> BTreeMap<String, Vec<SeriesPoint>> {
        let mut m = BTreeMap::new();
        for (k, name) in DATASET_HEADER[1..].iter().enumerate() {
            let pts = ticks_min
                .iter()
                .filter(|&&t| skip != Some((name, t)))
                .map(|&t| SeriesPoint::new(Timestamp::from_secs(t * 60), k as f64 + t as f64))
                .collect();
            m.insert((*name).to_owned(), pts);
        }
        m
    }

    #[test]
    fn align_on_ticks() {
        let rows = align(&sources(&[0, 10, 20], None), TEN_MIN, Duration::from_mins(5)).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].features, [10.0, 11.0, 12.0, 13.0, 14.0]);
        assert_eq!(rows[1].target, 15.0);
    }

    #[test]
    fn align_drops_incomplete_ticks() {
        let rows = align(&sources(&[0, 10, 20], Some((AIR_PRESSURE, 10))), TEN_MIN, Duration::from_mins(5)).unwrap();
        let mins: Vec<i64> = rows.iter().map(|r| r.timestamp.micros() / 60_000_000).collect();
        assert_eq!(mins, vec![0, 20]);
    }

    #[test]
    fn align_reports_missing_metric() {
        let mut s = sources(&[0], None);
        s.remove(SNR);
        assert_eq!(
            align(&s, TEN_MIN, Duration::from_mins(5)),
            Err(FeatureError::MissingMetric(SNR.into()))
        );
    }

    #[test]
    fn fit_norm_hand_values() {
        let rows: Vec<FeatureRow> = [10.0, 20.0, 30.0]
            .iter()
            .map(|&v| row(0, [v, v, v, v, v], v))
            .collect();
        let s = fit_norm(&rows).unwrap();
        assert_eq!(s.mean[0], 20.0);
        assert_eq!((s.min[0], s.max[0]), (-10.0, 10.0));
        let mapped: Vec<f64> = rows.iter().map(|r| apply_norm(&s, r).features[0]).collect();
        assert_eq!(mapped, vec![0.0, 0.5, 1.0]);
        assert_eq!(apply_norm(&s, &row(0, [40.0; 5], 40.0)).features[0], 1.5);
        assert_eq!(apply_norm(&s, &row(0, [40.0; 5], 40.0)).target, 1.5);
    }

    #[test]
    fn fit_norm_rejects_constant_columns() {
        let rows: Vec<FeatureRow> = (0..3).map(|i| row(0, [i as f64, 5.0, 1.0, 1.0, 1.0], i as f64)).collect();
        assert_eq!(fit_norm(&rows), Err(FeatureError::ConstantFeature(1)));
        let rows: Vec<FeatureRow> = (0..3).map(|i| row(0, [i as f64; 5], 7.0)).collect();
        assert_eq!(fit_norm(&rows), Err(FeatureError::ConstantTarget));
        assert!(matches!(fit_norm(&rows[..1]), Err(FeatureError::TooFewRows { .. })));
    }

    #[test]
    fn split_sizes() {
        assert_eq!(SplitSpec::default().sizes(100).unwrap(), (70, 15, 15));
        let s = SplitSpec {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        };
        assert_eq!(s.sizes(10).unwrap(), (8, 1, 1));
        assert!(SplitSpec::default().sizes(4).is_err());
        assert!(SplitSpec { train: 0.5, val: 0.5, test: 0.0 }.validate().is_err());
    }

    #[test]
    fn window_counts_and_targets() {
        let rows = ramp(10);
        let w = window(&rows, 6, TEN_MIN).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(w[0].target, rows[6].target);
        assert_eq!(w[0].inputs.row(5), &rows[5].features);

        let w = window(&rows[..7], 6, TEN_MIN).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].target_index, 6);

        assert_eq!(window(&rows[..6], 6, TEN_MIN), Err(FeatureError::TooShort { lookback: 6 }));
    }

    #[test]
    fn window_respects_gaps() {
        let mut rows = ramp(10);
        for r in &mut rows[5..] {
            r.timestamp = r.timestamp + Duration::from_mins(30);
        }
        let w = window(&rows, 3, TEN_MIN).unwrap();
        assert_eq!(w.len(), 4);
        assert!(w.iter().all(|s| s.target_index != 5));
    }

    #[test]
    fn dataset_csv_round_trip() {
        let mut rows = ramp(5);
        rows[2].features[0] = 0.1 + 0.2;
        let mut buf = Vec::new();
        write_dataset_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("timestamp,rssi,snr,air_temperature,air_humidity,air_pressure,soil_moisture\n"));
        assert_eq!(read_dataset_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn fingerprint_tracks_every_bit() {
        let s = fit_norm(&ramp(5)).unwrap();
        let mut t = s.clone();
        t.target_max = f64::from_bits(t.target_max.to_bits() + 1);
        assert_ne!(s.fingerprint(), t.fingerprint());
        assert_eq!(s.fingerprint().len(), 64);
    }
}
