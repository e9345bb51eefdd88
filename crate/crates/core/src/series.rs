//! Multivariate time series ingestion and index bookkeeping.
//!
//! A [`TimeSeries`] is a dense `T x M` matrix stored row-major (one row per
//! time step). Everything downstream works on index ranges over it: the
//! chronological [`HoldoutSplit`], overlapping [`Block`]s used as valuation
//! units, non-overlapping [`SampleWindow`]s used as selection units, and a
//! seeded [`FoldPlan`] over the samples.

use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    values: Vec<f64>,
    len: usize,
    channel_names: Vec<String>,
    origin: String,
}

impl TimeSeries {
    /// Builds a series from row-major values (`len * channel_names.len()` entries).
    pub fn new(values: Vec<f64>, channel_names: Vec<String>, origin: impl Into<String>) -> Result<Self> {
        let m = channel_names.len();
        if m == 0 {
            return Err(Error::InvalidSeries("series needs at least one channel".into()));
        }
        if values.is_empty() || !values.len().is_multiple_of(m) {
            return Err(Error::InvalidSeries(format!(
                "{} values do not form rows of {} channels",
                values.len(),
                m
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NaNEncountered { row: pos / m + 1, col: pos % m + 1 });
        }
        Ok(Self { len: values.len() / m, values, channel_names, origin: origin.into() })
    }

    /// Single-channel convenience constructor.
    pub fn univariate(values: Vec<f64>, origin: impl Into<String>) -> Result<Self> {
        Self::new(values, vec!["x0".to_string()], origin)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let m = self.channels();
        &self.values[t * m..(t + 1) * m]
    }

    pub fn get(&self, t: usize, channel: usize) -> f64 {
        self.values[t * self.channels() + channel]
    }

    /// Row-major slice covering time steps `range`.
    pub fn rows(&self, range: Range<usize>) -> &[f64] {
        let m = self.channels();
        &self.values[range.start * m..range.end * m]
    }

    /// Copy with values replaced through `f(t, channel, value)`.
    pub(crate) fn map_values(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Self {
        let m = self.channels();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i / m, i % m, v))
            .collect();
        Self { values, ..self.clone() }
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Writes the series in the ingestion format (header row, no timestamps).
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.channel_names).map_err(|e| Error::Csv(e.to_string()))?;
        for t in 0..self.len {
            w.write_record(self.row(t).iter().map(|v| v.to_string()))
                .map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampColumn {
    /// Treat the first column as timestamps when its header or first cell says so.
    #[default]
    Auto,
    Present,
    Absent,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestOptions {
    /// Linearly fill interior runs of missing values.
    pub interpolate: bool,
    pub timestamps: TimestampColumn,
}

const TIMESTAMP_HEADERS: [&str; 5] = ["timestamp", "date", "time", "datetime", "ds"];

fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return dt.timestamp_nanos_opt();
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return dt.and_utc().timestamp_nanos_opt();
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .and_then(|dt| dt.and_utc().timestamp_nanos_opt())
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim().to_ascii_lowercase().as_str(), "" | "nan" | "na" | "null")
}

/// Reads a comma-separated file with one header row of channel names.
///
/// Rows and columns in errors are 1-based; rows count data rows (the header
/// is not row 1).
pub fn load_csv(path: impl AsRef<Path>, options: &IngestOptions) -> Result<TimeSeries> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Csv(e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let records = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Csv(e.to_string()))?;
    if headers.is_empty() || records.is_empty() {
        return Err(Error::InvalidSeries("csv has no data rows".into()));
    }

    let has_timestamps = match options.timestamps {
        TimestampColumn::Present => true,
        TimestampColumn::Absent => false,
        TimestampColumn::Auto => {
            TIMESTAMP_HEADERS.contains(&headers[0].to_ascii_lowercase().as_str())
                || records[0]
                    .get(0)
                    .is_some_and(|c| c.trim().parse::<f64>().is_err() && parse_timestamp(c).is_some())
        }
    };
    let first_value_col = usize::from(has_timestamps);
    let channel_names = headers[first_value_col..].to_vec();
    if channel_names.is_empty() {
        return Err(Error::InvalidSeries("csv has no value columns".into()));
    }
    let m = channel_names.len();

    let mut values = Vec::with_capacity(records.len() * m);
    let mut previous_stamp: Option<i64> = None;
    for (r, record) in records.iter().enumerate() {
        let row = r + 1;
        if record.len() != headers.len() {
            return Err(Error::Csv(format!(
                "row {row} has {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        if has_timestamps {
            let stamp = parse_timestamp(&record[0]).ok_or(Error::NonNumericCell { row, col: 1 })?;
            if previous_stamp.is_some_and(|p| stamp <= p) {
                return Err(Error::NonMonotonicTimestamps { row });
            }
            previous_stamp = Some(stamp);
        }
        for c in first_value_col..headers.len() {
            let cell = &record[c];
            if is_missing(cell) {
                values.push(f64::NAN);
                continue;
            }
            match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                Ok(v) if v.is_nan() => values.push(f64::NAN),
                _ => return Err(Error::NonNumericCell { row, col: c + 1 }),
            }
        }
    }

    let t_len = records.len();
    for ch in 0..m {
        let col = ch + first_value_col + 1;
        let nan_at = |values: &[f64], t: usize| values[t * m + ch].is_nan();
        if !options.interpolate {
            if let Some(t) = (0..t_len).find(|&t| nan_at(&values, t)) {
                return Err(Error::NaNEncountered { row: t + 1, col });
            }
            continue;
        }
        if nan_at(&values, 0) {
            return Err(Error::NaNEncountered { row: 1, col });
        }
        if nan_at(&values, t_len - 1) {
            return Err(Error::NaNEncountered { row: t_len, col });
        }
        let mut t = 1;
        while t < t_len {
            if !nan_at(&values, t) {
                t += 1;
                continue;
            }
            let run_start = t;
            while nan_at(&values, t) {
                t += 1;
            }
            let (left, right) = (values[(run_start - 1) * m + ch], values[t * m + ch]);
            let span = (t - run_start + 1) as f64;
            for (k, s) in (run_start..t).enumerate() {
                let frac = (k + 1) as f64 / span;
                values[s * m + ch] = left + (right - left) * frac;
            }
        }
    }

    TimeSeries::new(values, channel_names, path.display().to_string())
}

/// A fixed-length window over the series, the unit of valuation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Block {
    pub start: usize,
    pub length: usize,
}

impl Block {
    pub fn end(&self) -> usize {
        self.start + self.length
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.range().contains(&t)
    }
}

/// A non-overlapping window over the target split, the unit of selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleWindow {
    pub start: usize,
    pub length: usize,
}

impl SampleWindow {
    pub fn end(&self) -> usize {
        self.start + self.length
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end()
    }
}

/// Chronological split: target steps first, held-out test steps after.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldoutSplit {
    pub target: Range<usize>,
    pub test: Range<usize>,
}

impl HoldoutSplit {
    pub fn target_len(&self) -> usize {
        self.target.len()
    }

    pub fn test_len(&self) -> usize {
        self.test.len()
    }
}

pub fn split_holdout(series_len: usize, test_fraction: f64, min_window: usize) -> Result<HoldoutSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("test fraction {test_fraction} is outside (0, 1)")));
    }
    let keep = series_len as f64 * (1.0 - test_fraction);
    // tolerance absorbs representation error in e.g. 100 * 0.7
    let floor = (keep + 1e-9).floor() as usize;
    if floor < min_window {
        return Err(Error::TargetTooShort { target: floor, required: min_window });
    }
    let target_len = ((keep - 1e-9).ceil() as usize).min(series_len);
    Ok(HoldoutSplit { target: 0..target_len, test: target_len..series_len })
}

/// Windows of length `length` starting every `stride` steps inside `range`.
pub fn segment_blocks(range: Range<usize>, length: usize, stride: usize) -> Result<Vec<Block>> {
    if stride == 0 {
        return Err(Error::InvalidConfig("block stride must be positive".into()));
    }
    if length == 0 || length > range.len() {
        return Err(Error::BlockLongerThanRange { length, range: range.len() });
    }
    let count = (range.len() - length) / stride + 1;
    Ok((0..count).map(|k| Block { start: range.start + k * stride, length }).collect())
}

/// Consecutive non-overlapping windows; a trailing remainder is dropped.
pub fn enumerate_samples(range: Range<usize>, length: usize) -> Result<Vec<SampleWindow>> {
    if length == 0 || length > range.len() {
        return Err(Error::SampleLongerThanRange { length, range: range.len() });
    }
    let count = range.len() / length;
    Ok((0..count)
        .map(|i| SampleWindow { start: range.start + i * length, length })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// `assignment[i]` is the fold of sample `i`.
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold_of(&self, sample: usize) -> usize {
        self.assignment[sample]
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded permutation of the samples dealt round-robin into `k` folds.
pub fn make_folds(n_samples: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("fold count {k} must be at least 2")));
    }
    if n_samples < k {
        return Err(Error::TooFewSamples { n_samples, k });
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n_samples];
    for (pos, &sample) in order.iter().enumerate() {
        assignment[sample] = pos % k;
    }
    Ok(FoldPlan { k, assignment, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantChannelPolicy {
    #[default]
    Reject,
    /// Keep constant channels with unit scale; recorded in [`NormStats::unit_scaled`].
    UnitStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels that were constant on the fitting range and got `std = 1`.
    pub unit_scaled: Vec<usize>,
}

impl NormStats {
    /// Per-channel mean and population standard deviation over `range`.
    pub fn fit(series: &TimeSeries, range: Range<usize>, policy: ConstantChannelPolicy) -> Result<Self> {
        if range.is_empty() || range.end > series.len() {
            return Err(Error::InvalidSeries(format!("cannot fit statistics on range {range:?}")));
        }
        let m = series.channels();
        let n = range.len() as f64;
        let mut mean = vec![0.0; m];
        for t in range.clone() {
            for (c, v) in series.row(t).iter().enumerate() {
                mean[c] += v;
            }
        }
        mean.iter_mut().for_each(|x| *x /= n);
        let mut var = vec![0.0; m];
        for t in range {
            for (c, v) in series.row(t).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2);
            }
        }
        let mut std = Vec::with_capacity(m);
        let mut unit_scaled = Vec::new();
        for (c, v) in var.into_iter().enumerate() {
            let s = (v / n).sqrt();
            if s > 0.0 {
                std.push(s);
            } else if policy == ConstantChannelPolicy::UnitStd {
                log::warn!("channel {c} is constant on the fitting range; using unit scale");
                unit_scaled.push(c);
                std.push(1.0);
            } else {
                return Err(Error::ZeroStd { channel: c });
            }
        }
        Ok(Self { mean, std, unit_scaled })
    }

    fn check(&self, series: &TimeSeries) -> Result<()> {
        if self.mean.len() != series.channels() || self.std.len() != series.channels() {
            return Err(Error::ShapeMismatch(format!(
                "statistics for {} channels applied to {}",
                self.mean.len(),
                series.channels()
            )));
        }
        if let Some(c) = self.std.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::ZeroStd { channel: c });
        }
        Ok(())
    }
}

/// Per-channel z-score. Values are not clipped.
pub fn normalize(series: &TimeSeries, stats: &NormStats) -> Result<TimeSeries> {
    stats.check(series)?;
    Ok(series.map_values(|_, c, v| (v - stats.mean[c]) / stats.std[c]))
}

pub fn denormalize(series: &TimeSeries, stats: &NormStats) -> Result<TimeSeries> {
    stats.check(series)?;
    Ok(series.map_values(|_, c, v| v * stats.std[c] + stats.mean[c]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_plain_csv() {
        let f = write_tmp("a,b\n1,2\n3,4\n5,6\n");
        let s = load_csv(f.path(), &IngestOptions::default()).unwrap();
        assert_eq!((s.len(), s.channels()), (3, 2));
        assert_eq!(s.row(2), &[5.0, 6.0]);
        assert_eq!(s.channel_names(), &["a", "b"]);
    }

    #[test]
    fn load_rejects_nan_without_interpolation() {
        let f = write_tmp("a\n1.0\nNaN\n3.0\n");
        let err = load_csv(f.path(), &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NaNEncountered { row: 2, col: 1 }), "{err:?}");
    }

    #[test]
    fn load_interpolates_interior_gap() {
        let f = write_tmp("a\n1.0\nNaN\n3.0\n");
        let opts = IngestOptions { interpolate: true, ..Default::default() };
        let s = load_csv(f.path(), &opts).unwrap();
        assert_eq!(s.values(), &[1.0, 2.0, 3.0]);

        let f = write_tmp("a\n0\nNA\nnull\n3\n");
        let s = load_csv(f.path(), &opts).unwrap();
        assert_eq!(s.values(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn load_rejects_edge_nan_even_when_interpolating() {
        let opts = IngestOptions { interpolate: true, ..Default::default() };
        let f = write_tmp("a\nNaN\n2\n3\n");
        assert!(matches!(load_csv(f.path(), &opts), Err(Error::NaNEncountered { row: 1, .. })));
        let f = write_tmp("a\n1\n2\nnan\n");
        assert!(matches!(load_csv(f.path(), &opts), Err(Error::NaNEncountered { row: 3, .. })));
    }

    #[test]
    fn load_errors() {
        assert!(matches!(
            load_csv("/definitely/not/here.csv", &IngestOptions::default()),
            Err(Error::MissingFile(_))
        ));
        let f = write_tmp("a,b\n1,2\n3,oops\n");
        assert!(matches!(
            load_csv(f.path(), &IngestOptions::default()),
            Err(Error::NonNumericCell { row: 2, col: 2 })
        ));
    }

    #[test]
    fn load_timestamps() {
        let f = write_tmp("timestamp,load\n2024-01-01T00:00:00,1\n2024-01-01T01:00:00,2\n");
        let s = load_csv(f.path(), &IngestOptions::default()).unwrap();
        assert_eq!((s.len(), s.channels()), (2, 1));
        assert_eq!(s.values(), &[1.0, 2.0]);

        // detected from the cell even with an unusual header
        let f = write_tmp("when,load\n2024-01-01,1\n2024-01-02,2\n");
        let s = load_csv(f.path(), &IngestOptions::default()).unwrap();
        assert_eq!(s.channels(), 1);

        let f = write_tmp("date,load\n2024-01-02,1\n2024-01-01,2\n");
        assert!(matches!(
            load_csv(f.path(), &IngestOptions::default()),
            Err(Error::NonMonotonicTimestamps { row: 2 })
        ));
    }

    #[test]
    fn holdout_examples() {
        let s = split_holdout(100, 0.3, 1).unwrap();
        assert_eq!((s.target, s.test), (0..70, 70..100));
        let s = split_holdout(10, 0.5, 1).unwrap();
        assert_eq!((s.target, s.test), (0..5, 5..10));
        let s = split_holdout(800, 0.3, 1).unwrap();
        assert_eq!(s.target, 0..560);
        assert!(matches!(split_holdout(3, 0.3, 5), Err(Error::TargetTooShort { .. })));
    }

    #[test]
    fn segmentation_examples() {
        let b = segment_blocks(0..10, 3, 1).unwrap();
        assert_eq!(b.len(), 8);
        assert_eq!(b.iter().map(|b| b.start).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
        assert_eq!(segment_blocks(0..10, 10, 1).unwrap().len(), 1);
        assert_eq!(segment_blocks(0..700, 100, 1).unwrap().len(), 601);
        assert_eq!(segment_blocks(0..10, 3, 4).unwrap().len(), 2);
        assert!(matches!(segment_blocks(0..5, 6, 1), Err(Error::BlockLongerThanRange { .. })));
    }

    #[test]
    fn sample_examples() {
        let s = enumerate_samples(0..10, 4).unwrap();
        assert_eq!(s, vec![SampleWindow { start: 0, length: 4 }, SampleWindow { start: 4, length: 4 }]);
        assert_eq!(enumerate_samples(0..8, 8).unwrap().len(), 1);
        assert_eq!(enumerate_samples(0..700, 100).unwrap().len(), 7);
        assert!(matches!(enumerate_samples(0..3, 4), Err(Error::SampleLongerThanRange { .. })));
    }

    #[test]
    fn fold_examples() {
        let plan = make_folds(10, 5, 3).unwrap();
        assert_eq!(plan.sizes(), vec![2; 5]);
        let mut sizes = make_folds(11, 5, 3).unwrap().sizes();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        assert_eq!(make_folds(10, 5, 3).unwrap(), make_folds(10, 5, 3).unwrap());
        assert!(matches!(make_folds(3, 5, 0), Err(Error::TooFewSamples { .. })));
        assert!(make_folds(10, 1, 0).is_err());
    }

    #[test]
    fn normalize_examples() {
        let s = TimeSeries::univariate(vec![1.0, 2.0, 3.0], "t").unwrap();
        let stats = NormStats { mean: vec![2.0], std: vec![1.0], unit_scaled: vec![] };
        assert_eq!(normalize(&s, &stats).unwrap().values(), &[-1.0, 0.0, 1.0]);

        // stats from a narrow target range applied to wider values
        let s = TimeSeries::univariate(vec![0.0, 1.0, 0.0, 1.0, 50.0], "t").unwrap();
        let stats = NormStats::fit(&s, 0..4, ConstantChannelPolicy::Reject).unwrap();
        let z = normalize(&s, &stats).unwrap();
        assert!(z.values()[4] > 3.0);
    }

    #[test]
    fn constant_channel_policy() {
        let s = TimeSeries::new(vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0], vec!["a".into(), "b".into()], "t").unwrap();
        assert!(matches!(
            NormStats::fit(&s, 0..3, ConstantChannelPolicy::Reject),
            Err(Error::ZeroStd { channel: 1 })
        ));
        let stats = NormStats::fit(&s, 0..3, ConstantChannelPolicy::UnitStd).unwrap();
        assert_eq!(stats.unit_scaled, vec![1]);
        assert_eq!(stats.std[1], 1.0);
    }

    proptest! {
        #[test]
        fn segmentation_coverage(range_len in 2usize..60, l in 1usize..20) {
            prop_assume!(l <= range_len);
            let blocks = segment_blocks(0..range_len, l, 1).unwrap();
            prop_assert_eq!(blocks.len(), range_len - l + 1);
            for t in 0..range_len {
                let cover = blocks.iter().filter(|b| b.contains(t)).count();
                prop_assert!(cover >= 1 && cover <= l);
                if t + 1 >= l && t + l <= range_len {
                    prop_assert_eq!(cover, l);
                }
            }
        }

        #[test]
        fn folds_partition(n in 2usize..80, k in 2usize..8, seed in any::<u64>()) {
            prop_assume!(n >= k);
            let plan = make_folds(n, k, seed).unwrap();
            let mut seen = vec![0; n];
            for f in 0..k {
                for i in plan.members(f) {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            let sizes = plan.sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn normalize_round_trip(values in prop::collection::vec(-1e6f64..1e6, 2..40)) {
            let s = TimeSeries::univariate(values, "p").unwrap();
            let stats = match NormStats::fit(&s, 0..s.len(), ConstantChannelPolicy::Reject) {
                Ok(st) => st,
                Err(_) => return Ok(()),
            };
            let back = denormalize(&normalize(&s, &stats).unwrap(), &stats).unwrap();
            for (a, b) in s.values().iter().zip(back.values()) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }
}
