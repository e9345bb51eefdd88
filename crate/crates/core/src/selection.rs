//! Selecting samples by score, finetuning on the selection and scoring
//! corruption detection.

use std::fmt;
use std::ops::Range;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{train, ForecastInstance, ModelSpec, ParamVector, TrainConfig};
use crate::oracles::average_ranks;
use crate::series::{Block, HoldoutSplit, SampleWindow, TimeSeries};
use crate::valuation::{BlockScore, SampleScores};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Top,
    Bottom,
    Random,
    Full,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Top, Strategy::Bottom, Strategy::Random, Strategy::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Top => "top",
            Strategy::Bottom => "bottom",
            Strategy::Random => "random",
            Strategy::Full => "full",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: Strategy,
    pub ratio: f64,
    /// Sample indices, ascending.
    pub chosen: Vec<usize>,
    pub seed: u64,
}

/// Number of samples kept at `ratio`: `ratio * n` rounded half down, at least 1.
///
/// Rounding half down keeps Top and Bottom disjoint at `ratio = 0.5` with odd `n`.
pub fn selection_count(n: usize, ratio: f64) -> usize {
    let x = ratio * n as f64;
    ((x - 0.5 - 1e-9).ceil().max(1.0) as usize).min(n)
}

pub fn select(scores: &SampleScores, strategy: Strategy, ratio: f64, seed: u64) -> Result<SelectionResult> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::EmptyScores);
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!("selection ratio {ratio} is outside (0, 1]")));
    }
    let count = selection_count(n, ratio);
    let by_value = |descending: bool| {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let (va, vb) = (scores.entries[a].value, scores.entries[b].value);
            let primary = if descending { vb.total_cmp(&va) } else { va.total_cmp(&vb) };
            primary.then(scores.entries[a].window.start.cmp(&scores.entries[b].window.start))
        });
        order.truncate(count);
        order
    };
    let mut chosen = match strategy {
        Strategy::Top => by_value(true),
        Strategy::Bottom => by_value(false),
        Strategy::Random => sample(&mut ChaCha8Rng::seed_from_u64(seed), n, count).into_vec(),
        Strategy::Full => (0..n).collect(),
    };
    chosen.sort_unstable();
    let ratio = if strategy == Strategy::Full { 1.0 } else { ratio };
    Ok(SelectionResult { strategy, ratio, chosen, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: Strategy,
    pub ratio: f64,
    pub n_selected: usize,
    pub mse: f64,
    pub mae: f64,
    pub model: ModelSpec,
    pub dataset: String,
    pub seed: u64,
    pub wall_time: f64,
    /// Ranges the training instances were drawn from.
    pub train_spans: Vec<Range<usize>>,
    /// Range the metrics were computed on.
    pub test_span: Range<usize>,
    pub n_train_instances: usize,
    pub n_test_instances: usize,
}

impl EvalReport {
    /// True when no training span touches the test span and every training
    /// span lies inside `target`.
    pub fn is_leak_free(&self, target: &Range<usize>) -> bool {
        self.train_spans.iter().all(|s| {
            s.start >= target.start && s.end <= target.end && (s.end <= self.test_span.start || s.start >= self.test_span.end)
        }) && (self.test_span.start >= target.end || self.test_span.end <= target.start)
    }
}

/// Test-range forecast instances, stride 1.
pub fn test_instances(series: &TimeSeries, split: &HoldoutSplit, spec: &ModelSpec) -> Result<Vec<ForecastInstance>> {
    let required = spec.window();
    if split.test.len() < required || split.test.end > series.len() {
        return Err(Error::TestRangeTooShort { available: split.test.len(), required });
    }
    ForecastInstance::sliding(series, split.test.clone(), spec.lookback, spec.horizon)
}

/// MSE and MAE of `params` over `instances`.
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, instances: &[ForecastInstance]) -> Result<(f64, f64)> {
    if instances.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for inst in instances {
        let pred = spec.predict(params, &inst.input);
        for (p, y) in pred.iter().zip(&inst.target) {
            se += (p - y) * (p - y);
            ae += (p - y).abs();
            count += 1;
        }
    }
    Ok((se / count as f64, ae / count as f64))
}

/// Trains a copy of `base` on instances from the selected samples (stride 1
/// inside each sample) and evaluates on the test range.
#[allow(clippy::too_many_arguments)]
pub fn finetune_and_eval(
    spec: &ModelSpec,
    base: &ParamVector,
    selection: &SelectionResult,
    samples: &[SampleWindow],
    series: &TimeSeries,
    split: &HoldoutSplit,
    config: &TrainConfig,
    dataset: &str,
) -> Result<EvalReport> {
    let started = Instant::now();
    if selection.chosen.is_empty() {
        return Err(Error::EmptyScores);
    }
    let test = test_instances(series, split, spec)?;
    let mut train_spans = Vec::with_capacity(selection.chosen.len());
    let mut instances = Vec::new();
    for &i in &selection.chosen {
        let w = samples.get(i).ok_or_else(|| Error::InvalidConfig(format!("sample {i} does not exist")))?;
        if w.length < spec.window() {
            return Err(Error::InvalidConfig(format!(
                "sample length {} is shorter than the model window {}",
                w.length,
                spec.window()
            )));
        }
        if w.start < split.target.start || w.end() > split.target.end {
            return Err(Error::InvalidConfig(format!("sample {i} lies outside the target range")));
        }
        instances.extend(ForecastInstance::sliding(series, w.range(), spec.lookback, spec.horizon)?);
        train_spans.push(w.range());
    }
    let params = train(spec, base, &instances, config)?.params;
    let (mse, mae) = evaluate(spec, &params, &test)?;
    Ok(EvalReport {
        strategy: selection.strategy,
        ratio: selection.ratio,
        n_selected: selection.chosen.len(),
        mse,
        mae,
        model: spec.clone(),
        dataset: dataset.to_string(),
        seed: config.seed,
        wall_time: started.elapsed().as_secs_f64(),
        train_spans,
        test_span: split.test.clone(),
        n_train_instances: instances.len(),
        n_test_instances: test.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianBurst,
    LevelShift,
    ConstantHold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub fraction: f64,
    pub kind: CorruptionKind,
    pub magnitude: f64,
    pub block_length: usize,
    pub seed: u64,
}

/// One flag per region of a non-overlapping grid of `block_length` over `range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionLabels {
    pub regions: Vec<Block>,
    pub corrupted: Vec<bool>,
    pub kind: CorruptionKind,
    pub magnitude: f64,
}

impl CorruptionLabels {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn n_corrupted(&self) -> usize {
        self.corrupted.iter().filter(|&&c| c).count()
    }

    /// Whether any corrupted region overlaps `range`.
    pub fn touches(&self, range: Range<usize>) -> bool {
        self.regions
            .iter()
            .zip(&self.corrupted)
            .any(|(r, &c)| c && r.start < range.end && range.start < r.end())
    }
}

/// Corrupts `round(fraction * n)` seeded grid regions of `range`.
///
/// `gaussian_burst` adds noise with standard deviation `magnitude`,
/// `level_shift` adds `magnitude` and `constant_hold` repeats each region's
/// first row across the region.
pub fn inject_corruption(
    series: &TimeSeries,
    range: Range<usize>,
    spec: &CorruptionSpec,
) -> Result<(TimeSeries, CorruptionLabels)> {
    if !(spec.fraction >= 0.0) || !spec.magnitude.is_finite() || spec.block_length == 0 {
        return Err(Error::InvalidConfig("corruption needs fraction >= 0, finite magnitude, block length > 0".into()));
    }
    if spec.fraction >= 1.0 {
        return Err(Error::FractionTooLarge(spec.fraction));
    }
    if range.end > series.len() {
        return Err(Error::InvalidSeries(format!("range {range:?} exceeds series length {}", series.len())));
    }
    let n = range.len() / spec.block_length;
    let count = (spec.fraction * n as f64).round() as usize;
    if count > n || (count == 0 && spec.fraction > 0.0 && n == 0) {
        return Err(Error::FractionTooLarge(spec.fraction));
    }
    let regions: Vec<Block> = (0..n)
        .map(|k| Block { start: range.start + k * spec.block_length, length: spec.block_length })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut picked = sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();
    let mut corrupted = vec![false; n];
    for &k in &picked {
        corrupted[k] = true;
    }

    let m = series.channels();
    let mut out = series.clone();
    let values = out.values_mut();
    let noise = Normal::new(0.0, spec.magnitude.abs()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for &k in &picked {
        let r = regions[k];
        match spec.kind {
            CorruptionKind::GaussianBurst => {
                for v in &mut values[r.start * m..r.end() * m] {
                    *v += noise.sample(&mut rng);
                }
            }
            CorruptionKind::LevelShift => {
                for v in &mut values[r.start * m..r.end() * m] {
                    *v += spec.magnitude;
                }
            }
            CorruptionKind::ConstantHold => {
                let first: Vec<f64> = values[r.start * m..(r.start + 1) * m].to_vec();
                for t in r.start..r.end() {
                    values[t * m..(t + 1) * m].copy_from_slice(&first);
                }
            }
        }
    }
    Ok((out, CorruptionLabels { regions, corrupted, kind: spec.kind, magnitude: spec.magnitude }))
}

/// AUROC of `-score` as a detector of `positive` (low score flags a positive),
/// with ties counted as one half.
pub fn auroc_low_is_positive(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::LengthMismatch { left: scores.len(), right: positive.len() });
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AllOneClass);
    }
    let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
    let ranks = average_ranks(&negated);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Detection AUROC with block scores matched to label regions by position.
pub fn detection_auroc(scores: &[BlockScore], labels: &CorruptionLabels) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch { left: scores.len(), right: labels.len() });
    }
    if scores.iter().zip(&labels.regions).any(|(s, r)| s.block != *r) {
        return Err(Error::ShapeMismatch("block scores do not line up with the corruption grid".into()));
    }
    let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
    auroc_low_is_positive(&values, &labels.corrupted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::OptimizerConfig;
    use crate::series::split_holdout;
    use crate::valuation::SampleScore;
    use proptest::prelude::*;
    use super::Strategy;

    fn scores(values: &[f64]) -> SampleScores {
        SampleScores {
            entries: values
                .iter()
                .enumerate()
                .map(|(i, &v)| SampleScore { window: SampleWindow { start: i * 10, length: 10 }, value: v, coverage: 1.0 })
                .collect(),
        }
    }

    #[test]
    fn select_examples() {
        let s = scores(&[0.5, 0.1, 0.9]);
        assert_eq!(select(&s, Strategy::Top, 1.0 / 3.0, 0).unwrap().chosen, vec![2]);
        assert_eq!(select(&s, Strategy::Bottom, 1.0 / 3.0, 0).unwrap().chosen, vec![1]);
        assert_eq!(select(&s, Strategy::Full, 0.2, 0).unwrap().chosen, vec![0, 1, 2]);
        let ten = scores(&(0..10).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(select(&ten, Strategy::Top, 0.5, 0).unwrap().chosen, vec![5, 6, 7, 8, 9]);
        assert_eq!(select(&ten, Strategy::Random, 0.5, 3).unwrap().chosen.len(), 5);
    }

    #[test]
    fn ties_prefer_earlier_samples() {
        let s = scores(&[1.0, 1.0, 1.0, 0.0]);
        assert_eq!(select(&s, Strategy::Top, 0.5, 0).unwrap().chosen, vec![0, 1]);
        assert_eq!(select(&s, Strategy::Bottom, 0.5, 0).unwrap().chosen, vec![0, 3]);
    }

    #[test]
    fn select_errors() {
        assert!(matches!(select(&scores(&[]), Strategy::Top, 0.5, 0), Err(Error::EmptyScores)));
        assert!(select(&scores(&[1.0]), Strategy::Top, 0.0, 0).is_err());
        assert!(select(&scores(&[1.0]), Strategy::Top, 1.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn top_bottom_disjoint_and_rank_based(values in prop::collection::vec(-10.0f64..10.0, 1..40), ratio in 0.01f64..=0.5, a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let s = scores(&values);
            let top = select(&s, Strategy::Top, ratio, 0).unwrap().chosen;
            let bottom = select(&s, Strategy::Bottom, ratio, 0).unwrap().chosen;
            if values.len() > 1 {
                prop_assert!(top.iter().all(|i| !bottom.contains(i)));
            }
            let moved = scores(&values.iter().map(|v| a * v + b).collect::<Vec<_>>());
            prop_assert_eq!(select(&moved, Strategy::Top, ratio, 0).unwrap().chosen, top);
            prop_assert_eq!(select(&moved, Strategy::Bottom, ratio, 0).unwrap().chosen, bottom);
        }

        #[test]
        fn auroc_invariant_under_monotone_maps(values in prop::collection::vec(-5.0f64..5.0, 4..30)) {
            let labels: Vec<bool> = (0..values.len()).map(|i| i % 3 == 0).collect();
            let base = auroc_low_is_positive(&values, &labels).unwrap();
            let mapped: Vec<f64> = values.iter().map(|v| v.exp() * 2.0 + 1.0).collect();
            prop_assert!((auroc_low_is_positive(&mapped, &labels).unwrap() - base).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&base));
        }
    }

    #[test]
    fn auroc_examples() {
        let labels = [true, true, false, false, false];
        assert_eq!(auroc_low_is_positive(&[0.0, 0.1, 1.0, 2.0, 3.0], &labels).unwrap(), 1.0);
        assert_eq!(auroc_low_is_positive(&[5.0, 4.0, 1.0, 2.0, 3.0], &labels).unwrap(), 0.0);
        assert_eq!(auroc_low_is_positive(&[1.0; 5], &labels).unwrap(), 0.5);
        assert!(matches!(auroc_low_is_positive(&[1.0, 2.0], &[true, true]), Err(Error::AllOneClass)));
        assert!(matches!(auroc_low_is_positive(&[1.0], &[true, false]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn auroc_null_is_near_half() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 2000;
        let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let np = labels.iter().filter(|&&l| l).count() as f64;
        let nn = n as f64 - np;
        let sigma = ((np + nn + 1.0) / (12.0 * np * nn)).sqrt();
        let auc = auroc_low_is_positive(&values, &labels).unwrap();
        assert!((auc - 0.5).abs() <= 3.0 * sigma, "{auc} vs sigma {sigma}");
    }

    fn ramp(n: usize) -> TimeSeries {
        TimeSeries::univariate((0..n).map(|t| (t as f64 * 0.3).sin()).collect(), "ramp").unwrap()
    }

    fn corruption(fraction: f64, kind: CorruptionKind, magnitude: f64) -> CorruptionSpec {
        CorruptionSpec { fraction, kind, magnitude, block_length: 10, seed: 4 }
    }

    #[test]
    fn corruption_examples() {
        let s = ramp(1000);
        let (same, labels) = inject_corruption(&s, 0..1000, &corruption(0.0, CorruptionKind::GaussianBurst, 1.0)).unwrap();
        assert_eq!(same, s);
        assert_eq!(labels.n_corrupted(), 0);

        let (_, labels) = inject_corruption(&s, 0..1000, &corruption(0.2, CorruptionKind::LevelShift, 1.0)).unwrap();
        assert_eq!((labels.len(), labels.n_corrupted()), (100, 20));

        let (zero, labels) = inject_corruption(&s, 0..1000, &corruption(0.2, CorruptionKind::GaussianBurst, 0.0)).unwrap();
        assert_eq!(zero.values(), s.values());
        assert_eq!(labels.n_corrupted(), 20);

        let (held, labels) = inject_corruption(&s, 0..1000, &corruption(0.1, CorruptionKind::ConstantHold, 0.0)).unwrap();
        for (r, _) in labels.regions.iter().zip(&labels.corrupted).filter(|(_, &c)| c) {
            assert!(r.range().all(|t| held.get(t, 0) == s.get(r.start, 0)));
        }
        assert!(matches!(
            inject_corruption(&s, 0..1000, &corruption(1.0, CorruptionKind::LevelShift, 1.0)),
            Err(Error::FractionTooLarge(_))
        ));
    }

    #[test]
    fn finetune_and_eval_properties() {
        let series = TimeSeries::univariate(vec![2.5; 200], "flat").unwrap();
        let split = split_holdout(200, 0.3, 10).unwrap();
        let spec = ModelSpec::linear_ar(4, 1, 1);
        let samples: Vec<SampleWindow> =
            (0..14).map(|i| SampleWindow { start: i * 10, length: 10 }).collect();
        let sel = SelectionResult { strategy: Strategy::Full, ratio: 1.0, chosen: (0..14).collect(), seed: 0 };
        let cfg = TrainConfig::new(200, 1000, OptimizerConfig::sgd(0.02), 1);
        let base = spec.init().unwrap();
        let a = finetune_and_eval(&spec, &base, &sel, &samples, &series, &split, &cfg, "flat").unwrap();
        let b = finetune_and_eval(&spec, &base, &sel, &samples, &series, &split, &cfg, "flat").unwrap();
        assert_eq!((a.mse, a.mae), (b.mse, b.mae));
        assert!(a.mse < 1e-8 && a.mae < 1e-4, "{} {}", a.mse, a.mae);
        assert!(a.is_leak_free(&split.target));

        let none = TrainConfig { epochs: 0, ..cfg };
        let z = finetune_and_eval(&spec, &base, &sel, &samples, &series, &split, &none, "flat").unwrap();
        let test = test_instances(&series, &split, &spec).unwrap();
        assert_eq!((z.mse, z.mae), evaluate(&spec, &base, &test).unwrap());
    }

    #[test]
    fn short_test_range_is_rejected() {
        let series = ramp(100);
        let split = HoldoutSplit { target: 0..97, test: 97..100 };
        let spec = ModelSpec::linear_ar(4, 1, 1);
        assert!(matches!(test_instances(&series, &split, &spec), Err(Error::TestRangeTooShort { .. })));
    }
}
