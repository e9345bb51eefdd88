//! End-to-end pipelines: value the target split, select, finetune, evaluate.

use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{train, ForecastInstance, ModelSpec, OptimizerConfig, ParamVector, TrainConfig};
use crate::oracles::{build_hessian, ContextInfluence, Damping, HessianMode, MAX_DENSE_PARAMS};
use crate::selection::{finetune_and_eval, select, EvalReport, Strategy};
use crate::series::{normalize, split_holdout, ConstantChannelPolicy, HoldoutSplit, NormStats, TimeSeries};
use crate::synth::{Generator, SyntheticSpec};
use crate::valuation::{block_value, value_series, BlockValuation, ValuationConfig, ValuationScores};

/// Where downstream finetuning starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneBase {
    /// The downstream model after the pretraining schedule on the whole target split.
    #[default]
    Pretrained,
    /// The downstream model's initialization.
    Init,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub valuation: ValuationConfig,
    pub value_model: ModelSpec,
    /// Model trained on the selections; `None` reuses `value_model`.
    #[serde(default)]
    pub downstream_model: Option<ModelSpec>,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    #[serde(default)]
    pub finetune_from: FinetuneBase,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.3
}

fn default_true() -> bool {
    true
}

fn default_ratio() -> f64 {
    0.5
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

impl PipelineConfig {
    /// LinearAR valued and finetuned with the default block geometry.
    pub fn linear(block_length: usize, horizon: usize) -> Self {
        let valuation = ValuationConfig { block_length, sample_length: block_length, ..Default::default() };
        Self {
            test_fraction: default_test_fraction(),
            normalize: true,
            valuation,
            value_model: ModelSpec::linear_ar(block_length - horizon, horizon, 1),
            downstream_model: None,
            pretrain: TrainConfig::new(5, 32, OptimizerConfig::adam(1e-2), 0),
            finetune: TrainConfig::new(20, 32, OptimizerConfig::adam(1e-2), 0),
            finetune_from: FinetuneBase::Pretrained,
            ratio: default_ratio(),
            strategies: default_strategies(),
            seed: 0,
        }
    }

    pub fn downstream(&self) -> &ModelSpec {
        self.downstream_model.as_ref().unwrap_or(&self.value_model)
    }

    pub fn validate(&self) -> Result<()> {
        self.valuation.validate()?;
        self.value_model.validate()?;
        self.downstream().validate()?;
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!("selection ratio {} is outside (0, 1]", self.ratio)));
        }
        if self.strategies.is_empty() {
            return Err(Error::InvalidConfig("no selection strategies given".into()));
        }
        if self.downstream().window() > self.valuation.sample_length {
            return Err(Error::InvalidConfig(format!(
                "downstream window {} exceeds the sample length {}",
                self.downstream().window(),
                self.valuation.sample_length
            )));
        }
        Ok(())
    }
}

/// A series split chronologically and scaled with target-split statistics.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub series: TimeSeries,
    pub split: HoldoutSplit,
    pub stats: Option<NormStats>,
}

pub fn prepare(series: &TimeSeries, test_fraction: f64, min_window: usize, scale: bool) -> Result<Prepared> {
    let split = split_holdout(series.len(), test_fraction, min_window)?;
    if !scale {
        return Ok(Prepared { series: series.clone(), split, stats: None });
    }
    let stats = NormStats::fit(series, split.target.clone(), ConstantChannelPolicy::UnitStd)?;
    Ok(Prepared { series: normalize(series, &stats)?, split, stats: Some(stats) })
}

/// Trains `spec` from its initialization on every stride-1 window of the target split.
pub fn pretrain(spec: &ModelSpec, prepared: &Prepared, config: &TrainConfig) -> Result<ParamVector> {
    let init = spec.init()?;
    if config.epochs == 0 {
        return Ok(init);
    }
    let instances = ForecastInstance::sliding(&prepared.series, prepared.split.target.clone(), spec.lookback, spec.horizon)?;
    Ok(train(spec, &init, &instances, config)?.params)
}

#[derive(Debug, Clone)]
pub struct Valued {
    pub params: ParamVector,
    pub scores: ValuationScores,
    pub valuation: BlockValuation,
}

/// Scores the target split, pretraining the value model unless `params` are given.
pub fn value_target(
    prepared: &Prepared,
    config: &PipelineConfig,
    params: Option<&ParamVector>,
    workers: usize,
) -> Result<Valued> {
    let params = match params {
        Some(p) if p.len() == config.value_model.n_params() => p.clone(),
        Some(p) => {
            return Err(Error::ShapeMismatch(format!(
                "given parameters have length {}, value model needs {}",
                p.len(),
                config.value_model.n_params()
            )))
        }
        None => pretrain(&config.value_model, prepared, &config.pretrain)?,
    };
    let (scores, valuation) = value_series(
        &prepared.series,
        prepared.split.target.clone(),
        &config.value_model,
        &params,
        &config.valuation,
        workers,
    )?;
    Ok(Valued { params, scores, valuation })
}

fn downstream_base(prepared: &Prepared, config: &PipelineConfig, valued: &Valued) -> Result<ParamVector> {
    let spec = config.downstream();
    match config.finetune_from {
        FinetuneBase::Init => spec.init(),
        FinetuneBase::Pretrained if *spec == config.value_model => Ok(valued.params.clone()),
        FinetuneBase::Pretrained => pretrain(spec, prepared, &config.pretrain),
    }
}

/// Selection and evaluation for every `(ratio, strategy)` cell, in input order.
fn evaluate_cells(
    prepared: &Prepared,
    config: &PipelineConfig,
    valued: &Valued,
    cells: &[(f64, Strategy)],
    dataset: &str,
    workers: usize,
) -> Result<Vec<EvalReport>> {
    let spec = config.downstream();
    let base = downstream_base(prepared, config, valued)?;
    let one = |&(ratio, strategy): &(f64, Strategy)| -> Result<EvalReport> {
        let selection = select(&valued.scores.samples, strategy, ratio, config.seed)?;
        finetune_and_eval(
            spec,
            &base,
            &selection,
            &valued.valuation.samples,
            &prepared.series,
            &prepared.split,
            &config.finetune,
            dataset,
        )
    };
    if workers <= 1 {
        cells.iter().map(one).collect()
    } else {
        crate::thread_pool(workers)?.install(|| cells.par_iter().map(one).collect())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub prepared: Prepared,
    pub valued: Valued,
    pub reports: Vec<EvalReport>,
}

/// Value, select with each configured strategy and evaluate on the test split.
pub fn run_pipeline(series: &TimeSeries, config: &PipelineConfig, dataset: &str, workers: usize) -> Result<PipelineOutcome> {
    run_pipeline_with(series, config, None, dataset, workers)
}

/// [`run_pipeline`] with optional ready-made value-model parameters.
pub fn run_pipeline_with(
    series: &TimeSeries,
    config: &PipelineConfig,
    params: Option<&ParamVector>,
    dataset: &str,
    workers: usize,
) -> Result<PipelineOutcome> {
    config.validate()?;
    let prepared = prepare(series, config.test_fraction, config.valuation.block_length, config.normalize)?;
    let valued = value_target(&prepared, config, params, workers)?;
    let cells: Vec<(f64, Strategy)> = config.strategies.iter().map(|&s| (config.ratio, s)).collect();
    let reports = evaluate_cells(&prepared, config, &valued, &cells, dataset, workers)?;
    for r in &reports {
        info!("{dataset} {} ratio={} mse={:.6} mae={:.6}", r.strategy, r.ratio, r.mse, r.mae);
    }
    Ok(PipelineOutcome { prepared, valued, reports })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub block_length: usize,
    pub report: EvalReport,
}

/// Strategy rows by block-length columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub block_lengths: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn report(&self, strategy: Strategy, block_length: usize) -> Option<&EvalReport> {
        self.cells
            .iter()
            .find(|c| c.block_length == block_length && c.report.strategy == strategy)
            .map(|c| &c.report)
    }

    pub fn mse(&self, strategy: Strategy, block_length: usize) -> Option<f64> {
        self.report(strategy, block_length).map(|r| r.mse)
    }
}

/// Reruns the pipeline for each block length.
///
/// The value model's lookback follows the block length; the downstream model,
/// the split and the samples are the same in every column.
pub fn ablate_block_length(
    series: &TimeSeries,
    block_lengths: &[usize],
    config: &PipelineConfig,
    dataset: &str,
    workers: usize,
) -> Result<AblationTable> {
    if block_lengths.is_empty() {
        return Err(Error::InvalidConfig("no block lengths given".into()));
    }
    let longest = block_lengths.iter().copied().max().unwrap_or(0);
    let prepared = prepare(series, config.test_fraction, longest, config.normalize)?;
    let downstream = config.downstream().clone();
    let mut cells = Vec::new();
    for &length in block_lengths {
        let horizon = config.value_model.horizon;
        if length <= horizon {
            return Err(Error::HorizonTooLong { horizon, length });
        }
        let mut cfg = config.clone();
        cfg.valuation.block_length = length;
        cfg.value_model.lookback = length - horizon;
        cfg.downstream_model = Some(downstream.clone());
        cfg.validate()?;
        let valued = value_target(&prepared, &cfg, None, workers)?;
        let grid: Vec<(f64, Strategy)> = cfg.strategies.iter().map(|&s| (cfg.ratio, s)).collect();
        for report in evaluate_cells(&prepared, &cfg, &valued, &grid, dataset, workers)? {
            info!("L={length} {} mse={:.6}", report.strategy, report.mse);
            cells.push(AblationCell { block_length: length, report });
        }
    }
    Ok(AblationTable { block_lengths: block_lengths.to_vec(), strategies: config.strategies.clone(), cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationCell {
    pub ratio: f64,
    pub report: EvalReport,
}

/// Values once with `value_model`, then trains `downstream_model` on the
/// selections at every ratio.
pub fn cross_model_generalization(
    series: &TimeSeries,
    config: &PipelineConfig,
    ratios: &[f64],
    dataset: &str,
    workers: usize,
) -> Result<Vec<GeneralizationCell>> {
    config.validate()?;
    if ratios.is_empty() {
        return Err(Error::InvalidConfig("no selection ratios given".into()));
    }
    let prepared = prepare(series, config.test_fraction, config.valuation.block_length, config.normalize)?;
    let valued = value_target(&prepared, config, None, workers)?;
    let cells: Vec<(f64, Strategy)> = ratios
        .iter()
        .flat_map(|&r| config.strategies.iter().map(move |&s| (r, s)))
        .collect();
    let reports = evaluate_cells(&prepared, config, &valued, &cells, dataset, workers)?;
    Ok(cells
        .iter()
        .zip(reports)
        .map(|(&(ratio, _), report)| GeneralizationCell { ratio, report })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    Ltsv,
    ExactInfluence,
}

impl BenchMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMethod::Ltsv => "ltsv",
            BenchMethod::ExactInfluence => "exact_influence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// MLP hidden widths; each gives one parameter count.
    pub hidden: Vec<usize>,
    #[serde(default = "default_methods")]
    pub methods: Vec<BenchMethod>,
    #[serde(default = "default_bench_blocks")]
    pub n_blocks: usize,
    #[serde(default = "default_bench_context")]
    pub context_size: usize,
    #[serde(default = "default_bench_lookback")]
    pub lookback: usize,
    #[serde(default = "default_bench_horizon")]
    pub horizon: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Exact influence is skipped above this parameter count.
    #[serde(default = "default_exact_limit")]
    pub exact_max_params: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_methods() -> Vec<BenchMethod> {
    vec![BenchMethod::Ltsv, BenchMethod::ExactInfluence]
}

fn default_bench_blocks() -> usize {
    50
}

fn default_bench_context() -> usize {
    50
}

fn default_bench_lookback() -> usize {
    24
}

fn default_bench_horizon() -> usize {
    4
}

fn default_repeats() -> usize {
    3
}

fn default_exact_limit() -> usize {
    MAX_DENSE_PARAMS
}

impl BenchConfig {
    pub fn new(hidden: Vec<usize>) -> Self {
        Self {
            hidden,
            methods: default_methods(),
            n_blocks: default_bench_blocks(),
            context_size: default_bench_context(),
            lookback: default_bench_lookback(),
            horizon: default_bench_horizon(),
            repeats: default_repeats(),
            exact_max_params: default_exact_limit(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: BenchMethod,
    pub hidden: usize,
    pub params: usize,
    pub median_seconds: f64,
    pub seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of `ln(median seconds)` on `ln(params)`, per method.
    pub slopes: Vec<(BenchMethod, f64)>,
}

impl ScalingTable {
    pub fn slope(&self, method: BenchMethod) -> Option<f64> {
        self.slopes.iter().find(|(m, _)| *m == method).map(|(_, s)| *s)
    }
}

/// Times each method on an MLP of every hidden width, single-threaded.
pub fn bench_scaling(config: &BenchConfig) -> Result<ScalingTable> {
    if config.hidden.is_empty() || config.repeats == 0 || config.n_blocks == 0 || config.context_size == 0 {
        return Err(Error::InvalidConfig("bench needs hidden sizes, repeats, blocks and context".into()));
    }
    let window = config.lookback + config.horizon;
    let total = config.n_blocks + config.context_size;
    let series = SyntheticSpec::new(Generator::SineMix, window + total - 1, 1, 0.1, config.seed).generate()?;
    let instances = ForecastInstance::sliding(&series, 0..series.len(), config.lookback, config.horizon)?;
    let (blocks, context) = instances.split_at(config.n_blocks);
    let valuation = ValuationConfig { block_length: window, lr: 1e-3, ..Default::default() };

    let mut rows = Vec::new();
    for &hidden in &config.hidden {
        let spec = ModelSpec::mlp(config.lookback, config.horizon, 1, hidden, config.seed);
        let params = spec.init()?;
        for &method in &config.methods {
            if method == BenchMethod::ExactInfluence && spec.n_params() > config.exact_max_params {
                info!("skipping exact influence at P={}", spec.n_params());
                continue;
            }
            let mut seconds = Vec::with_capacity(config.repeats);
            for _ in 0..config.repeats {
                let started = Instant::now();
                match method {
                    BenchMethod::Ltsv => {
                        for b in blocks {
                            std::hint::black_box(block_value(&spec, &params, b, context, &valuation)?);
                        }
                    }
                    BenchMethod::ExactInfluence => {
                        let h = build_hessian(&spec, &params, blocks, HessianMode::FiniteDiff, Damping::Auto, 1)
                            .or_else(|e| match e {
                                Error::IndefiniteAfterDamping { suggested_damping, .. } => build_hessian(
                                    &spec,
                                    &params,
                                    blocks,
                                    HessianMode::FiniteDiff,
                                    Damping::Fixed(suggested_damping),
                                    1,
                                ),
                                other => Err(other),
                            })?;
                        let ci = ContextInfluence::new(&spec, &params, &h, context)?;
                        for b in blocks {
                            std::hint::black_box(ci.influence(&spec, &params, b)?);
                        }
                    }
                }
                seconds.push(started.elapsed().as_secs_f64());
            }
            let median = median(&seconds);
            info!("{} P={} median={median:.4}s", method.as_str(), spec.n_params());
            rows.push(BenchRow { method, hidden, params: spec.n_params(), median_seconds: median, seconds });
        }
    }
    let slopes = config
        .methods
        .iter()
        .filter_map(|&m| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.method == m)
                .map(|r| ((r.params as f64).ln(), r.median_seconds.max(1e-9).ln()))
                .collect();
            (pts.len() >= 2).then(|| (m, least_squares_slope(&pts)))
        })
        .collect();
    Ok(ScalingTable { rows, slopes })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Slope of the ordinary least-squares line through `(x, y)` points.
pub fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}
