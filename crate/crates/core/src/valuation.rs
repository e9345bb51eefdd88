//! Block, point and sample values from one-step in-context finetuning.
//!
//! A block's value is the context loss under the shared parameters minus the
//! context loss after a single optimizer step on the block:
//!
//! ```text
//! v(B) = L(context; theta) - L(context; theta - lr * grad L(B; theta))
//! ```
//!
//! Positive values mean the block moved the model toward the context. For
//! small SGD steps this equals `lr * <grad L(context), grad L(B)>` up to a
//! term of order `lr^2` (see [`grad_inner_influence`]).
//!
//! Samples are dealt into folds; each block is scored against the blocks of
//! every other fold, always starting from the same parameters.

use std::ops::Range;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{
    dot, ForecastInstance, ModelSpec, OptimizerConfig, OptimizerKind, OptimizerState, ParamVector,
};
use crate::series::{
    enumerate_samples, make_folds, segment_blocks, Block, FoldPlan, SampleWindow, TimeSeries,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValuationConfig {
    pub block_length: usize,
    pub stride: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub k_folds: usize,
    /// Maximum number of context instances per fold; `None` keeps all.
    pub context_cap: Option<usize>,
    pub sample_length: usize,
    pub seed: u64,
}

impl Default for ValuationConfig {
    fn default() -> Self {
        Self {
            block_length: 100,
            stride: 1,
            lr: 1e-5,
            optimizer: OptimizerKind::Sgd,
            k_folds: 5,
            context_cap: None,
            sample_length: 100,
            seed: 0,
        }
    }
}

impl ValuationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be non-negative", self.lr)));
        }
        if self.block_length < 2 {
            return Err(Error::InvalidConfig("block length must be at least 2".into()));
        }
        if self.stride == 0 || self.sample_length == 0 {
            return Err(Error::InvalidConfig("stride and sample length must be positive".into()));
        }
        if self.k_folds < 2 {
            return Err(Error::InvalidConfig("need at least 2 folds".into()));
        }
        if self.context_cap == Some(0) {
            return Err(Error::InvalidConfig("context cap must be positive".into()));
        }
        Ok(())
    }

    fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig::of_kind(self.optimizer, self.lr)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneResult {
    pub params_after: ParamVector,
    pub delta_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockScore {
    pub block: Block,
    pub value: f64,
    pub fold: usize,
}

/// Per-point values over a range; `None` marks points no block covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointScores {
    pub start: usize,
    pub values: Vec<Option<f64>>,
    pub coverage: Vec<usize>,
}

impl PointScores {
    pub fn get(&self, t: usize) -> Option<f64> {
        t.checked_sub(self.start).and_then(|i| self.values.get(i).copied().flatten())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub window: SampleWindow,
    pub value: f64,
    /// Fraction of the window's points that carried a score.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub entries: Vec<SampleScore>,
}

impl SampleScores {
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuationScores {
    pub blocks: Vec<BlockScore>,
    pub points: PointScores,
    pub samples: SampleScores,
}

/// Splits a block into one instance: the first `L - H` steps predict the last `H`.
pub fn block_to_instance(series: &TimeSeries, block: &Block, horizon: usize) -> Result<ForecastInstance> {
    if horizon == 0 || horizon >= block.length {
        return Err(Error::HorizonTooLong { horizon, length: block.length });
    }
    ForecastInstance::from_series(series, block.start, block.length - horizon, horizon)
}

/// One optimizer step on `instance` from `params`, with fresh optimizer state.
pub fn finetune_one_step(
    spec: &ModelSpec,
    params: &ParamVector,
    instance: &ForecastInstance,
    config: &ValuationConfig,
) -> Result<FinetuneResult> {
    if !params.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let g = spec.grad(params, instance)?;
    let mut state = OptimizerState::new(config.optimizer_config(), params.len());
    let params_after = state.step(params, &g.grad)?;
    let delta_norm = params_after.distance(params);
    Ok(FinetuneResult { params_after, delta_norm })
}

/// `L(context; theta) - L(context; theta_finetuned)`.
pub fn block_value(
    spec: &ModelSpec,
    params: &ParamVector,
    block_instance: &ForecastInstance,
    context: &[ForecastInstance],
    config: &ValuationConfig,
) -> Result<f64> {
    if context.is_empty() {
        return Err(Error::EmptyContext);
    }
    let before = spec.batch_loss(params, context)?;
    value_against(spec, params, block_instance, context, before, config)
}

fn value_against(
    spec: &ModelSpec,
    params: &ParamVector,
    block_instance: &ForecastInstance,
    context: &[ForecastInstance],
    context_loss_before: f64,
    config: &ValuationConfig,
) -> Result<f64> {
    let tuned = finetune_one_step(spec, params, block_instance, config)?;
    let after = spec.batch_loss(&tuned.params_after, context)?;
    Ok(context_loss_before - after)
}

/// First-order prediction of [`block_value`] under SGD:
/// `lr * <grad L(context), grad L(block)>`.
pub fn grad_inner_influence(
    spec: &ModelSpec,
    params: &ParamVector,
    block_instance: &ForecastInstance,
    context: &[ForecastInstance],
    lr: f64,
) -> Result<f64> {
    let gc = spec.batch_grad(params, context)?;
    let gb = spec.grad(params, block_instance)?;
    Ok(lr * dot(&gc.grad, &gb.grad))
}

/// Everything produced by scoring the blocks of one range.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockValuation {
    pub scores: Vec<BlockScore>,
    pub samples: Vec<SampleWindow>,
    pub folds: FoldPlan,
    /// Block indices forming each fold's context, ascending.
    pub contexts: Vec<Vec<usize>>,
}

/// Instances, fold plan and contexts for the blocks of `range`, before any scoring.
#[derive(Debug, Clone)]
pub struct ValuationLayout {
    pub blocks: Vec<Block>,
    pub instances: Vec<ForecastInstance>,
    pub block_folds: Vec<usize>,
    pub samples: Vec<SampleWindow>,
    pub folds: FoldPlan,
    pub contexts: Vec<Vec<usize>>,
}

impl ValuationLayout {
    pub fn new(series: &TimeSeries, range: Range<usize>, spec: &ModelSpec, config: &ValuationConfig) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        if range.end > series.len() {
            return Err(Error::InvalidSeries(format!("range {range:?} exceeds series length {}", series.len())));
        }
        if spec.window() != config.block_length {
            return Err(Error::InvalidConfig(format!(
                "model window {} (lookback {} + horizon {}) must equal the block length {}",
                spec.window(),
                spec.lookback,
                spec.horizon,
                config.block_length
            )));
        }
        if spec.channels != series.channels() {
            return Err(Error::ShapeMismatch(format!(
                "model has {} channels, series has {}",
                spec.channels,
                series.channels()
            )));
        }
        let blocks = segment_blocks(range.clone(), config.block_length, config.stride)?;
        let samples = enumerate_samples(range.clone(), config.sample_length)?;
        let folds = make_folds(samples.len(), config.k_folds, config.seed)?;
        let instances = blocks
            .iter()
            .map(|b| block_to_instance(series, b, spec.horizon))
            .collect::<Result<Vec<_>>>()?;
        // a block belongs to the sample holding its first step; blocks starting in
        // the dropped remainder join the last sample
        let block_folds: Vec<usize> = blocks
            .iter()
            .map(|b| {
                let s = ((b.start - range.start) / config.sample_length).min(samples.len() - 1);
                folds.fold_of(s)
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut contexts = Vec::with_capacity(config.k_folds);
        for f in 0..config.k_folds {
            let pool: Vec<usize> = (0..blocks.len()).filter(|&i| block_folds[i] != f).collect();
            let chosen = match config.context_cap {
                Some(cap) if pool.len() > cap => {
                    let mut picked: Vec<usize> =
                        sample(&mut rng, pool.len(), cap).into_iter().map(|j| pool[j]).collect();
                    picked.sort_unstable();
                    picked
                }
                _ => pool,
            };
            if chosen.is_empty() {
                return Err(Error::EmptyContext);
            }
            contexts.push(chosen);
        }
        Ok(Self { blocks, instances, block_folds, samples, folds, contexts })
    }

    pub fn context_instances(&self, fold: usize) -> Vec<ForecastInstance> {
        self.contexts[fold].iter().map(|&i| self.instances[i].clone()).collect()
    }
}

/// Scores every block of `range` under the fold protocol.
///
/// Output is ordered by block start and does not depend on `workers`.
pub fn value_all_blocks(
    series: &TimeSeries,
    range: Range<usize>,
    spec: &ModelSpec,
    params: &ParamVector,
    config: &ValuationConfig,
    workers: usize,
) -> Result<BlockValuation> {
    let layout = ValuationLayout::new(series, range, spec, config)?;
    let scores = score_layout(&layout, spec, params, config, workers)?;
    Ok(BlockValuation {
        scores,
        samples: layout.samples,
        folds: layout.folds,
        contexts: layout.contexts,
    })
}

pub fn score_layout(
    layout: &ValuationLayout,
    spec: &ModelSpec,
    params: &ParamVector,
    config: &ValuationConfig,
    workers: usize,
) -> Result<Vec<BlockScore>> {
    let contexts: Vec<Vec<ForecastInstance>> =
        (0..layout.contexts.len()).map(|f| layout.context_instances(f)).collect();
    let before = contexts
        .iter()
        .map(|c| spec.batch_loss(params, c))
        .collect::<Result<Vec<_>>>()?;

    let score = |i: usize| -> Result<BlockScore> {
        let fold = layout.block_folds[i];
        let value = value_against(spec, params, &layout.instances[i], &contexts[fold], before[fold], config)?;
        Ok(BlockScore { block: layout.blocks[i], value, fold })
    };
    let n = layout.blocks.len();
    if workers <= 1 {
        (0..n).map(score).collect()
    } else {
        crate::thread_pool(workers)?.install(|| (0..n).into_par_iter().map(score).collect())
    }
}

/// Mean block value over the blocks covering each point of `range`.
pub fn aggregate_points(block_scores: &[BlockScore], range: Range<usize>) -> PointScores {
    let n = range.len();
    let mut sums = vec![0.0; n];
    let mut coverage = vec![0usize; n];
    for s in block_scores {
        let lo = s.block.start.max(range.start);
        let hi = s.block.end().min(range.end);
        for t in lo..hi {
            sums[t - range.start] += s.value;
            coverage[t - range.start] += 1;
        }
    }
    let values = sums
        .into_iter()
        .zip(&coverage)
        .map(|(sum, &c)| (c > 0).then(|| sum / c as f64))
        .collect();
    PointScores { start: range.start, values, coverage }
}

/// Mean point value over each sample window; unscored points are skipped.
pub fn aggregate_samples(points: &PointScores, samples: &[SampleWindow]) -> Result<SampleScores> {
    let entries = samples
        .iter()
        .enumerate()
        .map(|(index, w)| {
            let scored: Vec<f64> = w.range().filter_map(|t| points.get(t)).collect();
            if scored.is_empty() {
                return Err(Error::WhollyUnscoredSample { index });
            }
            Ok(SampleScore {
                window: *w,
                value: scored.iter().sum::<f64>() / scored.len() as f64,
                coverage: scored.len() as f64 / w.length as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleScores { entries })
}

/// Full pipeline over one range: block scores, point and sample aggregates.
pub fn value_series(
    series: &TimeSeries,
    range: Range<usize>,
    spec: &ModelSpec,
    params: &ParamVector,
    config: &ValuationConfig,
    workers: usize,
) -> Result<(ValuationScores, BlockValuation)> {
    let run = value_all_blocks(series, range.clone(), spec, params, config, workers)?;
    let points = aggregate_points(&run.scores, range);
    let samples = aggregate_samples(&points, &run.samples)?;
    Ok((ValuationScores { blocks: run.scores.clone(), points, samples }, run))
}
