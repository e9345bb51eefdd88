use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forecaster::{train, ForecastInstance, ModelSpec, ParamVector, TrainConfig};

/// Largest training set accepted for brute-force retraining.
pub const MAX_RETRAIN_BLOCKS: usize = 200;

/// Context loss of a model trained without `leave_out` minus that of a model
/// trained on every block, both from `base` with the same schedule.
///
/// Positive means the left-out block was helping. `None` trains the full set
/// twice and returns exactly zero.
pub fn brute_force_retrain(
    spec: &ModelSpec,
    base: &ParamVector,
    blocks: &[ForecastInstance],
    leave_out: Option<usize>,
    config: &TrainConfig,
    context: &[ForecastInstance],
) -> Result<f64> {
    guard(blocks, leave_out)?;
    let full = trained_context_loss(spec, base, blocks, config, context)?;
    let reduced = match leave_out {
        None => trained_context_loss(spec, base, blocks, config, context)?,
        Some(k) => {
            let kept = without(blocks, k);
            trained_context_loss(spec, base, &kept, config, context)?
        }
    };
    Ok(reduced - full)
}

/// [`brute_force_retrain`] for every block, reusing the full-set run.
pub fn retrain_all(
    spec: &ModelSpec,
    base: &ParamVector,
    blocks: &[ForecastInstance],
    config: &TrainConfig,
    context: &[ForecastInstance],
    workers: usize,
) -> Result<Vec<f64>> {
    guard(blocks, None)?;
    let full = trained_context_loss(spec, base, blocks, config, context)?;
    let one = |k: usize| -> Result<f64> {
        Ok(trained_context_loss(spec, base, &without(blocks, k), config, context)? - full)
    };
    if workers <= 1 {
        (0..blocks.len()).map(one).collect()
    } else {
        crate::thread_pool(workers)?.install(|| (0..blocks.len()).into_par_iter().map(one).collect())
    }
}

fn guard(blocks: &[ForecastInstance], leave_out: Option<usize>) -> Result<()> {
    if blocks.len() > MAX_RETRAIN_BLOCKS {
        return Err(Error::GuardViolation(format!(
            "brute-force retraining is limited to {MAX_RETRAIN_BLOCKS} blocks, got {}",
            blocks.len()
        )));
    }
    if let Some(k) = leave_out {
        if k >= blocks.len() {
            return Err(Error::InvalidConfig(format!("leave-out index {k} out of {}", blocks.len())));
        }
        if blocks.len() < 2 {
            return Err(Error::GuardViolation("cannot leave out the only block".into()));
        }
    }
    Ok(())
}

fn without(blocks: &[ForecastInstance], k: usize) -> Vec<ForecastInstance> {
    blocks
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != k)
        .map(|(_, b)| b.clone())
        .collect()
}

/// Trains from `base` on `blocks` and returns the mean context loss.
pub fn trained_context_loss(
    spec: &ModelSpec,
    base: &ParamVector,
    blocks: &[ForecastInstance],
    config: &TrainConfig,
    context: &[ForecastInstance],
) -> Result<f64> {
    let params = if blocks.is_empty() {
        base.clone()
    } else {
        train(spec, base, blocks, config)?.params
    };
    spec.batch_loss(&params, context)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::OptimizerConfig;

    fn toy() -> (ModelSpec, Vec<ForecastInstance>, Vec<ForecastInstance>) {
        let spec = ModelSpec::linear_ar(2, 1, 1);
        let blocks = (0..6)
            .map(|i| {
                let a = i as f64 * 0.3 - 0.5;
                ForecastInstance::new(vec![a, a + 0.2], vec![2.0 * a + 0.1])
            })
            .collect();
        let context = vec![ForecastInstance::new(vec![0.4, 0.6], vec![0.9])];
        (spec, blocks, context)
    }

    #[test]
    fn no_leave_out_is_exactly_zero() {
        let (spec, blocks, context) = toy();
        let cfg = TrainConfig::new(30, 2, OptimizerConfig::adam(0.05), 4);
        let v = brute_force_retrain(&spec, &spec.init().unwrap(), &blocks, None, &cfg, &context).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn retrain_all_matches_single_calls() {
        let (spec, blocks, context) = toy();
        let base = spec.init().unwrap();
        let cfg = TrainConfig::new(20, 6, OptimizerConfig::sgd(0.1), 0);
        let all = retrain_all(&spec, &base, &blocks, &cfg, &context, 3).unwrap();
        for (k, v) in all.iter().enumerate() {
            assert_eq!(*v, brute_force_retrain(&spec, &base, &blocks, Some(k), &cfg, &context).unwrap());
        }
    }

    #[test]
    fn guard_limits_block_count() {
        let (spec, blocks, context) = toy();
        let many: Vec<_> = blocks.iter().cycle().take(MAX_RETRAIN_BLOCKS + 1).cloned().collect();
        let cfg = TrainConfig::new(1, 8, OptimizerConfig::sgd(0.1), 0);
        assert!(matches!(
            brute_force_retrain(&spec, &spec.init().unwrap(), &many, Some(0), &cfg, &context),
            Err(Error::GuardViolation(_))
        ));
    }
}
