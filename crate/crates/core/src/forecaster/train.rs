use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ForecastInstance, ModelSpec, OptimizerConfig, OptimizerState, ParamVector};
use crate::error::{Error, Result};

const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, optimizer: OptimizerConfig, seed: u64) -> Self {
        Self { epochs, batch_size, optimizer, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamVector,
    /// Mean training loss per epoch, measured before each batch update.
    pub epoch_losses: Vec<f64>,
}

/// Shuffled mini-batch training from `init`.
pub fn train(
    spec: &ModelSpec,
    init: &ParamVector,
    instances: &[ForecastInstance],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if instances.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    if init.len() != spec.n_params() {
        return Err(Error::ShapeMismatch(format!(
            "initial parameters have length {}, model needs {}",
            init.len(),
            spec.n_params()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new(config.optimizer.clone(), spec.n_params());
    let mut params = init.clone();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let g = spec.batch_grad(&params, batch.iter().map(|&i| &instances[i]))?;
            if !g.loss.is_finite() || g.loss > DIVERGENCE_LIMIT {
                return Err(Error::NonFiniteLoss(g.loss));
            }
            total += g.loss * batch.len() as f64;
            params = state.step(&params, &g.grad)?;
        }
        epoch_losses.push(total / instances.len() as f64);
    }
    Ok(TrainOutcome { params, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::TimeSeries;

    fn linear_series() -> TimeSeries {
        // x_t = 0.8 x_{t-1} - 0.3 x_{t-2} + 0.1, exactly representable by LinearAR(2)
        let mut v = vec![1.0, -0.5];
        for t in 2..200 {
            v.push(0.8 * v[t - 1] - 0.3 * v[t - 2] + 0.1 + if t % 17 == 0 { 0.7 } else { 0.0 });
        }
        TimeSeries::univariate(v, "linear").unwrap()
    }

    #[test]
    fn zero_epochs_returns_init() {
        let spec = ModelSpec::mlp(3, 1, 1, 4, 7);
        let init = spec.init().unwrap();
        let s = linear_series();
        let insts = ForecastInstance::sliding(&s, 0..50, 3, 1).unwrap();
        let out = train(&spec, &init, &insts, &TrainConfig::new(0, 8, OptimizerConfig::adam(1e-2), 0)).unwrap();
        assert_eq!(out.params, init);
        assert!(out.epoch_losses.is_empty());
    }

    #[test]
    fn fits_realizable_linear_data() {
        let s = linear_series();
        let spec = ModelSpec::linear_ar(2, 1, 1);
        // the kicks every 17 steps break the recurrence for a few targets; skip them
        let insts: Vec<_> = ForecastInstance::sliding(&s, 0..s.len(), 2, 1)
            .unwrap()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| (i + 2) % 17 != 0)
            .map(|(_, x)| x)
            .collect();
        let cfg = TrainConfig::new(400, 16, OptimizerConfig::adam(2e-2).with_weight_decay(0.0).with_clip(None), 3);
        let out = train(&spec, &spec.init().unwrap(), &insts, &cfg).unwrap();
        let final_mse = spec.batch_loss(&out.params, &insts).unwrap();
        assert!(final_mse <= 1e-4, "final mse {final_mse}");
        assert!(out.epoch_losses.first().unwrap() > out.epoch_losses.last().unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let s = linear_series();
        let spec = ModelSpec::mlp(4, 2, 1, 6, 1);
        let insts = ForecastInstance::sliding(&s, 0..120, 4, 2).unwrap();
        let cfg = TrainConfig::new(5, 7, OptimizerConfig::adam(1e-2), 11);
        let a = train(&spec, &spec.init().unwrap(), &insts, &cfg).unwrap();
        let b = train(&spec, &spec.init().unwrap(), &insts, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let s = linear_series();
        let spec = ModelSpec::linear_ar(2, 1, 1);
        let insts = ForecastInstance::sliding(&s, 0..100, 2, 1).unwrap();
        let cfg = TrainConfig::new(200, 1, OptimizerConfig::sgd(50.0), 0);
        let err = train(&spec, &spec.init().unwrap(), &insts, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss(_) | Error::NonFiniteGradient), "{err:?}");
    }

    #[test]
    fn empty_training_set() {
        let spec = ModelSpec::linear_ar(2, 1, 1);
        let cfg = TrainConfig::new(1, 1, OptimizerConfig::sgd(0.1), 0);
        assert!(matches!(train(&spec, &spec.init().unwrap(), &[], &cfg), Err(Error::EmptyBatch)));
    }
}
