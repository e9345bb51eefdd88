use serde::{Deserialize, Serialize};

use super::ParamVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer hyperparameters.
///
/// SGD defaults to no clipping and no weight decay so that a single step is
/// exactly `theta - lr * grad`. Adam defaults to clipping at global norm 1.0
/// and decoupled weight decay 0.1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawOptimizerConfig")]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            weight_decay: 0.0,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            clip_norm: Some(1.0),
            weight_decay: 0.1,
            ..Self::sgd(lr)
        }
    }

    pub fn of_kind(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr),
            OptimizerKind::Adam => Self::adam(lr),
        }
    }

    pub fn with_clip(mut self, clip_norm: Option<f64>) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }
}

// Kind-dependent defaults need a two-stage parse.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizerConfig {
    kind: OptimizerKind,
    lr: f64,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    #[serde(default, deserialize_with = "clip_field")]
    clip_norm: Option<Option<f64>>,
    weight_decay: Option<f64>,
}

// `clip_norm = 0` (or negative) in a config file disables clipping.
fn clip_field<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<Option<f64>>, D::Error> {
    let v = Option::<f64>::deserialize(d)?;
    Ok(Some(v.filter(|c| *c > 0.0)))
}

impl From<RawOptimizerConfig> for OptimizerConfig {
    fn from(raw: RawOptimizerConfig) -> Self {
        let base = OptimizerConfig::of_kind(raw.kind, raw.lr);
        Self {
            beta1: raw.beta1.unwrap_or(base.beta1),
            beta2: raw.beta2.unwrap_or(base.beta2),
            eps: raw.eps.unwrap_or(base.eps),
            clip_norm: raw.clip_norm.unwrap_or(base.clip_norm),
            weight_decay: raw.weight_decay.unwrap_or(base.weight_decay),
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Self {
        Self { config, m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Applies one update and returns the new parameters.
    pub fn step(&mut self, params: &ParamVector, grad: &[f64]) -> Result<ParamVector> {
        if grad.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient of length {} for {} parameters",
                grad.len(),
                params.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        let cfg = &self.config;
        let scale = match cfg.clip_norm {
            Some(c) => {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let lr = cfg.lr;
        let wd = cfg.weight_decay;
        let out = match cfg.kind {
            OptimizerKind::Sgd => params
                .0
                .iter()
                .zip(grad)
                .map(|(p, g)| p - lr * (g * scale + wd * p))
                .collect(),
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - cfg.beta1.powi(t);
                let c2 = 1.0 - cfg.beta2.powi(t);
                params
                    .0
                    .iter()
                    .zip(grad)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                    .map(|((p, g), (m, v))| {
                        let g = g * scale;
                        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        p - lr * wd * p - lr * m_hat / (v_hat.sqrt() + cfg.eps)
                    })
                    .collect()
            }
        };
        Ok(ParamVector(out))
    }
}

/// Functional form: returns the updated parameters and the advanced state.
pub fn optimizer_step(
    params: &ParamVector,
    grad: &[f64],
    mut state: OptimizerState,
) -> Result<(ParamVector, OptimizerState)> {
    let next = state.step(params, grad)?;
    Ok((next, state))
}
