//! Small differentiable forecasters with exact gradients.
//!
//! Two architectures map a flattened lookback window (`W x M`, row-major) to a
//! flattened horizon (`H x M`):
//!
//! * `LinearAR`: `y = A x + b`, parameters laid out as `A` row-major
//!   (`HM x WM`) followed by `b` (`HM`, omitted when `bias = false`).
//! * `Mlp`: `y = A2 tanh(A1 x + b1) + b2`, laid out as `A1`, `b1`, `A2`, `b2`.
//!
//! The loss is the mean squared error over all `H * M` target entries.

mod checkpoint;
mod optim;
mod train;

pub use checkpoint::Checkpoint;
pub use optim::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};
pub use train::{train, TrainConfig, TrainOutcome};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::TimeSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    LinearAr,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    /// Hidden units; ignored by `LinearAr`.
    #[serde(default)]
    pub hidden: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Output bias for `LinearAr`. The MLP always has biases.
    #[serde(default = "default_true")]
    pub bias: bool,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn linear_ar(lookback: usize, horizon: usize, channels: usize) -> Self {
        Self {
            architecture: Architecture::LinearAr,
            lookback,
            horizon,
            channels,
            hidden: 0,
            activation: Activation::Tanh,
            bias: true,
            init_seed: 0,
        }
    }

    pub fn mlp(lookback: usize, horizon: usize, channels: usize, hidden: usize, init_seed: u64) -> Self {
        Self {
            architecture: Architecture::Mlp,
            lookback,
            horizon,
            channels,
            hidden,
            activation: Activation::Tanh,
            bias: true,
            init_seed,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.lookback * self.channels
    }

    pub fn output_dim(&self) -> usize {
        self.horizon * self.channels
    }

    /// Length of one training window (`lookback + horizon`).
    pub fn window(&self) -> usize {
        self.lookback + self.horizon
    }

    pub fn n_params(&self) -> usize {
        let (d, o) = (self.input_dim(), self.output_dim());
        match self.architecture {
            Architecture::LinearAr => (d + usize::from(self.bias)) * o,
            Architecture::Mlp => (d + 1) * self.hidden + (self.hidden + 1) * o,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 || self.channels == 0 {
            return Err(Error::InvalidSpec(format!(
                "lookback, horizon and channels must be positive (got {}, {}, {})",
                self.lookback, self.horizon, self.channels
            )));
        }
        if self.architecture == Architecture::Mlp && self.hidden == 0 {
            return Err(Error::InvalidSpec("MLP needs at least one hidden unit".into()));
        }
        Ok(())
    }

    /// Fresh parameters: zeros for `LinearAr`, fan-in uniform for `Mlp`.
    pub fn init(&self) -> Result<ParamVector> {
        self.validate()?;
        let p = self.n_params();
        match self.architecture {
            Architecture::LinearAr => Ok(ParamVector(vec![0.0; p])),
            Architecture::Mlp => {
                let (d, h, o) = (self.input_dim(), self.hidden, self.output_dim());
                let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
                let s1 = 1.0 / (d as f64).sqrt();
                let s2 = 1.0 / (h as f64).sqrt();
                let mut values = Vec::with_capacity(p);
                values.extend((0..(d + 1) * h).map(|_| rng.random_range(-s1..=s1)));
                values.extend((0..(h + 1) * o).map(|_| rng.random_range(-s2..=s2)));
                Ok(ParamVector(values))
            }
        }
    }

    fn check(&self, params: &ParamVector, instance: &ForecastInstance) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        if instance.input.len() != self.input_dim() || instance.target.len() != self.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "instance {}x{} does not fit model {}x{}",
                instance.input.len(),
                instance.target.len(),
                self.input_dim(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    pub fn predict(&self, params: &ParamVector, input: &[f64]) -> Vec<f64> {
        let (d, o) = (self.input_dim(), self.output_dim());
        let p = params.as_slice();
        match self.architecture {
            Architecture::LinearAr => (0..o)
                .map(|k| {
                    let row = &p[k * d..(k + 1) * d];
                    let b = if self.bias { p[o * d + k] } else { 0.0 };
                    dot(row, input) + b
                })
                .collect(),
            Architecture::Mlp => {
                let hidden = self.hidden_activations(p, input);
                self.mlp_output(p, &hidden)
            }
        }
    }

    fn hidden_activations(&self, p: &[f64], input: &[f64]) -> Vec<f64> {
        let (d, h) = (self.input_dim(), self.hidden);
        let biases = &p[d * h..d * h + h];
        (0..h)
            .map(|j| (dot(&p[j * d..(j + 1) * d], input) + biases[j]).tanh())
            .collect()
    }

    fn mlp_output(&self, p: &[f64], hidden: &[f64]) -> Vec<f64> {
        let (d, h, o) = (self.input_dim(), self.hidden, self.output_dim());
        let base = (d + 1) * h;
        let biases = &p[base + o * h..base + o * h + o];
        (0..o)
            .map(|k| dot(&p[base + k * h..base + (k + 1) * h], hidden) + biases[k])
            .collect()
    }

    pub fn loss(&self, params: &ParamVector, instance: &ForecastInstance) -> Result<f64> {
        self.check(params, instance)?;
        let pred = self.predict(params, &instance.input);
        Ok(mse(&pred, &instance.target))
    }

    /// Loss and its exact gradient.
    pub fn grad(&self, params: &ParamVector, instance: &ForecastInstance) -> Result<GradientResult> {
        let mut grad = vec![0.0; self.n_params()];
        let loss = self.accumulate_grad(params, instance, 1.0, &mut grad)?;
        Ok(GradientResult { loss, grad })
    }

    /// Adds `scale * grad` into `out` and returns the unscaled loss.
    pub fn accumulate_grad(
        &self,
        params: &ParamVector,
        instance: &ForecastInstance,
        scale: f64,
        out: &mut [f64],
    ) -> Result<f64> {
        self.check(params, instance)?;
        if out.len() != params.len() {
            return Err(Error::ShapeMismatch("gradient buffer has the wrong length".into()));
        }
        let (d, o) = (self.input_dim(), self.output_dim());
        let p = params.as_slice();
        let x = &instance.input;
        match self.architecture {
            Architecture::LinearAr => {
                let pred = self.predict(params, x);
                let loss = mse(&pred, &instance.target);
                for k in 0..o {
                    let r = 2.0 * (pred[k] - instance.target[k]) / o as f64 * scale;
                    for (g, xi) in out[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *g += r * xi;
                    }
                    if self.bias {
                        out[o * d + k] += r;
                    }
                }
                Ok(loss)
            }
            Architecture::Mlp => {
                let h = self.hidden;
                let hidden = self.hidden_activations(p, x);
                let pred = self.mlp_output(p, &hidden);
                let loss = mse(&pred, &instance.target);
                let base = (d + 1) * h;
                let d_out: Vec<f64> = pred
                    .iter()
                    .zip(&instance.target)
                    .map(|(yh, y)| 2.0 * (yh - y) / o as f64 * scale)
                    .collect();
                let mut d_hidden = vec![0.0; h];
                for (k, &dk) in d_out.iter().enumerate() {
                    let row = base + k * h;
                    for j in 0..h {
                        out[row + j] += dk * hidden[j];
                        d_hidden[j] += dk * p[row + j];
                    }
                    out[base + o * h + k] += dk;
                }
                for j in 0..h {
                    let dpre = d_hidden[j] * (1.0 - hidden[j] * hidden[j]);
                    for (g, xi) in out[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *g += dpre * xi;
                    }
                    out[d * h + j] += dpre;
                }
                Ok(loss)
            }
        }
    }

    /// Mean loss over a batch.
    pub fn batch_loss(&self, params: &ParamVector, instances: &[ForecastInstance]) -> Result<f64> {
        if instances.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut total = 0.0;
        for inst in instances {
            total += self.loss(params, inst)?;
        }
        Ok(total / instances.len() as f64)
    }

    /// Mean loss and mean gradient over a batch.
    pub fn batch_grad<'a, I>(&self, params: &ParamVector, instances: I) -> Result<GradientResult>
    where
        I: IntoIterator<Item = &'a ForecastInstance>,
        I::IntoIter: ExactSizeIterator,
    {
        let iter = instances.into_iter();
        let n = iter.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let scale = 1.0 / n as f64;
        let mut grad = vec![0.0; self.n_params()];
        let mut loss = 0.0;
        for inst in iter {
            loss += self.accumulate_grad(params, inst, scale, &mut grad)?;
        }
        Ok(GradientResult { loss: loss / n as f64, grad })
    }
}

/// Loss-only evaluation; see [`ModelSpec::loss`].
pub fn loss(spec: &ModelSpec, params: &ParamVector, instance: &ForecastInstance) -> Result<f64> {
    spec.loss(params, instance)
}

/// See [`ModelSpec::grad`].
pub fn grad(spec: &ModelSpec, params: &ParamVector, instance: &ForecastInstance) -> Result<GradientResult> {
    spec.grad(params, instance)
}

pub fn batch_loss(spec: &ModelSpec, params: &ParamVector, instances: &[ForecastInstance]) -> Result<f64> {
    spec.batch_loss(params, instances)
}

pub fn init_model(spec: &ModelSpec) -> Result<ParamVector> {
    spec.init()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// One supervised pair: a lookback window and the horizon that follows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastInstance {
    /// `W x M`, row-major.
    pub input: Vec<f64>,
    /// `H x M`, row-major.
    pub target: Vec<f64>,
}

impl ForecastInstance {
    pub fn new(input: Vec<f64>, target: Vec<f64>) -> Self {
        Self { input, target }
    }

    /// Instance from the `lookback + horizon` steps starting at `start`.
    pub fn from_series(series: &TimeSeries, start: usize, lookback: usize, horizon: usize) -> Result<Self> {
        if lookback == 0 || horizon == 0 {
            return Err(Error::InvalidSpec("lookback and horizon must be positive".into()));
        }
        let end = start + lookback + horizon;
        if end > series.len() {
            return Err(Error::ShapeMismatch(format!(
                "window [{start}, {end}) runs past the series end {}",
                series.len()
            )));
        }
        Ok(Self {
            input: series.rows(start..start + lookback).to_vec(),
            target: series.rows(start + lookback..end).to_vec(),
        })
    }

    /// All stride-1 instances that fit inside `range`.
    pub fn sliding(
        series: &TimeSeries,
        range: std::ops::Range<usize>,
        lookback: usize,
        horizon: usize,
    ) -> Result<Vec<Self>> {
        let w = lookback + horizon;
        if range.len() < w {
            return Ok(Vec::new());
        }
        (range.start..=range.end - w)
            .map(|s| Self::from_series(series, s, lookback, horizon))
            .collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / pred.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn scalar_spec() -> ModelSpec {
        ModelSpec::linear_ar(1, 1, 1).without_bias()
    }

    fn random_instance(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> ForecastInstance {
        ForecastInstance::new(
            (0..spec.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..spec.output_dim()).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
    }

    fn random_params(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> ParamVector {
        ParamVector((0..spec.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    // Central differences; the oracle for the analytic gradient.
    fn finite_difference(spec: &ModelSpec, params: &ParamVector, inst: &ForecastInstance) -> Vec<f64> {
        let h = 1e-5;
        (0..params.len())
            .map(|i| {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.0[i] += h;
                minus.0[i] -= h;
                (spec.loss(&plus, inst).unwrap() - spec.loss(&minus, inst).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn param_counts() {
        let spec = ModelSpec::linear_ar(2, 1, 1);
        assert_eq!(spec.n_params(), 3);
        assert_eq!(spec.init().unwrap().0, vec![0.0; 3]);
        assert_eq!(ModelSpec::linear_ar(4, 2, 3).n_params(), (12 + 1) * 6);
        assert_eq!(ModelSpec::mlp(4, 2, 3, 5, 0).n_params(), 13 * 5 + 6 * 6);
    }

    #[test]
    fn mlp_init_is_deterministic_and_bounded() {
        let spec = ModelSpec::mlp(6, 2, 1, 8, 42);
        let a = spec.init().unwrap();
        assert_eq!(a, spec.init().unwrap());
        let first = 1.0 / 6f64.sqrt();
        assert!(a.0[..7 * 8].iter().all(|v| v.abs() <= first));
        let mut other = spec.clone();
        other.init_seed = 43;
        assert_ne!(a, other.init().unwrap());
    }

    #[test]
    fn mlp_without_hidden_units_is_invalid() {
        assert!(matches!(ModelSpec::mlp(2, 1, 1, 0, 0).init(), Err(Error::InvalidSpec(_))));
        assert!(matches!(ModelSpec::linear_ar(0, 1, 1).init(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn loss_examples() {
        let spec = ModelSpec::linear_ar(2, 1, 1);
        let zero = spec.init().unwrap();
        let inst = ForecastInstance::new(vec![0.3, -1.0], vec![0.0]);
        assert_eq!(spec.loss(&zero, &inst).unwrap(), 0.0);
        let inst = ForecastInstance::new(vec![0.3, -1.0], vec![2.0]);
        assert_eq!(spec.loss(&zero, &inst).unwrap(), 4.0);
        let bad = ForecastInstance::new(vec![0.3], vec![2.0]);
        assert!(matches!(spec.loss(&zero, &bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn scalar_gradient_example() {
        let spec = scalar_spec();
        let g = spec
            .grad(&ParamVector(vec![0.0]), &ForecastInstance::new(vec![1.0], vec![2.0]))
            .unwrap();
        assert_eq!(g.grad, vec![-4.0]);
        assert_eq!(g.loss, 4.0);
    }

    #[test]
    fn gradient_vanishes_at_perfect_fit() {
        let spec = ModelSpec::mlp(3, 2, 1, 4, 1);
        let params = spec.init().unwrap();
        let input = vec![0.1, 0.2, -0.4];
        let target = spec.predict(&params, &input);
        let g = spec.grad(&params, &ForecastInstance::new(input, target)).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_loss_examples() {
        let spec = scalar_spec();
        let p = ParamVector(vec![0.0]);
        let a = ForecastInstance::new(vec![1.0], vec![1.0]);
        let b = ForecastInstance::new(vec![1.0], vec![3f64.sqrt()]);
        assert_eq!(spec.batch_loss(&p, std::slice::from_ref(&a)).unwrap(), 1.0);
        let two = spec.batch_loss(&p, &[a.clone(), b.clone()]).unwrap();
        assert!((two - 2.0).abs() < 1e-15);
        assert_eq!(two, spec.batch_loss(&p, &[b, a]).unwrap());
        assert!(matches!(spec.batch_loss(&p, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn sliding_instances() {
        let s = TimeSeries::univariate((0..10).map(f64::from).collect(), "t").unwrap();
        let insts = ForecastInstance::sliding(&s, 2..9, 3, 1).unwrap();
        assert_eq!(insts.len(), 4);
        assert_eq!(insts[0].input, vec![2.0, 3.0, 4.0]);
        assert_eq!(insts[0].target, vec![5.0]);
        assert_eq!(insts[3].target, vec![8.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn mlp_gradient_matches_finite_differences(seed in any::<u64>(), hidden in 1usize..6, channels in 1usize..3) {
            let spec = ModelSpec::mlp(3, 2, channels, hidden, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = random_params(&spec, &mut rng);
            let inst = random_instance(&spec, &mut rng);
            let analytic = spec.grad(&params, &inst).unwrap();
            prop_assert!((analytic.loss - spec.loss(&params, &inst).unwrap()).abs() <= 1e-12);
            let numeric = finite_difference(&spec, &params, &inst);
            for (a, n) in analytic.grad.iter().zip(&numeric) {
                prop_assert!(relative_error(*a, *n) <= 1e-5, "analytic {a} vs numeric {n}");
            }
        }

        #[test]
        fn linear_gradient_matches_finite_differences(seed in any::<u64>(), bias in any::<bool>()) {
            let mut spec = ModelSpec::linear_ar(4, 2, 2);
            spec.bias = bias;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = random_params(&spec, &mut rng);
            let inst = random_instance(&spec, &mut rng);
            let analytic = spec.grad(&params, &inst).unwrap();
            let numeric = finite_difference(&spec, &params, &inst);
            for (a, n) in analytic.grad.iter().zip(&numeric) {
                prop_assert!(relative_error(*a, *n) <= 1e-5);
            }
        }

        #[test]
        fn loss_is_nonnegative(seed in any::<u64>()) {
            let spec = ModelSpec::mlp(2, 1, 2, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = random_params(&spec, &mut rng);
            let inst = random_instance(&spec, &mut rng);
            prop_assert!(spec.loss(&params, &inst).unwrap() >= 0.0);
        }
    }

    #[test]
    fn small_steps_descend() {
        let spec = ModelSpec::mlp(3, 1, 1, 4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let params = random_params(&spec, &mut rng);
            let inst = random_instance(&spec, &mut rng);
            let g = spec.grad(&params, &inst).unwrap();
            let stepped = ParamVector(params.0.iter().zip(&g.grad).map(|(p, gi)| p - 1e-4 * gi).collect());
            assert!(spec.loss(&stepped, &inst).unwrap() <= g.loss);
        }
    }
}
