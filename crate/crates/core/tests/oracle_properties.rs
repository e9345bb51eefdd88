use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ltsv_core::forecaster::{ForecastInstance, ModelSpec, OptimizerConfig, ParamVector, TrainConfig};
use ltsv_core::oracles::{
    brute_force_retrain, loo_linear_oracle, mc_shapley, retrain_all, Memoized, TrainedUtility,
};
use ltsv_core::valuation::{block_value, ValuationConfig};

fn noisy_instance(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> ForecastInstance {
    ForecastInstance::new(
        (0..dim).map(|_| rng.random_range(-scale..scale)).collect(),
        vec![rng.random_range(-scale..scale)],
    )
}

/// Clean instances from `y = sum_i w_i x_i` with small noise.
fn clean_instance(rng: &mut ChaCha8Rng, weights: &[f64]) -> ForecastInstance {
    let x: Vec<f64> = weights.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + rng.random_range(-0.01..0.01);
    ForecastInstance::new(x, vec![y])
}

#[test]
fn duplicated_block_is_redundant_when_training_interpolates() {
    // fewer blocks than parameters: full-batch descent from zero reaches the
    // minimum-norm interpolant whether or not the copy is present
    let spec = ModelSpec::linear_ar(10, 1, 1).without_bias();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut blocks: Vec<ForecastInstance> = (0..6).map(|_| noisy_instance(&mut rng, 10, 1.0)).collect();
    blocks.push(blocks[2].clone());
    let context: Vec<_> = (0..8).map(|_| noisy_instance(&mut rng, 10, 1.0)).collect();
    let cfg = TrainConfig::new(20_000, 64, OptimizerConfig::sgd(0.2), 0);
    let changes = retrain_all(&spec, &spec.init().unwrap(), &blocks, &cfg, &context, 4).unwrap();
    let mut magnitudes: Vec<f64> = changes[..6].iter().map(|c| c.abs()).filter(|&c| c != 0.0).collect();
    magnitudes.sort_by(f64::total_cmp);
    let median = magnitudes[magnitudes.len() / 2];
    assert!(changes[6].abs() <= 0.1 * median, "duplicate {} vs median {median}", changes[6]);
    assert!(changes[2].abs() <= 0.1 * median, "original {} vs median {median}", changes[2]);
}

#[test]
fn leaving_out_a_noise_block_helps() {
    let spec = ModelSpec::linear_ar(4, 1, 1);
    let mut helped = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut blocks: Vec<_> = (0..15).map(|_| clean_instance(&mut rng, &weights)).collect();
        blocks.push(noisy_instance(&mut rng, 4, 3.0));
        let context: Vec<_> = (0..20).map(|_| clean_instance(&mut rng, &weights)).collect();
        let cfg = TrainConfig::new(60, 4, OptimizerConfig::adam(0.05).with_weight_decay(0.0), seed);
        let change = brute_force_retrain(&spec, &spec.init().unwrap(), &blocks, Some(15), &cfg, &context).unwrap();
        if change <= 0.0 {
            helped += 1;
        }
    }
    assert!(helped >= 16, "{helped}/20");
}

#[test]
fn copy_of_context_outscores_noise() {
    let spec = ModelSpec::linear_ar(6, 2, 1);
    let cfg = ValuationConfig { lr: 1e-4, ..Default::default() };
    let mut wins = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamVector((0..spec.n_params()).map(|_| rng.random_range(-0.3..0.3)).collect());
        let context = ForecastInstance::new(
            (0..6).map(|t| (t as f64 * 0.5).sin()).collect(),
            vec![(3.0f64).sin(), (3.5f64).sin()],
        );
        let noise = ForecastInstance::new(
            (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let copy_value = block_value(&spec, &params, &context, std::slice::from_ref(&context), &cfg).unwrap();
        let noise_value = block_value(&spec, &params, &noise, std::slice::from_ref(&context), &cfg).unwrap();
        if copy_value > noise_value {
            wins += 1;
        }
    }
    assert!(wins >= 18, "{wins}/20");
}

#[test]
fn monte_carlo_symmetry_within_two_standard_errors() {
    let spec = ModelSpec::linear_ar(2, 1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut blocks: Vec<_> = (0..5).map(|_| noisy_instance(&mut rng, 2, 1.0)).collect();
    blocks.insert(1, blocks[0].clone());
    let context: Vec<_> = (0..6).map(|_| noisy_instance(&mut rng, 2, 1.0)).collect();
    let base = spec.init().unwrap();
    let utility = Memoized::new(TrainedUtility {
        spec: &spec,
        base: &base,
        blocks: &blocks,
        context: &context,
        config: TrainConfig::new(10, 64, OptimizerConfig::sgd(0.1), 0),
    });
    let est = mc_shapley(blocks.len(), &utility, 500, 1, 0.0, 2).unwrap();
    let se = (est.std_errors[0].powi(2) + est.std_errors[1].powi(2)).sqrt();
    assert!((est.values[0] - est.values[1]).abs() <= 2.0 * se);
}

fn refit(x: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> DVector<f64> {
    let p = x.ncols();
    (x.transpose() * x + DMatrix::identity(p, p) * ridge).lu().solve(&(x.transpose() * y)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loo_matches_refit(seed in 0u64..1000, ridge in 0.05f64..2.0, index in 0usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, p) = (12, 3);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let cx = DMatrix::from_fn(5, p, |_, _| rng.random_range(-1.0..1.0));
        let cy = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let closed = loo_linear_oracle(&x, &y, ridge, index, &cx, &cy).unwrap();
        let keep: Vec<usize> = (0..n).filter(|&r| r != index).collect();
        let mse = |b: &DVector<f64>| (&cy - &cx * b).norm_squared() / 5.0;
        let brute = mse(&refit(&x.select_rows(&keep), &y.select_rows(&keep), ridge)) - mse(&refit(&x, &y, ridge));
        prop_assert!((closed - brute).abs() <= 1e-8);
    }
}
