use std::collections::HashMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{train, ForecastInstance, ModelSpec, ParamVector, TrainConfig};

/// Largest player count accepted by [`exact_shapley`].
pub const MAX_ENUMERATION_BLOCKS: usize = 8;

/// Per-block Shapley values with Monte Carlo standard errors.
///
/// Enumeration reports zero standard errors and `permutations = n!`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyEstimate {
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub permutations: usize,
}

/// Subset utility. Subsets are passed as ascending block indices.
pub trait Utility: Sync {
    fn eval(&self, subset: &[usize]) -> Result<f64>;
}

impl<F> Utility for F
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    fn eval(&self, subset: &[usize]) -> Result<f64> {
        self(subset)
    }
}

fn checked(utility: &dyn Utility, subset: &[usize]) -> Result<f64> {
    let u = utility.eval(subset)?;
    if u.is_finite() {
        Ok(u)
    } else {
        Err(Error::NonFiniteUtility { subset_size: subset.len() })
    }
}

/// Caches utilities by subset so repeated prefixes cost one evaluation.
pub struct Memoized<U> {
    inner: U,
    cache: Mutex<HashMap<Vec<usize>, f64>>,
}

impl<U: Utility> Memoized<U> {
    pub fn new(inner: U) -> Self {
        Self { inner, cache: Mutex::new(HashMap::new()) }
    }

    pub fn evaluations(&self) -> usize {
        self.cache.lock().map(|c| c.len()).unwrap_or(0)
    }
}

impl<U: Utility> Utility for Memoized<U> {
    fn eval(&self, subset: &[usize]) -> Result<f64> {
        if let Some(u) = self.cache.lock().ok().and_then(|c| c.get(subset).copied()) {
            return Ok(u);
        }
        let u = self.inner.eval(subset)?;
        if let Ok(mut c) = self.cache.lock() {
            c.insert(subset.to_vec(), u);
        }
        Ok(u)
    }
}

/// Negative context loss after training from `base` on the chosen blocks.
pub struct TrainedUtility<'a> {
    pub spec: &'a ModelSpec,
    pub base: &'a ParamVector,
    pub blocks: &'a [ForecastInstance],
    pub context: &'a [ForecastInstance],
    pub config: TrainConfig,
}

impl Utility for TrainedUtility<'_> {
    fn eval(&self, subset: &[usize]) -> Result<f64> {
        let params = if subset.is_empty() {
            self.base.clone()
        } else {
            let chosen: Vec<ForecastInstance> = subset.iter().map(|&i| self.blocks[i].clone()).collect();
            train(self.spec, self.base, &chosen, &self.config)?.params
        };
        Ok(-self.spec.batch_loss(&params, self.context)?)
    }
}

/// Exact Shapley values by enumerating all `2^n` subsets.
pub fn exact_shapley(n: usize, utility: &dyn Utility) -> Result<ShapleyEstimate> {
    if n > MAX_ENUMERATION_BLOCKS {
        return Err(Error::GuardViolation(format!(
            "enumeration is limited to {MAX_ENUMERATION_BLOCKS} blocks, got {n}"
        )));
    }
    let utilities = (0u32..1 << n)
        .map(|mask| checked(utility, &members(mask, n)))
        .collect::<Result<Vec<f64>>>()?;

    // weight of a coalition of size s not containing the player: s! (n-s-1)! / n!
    let mut factorial = vec![1.0f64; n + 1];
    for i in 1..=n {
        factorial[i] = factorial[i - 1] * i as f64;
    }
    let mut values = vec![0.0; n];
    for (k, value) in values.iter_mut().enumerate() {
        let bit = 1usize << k;
        for mask in 0..utilities.len() {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = factorial[s] * factorial[n - s - 1] / factorial[n];
            *value += weight * (utilities[mask | bit] - utilities[mask]);
        }
    }
    Ok(ShapleyEstimate { values, std_errors: vec![0.0; n], permutations: factorial[n] as usize })
}

fn members(mask: u32, n: usize) -> Vec<usize> {
    (0..n).filter(|k| mask & (1 << k) != 0).collect()
}

/// Truncated Monte Carlo Shapley over seeded permutations.
///
/// Permutation `i` is drawn from its own stream of `seed`, so results do not
/// depend on `workers`. Once the prefix utility is within `truncation_tol` of
/// the full-set utility, the remaining blocks in that permutation get zero.
pub fn mc_shapley(
    n: usize,
    utility: &dyn Utility,
    n_permutations: usize,
    seed: u64,
    truncation_tol: f64,
    workers: usize,
) -> Result<ShapleyEstimate> {
    if n == 0 {
        return Err(Error::EmptyScores);
    }
    if n_permutations < 2 {
        return Err(Error::InvalidConfig("Monte Carlo Shapley needs at least 2 permutations".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let full = checked(utility, &all)?;
    let empty = checked(utility, &[])?;

    let one = |i: usize| -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut order = all.clone();
        order.shuffle(&mut rng);
        let mut marginals = vec![0.0; n];
        let mut prefix = Vec::with_capacity(n);
        let mut previous = empty;
        for &k in &order {
            if (previous - full).abs() < truncation_tol {
                break;
            }
            prefix.push(k);
            let mut sorted = prefix.clone();
            sorted.sort_unstable();
            let current = checked(utility, &sorted)?;
            marginals[k] = current - previous;
            previous = current;
        }
        Ok(marginals)
    };
    let samples: Vec<Vec<f64>> = if workers <= 1 {
        (0..n_permutations).map(one).collect::<Result<_>>()?
    } else {
        crate::thread_pool(workers)?.install(|| (0..n_permutations).into_par_iter().map(one).collect::<Result<_>>())?
    };

    let m = n_permutations as f64;
    let mut values = vec![0.0; n];
    let mut std_errors = vec![0.0; n];
    for k in 0..n {
        let mean = samples.iter().map(|s| s[k]).sum::<f64>() / m;
        let var = samples.iter().map(|s| (s[k] - mean).powi(2)).sum::<f64>() / (m - 1.0);
        values[k] = mean;
        std_errors[k] = (var / m).sqrt();
    }
    Ok(ShapleyEstimate { values, std_errors, permutations: n_permutations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn additive(subset: &[usize]) -> Result<f64> {
        Ok(subset.iter().map(|&k| [1.0, 3.0][k]).sum())
    }

    #[test]
    fn additive_game() {
        let est = exact_shapley(2, &additive).unwrap();
        assert_eq!(est.values, vec![1.0, 3.0]);
        assert_eq!(est.permutations, 2);
    }

    #[test]
    fn efficiency_and_symmetry_under_enumeration() {
        // players 0 and 1 are interchangeable; the game is not additive
        let game = |s: &[usize]| -> Result<f64> {
            let w = [2.0, 2.0, 0.5, 1.5, 0.1];
            let total: f64 = s.iter().map(|&k| w[k]).sum();
            Ok(total.sqrt() + if s.contains(&3) && s.contains(&4) { 0.7 } else { 0.0 })
        };
        let est = exact_shapley(5, &game).unwrap();
        let sum: f64 = est.values.iter().sum();
        let target = game(&[0, 1, 2, 3, 4]).unwrap() - game(&[]).unwrap();
        assert!((sum - target).abs() <= 1e-12, "{sum} vs {target}");
        assert!((est.values[0] - est.values[1]).abs() <= 1e-12);
    }

    #[test]
    fn enumeration_cap() {
        assert!(matches!(exact_shapley(9, &additive), Err(Error::GuardViolation(_))));
    }

    #[test]
    fn non_finite_utility_is_reported() {
        let bad = |s: &[usize]| -> Result<f64> { Ok(if s.len() == 2 { f64::NAN } else { 0.0 }) };
        assert!(matches!(exact_shapley(3, &bad), Err(Error::NonFiniteUtility { subset_size: 2 })));
    }

    #[test]
    fn monte_carlo_is_exact_for_additive_games_and_worker_independent() {
        let game = |s: &[usize]| -> Result<f64> { Ok(s.iter().map(|&k| k as f64 + 1.0).sum()) };
        let a = mc_shapley(6, &game, 40, 9, 0.0, 1).unwrap();
        let b = mc_shapley(6, &game, 40, 9, 0.0, 4).unwrap();
        assert_eq!(a, b);
        for (k, v) in a.values.iter().enumerate() {
            assert!((v - (k as f64 + 1.0)).abs() < 1e-12);
            assert!(a.std_errors[k] < 1e-12);
        }
    }

    #[test]
    fn memoization_counts_distinct_subsets() {
        let memo = Memoized::new(|s: &[usize]| -> Result<f64> { Ok(s.len() as f64) });
        exact_shapley(3, &memo).unwrap();
        exact_shapley(3, &memo).unwrap();
        assert_eq!(memo.evaluations(), 8);
    }
}
