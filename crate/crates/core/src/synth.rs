//! Seeded synthetic series.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::TimeSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    SineMix,
    ArProcess,
    TrendSeason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub t: usize,
    #[serde(default = "one")]
    pub m: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    /// Lag coefficients for `ar_process`, lag 1 first.
    #[serde(default = "default_ar")]
    pub ar_coefficients: Vec<f64>,
    /// Seasonal period for `trend_season`.
    #[serde(default = "default_period")]
    pub period: usize,
}

fn one() -> usize {
    1
}

fn default_noise() -> f64 {
    0.1
}

fn default_ar() -> Vec<f64> {
    vec![0.6, -0.3]
}

fn default_period() -> usize {
    24
}

impl SyntheticSpec {
    pub fn new(generator: Generator, t: usize, m: usize, noise_std: f64, seed: u64) -> Self {
        Self {
            generator,
            t,
            m,
            noise_std,
            seed,
            ar_coefficients: default_ar(),
            period: default_period(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.m == 0 {
            return Err(Error::InvalidSpec("synthetic series needs t >= 1 and m >= 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidSpec(format!("noise_std {} must be finite and non-negative", self.noise_std)));
        }
        if self.period == 0 {
            return Err(Error::InvalidSpec("period must be positive".into()));
        }
        if self.ar_coefficients.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidSpec("ar_coefficients must be finite".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<TimeSeries> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        let (t_len, m) = (self.t, self.m);
        let mut values = vec![0.0; t_len * m];
        for c in 0..m {
            let column: Vec<f64> = match self.generator {
                Generator::SineMix => {
                    let waves: Vec<(f64, f64, f64)> = (0..3)
                        .map(|_| (rng.random_range(0.3..1.0), rng.random_range(8.0..64.0), rng.random_range(0.0..TAU)))
                        .collect();
                    (0..t_len)
                        .map(|t| {
                            let clean: f64 = waves.iter().map(|(a, p, ph)| a * (TAU * t as f64 / p + ph).sin()).sum();
                            clean + noise.sample(&mut rng)
                        })
                        .collect()
                }
                Generator::ArProcess => {
                    let lags = &self.ar_coefficients;
                    let mut x: Vec<f64> = Vec::with_capacity(t_len);
                    for t in 0..t_len {
                        let mut v = noise.sample(&mut rng);
                        for (i, a) in lags.iter().enumerate() {
                            if t > i {
                                v += a * x[t - 1 - i];
                            }
                        }
                        x.push(v);
                    }
                    x
                }
                Generator::TrendSeason => {
                    let slope = rng.random_range(-1.0..1.0) / t_len as f64;
                    let amplitude = rng.random_range(0.5..1.5);
                    let phase = rng.random_range(0.0..TAU);
                    let period = self.period as f64;
                    (0..t_len)
                        .map(|t| {
                            slope * t as f64 + amplitude * (TAU * t as f64 / period + phase).sin() + noise.sample(&mut rng)
                        })
                        .collect()
                }
            };
            if column.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec("generator diverged; check ar_coefficients".into()));
            }
            for (t, v) in column.into_iter().enumerate() {
                values[t * m + c] = v;
            }
        }
        let names = (0..m).map(|c| format!("ch{c}")).collect();
        TimeSeries::new(values, names, format!("synthetic:{:?}:{}", self.generator, self.seed))
    }
}
