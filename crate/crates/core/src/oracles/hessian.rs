use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{Architecture, ForecastInstance, ModelSpec, ParamVector};

/// Largest parameter count for which a dense Hessian is built.
pub const MAX_DENSE_PARAMS: usize = 5000;

const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Closed form; `LinearAr` only.
    Analytic,
    /// Central differences of the analytic gradient.
    FiniteDiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Damping {
    /// `1e-3 * trace(H) / P`.
    #[default]
    Auto,
    Fixed(f64),
}

/// Mean per-instance Hessian with its damped Cholesky factor.
#[derive(Debug, Clone)]
pub struct HessianMatrix {
    undamped: DMatrix<f64>,
    damping: f64,
    factor: Cholesky<f64, Dyn>,
}

impl HessianMatrix {
    /// Symmetrizes `matrix`, adds `damping * I` and factors the result.
    pub fn from_matrix(matrix: DMatrix<f64>, damping: Damping) -> Result<Self> {
        let p = matrix.nrows();
        if p != matrix.ncols() || p == 0 {
            return Err(Error::ShapeMismatch(format!("Hessian must be square, got {}x{}", p, matrix.ncols())));
        }
        let undamped = (&matrix + matrix.transpose()) * 0.5;
        let damping = match damping {
            Damping::Auto => 1e-3 * undamped.trace() / p as f64,
            Damping::Fixed(l) => l,
        };
        if !(damping >= 0.0 && damping.is_finite()) {
            return Err(Error::InvalidConfig(format!("damping {damping} must be non-negative")));
        }
        let damped = &undamped + DMatrix::identity(p, p) * damping;
        match Cholesky::new(damped.clone()) {
            Some(factor) => Ok(Self { undamped, damping, factor }),
            None => {
                let min_eigenvalue = damped.symmetric_eigenvalues().min();
                let suggested_damping = damping + 1.1 * min_eigenvalue.abs() + f64::EPSILON;
                Err(Error::IndefiniteAfterDamping { min_eigenvalue, suggested_damping })
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.undamped.nrows()
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn undamped(&self) -> &DMatrix<f64> {
        &self.undamped
    }

    /// `H + damping * I`.
    pub fn damped(&self) -> DMatrix<f64> {
        &self.undamped + DMatrix::identity(self.dim(), self.dim()) * self.damping
    }

    /// Solves `(H + damping * I) s = rhs`.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        if rhs.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!("rhs of length {} for a {}-dim system", rhs.len(), self.dim())));
        }
        let s = self.factor.solve(&DVector::from_column_slice(rhs));
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem);
        }
        Ok(s.as_slice().to_vec())
    }
}

/// `(1/N) * sum of per-instance loss Hessians` at `params`.
pub fn build_hessian(
    spec: &ModelSpec,
    params: &ParamVector,
    instances: &[ForecastInstance],
    mode: HessianMode,
    damping: Damping,
    workers: usize,
) -> Result<HessianMatrix> {
    let p = spec.n_params();
    if p > MAX_DENSE_PARAMS {
        return Err(Error::PTooLarge { params: p, limit: MAX_DENSE_PARAMS });
    }
    if instances.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let raw = match mode {
        HessianMode::Analytic => analytic_linear(spec, params, instances)?,
        HessianMode::FiniteDiff => finite_difference(spec, params, instances, workers)?,
    };
    HessianMatrix::from_matrix(raw, damping)
}

fn analytic_linear(spec: &ModelSpec, params: &ParamVector, instances: &[ForecastInstance]) -> Result<DMatrix<f64>> {
    if spec.architecture != Architecture::LinearAr {
        return Err(Error::InvalidConfig("analytic Hessian is only available for linear_ar".into()));
    }
    if params.len() != spec.n_params() {
        return Err(Error::ShapeMismatch("parameter length does not match the model".into()));
    }
    let (d, o) = (spec.input_dim(), spec.output_dim());
    let dt = d + usize::from(spec.bias);
    // the loss is quadratic, so the Hessian is a block-diagonal copy of the
    // scaled input second moment and does not depend on params
    let mut moment = DMatrix::<f64>::zeros(dt, dt);
    let mut xt = vec![1.0; dt];
    for inst in instances {
        if inst.input.len() != d {
            return Err(Error::ShapeMismatch("instance input does not match the model".into()));
        }
        xt[..d].copy_from_slice(&inst.input);
        for i in 0..dt {
            for j in 0..dt {
                moment[(i, j)] += xt[i] * xt[j];
            }
        }
    }
    moment *= 2.0 / (o as f64 * instances.len() as f64);

    let p = spec.n_params();
    let index = |k: usize, i: usize| if i < d { k * d + i } else { o * d + k };
    let mut h = DMatrix::<f64>::zeros(p, p);
    for k in 0..o {
        for i in 0..dt {
            for j in 0..dt {
                h[(index(k, i), index(k, j))] = moment[(i, j)];
            }
        }
    }
    Ok(h)
}

fn finite_difference(
    spec: &ModelSpec,
    params: &ParamVector,
    instances: &[ForecastInstance],
    workers: usize,
) -> Result<DMatrix<f64>> {
    let p = spec.n_params();
    let column = |j: usize| -> Result<Vec<f64>> {
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus.0[j] += FD_STEP;
        minus.0[j] -= FD_STEP;
        let gp = spec.batch_grad(&plus, instances)?.grad;
        let gm = spec.batch_grad(&minus, instances)?.grad;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * FD_STEP)).collect())
    };
    let columns: Vec<Vec<f64>> = if workers <= 1 {
        (0..p).map(column).collect::<Result<_>>()?
    } else {
        crate::thread_pool(workers)?.install(|| (0..p).into_par_iter().map(column).collect::<Result<_>>())?
    };
    Ok(DMatrix::from_fn(p, p, |i, j| columns[j][i]))
}
