//! Closed-form leave-one-out for ridge regression.
//!
//! With `A = X^T X + ridge * I` and full-data coefficients `beta`, dropping
//! row `i` gives
//!
//! ```text
//! beta_{-i} = beta - A^{-1} x_i r_i / (1 - h_i),   h_i = x_i^T A^{-1} x_i
//! ```
//!
//! where `r_i` is the full-data residual (Sherman-Morrison downdate of `A`).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::forecaster::{Architecture, ForecastInstance, ModelSpec};

/// Ridge fit minimizing `||y - X b||^2 + ridge * ||b||^2`.
#[derive(Debug, Clone)]
pub struct RidgeFit {
    pub coefficients: DVector<f64>,
    factor: Cholesky<f64, Dyn>,
}

impl RidgeFit {
    pub fn fit(design: &DMatrix<f64>, targets: &DVector<f64>, ridge: f64) -> Result<Self> {
        if design.nrows() != targets.len() {
            return Err(Error::LengthMismatch { left: design.nrows(), right: targets.len() });
        }
        if !(ridge >= 0.0) {
            return Err(Error::InvalidConfig(format!("ridge {ridge} must be non-negative")));
        }
        let p = design.ncols();
        let gram = design.transpose() * design + DMatrix::identity(p, p) * ridge;
        let factor = Cholesky::new(gram).ok_or(Error::RankDeficient)?;
        let coefficients = factor.solve(&(design.transpose() * targets));
        if coefficients.iter().any(|v| !v.is_finite()) {
            return Err(Error::RankDeficient);
        }
        Ok(Self { coefficients, factor })
    }

    /// Coefficients with row `index` removed, without refitting.
    pub fn without_row(&self, design: &DMatrix<f64>, targets: &DVector<f64>, index: usize) -> Result<DVector<f64>> {
        if index >= design.nrows() {
            return Err(Error::InvalidConfig(format!("row {index} out of {}", design.nrows())));
        }
        let x = design.row(index).transpose();
        let residual = targets[index] - x.dot(&self.coefficients);
        let a_inv_x = self.factor.solve(&x);
        let leverage = x.dot(&a_inv_x);
        let denom = 1.0 - leverage;
        if denom <= 1e-12 {
            // the reduced system is singular
            return Err(Error::RankDeficient);
        }
        Ok(&self.coefficients - a_inv_x * (residual / denom))
    }
}

/// Mean squared error of `coefficients` on a context set.
pub fn context_loss(design: &DMatrix<f64>, targets: &DVector<f64>, coefficients: &DVector<f64>) -> f64 {
    let r = targets - design * coefficients;
    r.norm_squared() / targets.len() as f64
}

/// Change in mean context loss when training row `index` is dropped:
/// `loss(without) - loss(with)`. Positive means the row was helping.
pub fn loo_linear_oracle(
    design: &DMatrix<f64>,
    targets: &DVector<f64>,
    ridge: f64,
    index: usize,
    context_design: &DMatrix<f64>,
    context_targets: &DVector<f64>,
) -> Result<f64> {
    check_context(design, context_design, context_targets)?;
    let fit = RidgeFit::fit(design, targets, ridge)?;
    let reduced = fit.without_row(design, targets, index)?;
    Ok(context_loss(context_design, context_targets, &reduced)
        - context_loss(context_design, context_targets, &fit.coefficients))
}

/// [`loo_linear_oracle`] for every row, sharing one factorization.
pub fn loo_all(
    design: &DMatrix<f64>,
    targets: &DVector<f64>,
    ridge: f64,
    context_design: &DMatrix<f64>,
    context_targets: &DVector<f64>,
) -> Result<Vec<f64>> {
    check_context(design, context_design, context_targets)?;
    let fit = RidgeFit::fit(design, targets, ridge)?;
    let base = context_loss(context_design, context_targets, &fit.coefficients);
    (0..design.nrows())
        .map(|i| {
            let reduced = fit.without_row(design, targets, i)?;
            Ok(context_loss(context_design, context_targets, &reduced) - base)
        })
        .collect()
}

/// [`loo_all`] for a linear forecaster trained in closed form on `blocks`.
///
/// Each output entry is its own ridge problem over the shared inputs (plus a
/// ones column when the model has a bias), and the context loss averages over
/// outputs, so the per-output changes are averaged too.
pub fn loo_instances(
    spec: &ModelSpec,
    blocks: &[ForecastInstance],
    context: &[ForecastInstance],
    ridge: f64,
) -> Result<Vec<f64>> {
    if spec.architecture != Architecture::LinearAr {
        return Err(Error::InvalidConfig("leave-one-out needs a linear_ar model".into()));
    }
    if blocks.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (x, y) = design(spec, blocks)?;
    let (cx, cy) = design(spec, context)?;
    let outputs = spec.output_dim();
    let mut total = vec![0.0; blocks.len()];
    for k in 0..outputs {
        let changes = loo_all(&x, &y.column(k).into_owned(), ridge, &cx, &cy.column(k).into_owned())?;
        for (t, c) in total.iter_mut().zip(changes) {
            *t += c / outputs as f64;
        }
    }
    Ok(total)
}

fn design(spec: &ModelSpec, instances: &[ForecastInstance]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let width = spec.input_dim() + usize::from(spec.bias);
    let mut x = DMatrix::zeros(instances.len(), width);
    let mut y = DMatrix::zeros(instances.len(), spec.output_dim());
    for (r, inst) in instances.iter().enumerate() {
        if inst.input.len() != spec.input_dim() || inst.target.len() != spec.output_dim() {
            return Err(Error::ShapeMismatch(format!("instance {r} does not fit the model")));
        }
        for (c, v) in inst.input.iter().enumerate() {
            x[(r, c)] = *v;
        }
        if spec.bias {
            x[(r, width - 1)] = 1.0;
        }
        for (c, v) in inst.target.iter().enumerate() {
            y[(r, c)] = *v;
        }
    }
    Ok((x, y))
}

fn check_context(design: &DMatrix<f64>, context_design: &DMatrix<f64>, context_targets: &DVector<f64>) -> Result<()> {
    if context_design.ncols() != design.ncols() {
        return Err(Error::ShapeMismatch("context design has a different width".into()));
    }
    if context_design.nrows() != context_targets.len() {
        return Err(Error::LengthMismatch { left: context_design.nrows(), right: context_targets.len() });
    }
    if context_targets.is_empty() {
        return Err(Error::EmptyContext);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicated_point_on_exact_fit_changes_nothing() {
        // y = 2 x0 - x1 exactly; ridge 0 interpolates, so every residual is 0
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![2.0, -1.0, 1.0, 1.0]);
        let cx = DMatrix::from_row_slice(1, 2, &[0.5, 2.0]);
        let cy = DVector::from_vec(vec![-0.5]);
        let change = loo_linear_oracle(&x, &y, 0.0, 3, &cx, &cy).unwrap();
        assert!(change.abs() < 1e-12, "{change}");
    }

    #[test]
    fn removing_the_only_support_of_a_direction_hurts() {
        // rows 0 and 1 pin the first coefficient; row 2 alone pins the second
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 1.0, 3.0]);
        let cx = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let cy = DVector::from_vec(vec![3.0]);
        let change = loo_linear_oracle(&x, &y, 0.1, 2, &cx, &cy).unwrap();
        assert!(change > 0.0, "{change}");
    }

    #[test]
    fn rank_deficient_cases() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        assert!(matches!(RidgeFit::fit(&x, &y, 0.0), Err(Error::RankDeficient)));
        // with ridge = 0, dropping the only row along a direction leaves a singular system
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let fit = RidgeFit::fit(&x, &y, 0.0).unwrap();
        assert!(matches!(fit.without_row(&x, &y, 0), Err(Error::RankDeficient)));
    }

    #[test]
    fn instance_loo_matches_two_refits() {
        // two outputs: each is refit by hand with and without block 1
        let spec = ModelSpec::linear_ar(2, 2, 1);
        let blocks: Vec<ForecastInstance> = (0..6)
            .map(|i| {
                let a = i as f64 * 0.7 - 1.0;
                let b = (i as f64).cos();
                ForecastInstance::new(vec![a, b], vec![a - b + 0.1 * (i % 2) as f64, 2.0 * a + 0.3])
            })
            .collect();
        let context = vec![ForecastInstance::new(vec![0.2, -0.4], vec![0.5, 0.9])];
        let got = loo_instances(&spec, &blocks, &context, 0.5).unwrap();
        let solve = |rows: &[usize], k: usize| -> DVector<f64> {
            let x = DMatrix::from_fn(rows.len(), 3, |r, c| if c == 2 { 1.0 } else { blocks[rows[r]].input[c] });
            let y = DVector::from_fn(rows.len(), |r, _| blocks[rows[r]].target[k]);
            (x.transpose() * &x + DMatrix::identity(3, 3) * 0.5).lu().solve(&(x.transpose() * y)).unwrap()
        };
        let all: Vec<usize> = (0..6).collect();
        let without: Vec<usize> = (0..6).filter(|&r| r != 1).collect();
        let loss = |rows: &[usize]| -> f64 {
            let (b0, b1) = (solve(rows, 0), solve(rows, 1));
            let pred0 = b0[0] * 0.2 + b0[1] * -0.4 + b0[2];
            let pred1 = b1[0] * 0.2 + b1[1] * -0.4 + b1[2];
            ((pred0 - 0.5).powi(2) + (pred1 - 0.9).powi(2)) / 2.0
        };
        let expected = loss(&without) - loss(&all);
        assert!((got[1] - expected).abs() < 1e-12, "{} vs {expected}", got[1]);
        assert!(matches!(
            loo_instances(&ModelSpec::mlp(2, 2, 1, 3, 0), &blocks, &context, 0.5),
            Err(Error::InvalidConfig(_))
        ));
    }
}
