//! Influence through the damped Hessian.
//!
//! The classical influence of a training point `z` on a context point `z'` is
//! `-grad L(z')^T H^{-1} grad L(z)`. Here the leading minus is folded in so that
//! a positive value means `z` lowers the context loss, the same convention as
//! the block values in [`crate::valuation`].

use crate::error::Result;
use crate::forecaster::{dot, ForecastInstance, ModelSpec, ParamVector};

use super::HessianMatrix;

/// `grad L(context)^T (H + damping I)^{-1} grad L(target)`.
///
/// `context` may hold several instances; their mean loss is used.
pub fn exact_influence(
    spec: &ModelSpec,
    params: &ParamVector,
    hessian: &HessianMatrix,
    target: &ForecastInstance,
    context: &[ForecastInstance],
) -> Result<f64> {
    let gt = spec.grad(params, target)?;
    let gc = spec.batch_grad(params, context)?;
    let s = hessian.solve(&gt.grad)?;
    Ok(dot(&gc.grad, &s))
}

/// Influence against one fixed context, with the solve done once.
///
/// Since the damped Hessian is symmetric, `g_c^T H^{-1} g_t = (H^{-1} g_c)^T g_t`.
#[derive(Debug, Clone)]
pub struct ContextInfluence {
    preconditioned: Vec<f64>,
}

impl ContextInfluence {
    pub fn new(
        spec: &ModelSpec,
        params: &ParamVector,
        hessian: &HessianMatrix,
        context: &[ForecastInstance],
    ) -> Result<Self> {
        let gc = spec.batch_grad(params, context)?;
        Ok(Self { preconditioned: hessian.solve(&gc.grad)? })
    }

    pub fn influence(&self, spec: &ModelSpec, params: &ParamVector, target: &ForecastInstance) -> Result<f64> {
        Ok(dot(&self.preconditioned, &spec.grad(params, target)?.grad))
    }
}
