//! Time series data valuation by one-step in-context finetuning.
//!
//! The target split of a series is cut into overlapping blocks. Each block
//! takes one optimizer step away from shared parameters, and the resulting
//! drop in loss on a held-apart context set is the block's value. Block values
//! are averaged onto time points and then onto non-overlapping samples, which
//! are ranked for data selection.
//!
//! Alongside the estimator the crate ships the oracles it is validated
//! against (damped-Hessian influence, closed-form ridge leave-one-out,
//! brute-force retraining and Monte Carlo Shapley) and the experiment
//! harnesses used to evaluate selections.

pub mod error;
pub mod experiments;
pub mod forecaster;
pub mod oracles;
pub mod report;
pub mod selection;
pub mod series;
pub mod synth;
pub mod valuation;

pub use error::{Error, ErrorClass, Result};

pub(crate) fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))
}
