//! Reference valuators used to check the block estimator on small instances.

mod hessian;
mod influence;
mod loo;
mod rank;
mod retrain;
mod shapley;

pub use hessian::{build_hessian, Damping, HessianMatrix, HessianMode, MAX_DENSE_PARAMS};
pub use influence::{exact_influence, ContextInfluence};
pub use loo::{context_loss, loo_all, loo_instances, loo_linear_oracle, RidgeFit};
pub use rank::{average_ranks, rank_agreement, RankMethod};
pub use retrain::{brute_force_retrain, retrain_all, trained_context_loss, MAX_RETRAIN_BLOCKS};
pub use shapley::{
    exact_shapley, mc_shapley, Memoized, ShapleyEstimate, TrainedUtility, Utility, MAX_ENUMERATION_BLOCKS,
};
