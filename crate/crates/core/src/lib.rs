//! Relative-sparsity policy learning with selection-aware variance estimates.
//!
//! The pipeline fits a logistic behavioral policy, learns a suggested logistic
//! policy by maximizing an importance-sampled value penalized by its KL
//! divergence from the behavioral policy, and then shrinks the suggested
//! coefficients toward their behavioral counterparts with an adaptive lasso
//! penalty. For every penalty level the crate reports sandwich standard errors
//! that account for which coefficients were selected.

pub mod checks;
pub mod data;
pub mod diagram;
pub mod error;
pub mod fdcheck;
pub mod inference;
pub mod objective;
pub mod policy;
pub mod sim;
pub mod solvers;

pub use data::{
    load_trajectories, read_trajectories, standardize_states, ColumnSchema, Standardization,
    TrajectoryDataset,
};
pub use diagram::{
    emit_diagram, empirical_variance, replicate_seeds, sweep, EmpiricalResult, LambdaGrid,
    SweepConfig, SweepResult,
};
pub use error::{Error, Result};
pub use inference::{
    assemble_r, coef_variance_adaptive, coef_variance_baseline, coef_variance_behavioral,
    coefficient_variance, value_variance, CoefficientVariance, VarianceOptions,
};
pub use objective::{
    bernoulli_kl, derivatives, kl_est, objective_m, value_is, DerivativeBundle, ImportanceSampling,
    KlDirection, Objective, ObjectiveOptions,
};
pub use policy::{
    active_set, behavioral_influence, expit, fit_behavioral, hybrid_policy_prob, policy_prob,
    ActiveSet, BehavioralFit, CoefficientRole, CoefficientVector,
};
pub use sim::{reward, simulate, SimConfig};
pub use solvers::{
    adaptive_weights, maximize_m, maximize_w, prox_shifted, saturation_lambda, SolveReport,
    SolverOptions,
};
