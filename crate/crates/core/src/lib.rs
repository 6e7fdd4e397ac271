//! Multi-level multi-fidelity Monte Carlo for stochastic dynamical systems.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod control;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod model;
pub mod noise;
pub mod riccati;
pub mod safety;
pub mod sum;

pub use allocation::{
    allocate, allocate_counts, optimal_allocation, optimal_coefficients, pilot_statistics, predicted_variance,
    stats_from_samples, variance_at, variance_contributions, variance_weights, AllocationPlan, AssumptionReport,
    LevelStats,
};
pub use control::{
    mlmf_control_rollout, path_integral_level, path_weights, rollouts, weighted_control, ControlProblem, ControlResult,
    EvalNoise, RolloutOptions, Rollouts, TerminalCost,
};
pub use error::{Error, Result};
pub use estimator::{
    coupled_samples, level_mean, mlmf_estimate, replicate, replicate_reports, summarize, Coupling, EstimateReport,
    Functional, Level, LevelSummary, MlmfConfig, ReplicationSummary,
};
pub use model::{
    simulate_level, ConstantPolicy, Dynamics, FeatureMap, LevelSpec, Payoff, Policy, Trajectory, ZeroPolicy,
};
pub use noise::{NoiseGrid, NoiseSource};
pub use riccati::{riccati_oracle, scalar_riccati, RiccatiSolution};
pub use safety::{
    estimate_safety, safety_config, safety_functional, safety_levels, safety_margin, subset_simulation, SafetySpec,
    SubsetResult,
};
pub use sum::exact_sum;
