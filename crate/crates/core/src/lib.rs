//! Guaranteed-safe model predictive path integral control.
//!
//! A sampling-based receding-horizon planner whose rollouts run through a
//! closed-form composite control-barrier-function safety filter, so every
//! sampled trajectory stays inside the certified safe set.
//!
//! - [`dynamics`]: control-affine models and integrators
//! - [`cbf`]: barrier cascades, soft-minimum composition, the safety filter
//! - [`planner`]: rollouts, importance weights, mean update
//! - [`closed_loop`]: the dual-rate executor and its trajectory log
//! - [`scenarios`]: the unicycle arena and its scenario file format

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cbf;
pub mod closed_loop;
pub mod dynamics;
pub mod error;
pub mod planner;
pub mod scenarios;

pub use cbf::{softmin, Barrier, CompositeCbf, DegeneratePolicy, FilterDiagnostics, Membership};
pub use closed_loop::{run, run_with_mean, RunAbort, SimConfig, TrajectoryLog};
pub use dynamics::{eval_vector_field, rk4_step, ControlVec, StateVec, SystemModel};
pub use error::{Error, Result};
pub use planner::{
    importance_weights, rollout, sample_noise, update_mean, AuditStats, CostSpec,
    MeanControlSequence, NoiseSequence, Planner, PlannerConfig, SAFETY_SLACK,
};
pub use scenarios::{reference_scenario, GoalSpec, Scenario, ScenarioFile};
