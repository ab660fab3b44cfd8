//! Adaptive online planning for reset-free lifelong control.
//!
//! The agent plans with MPPI over a ground-truth local model, bootstraps the
//! plan with an optimistic value-ensemble estimate, and spends planning
//! compute only where the ensemble looks unreliable. A model-free prior
//! (behavior cloning or a twin-critic actor-critic) distils the planner's
//! output so that later planning can start from a good proposal.
//!
//! Modules:
//! - [`nn`]: small tanh MLPs and Adam.
//! - [`envs`]: reset-free environments (point-mass maze, sink chain).
//! - [`ensemble`]: value ensemble, aggregation and uncertainty signals.
//! - [`planner`]: MPPI, horizon selection and early termination.
//! - [`priors`]: behavior cloning and TD3 priors.
//! - [`agent`]: the lifelong loop and its baselines.
//! - [`regret`]: exact regret accounting on tabular MDPs.
//! - [`harness`]: experiment specs, logs and reports.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod agent;
pub mod ensemble;
pub mod envs;
pub mod harness;
pub mod nn;
pub mod planner;
pub mod priors;
pub mod regret;
pub mod rng;
pub mod trajectory;

pub use trajectory::Trajectory;
