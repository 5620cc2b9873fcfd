//! Simulation of stochastic gradient minimax training, its SDE
//! approximations, and the experiments that compare them.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod model;
pub mod rng;
pub mod scheduler;
pub mod sde;
pub mod sga;
pub mod stats;

pub use error::{Error, Result};
pub use model::{build_model, Dataset, GradientPair, HessianBlocks, JointParams, Matrix, MinimaxModel, ModelKind, QuadCoefficients, Vector};
pub use scheduler::{fdr2_ratio, scheduled_run, scheduler_step, SchedulerState};
pub use sde::{em_integrate, em_replicas, sde_coefficients, NoiseCoupling, SdeCoefficients, SdeKind};
pub use sga::{run_sga, run_sga_replicas, Initialization, Scheme, SgaConfig, Trajectory};
