//! Indirect shooting for fixed-delay, control-affine optimal control with
//! energy cost, initialized by continuation on the delay.
//!
//! The non-delayed problem is solved first; the delay is then increased step
//! by step, each shooting problem warm-started from the previous initial
//! adjoint and closing the advanced adjoint term with the previous adjoint
//! trajectory.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod continuation;
pub mod endpoint;
pub mod error;
pub mod extremal;
pub mod integrate;
pub mod problem;
pub mod shooting;
pub mod warmstart;

pub use continuation::{
    continuation_grid, continuation_solve, continuation_solve_through, relative_change,
    solve_nondelayed, ContinuationOptions, ContinuationStep, ContinuationTrace,
};
pub use endpoint::{
    controllability_gramian, endpoint_derivative, endpoint_map, integrate_variational,
    transition_family, GramianReport, TransitionFamily, TransitionTrajectory,
};
pub use error::{Result, SolverError};
pub use extremal::{
    control_law, cost_of, hamiltonian, hamiltonian_profile, integrate_extremal,
    integrate_extremal_with, AdvancedTerm, ExtremalLift, NORMAL_MULTIPLIER,
};
pub use integrate::{integrate_dde, DelayRhs, Grid, History, Trajectory};
pub use problem::{
    pendulum_problem, rendezvous_problem, rendezvous_reference, validate, DelayedOcp, SmoothField,
    ValidationOptions, ValidationReport, Violation,
};
pub use shooting::{fd_jacobian, newton_solve, shooting_residual, ShootingOptions, ShootingResult};
pub use warmstart::{penalty_start, PenaltyOptions, PenaltyStart};
