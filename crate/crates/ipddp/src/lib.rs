//! Interior-point differential dynamic programming (IPDDP) for discrete-time
//! finite-horizon optimal control with nonlinear inequality constraints.
//!
//! The crate solves problems of the form
//!
//! ```text
//! minimize    sum_{t=0..N-1} q(x_t, u_t) + p(x_N)
//! subject to  x_0 given,  x_{t+1} = f(x_t, u_t),  c(x_t, u_t) <= 0
//! ```
//!
//! by combining the stage-wise backward/forward structure of DDP with a
//! primal-dual interior-point treatment of the inequality constraints. Two
//! variants are provided: a *feasible* solver whose iterates keep `c < 0`
//! strictly, and an *infeasible* solver that introduces slack variables and
//! only enforces `c <= 0` in the limit. Log-barrier DDP baselines (strict and
//! relaxed) share the same machinery through a problem transformation.
//!
//! The crate is `no_std`-compatible (with `alloc`); the default `std` feature
//! adds wall-clock timing to solver traces.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod backward;
pub mod barrier;
pub mod benchmarks;
pub mod fdcheck;
pub mod forward;
pub mod problem;
pub mod solver;

pub use backward::{
    backward_pass, solve_stage_feasible, solve_stage_infeasible, stage_expansion, value_update,
    BackwardError, BackwardOptions, BackwardOutput, CondensedCoeffs, QExpansion, StageGains,
    StageResiduals, ValueCoeffs,
};
pub use barrier::{
    barrier_transform, relaxed_penalty, solve_barrier_ddp, solve_barrier_ddp_observed,
    BarrierKind,
};
pub use benchmarks::{
    build_car_parking, build_pendulum, build_problem, build_unicycle, draw_initial_controls,
    optimality_error, reference_optimum, run_trial, run_trials, Algorithm, BenchRun, ProblemId,
    ReferenceOptimum, TrialOutcome, TrialSpec, FEASIBILITY_MU_TOL, FEASIBILITY_VIOLATION_TOL,
    REFERENCE_OPTIMA,
};
pub use fdcheck::{finite_diff_check, DerivativeReport, FiniteDiffModel};
pub use forward::{
    apply_gains, forward_pass_debug, ForwardDebugStats, filter_accept, forward_pass, positivity_guard, ForwardParams, ForwardResult,
    StepCandidate, StepFailure, StepFilter,
};
pub use solver::{
    check_perturbed_kkt, init_mu, recover_multipliers, residual_f, residual_f_with, solve, solve_observed,
    solve_warm, solve_warm_observed, update_mu, IterationRecord, KktReport, MuInitPolicy,
    MuReductionEvent, Residual, Solution, SolveError, SolveObserver, SolveStatus, SolverConfig,
};
pub use problem::{
    check_strict_feasibility, objective, rollout, ConstraintHessians, ConstraintJacobians,
    CostDerivatives, DivergenceError, DynamicsHessians, DynamicsJacobians, FeasibilityReport,
    Iterate, Multipliers, OcProblem, OcpModel, ProblemError, TerminalDerivatives, Variant,
};
