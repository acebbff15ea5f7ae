//! Outer solver loop: perturbation schedule, residual computation,
//! termination, multiplier recovery, perturbed-KKT verification and trace
//! recording.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec::Vec;
use core::fmt;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::backward::{
    backward_pass, BackwardError, BackwardOptions, QExpansion, StageGains, ValueCoeffs,
};
use crate::forward::{forward_pass, ForwardParams, StepFailure, StepFilter};
use crate::problem::{
    check_strict_feasibility, objective, rollout, Iterate, Multipliers, OcProblem, Variant,
};

/// How the initial perturbation is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MuInitPolicy {
    /// `J(initial trajectory) / (N * l)`.
    Auto,
    /// A fixed value.
    Explicit(f64),
    /// Uniform draw from `[lo, hi]` using the run's seed.
    Sampled { lo: f64, hi: f64 },
}

/// Solver configuration. Defaults follow the bench protocol: reduction
/// factor 5, acceptance of a mu-solve at `|F|_inf < 0.2 mu`, termination at
/// `mu <= 1e-8` with `|F|_inf <= 1e-7`.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub variant: Variant,
    /// Perturbation reduction factor (> 1).
    pub kappa: f64,
    pub mu_init: MuInitPolicy,
    /// Final perturbation; mu stops decreasing once at or below this.
    pub mu_min: f64,
    /// Final residual tolerance on the infinity norm of F.
    pub f_tol: f64,
    /// Reduce mu when `|F|_inf` falls below this fraction of mu.
    pub mu_accept_factor: f64,
    pub max_iterations: usize,
    /// Filter margins.
    pub filter_gamma_h: f64,
    pub filter_gamma_f: f64,
    /// Line-search grid is 1, 1/2, ..., 2^-max_step_halvings.
    pub max_step_halvings: u32,
    /// Fraction-to-boundary lower bound; effective tau = max(tau_min, 1-mu).
    pub tau_min: f64,
    /// Regularization escalation floor, i.e. the first nonzero value.
    pub gamma_reg_floor: f64,
    /// Escalation beyond this cap aborts the run as a numerical failure.
    pub gamma_reg_cap: f64,
    pub seed: u64,
    /// Drop the dynamics curvature contractions (Gauss-Newton mode).
    pub ilqr_mode: bool,
    /// When set, run Gauss-Newton while mu is above this threshold and
    /// switch to full second-order below it (ignored when `ilqr_mode`).
    pub gauss_newton_above_mu: Option<f64>,
    /// Forwarded to the line search: slack updates decouple from the hard
    /// guard while mu is above this (infeasible variant).
    pub slack_decouple_above_mu: f64,
    /// Record the minimum eigenvalue of the condensed control Hessian per
    /// iteration (symmetric eigensolve per stage).
    pub trace_min_eig: bool,
    /// When known, the reference optimum used for the logarithmic optimality
    /// error column of the trace.
    pub reference_objective: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Feasible,
            kappa: 5.0,
            mu_init: MuInitPolicy::Auto,
            mu_min: 1e-8,
            f_tol: 1e-7,
            mu_accept_factor: 0.2,
            max_iterations: 1000,
            filter_gamma_h: 1e-5,
            filter_gamma_f: 1e-5,
            max_step_halvings: 10,
            tau_min: 0.95,
            gamma_reg_floor: 1e-6,
            gamma_reg_cap: 1e8,
            seed: 0,
            ilqr_mode: false,
            gauss_newton_above_mu: None,
            slack_decouple_above_mu: 1e-3,
            trace_min_eig: false,
            reference_objective: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.kappa > 1.0) {
            return Err(SolveError::InvalidConfig("kappa must be > 1"));
        }
        if !(self.mu_accept_factor > 0.0 && self.mu_accept_factor < 1.0) {
            return Err(SolveError::InvalidConfig(
                "mu_accept_factor must be in (0, 1)",
            ));
        }
        if !(self.mu_min > 0.0) {
            return Err(SolveError::InvalidConfig("mu_min must be positive"));
        }
        if let MuInitPolicy::Sampled { lo, hi } = self.mu_init {
            if !(lo > 0.0 && hi >= lo) {
                return Err(SolveError::InvalidConfig(
                    "sampled mu range must satisfy 0 < lo <= hi",
                ));
            }
        }
        if let MuInitPolicy::Explicit(v) = self.mu_init {
            if !(v > 0.0) {
                return Err(SolveError::InvalidConfig("explicit mu must be positive"));
            }
        }
        Ok(())
    }
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    /// log10(J - J*) against the configured reference, when known.
    pub optimality_error: Option<f64>,
    pub mu: f64,
    pub residual_inf: f64,
    /// Accepted step length; 0 when the whole grid was rejected.
    pub step: f64,
    /// Regularization used by the backward pass of this iteration.
    pub gamma_reg: f64,
    /// Minimum eigenvalue of the unregularized condensed control Hessian
    /// over all stages (when tracing is enabled).
    pub min_eig: Option<f64>,
    /// Seconds since the start of the solve (0 without `std`).
    pub wall_time: f64,
}

/// Stacked optimality system residual together with the costate sweep that
/// produced it.
#[derive(Debug, Clone)]
pub struct Residual {
    pub values: DVector<f64>,
    pub inf_norm: f64,
    pub multipliers: Multipliers,
}

/// Terminal state of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// Regularization escalated past the cap.
    NumericalFailure,
}

/// Solver output: the final primal-dual iterate, recovered costates, the
/// final perturbation, the per-iteration trace and the feedback policies of
/// the last accepted backward pass.
#[derive(Debug, Clone)]
pub struct Solution {
    pub iterate: Iterate,
    pub multipliers: Multipliers,
    pub mu: f64,
    pub status: SolveStatus,
    pub trace: Vec<IterationRecord>,
    pub gains: Vec<StageGains>,
    pub objective: f64,
}

impl Solution {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

/// Unrecoverable solve errors. Failures that still produce a usable partial
/// trace (iteration cap, regularization blow-up) are reported through
/// [`SolveStatus`] instead.
#[derive(Debug, Clone, PartialEq)]
pub enum SolveError {
    InvalidConfig(&'static str),
    /// The feasible variant requires a strictly feasible initial iterate.
    InfeasibleStart { stage: usize, margin: f64 },
    /// The initial rollout produced a non-finite state.
    DivergentRollout { stage: usize },
    /// `MuInitPolicy::Auto` needs at least one constraint.
    AutoMuNeedsConstraints,
}

impl fmt::Display for SolveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolveError::InvalidConfig(what) => write!(f, "invalid solver configuration: {what}"),
            SolveError::InfeasibleStart { stage, margin } => write!(
                f,
                "initial iterate is not strictly feasible at stage {stage} (margin {margin:e})"
            ),
            SolveError::DivergentRollout { stage } => {
                write!(f, "initial rollout diverged at stage {stage}")
            }
            SolveError::AutoMuNeedsConstraints => {
                write!(f, "automatic mu initialization requires l >= 1")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SolveError {}

/// Perturbation update `mu <- min(mu / kappa, mu^1.2)`; superlinear once mu
/// is small.
pub fn update_mu(mu: f64, kappa: f64) -> f64 {
    f64::min(mu / kappa, mu.powf(1.2))
}

/// Initial perturbation per policy. `Auto` divides the trajectory objective
/// by `N * l`; `Sampled` draws uniformly using the provided generator.
pub fn init_mu(
    problem: &OcProblem,
    iterate: &Iterate,
    policy: MuInitPolicy,
    rng: &mut impl Rng,
) -> Result<f64, SolveError> {
    match policy {
        MuInitPolicy::Auto => {
            if problem.constraint_dim() == 0 {
                return Err(SolveError::AutoMuNeedsConstraints);
            }
            let j = objective(problem, &iterate.states, &iterate.controls);
            Ok(j / (problem.horizon() as f64 * problem.constraint_dim() as f64))
        }
        MuInitPolicy::Explicit(v) => Ok(v),
        MuInitPolicy::Sampled { lo, hi } => Ok(rng.random_range(lo..=hi)),
    }
}

/// Extracts the costate estimates from a completed backward pass:
/// `lambda_N = V_x^N` and `lambda_t = Q_x^t`.
pub fn recover_multipliers(values: &[ValueCoeffs], expansions: &[QExpansion]) -> Multipliers {
    let horizon = expansions.len();
    assert_eq!(values.len(), horizon + 1);
    let mut costates = Vec::with_capacity(horizon + 1);
    for qe in expansions {
        costates.push(qe.q_x.clone());
    }
    costates.push(values[horizon].vx.clone());
    Multipliers { costates }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// Evaluates the stacked optimality residual `F(w, mu)` through an
/// unregularized value sweep: the control gradients are `Q_u = l_u + f_u'
/// V_x^{t+1}` with `V_x` from the gamma = 0 value recursion, so the residual
/// measures stage-wise stationarity under downstream re-optimization. A raw
/// costate sweep (`lambda_t = l_x + f_x' lambda_{t+1}`) would compound the
/// open-loop sensitivity of long horizons and inflate the norm by orders of
/// magnitude away from the solution; both sweeps agree at stationary points.
/// When the unregularized recursion loses positive definiteness (far from
/// the central path) the raw sweep is used as the fallback.
///
/// The recovered multipliers are `lambda_t = Q_x^t` per stage and the value
/// gradient at the terminal node. The feasible variant stacks
/// `(Q_u..., r...)` with `r = S c + mu`; the infeasible variant stacks
/// `(Q_u..., r_p..., r_d...)`.
pub fn residual_f(problem: &OcProblem, iterate: &Iterate, mu: f64, variant: Variant) -> Residual {
    residual_f_with(problem, iterate, mu, variant, true)
}

/// [`residual_f`] with control over the dynamics curvature terms of the
/// value sweep, so Gauss-Newton solves can measure progress in the same
/// model they optimize. The choice only matters away from stationarity.
pub fn residual_f_with(
    problem: &OcProblem,
    iterate: &Iterate,
    mu: f64,
    variant: Variant,
    second_order_dynamics: bool,
) -> Residual {
    let options = BackwardOptions {
        second_order_dynamics,
        min_eig_diagnostic: false,
    };
    match backward_pass(problem, iterate, mu, 0.0, variant, options) {
        Ok(pass) => residual_from_backward(problem, iterate, mu, variant, &pass),
        Err(_) => residual_open_loop(problem, iterate, mu, variant),
    }
}

/// Assembles the residual stack from a completed unregularized backward
/// pass.
pub(crate) fn residual_from_backward(
    problem: &OcProblem,
    iterate: &Iterate,
    mu: f64,
    variant: Variant,
    pass: &crate::backward::BackwardOutput,
) -> Residual {
    let horizon = iterate.horizon();
    let m = problem.control_dim();
    let l = problem.constraint_dim();
    let res_blocks = match variant {
        Variant::Feasible => 1,
        Variant::Infeasible => 2,
    };
    let mut values = DVector::zeros(horizon * (m + res_blocks * l));
    for t in 0..horizon {
        let qe = &pass.expansions[t];
        let s = &iterate.duals[t];
        for k in 0..m {
            values[t * m + k] = qe.q_u[k];
        }
        match variant {
            Variant::Feasible => {
                for j in 0..l {
                    values[horizon * m + t * l + j] = s[j] * qe.con[j] + mu;
                }
            }
            Variant::Infeasible => {
                let y = &iterate.slacks.as_ref().expect("slacks")[t];
                for j in 0..l {
                    values[horizon * m + t * l + j] = qe.con[j] + y[j];
                    values[horizon * (m + l) + t * l + j] = s[j] * y[j] - mu;
                }
            }
        }
    }
    let inf = inf_norm(&values);
    Residual {
        values,
        inf_norm: inf,
        multipliers: recover_multipliers(&pass.values, &pass.expansions),
    }
}

/// Raw costate-sweep residual; needs no factorization and is exact at
/// stationary points.
fn residual_open_loop(
    problem: &OcProblem,
    iterate: &Iterate,
    mu: f64,
    variant: Variant,
) -> Residual {
    let horizon = iterate.horizon();
    let m = problem.control_dim();
    let l = problem.constraint_dim();
    let term = problem.terminal_cost_derivatives(&iterate.states[horizon]);
    let mut costates: Vec<DVector<f64>> = (0..=horizon).map(|_| DVector::zeros(0)).collect();
    costates[horizon] = term.gx;

    let res_blocks = match variant {
        Variant::Feasible => 1,
        Variant::Infeasible => 2,
    };
    let mut values = DVector::zeros(horizon * (m + res_blocks * l));

    for t in (0..horizon).rev() {
        let x = &iterate.states[t];
        let u = &iterate.controls[t];
        let s = &iterate.duals[t];
        let cost = problem.stage_cost_derivatives(x, u);
        let dyn_jac = problem.dynamics_jacobians(x, u);
        let mut lag_x = cost.gx;
        let mut lag_u = cost.gu;
        let c = problem.constraints(x, u);
        if l > 0 {
            let con_jac = problem.constraint_jacobians(x, u);
            lag_x += con_jac.jx.transpose() * s;
            lag_u += con_jac.ju.transpose() * s;
        }
        let q_u = lag_u + dyn_jac.ju.transpose() * &costates[t + 1];
        costates[t] = lag_x + dyn_jac.jx.transpose() * &costates[t + 1];

        for k in 0..m {
            values[t * m + k] = q_u[k];
        }
        match variant {
            Variant::Feasible => {
                for j in 0..l {
                    values[horizon * m + t * l + j] = s[j] * c[j] + mu;
                }
            }
            Variant::Infeasible => {
                let y = &iterate.slacks.as_ref().expect("slacks")[t];
                for j in 0..l {
                    values[horizon * m + t * l + j] = c[j] + y[j];
                    values[horizon * (m + l) + t * l + j] = s[j] * y[j] - mu;
                }
            }
        }
    }

    let inf = inf_norm(&values);
    Residual {
        values,
        inf_norm: inf,
        multipliers: Multipliers { costates },
    }
}

/// Per-block infinity norms of the perturbed KKT system at a given
/// primal-dual point with supplied costates.
#[derive(Debug, Clone)]
pub struct KktReport {
    /// max over t of |grad_{x_t} L|_inf (terminal block included).
    pub stationarity_x: f64,
    /// max over t of |grad_{u_t} L|_inf.
    pub stationarity_u: f64,
    /// max dynamics defect, including the initial condition.
    pub dynamics: f64,
    /// max over stages of |S c + mu|_inf.
    pub complementarity: f64,
    /// Worst violation of the sign conditions c <= 0, s >= 0 (0 when clean).
    pub sign_violation: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Evaluates all blocks of the perturbed KKT system at `(w, lambda, mu)`.
/// Passes iff every block norm is at most `tol`; the sign conditions get the
/// same slack, which matters for infeasible-variant iterates mid-run.
pub fn check_perturbed_kkt(
    problem: &OcProblem,
    iterate: &Iterate,
    multipliers: &Multipliers,
    mu: f64,
    tol: f64,
) -> KktReport {
    let horizon = iterate.horizon();
    let l = problem.constraint_dim();
    assert_eq!(multipliers.costates.len(), horizon + 1);

    let mut stat_x = 0.0f64;
    let mut stat_u = 0.0f64;
    let mut dynamics = inf_norm(&(&iterate.states[0] - problem.initial_state()));
    let mut complementarity = 0.0f64;
    let mut sign_violation = 0.0f64;

    for t in 0..horizon {
        let x = &iterate.states[t];
        let u = &iterate.controls[t];
        let s = &iterate.duals[t];
        let cost = problem.stage_cost_derivatives(x, u);
        let dyn_jac = problem.dynamics_jacobians(x, u);
        let mut lag_x = cost.gx;
        let mut lag_u = cost.gu;
        let c = problem.constraints(x, u);
        if l > 0 {
            let con_jac = problem.constraint_jacobians(x, u);
            lag_x += con_jac.jx.transpose() * s;
            lag_u += con_jac.ju.transpose() * s;
        }
        let grad_x = lag_x + dyn_jac.jx.transpose() * &multipliers.costates[t + 1]
            - &multipliers.costates[t];
        let grad_u = lag_u + dyn_jac.ju.transpose() * &multipliers.costates[t + 1];
        stat_x = stat_x.max(inf_norm(&grad_x));
        stat_u = stat_u.max(inf_norm(&grad_u));
        let defect = problem.dynamics(x, u) - &iterate.states[t + 1];
        dynamics = dynamics.max(inf_norm(&defect));
        for j in 0..l {
            complementarity = complementarity.max((s[j] * c[j] + mu).abs());
            sign_violation = sign_violation.max(c[j]).max(-s[j]);
        }
    }
    let term = problem.terminal_cost_derivatives(&iterate.states[horizon]);
    stat_x = stat_x.max(inf_norm(&(term.gx - &multipliers.costates[horizon])));
    sign_violation = sign_violation.max(0.0);

    let pass = stat_x <= tol
        && stat_u <= tol
        && dynamics <= tol
        && complementarity <= tol
        && sign_violation <= tol;
    KktReport {
        stationarity_x: stat_x,
        stationarity_u: stat_u,
        dynamics,
        complementarity,
        sign_violation,
        tol,
        pass,
    }
}

/// Context handed to [`SolveObserver::mu_reduced`] at every perturbation
/// reduction: the accepted iterate, its costate estimates and the residual
/// norm at the pre-reduction perturbation.
pub struct MuReductionEvent<'a> {
    pub iteration: usize,
    pub mu_before: f64,
    pub mu_after: f64,
    pub residual_inf: f64,
    pub iterate: &'a Iterate,
    pub multipliers: &'a Multipliers,
}

/// Hooks into the solver loop. All methods default to no-ops.
pub trait SolveObserver {
    fn mu_reduced(&mut self, _event: MuReductionEvent<'_>) {}
    fn iteration_accepted(&mut self, _iteration: usize, _iterate: &Iterate) {}
}

impl SolveObserver for () {}

pub(crate) fn log_optimality_error(j: f64, j_star: f64) -> f64 {
    f64::max(j - j_star, 1e-16).log10()
}

#[cfg(feature = "std")]
struct Stopwatch(std::time::Instant);

#[cfg(feature = "std")]
impl Stopwatch {
    fn start() -> Self {
        Self(std::time::Instant::now())
    }
    fn elapsed(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[cfg(not(feature = "std"))]
struct Stopwatch;

#[cfg(not(feature = "std"))]
impl Stopwatch {
    fn start() -> Self {
        Self
    }
    fn elapsed(&self) -> f64 {
        0.0
    }
}


/// Multiplier-state rescue for the infeasible variant: when the
/// regularization escalates past its cap while the perturbation is still
/// large, the primal trajectory is usually sound but the dual/slack state
/// has been wrecked by the annealing phase. Rebuilding slacks and duals from
/// the current trajectory (loose slacks, exactly centered duals) and
/// restarting the escalation recovers the run; a bounded number of rescues
/// keeps failure detection honest.
fn rescue(
    problem: &OcProblem,
    iterate: &mut Iterate,
    mu: f64,
    variant: Variant,
    rescues_left: &mut u32,
) -> bool {
    if variant != Variant::Infeasible || *rescues_left == 0 {
        return false;
    }
    *rescues_left -= 1;
    let l = problem.constraint_dim();
    let slacks = iterate.slacks.as_mut().expect("slacks");
    for t in 0..iterate.controls.len() {
        let c = problem.constraints(&iterate.states[t], &iterate.controls[t]);
        for j in 0..l {
            let y = f64::max(-c[j], 1.0);
            slacks[t][j] = y;
            iterate.duals[t][j] = mu / y;
        }
    }
    true
}

/// Builds the initial primal-dual iterate for `controls`. Feasible variant:
/// duals `s = clamp(mu0 * max(1, 1/(-c)), 1e-3, 1e3)`, which zeroes the
/// initial complementarity residual wherever the constraint is moderately
/// active. Infeasible variant: `s = 0.1`, `y = max(-c, 1e-2)`.
fn initial_iterate(
    problem: &OcProblem,
    controls: &[DVector<f64>],
    variant: Variant,
    mu0: f64,
) -> Result<Iterate, SolveError> {
    let states =
        rollout(problem, controls).map_err(|e| SolveError::DivergentRollout { stage: e.stage })?;
    let horizon = problem.horizon();
    let l = problem.constraint_dim();
    let mut duals = Vec::with_capacity(horizon);
    let mut slacks = match variant {
        Variant::Feasible => None,
        Variant::Infeasible => Some(Vec::with_capacity(horizon)),
    };
    for t in 0..horizon {
        let c = problem.constraints(&states[t], &controls[t]);
        match variant {
            Variant::Feasible => {
                let mut s = DVector::zeros(l);
                for j in 0..l {
                    if c[j] >= 0.0 {
                        return Err(SolveError::InfeasibleStart {
                            stage: t,
                            margin: -c[j],
                        });
                    }
                    s[j] = f64::clamp(mu0 * f64::max(1.0, 1.0 / (-c[j])), 1e-3, 1e3);
                }
                duals.push(s);
            }
            Variant::Infeasible => {
                duals.push(DVector::from_element(l, 0.1));
                let mut y = DVector::zeros(l);
                for j in 0..l {
                    y[j] = f64::max(-c[j], 1e-2);
                }
                slacks.as_mut().unwrap().push(y);
            }
        }
    }
    Ok(Iterate {
        states,
        controls: controls.to_vec(),
        duals,
        slacks,
    })
}

/// Solves from an initial control sequence, deriving the initial duals (and
/// slacks) from the built-in policy.
pub fn solve(
    problem: &OcProblem,
    initial_controls: &[DVector<f64>],
    config: &SolverConfig,
) -> Result<Solution, SolveError> {
    solve_observed(problem, initial_controls, config, &mut ())
}

/// [`solve`] with observer hooks.
pub fn solve_observed(
    problem: &OcProblem,
    initial_controls: &[DVector<f64>],
    config: &SolverConfig,
    observer: &mut dyn SolveObserver,
) -> Result<Solution, SolveError> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    // The auto policy needs the objective of the bare rollout before the
    // duals exist; build a dual-free view first.
    let states = rollout(problem, initial_controls)
        .map_err(|e| SolveError::DivergentRollout { stage: e.stage })?;
    let probe = Iterate {
        states,
        controls: initial_controls.to_vec(),
        duals: (0..problem.horizon()).map(|_| DVector::zeros(0)).collect(),
        slacks: None,
    };
    let mu0 = init_mu(problem, &probe, config.mu_init, &mut rng)?;
    let iterate = initial_iterate(problem, initial_controls, config.variant, mu0)?;
    solve_core(problem, iterate, mu0, config, observer)
}

/// Solves from a full primal-dual iterate (warm start). States are recomputed
/// from the controls to enforce dynamic consistency; duals and slacks are
/// taken as given.
pub fn solve_warm(
    problem: &OcProblem,
    iterate: Iterate,
    config: &SolverConfig,
) -> Result<Solution, SolveError> {
    solve_warm_observed(problem, iterate, config, &mut ())
}

pub fn solve_warm_observed(
    problem: &OcProblem,
    mut iterate: Iterate,
    config: &SolverConfig,
    observer: &mut dyn SolveObserver,
) -> Result<Solution, SolveError> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    iterate.states = rollout(problem, &iterate.controls)
        .map_err(|e| SolveError::DivergentRollout { stage: e.stage })?;
    let mu0 = init_mu(problem, &iterate, config.mu_init, &mut rng)?;
    solve_core(problem, iterate, mu0, config, observer)
}

fn solve_core(
    problem: &OcProblem,
    mut iterate: Iterate,
    mu0: f64,
    config: &SolverConfig,
    observer: &mut dyn SolveObserver,
) -> Result<Solution, SolveError> {
    let variant = config.variant;
    let feas = check_strict_feasibility(problem, &iterate, variant);
    if !feas.pass {
        return Err(SolveError::InfeasibleStart {
            stage: feas.worst_stage,
            margin: feas.worst_margin,
        });
    }

    let second_order_at = |mu: f64| {
        !config.ilqr_mode && config.gauss_newton_above_mu.map_or(true, |threshold| mu <= threshold)
    };
    let forward_params = ForwardParams {
        max_halvings: config.max_step_halvings,
        tau_min: config.tau_min,
        slack_decouple_above_mu: config.slack_decouple_above_mu,
    };
    let escalate = |gamma: f64| f64::max(config.gamma_reg_floor, 10.0 * gamma);
    let decay = |gamma: f64| {
        let g = gamma / 10.0;
        if g < config.gamma_reg_floor {
            0.0
        } else {
            g
        }
    };

    let mut mu = mu0;
    let mut gamma: f64 = 0.0;
    let mut rescues_left: u32 = 3;
    let mut filter = StepFilter::new(config.filter_gamma_h, config.filter_gamma_f);
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut last_gains: Vec<StageGains> = Vec::new();
    let mut residual = residual_f_with(problem, &iterate, mu, variant, second_order_at(mu));
    let (_, _, initial_h) = crate::forward::candidate_metrics(problem, &iterate, mu, variant);
    filter.set_infeasibility_ceiling(1e6 * f64::max(1.0, initial_h));
    let mut status = SolveStatus::MaxIterations;
    let clock = Stopwatch::start();

    for iteration in 0..config.max_iterations {
        if mu <= config.mu_min && residual.inf_norm <= config.f_tol {
            status = SolveStatus::Converged;
            break;
        }

        if residual.inf_norm < config.mu_accept_factor * mu && mu > config.mu_min {
            let mu_after = update_mu(mu, config.kappa);
            observer.mu_reduced(MuReductionEvent {
                iteration,
                mu_before: mu,
                mu_after,
                residual_inf: residual.inf_norm,
                iterate: &iterate,
                multipliers: &residual.multipliers,
            });
            mu = mu_after;
            filter.clear();
            residual = residual_f_with(problem, &iterate, mu, variant, second_order_at(mu));
            if mu <= config.mu_min && residual.inf_norm <= config.f_tol {
                status = SolveStatus::Converged;
                break;
            }
        }

        let backward_options = BackwardOptions {
            second_order_dynamics: second_order_at(mu),
            min_eig_diagnostic: config.trace_min_eig,
        };
        // Backward pass with in-place regularization escalation.
        let backward = loop {
            match backward_pass(problem, &iterate, mu, gamma, variant, backward_options) {
                Ok(out) => break Some(out),
                Err(BackwardError::NotPositiveDefinite { .. }) => {
                    gamma = escalate(gamma);
                    if gamma > config.gamma_reg_cap {
                        break None;
                    }
                }
            }
        };
        let Some(backward) = backward else {
            if rescue(problem, &mut iterate, mu, variant, &mut rescues_left) {
                gamma = 0.0;
                filter.clear();
                let (_, _, h_now) = crate::forward::candidate_metrics(problem, &iterate, mu, variant);
                filter.set_infeasibility_ceiling(1e6 * f64::max(1.0, h_now));
                residual = residual_f_with(problem, &iterate, mu, variant, second_order_at(mu));
                continue;
            }
            status = SolveStatus::NumericalFailure;
            break;
        };
        let gamma_used = gamma;
        let min_eig = backward.diagnostics.min_qhat_uu_eig;

        let mut forward = forward_pass(
            problem,
            &iterate,
            &backward.gains,
            &mut filter,
            mu,
            variant,
            forward_params,
        );
        // Filter-stall valve for the early annealing phase: while the
        // perturbation is still large the iterates morph wildly and the
        // filter's memory can wall off every step of the grid; dropping the
        // entries once and retrying beats grinding the regularization up
        // (which only shrinks the feedforward and can never satisfy a stale
        // filter).
        if forward.is_err() && mu > config.slack_decouple_above_mu && !filter.entries().is_empty() {
            filter.clear();
            forward = forward_pass(
                problem,
                &iterate,
                &backward.gains,
                &mut filter,
                mu,
                variant,
                forward_params,
            );
        }
        let step = match forward {
            Ok(result) => {
                iterate = result.iterate;
                if iterate.slacks.is_some() {
                    // Slack floor at still-violated stages: there the Newton
                    // update keeps pushing the slack toward -c < 0, and once
                    // it collapses the fraction-to-boundary limit drops below
                    // the whole step grid, deadlocking the run. Only violated
                    // components are floored (elsewhere small slacks are
                    // genuine near-active geometry), and the floor vanishes
                    // as mu -> 0.
                    for t in 0..iterate.controls.len() {
                        let c = problem.constraints(&iterate.states[t], &iterate.controls[t]);
                        let y = &mut iterate.slacks.as_mut().unwrap()[t];
                        for j in 0..y.len() {
                            if c[j] > 0.0 {
                                y[j] = f64::max(y[j], 1e-2 * mu);
                            }
                        }
                    }
                }
                gamma = decay(gamma);
                last_gains = backward.gains;
                observer.iteration_accepted(iteration, &iterate);
                residual = residual_f_with(problem, &iterate, mu, variant, second_order_at(mu));
                result.step
            }
            Err(StepFailure) => {
                gamma = escalate(gamma);
                if gamma > config.gamma_reg_cap {
                    if rescue(problem, &mut iterate, mu, variant, &mut rescues_left) {
                        gamma = 0.0;
                        filter.clear();
                        let (_, _, h_now) =
                            crate::forward::candidate_metrics(problem, &iterate, mu, variant);
                        filter.set_infeasibility_ceiling(1e6 * f64::max(1.0, h_now));
                        residual =
                            residual_f_with(problem, &iterate, mu, variant, second_order_at(mu));
                        continue;
                    }
                    status = SolveStatus::NumericalFailure;
                    break;
                }
                0.0
            }
        };

        let j = objective(problem, &iterate.states, &iterate.controls);
        trace.push(IterationRecord {
            iteration,
            objective: j,
            optimality_error: config
                .reference_objective
                .map(|j_star| log_optimality_error(j, j_star)),
            mu,
            residual_inf: residual.inf_norm,
            step,
            gamma_reg: gamma_used,
            min_eig,
            wall_time: clock.elapsed(),
        });
    }

    if status == SolveStatus::MaxIterations
        && mu <= config.mu_min
        && residual.inf_norm <= config.f_tol
    {
        status = SolveStatus::Converged;
    }

    let j = objective(problem, &iterate.states, &iterate.controls);
    Ok(Solution {
        multipliers: residual.multipliers,
        iterate,
        mu,
        status,
        trace,
        gains: last_gains,
        objective: j,
    })
}
