//! Log-barrier DDP baselines: the inequality constraints are folded into the
//! stage cost through a strict or relaxed logarithmic penalty and the
//! resulting unconstrained problem is solved by plain DDP with an outer
//! perturbation loop.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::backward::{backward_pass, BackwardError, BackwardOptions, StageGains};
use crate::forward::apply_gains;
use crate::problem::{
    objective, rollout, ConstraintHessians, ConstraintJacobians, CostDerivatives,
    DynamicsHessians, DynamicsJacobians, Iterate, OcProblem, OcpModel, TerminalDerivatives,
    Variant,
};
use crate::solver::{
    init_mu, residual_f, update_mu, IterationRecord, Solution, SolveError, SolveStatus,
    SolverConfig,
};

/// Which penalty shape backs the transformed cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierKind {
    /// `-mu log(-c)`: requires strictly feasible evaluation points; infinite
    /// outside the feasible region.
    Strict,
    /// Quadratic extension below the relaxation threshold: finite and twice
    /// differentiable everywhere.
    Relaxed,
}

/// Relaxed logarithmic penalty: `-log z` for `z > delta`, quadratically
/// extended below. Returns value and first two derivatives in `z`; all three
/// are continuous at `z = delta` (both branches give second derivative
/// `1/delta^2` there).
pub fn relaxed_penalty(z: f64, delta: f64) -> (f64, f64, f64) {
    debug_assert!(delta > 0.0);
    if z > delta {
        (-z.ln(), -1.0 / z, 1.0 / (z * z))
    } else {
        let w = (z - 2.0 * delta) / delta;
        (
            0.5 * (w * w - 1.0) - delta.ln(),
            (z - 2.0 * delta) / (delta * delta),
            1.0 / (delta * delta),
        )
    }
}

/// Strict logarithmic penalty `-log z`; infinite (with poisoned derivatives)
/// at or below zero, which makes any line search reject candidates that
/// leave the feasible region.
fn strict_penalty(z: f64) -> (f64, f64, f64) {
    if z > 0.0 {
        (-z.ln(), -1.0 / z, 1.0 / (z * z))
    } else {
        (f64::INFINITY, f64::NAN, f64::NAN)
    }
}

struct BarrierModel {
    inner: Arc<dyn OcpModel>,
    control_dim: usize,
    constraint_dim: usize,
    mu: f64,
    kind: BarrierKind,
    delta: f64,
}

impl BarrierModel {
    fn penalty(&self, z: f64) -> (f64, f64, f64) {
        match self.kind {
            BarrierKind::Strict => strict_penalty(z),
            BarrierKind::Relaxed => relaxed_penalty(z, self.delta),
        }
    }
}

impl OcpModel for BarrierModel {
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.inner.dynamics(x, u)
    }
    fn dynamics_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> DynamicsJacobians {
        self.inner.dynamics_jacobians(x, u)
    }
    fn dynamics_hessians(&self, x: &DVector<f64>, u: &DVector<f64>) -> DynamicsHessians {
        self.inner.dynamics_hessians(x, u)
    }

    fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let mut total = self.inner.stage_cost(x, u);
        let c = self.inner.constraints(x, u);
        for j in 0..self.constraint_dim {
            total += self.mu * self.penalty(-c[j]).0;
        }
        total
    }

    fn stage_cost_derivatives(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostDerivatives {
        let mut d = self.inner.stage_cost_derivatives(x, u);
        if self.constraint_dim == 0 {
            return d;
        }
        let c = self.inner.constraints(x, u);
        let jac = self.inner.constraint_jacobians(x, u);
        let hess = self.inner.constraint_hessians(x, u);
        for j in 0..self.constraint_dim {
            let (_, d1, d2) = self.penalty(-c[j]);
            let cx = jac.jx.row(j).transpose();
            let cu = jac.ju.row(j).transpose();
            // d/dx   [mu beta(-c)] = -mu beta' c_x
            // d2/dx2 [mu beta(-c)] = mu (beta'' c_x c_x' - beta' c_xx)
            d.gx -= &cx * (self.mu * d1);
            d.gu -= &cu * (self.mu * d1);
            d.hxx += &cx * cx.transpose() * (self.mu * d2) - &hess.hxx[j] * (self.mu * d1);
            d.huu += &cu * cu.transpose() * (self.mu * d2) - &hess.huu[j] * (self.mu * d1);
            d.hxu += &cx * cu.transpose() * (self.mu * d2) - &hess.hxu[j] * (self.mu * d1);
        }
        d
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        self.inner.terminal_cost(x)
    }
    fn terminal_cost_derivatives(&self, x: &DVector<f64>) -> TerminalDerivatives {
        self.inner.terminal_cost_derivatives(x)
    }

    fn constraints(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn constraint_jacobians(&self, x: &DVector<f64>, _u: &DVector<f64>) -> ConstraintJacobians {
        ConstraintJacobians {
            jx: DMatrix::zeros(0, x.len()),
            ju: DMatrix::zeros(0, self.control_dim),
        }
    }
    fn constraint_hessians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> ConstraintHessians {
        ConstraintHessians {
            hxx: Vec::new(),
            huu: Vec::new(),
            hxu: Vec::new(),
        }
    }
}

/// Wraps a constrained problem into an unconstrained one whose stage cost
/// carries the barrier terms for the current perturbation (and relaxation
/// threshold, for the relaxed kind). The wrapped problem reports `l = 0`.
pub fn barrier_transform(
    problem: &OcProblem,
    mu: f64,
    kind: BarrierKind,
    delta: f64,
) -> OcProblem {
    assert!(mu > 0.0);
    let model = BarrierModel {
        inner: problem.model().clone(),
        control_dim: problem.control_dim(),
        constraint_dim: problem.constraint_dim(),
        mu,
        kind,
        delta,
    };
    OcProblem::from_arc(
        problem.state_dim(),
        problem.control_dim(),
        0,
        problem.horizon(),
        problem.initial_state().clone(),
        Arc::new(model),
    )
    .expect("barrier transform preserves a valid callback table")
}

fn barrier_objective(barrier: &OcProblem, iterate: &Iterate) -> f64 {
    objective(barrier, &iterate.states, &iterate.controls)
}

/// Armijo-style backtracking on the barrier objective against the quadratic
/// model's expected decrease. For the unconstrained stage solves the model
/// predicts a decrease of `step (1 - step/2) sum_t (-Q_u' alpha)`; a step is
/// accepted when the actual decrease reaches a small fraction of that, with
/// an absolute slack of a few ulps of the objective so that steps near
/// stationarity (where the change underflows the float resolution of J) are
/// not spuriously rejected.
fn barrier_forward(
    barrier: &OcProblem,
    current: &Iterate,
    current_objective: f64,
    backward: &crate::backward::BackwardOutput,
    max_halvings: u32,
) -> Option<(Iterate, f64)> {
    let model_gap: f64 = backward
        .expansions
        .iter()
        .zip(backward.gains.iter())
        .map(|(qe, g)| -qe.q_u.dot(&g.control_ff))
        .sum::<f64>()
        .max(0.0);
    let slack = 1e-14 * f64::max(1.0, current_objective.abs());
    let mut step = 1.0f64;
    for _ in 0..=max_halvings {
        if let Ok(candidate) = apply_gains(barrier, current, &backward.gains, step) {
            let j = barrier_objective(barrier, &candidate);
            let expected = step * (1.0 - 0.5 * step) * model_gap;
            if j.is_finite() && current_objective - j >= 1e-4 * expected - slack {
                return Some((candidate, step));
            }
        }
        step *= 0.5;
    }
    None
}

/// Log-barrier DDP driver. The outer loop mirrors the interior-point solver
/// (same initialization, reduction rule `mu <- min(mu/kappa, mu^1.2)` and
/// acceptance of a mu-solve once the penalized-objective gradient drops below
/// `mu_accept_factor * mu`); the inner loop is unconstrained DDP on the
/// transformed problem. For the relaxed kind the relaxation threshold tracks
/// the perturbation (`delta <- mu`). Trace objectives are those of the
/// original problem, not the penalized ones.
pub fn solve_barrier_ddp(
    problem: &OcProblem,
    initial_controls: &[DVector<f64>],
    config: &SolverConfig,
    kind: BarrierKind,
) -> Result<Solution, SolveError> {
    solve_barrier_ddp_observed(problem, initial_controls, config, kind, &mut ())
}

pub fn solve_barrier_ddp_observed(
    problem: &OcProblem,
    initial_controls: &[DVector<f64>],
    config: &SolverConfig,
    kind: BarrierKind,
    observer: &mut dyn crate::solver::SolveObserver,
) -> Result<Solution, SolveError> {
    use rand::SeedableRng;

    config.validate()?;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(config.seed);
    let horizon = problem.horizon();
    let states = rollout(problem, initial_controls)
        .map_err(|e| SolveError::DivergentRollout { stage: e.stage })?;

    if kind == BarrierKind::Strict {
        for t in 0..horizon {
            let c = problem.constraints(&states[t], &initial_controls[t]);
            for j in 0..c.len() {
                if c[j] >= 0.0 {
                    return Err(SolveError::InfeasibleStart {
                        stage: t,
                        margin: -c[j],
                    });
                }
            }
        }
    }

    let mut iterate = Iterate {
        states,
        controls: initial_controls.to_vec(),
        duals: (0..horizon).map(|_| DVector::zeros(0)).collect(),
        slacks: None,
    };
    let mut mu = init_mu(problem, &iterate, config.mu_init, &mut rng)?;

    let backward_options = BackwardOptions {
        second_order_dynamics: !config.ilqr_mode,
        min_eig_diagnostic: config.trace_min_eig,
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
    // Inner iterations at one mu are capped; afterwards the reduction is
    // forced so a stalled subproblem cannot pin the whole run.
    const INNER_CAP: usize = 200;

    let mut barrier = barrier_transform(problem, mu, kind, mu);
    let mut gamma = 0.0f64;
    let mut inner_count = 0usize;
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut last_gains: Vec<StageGains> = Vec::new();
    let mut status = SolveStatus::MaxIterations;
    // With l = 0 the residual of the transformed problem is exactly the
    // penalized-objective gradient stack.
    let mut residual = residual_f(&barrier, &iterate, mu, Variant::Feasible);

    #[cfg(feature = "std")]
    let clock = std::time::Instant::now();
    #[cfg(feature = "std")]
    let elapsed = || clock.elapsed().as_secs_f64();
    #[cfg(not(feature = "std"))]
    let elapsed = || 0.0f64;

    for iteration in 0..config.max_iterations {
        if mu <= config.mu_min && residual.inf_norm <= config.f_tol {
            status = SolveStatus::Converged;
            break;
        }
        let accept = residual.inf_norm < config.mu_accept_factor * mu;
        if (accept || inner_count >= INNER_CAP) && mu > config.mu_min {
            let mu_after = update_mu(mu, config.kappa);
            if accept {
                observer.mu_reduced(crate::solver::MuReductionEvent {
                    iteration,
                    mu_before: mu,
                    mu_after,
                    residual_inf: residual.inf_norm,
                    iterate: &iterate,
                    multipliers: &residual.multipliers,
                });
            }
            mu = mu_after;
            barrier = barrier_transform(problem, mu, kind, mu);
            inner_count = 0;
            residual = residual_f(&barrier, &iterate, mu, Variant::Feasible);
            if mu <= config.mu_min && residual.inf_norm <= config.f_tol {
                status = SolveStatus::Converged;
                break;
            }
        }

        let backward = loop {
            match backward_pass(&barrier, &iterate, mu, gamma, Variant::Feasible, backward_options)
            {
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
            status = SolveStatus::NumericalFailure;
            break;
        };
        let gamma_used = gamma;
        let min_eig = backward.diagnostics.min_qhat_uu_eig;

        let current_barrier_objective = barrier_objective(&barrier, &iterate);
        let step = match barrier_forward(
            &barrier,
            &iterate,
            current_barrier_objective,
            &backward,
            config.max_step_halvings,
        ) {
            Some((next, step)) => {
                iterate = next;
                gamma = decay(gamma);
                last_gains = backward.gains;
                observer.iteration_accepted(iteration, &iterate);
                residual = residual_f(&barrier, &iterate, mu, Variant::Feasible);
                step
            }
            None => {
                gamma = escalate(gamma);
                if gamma > config.gamma_reg_cap {
                    status = SolveStatus::NumericalFailure;
                    break;
                }
                0.0
            }
        };
        inner_count += 1;

        let j = objective(problem, &iterate.states, &iterate.controls);
        trace.push(IterationRecord {
            iteration,
            objective: j,
            optimality_error: config
                .reference_objective
                .map(|j_star| crate::solver::log_optimality_error(j, j_star)),
            mu,
            residual_inf: residual.inf_norm,
            step,
            gamma_reg: gamma_used,
            min_eig,
            wall_time: elapsed(),
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
