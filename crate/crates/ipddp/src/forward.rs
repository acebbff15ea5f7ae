//! Forward pass: affine policy rollout, fraction-to-boundary guards and a
//! backtracking line search gated by a step filter.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec::Vec;
use core::fmt;

use nalgebra::DVector;

use crate::backward::StageGains;
use crate::problem::{objective, Iterate, OcProblem, Variant};

/// A trial iterate produced by one line-search step.
#[derive(Debug, Clone)]
pub struct StepCandidate {
    pub step: f64,
    pub iterate: Iterate,
    /// Plain objective J of the candidate trajectory.
    pub objective: f64,
    /// Barrier-augmented objective used as the filter's objective measure.
    pub barrier_objective: f64,
    /// Filter infeasibility measure (complementarity for the feasible
    /// variant, primal+dual residuals for the infeasible one).
    pub infeasibility: f64,
}

/// Pareto set of (infeasibility, objective) pairs with acceptance margins.
/// Entries are mutually non-dominated; dominated entries are pruned on
/// insertion.
#[derive(Debug, Clone)]
pub struct StepFilter {
    entries: Vec<(f64, f64)>,
    gamma_h: f64,
    gamma_f: f64,
    /// Hard ceiling on the infeasibility measure, the classic "north-west
    /// corner" entry of a Fletcher-Leyffer filter. Candidates above it are
    /// never acceptable regardless of their objective.
    h_max: f64,
}

impl StepFilter {
    pub fn new(gamma_h: f64, gamma_f: f64) -> Self {
        Self {
            entries: Vec::new(),
            gamma_h,
            gamma_f,
            h_max: f64::INFINITY,
        }
    }

    /// Drops all entries (used when the perturbation parameter changes and
    /// the merit landscape with it). The infeasibility ceiling survives
    /// resets until re-anchored.
    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Anchors the infeasibility ceiling, typically to a large multiple of
    /// the current iterate's measure.
    pub fn set_infeasibility_ceiling(&mut self, h_max: f64) {
        self.h_max = h_max;
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }

    /// A pair is acceptable if it stays below the infeasibility ceiling and,
    /// against every entry, improves the infeasibility by a relative margin
    /// or the objective by a margin proportional to its own infeasibility.
    pub fn is_acceptable(&self, h: f64, phi: f64) -> bool {
        h <= self.h_max
            && self
                .entries
                .iter()
                .all(|&(hi, fi)| h <= (1.0 - self.gamma_h) * hi || phi <= fi - self.gamma_f * h)
    }

    /// Inserts a pair and prunes entries it dominates.
    pub fn insert(&mut self, h: f64, phi: f64) {
        self.entries.retain(|&(hi, fi)| !(h <= hi && phi <= fi));
        self.entries.push((h, phi));
    }
}

/// Applies the filter acceptance test to a candidate and records it on
/// success.
pub fn filter_accept(filter: &mut StepFilter, candidate: &StepCandidate) -> bool {
    let h = candidate.infeasibility;
    let phi = candidate.barrier_objective;
    if !h.is_finite() || !phi.is_finite() {
        return false;
    }
    if filter.is_acceptable(h, phi) {
        filter.insert(h, phi);
        true
    } else {
        false
    }
}

/// Rolls out the affine update policies along the new trajectory. Only the
/// feedforward terms are scaled by the step length; the feedback terms act on
/// the full state deviation.
pub fn apply_gains(
    problem: &OcProblem,
    current: &Iterate,
    gains: &[StageGains],
    step: f64,
) -> Result<Iterate, crate::problem::DivergenceError> {
    let horizon = current.horizon();
    assert_eq!(gains.len(), horizon);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut duals = Vec::with_capacity(horizon);
    let mut slacks = current.slacks.as_ref().map(|_| Vec::with_capacity(horizon));
    states.push(current.states[0].clone());
    for t in 0..horizon {
        let dx = &states[t] - &current.states[t];
        let g = &gains[t];
        let u = &current.controls[t] + &g.control_ff * step + &g.control_fb * &dx;
        let s = &current.duals[t] + &g.dual_ff * step + &g.dual_fb * &dx;
        if let (Some(ys), Some(chi), Some(zeta)) =
            (slacks.as_mut(), g.slack_ff.as_ref(), g.slack_fb.as_ref())
        {
            let y = &current.slacks.as_ref().unwrap()[t] + chi * step + zeta * &dx;
            ys.push(y);
        }
        let next = problem.dynamics(&states[t], &u);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(crate::problem::DivergenceError { stage: t + 1 });
        }
        controls.push(u);
        duals.push(s);
        states.push(next);
    }
    Ok(Iterate {
        states,
        controls,
        duals,
        slacks,
    })
}

/// Fraction-to-boundary acceptance: positive quantities may not shrink past
/// the fraction `(1 - tau)` of their current value in one step, and the
/// feasible variant additionally keeps the constraints from approaching zero
/// faster than that.
pub fn positivity_guard(
    problem: &OcProblem,
    current: &Iterate,
    candidate: &Iterate,
    variant: Variant,
    tau: f64,
) -> bool {
    debug_assert!((0.0..1.0).contains(&tau));
    let keep = 1.0 - tau;
    let horizon = current.horizon();
    for t in 0..horizon {
        let s_old = &current.duals[t];
        let s_new = &candidate.duals[t];
        for j in 0..s_old.len() {
            if s_new[j] < keep * s_old[j] {
                return false;
            }
        }
        match variant {
            Variant::Feasible => {
                let c_old = problem.constraints(&current.states[t], &current.controls[t]);
                let c_new = problem.constraints(&candidate.states[t], &candidate.controls[t]);
                for j in 0..c_old.len() {
                    if c_new[j] > keep * c_old[j] {
                        return false;
                    }
                }
            }
            Variant::Infeasible => {
                let y_old = &current.slacks.as_ref().expect("slacks")[t];
                let y_new = &candidate.slacks.as_ref().expect("slacks")[t];
                for j in 0..y_old.len() {
                    if y_new[j] < keep * y_old[j] {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Line-search parameters for the forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardParams {
    /// Number of halvings tried after the full step (grid 1, 1/2, ..,
    /// 2^-max_halvings).
    pub max_halvings: u32,
    /// Lower bound for the fraction-to-boundary parameter; the effective
    /// value is `max(tau_min, 1 - mu)`.
    pub tau_min: f64,
    /// While mu is above this threshold the slack updates are rescaled like
    /// the duals instead of vetoing the step, which lets early iterates
    /// cross constraint boundaries and change trajectory topology (the point
    /// of the infeasible variant). Below it slacks go back under the hard
    /// fraction-to-boundary veto.
    pub slack_decouple_above_mu: f64,
}

impl Default for ForwardParams {
    fn default() -> Self {
        Self {
            max_halvings: 10,
            tau_min: 0.95,
            slack_decouple_above_mu: 1e-3,
        }
    }
}

/// The whole backtracking grid was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepFailure;

impl fmt::Display for StepFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "no step length in the backtracking grid was accepted")
    }
}

#[cfg(feature = "std")]
impl std::error::Error for StepFailure {}

fn one_norm(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Computes the filter measures of a trial iterate.
pub(crate) fn candidate_metrics(
    problem: &OcProblem,
    iterate: &Iterate,
    mu: f64,
    variant: Variant,
) -> (f64, f64, f64) {
    let j = objective(problem, &iterate.states, &iterate.controls);
    let mut h = 0.0;
    let mut barrier = j;
    for t in 0..iterate.horizon() {
        let s = &iterate.duals[t];
        match variant {
            Variant::Feasible => {
                let c = problem.constraints(&iterate.states[t], &iterate.controls[t]);
                let mut r = DVector::zeros(c.len());
                for jdx in 0..c.len() {
                    r[jdx] = s[jdx] * c[jdx] + mu;
                    barrier -= mu * (-c[jdx]).ln();
                }
                h += one_norm(&r);
            }
            Variant::Infeasible => {
                let c = problem.constraints(&iterate.states[t], &iterate.controls[t]);
                let y = &iterate.slacks.as_ref().expect("slacks")[t];
                let mut rp = DVector::zeros(c.len());
                let mut rd = DVector::zeros(c.len());
                for jdx in 0..c.len() {
                    rp[jdx] = c[jdx] + y[jdx];
                    rd[jdx] = s[jdx] * y[jdx] - mu;
                    barrier -= mu * y[jdx].ln();
                }
                h += one_norm(&rp) + one_norm(&rd);
            }
        }
    }
    (j, barrier, h)
}

/// Result of an accepted forward pass.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub iterate: Iterate,
    pub step: f64,
    pub objective: f64,
}


/// Clips the dual components of a trial iterate at their
/// fraction-to-boundary bounds. Returns `None` when the primal part of the
/// guard fails: the constraint-decrease condition (feasible variant) and the
/// slack bounds (infeasible variant) cannot be repaired by clipping without
/// destroying the primal-dual coupling, so they keep their veto.
fn clip_multiplier_updates(
    problem: &OcProblem,
    current: &Iterate,
    mut candidate: Iterate,
    variant: Variant,
    tau: f64,
    mu: f64,
    slack_decouple_above_mu: f64,
) -> Option<Iterate> {
    let keep = 1.0 - tau;
    for t in 0..current.horizon() {
        match variant {
            Variant::Feasible => {
                let c_old = problem.constraints(&current.states[t], &current.controls[t]);
                let c_new = problem.constraints(&candidate.states[t], &candidate.controls[t]);
                for j in 0..c_old.len() {
                    if c_new[j] > keep * c_old[j] {
                        return None;
                    }
                }
            }
            Variant::Infeasible => {
                if mu <= slack_decouple_above_mu {
                    let y_old = &current.slacks.as_ref().expect("slacks")[t];
                    let y_new = &candidate.slacks.as_ref().expect("slacks")[t];
                    for j in 0..y_old.len() {
                        if y_new[j] < keep * y_old[j] {
                            return None;
                        }
                    }
                }
            }
        }
    }
    // One common step length per multiplier family: the largest fraction of
    // the update keeping every component at or above its boundary fraction.
    let mut alpha_dual = 1.0f64;
    let mut alpha_slack = 1.0f64;
    for t in 0..current.horizon() {
        for j in 0..current.duals[t].len() {
            let old = current.duals[t][j];
            let delta = candidate.duals[t][j] - old;
            if delta < 0.0 {
                alpha_dual = alpha_dual.min((keep - 1.0) * old / delta);
            }
        }
        if mu > slack_decouple_above_mu {
            if let (Some(y_old), Some(y_new)) = (current.slacks.as_ref(), candidate.slacks.as_ref()) {
                for j in 0..y_old[t].len() {
                    let old = y_old[t][j];
                    let delta = y_new[t][j] - old;
                    if delta < 0.0 {
                        alpha_slack = alpha_slack.min((keep - 1.0) * old / delta);
                    }
                }
            }
        }
    }
    for t in 0..current.horizon() {
        if alpha_dual < 1.0 {
            for j in 0..current.duals[t].len() {
                let old = current.duals[t][j];
                let delta = candidate.duals[t][j] - old;
                candidate.duals[t][j] = old + alpha_dual * delta;
            }
        }
        if alpha_slack < 1.0 {
            let y_old = &current.slacks.as_ref().expect("slacks")[t];
            let y_new = &mut candidate.slacks.as_mut().expect("slacks")[t];
            for j in 0..y_old.len() {
                let old = y_old[j];
                let delta = y_new[j] - old;
                y_new[j] = old + alpha_slack * delta;
            }
        }
    }
    Some(candidate)
}

/// Infeasibility level below which an iterate counts as centered; see
/// [`forward_pass`].
const CENTERED_INFEASIBILITY: f64 = 1e-8;

/// Backtracking line search over the step grid 1, 1/2, ..., 2^-10: the first
/// candidate that passes the fraction-to-boundary guard and is acceptable to
/// the filter wins and is recorded in the filter. Divergent rollouts count as
/// guard failures.
///
/// One escape hatch augments the filter: once both the current iterate and
/// the candidate are essentially centered (infeasibility below an absolute
/// floor), the remaining work is pure optimality polishing whose true
/// objective decrease can sit below the float resolution of the objective; a
/// candidate is then also accepted when its merit does not increase beyond a
/// few ulps. Without this the filter deadlocks the final gradient
/// contraction at each perturbation stage.
pub fn forward_pass(
    problem: &OcProblem,
    current: &Iterate,
    gains: &[StageGains],
    filter: &mut StepFilter,
    mu: f64,
    variant: Variant,
    params: ForwardParams,
) -> Result<ForwardResult, StepFailure> {
    let tau = params.tau_min.max(1.0 - mu);
    let (_, current_barrier, current_h) = candidate_metrics(problem, current, mu, variant);
    let polish_slack = 1e-11 * f64::max(1.0, current_barrier.abs());
    let mut step = 1.0f64;
    for _ in 0..=params.max_halvings {
        let candidate_iterate = match apply_gains(problem, current, gains, step) {
            Ok(it) => it,
            Err(_) => {
                step *= 0.5;
                continue;
            }
        };
        let guarded = if positivity_guard(problem, current, &candidate_iterate, variant, tau) {
            Some(candidate_iterate)
        } else {
            // Dual safeguard: near-active stages make the dual and slack
            // updates a stiff function of the state deviation, so a single
            // common step length gets vetoed by their overshoot long before
            // the primal update stops making progress. As in standard
            // primal-dual interior-point practice the multiplier-side
            // variables get their own fraction-to-boundary treatment: the
            // candidate is retried with duals and slacks clipped at the
            // boundary fraction. The primal side of the guard (constraint
            // decrease in the feasible variant) still vetoes.
            clip_multiplier_updates(problem, current, candidate_iterate, variant, tau, mu, params.slack_decouple_above_mu)
        };
        if let Some(candidate_iterate) = guarded {
            let (j, barrier, h) = candidate_metrics(problem, &candidate_iterate, mu, variant);
            let candidate = StepCandidate {
                step,
                iterate: candidate_iterate,
                objective: j,
                barrier_objective: barrier,
                infeasibility: h,
            };
            let centered_polish = h <= CENTERED_INFEASIBILITY
                && current_h <= CENTERED_INFEASIBILITY
                && barrier <= current_barrier + polish_slack;
            if j.is_finite() && (filter_accept(filter, &candidate) || centered_polish) {
                return Ok(ForwardResult {
                    iterate: candidate.iterate,
                    step,
                    objective: j,
                });
            }
        }
        step *= 0.5;
    }
    Err(StepFailure)
}


/// Temporary instrumentation: counts of rejection causes over a forward pass.
#[doc(hidden)]
#[derive(Debug, Default, Clone, Copy)]
pub struct ForwardDebugStats {
    pub guard_rejections: u32,
    pub filter_rejections: u32,
    pub divergences: u32,
}

#[doc(hidden)]
pub fn forward_pass_debug(
    problem: &OcProblem,
    current: &Iterate,
    gains: &[StageGains],
    filter: &mut StepFilter,
    mu: f64,
    variant: Variant,
    params: ForwardParams,
    stats: &mut ForwardDebugStats,
) -> Result<ForwardResult, StepFailure> {
    let tau = params.tau_min.max(1.0 - mu);
    let mut step = 1.0f64;
    for _ in 0..=params.max_halvings {
        let candidate_iterate = match apply_gains(problem, current, gains, step) {
            Ok(it) => it,
            Err(_) => {
                stats.divergences += 1;
                step *= 0.5;
                continue;
            }
        };
        if positivity_guard(problem, current, &candidate_iterate, variant, tau) {
            let (j, barrier, h) = candidate_metrics(problem, &candidate_iterate, mu, variant);
            let candidate = StepCandidate {
                step,
                iterate: candidate_iterate,
                objective: j,
                barrier_objective: barrier,
                infeasibility: h,
            };
            if j.is_finite() && filter_accept(filter, &candidate) {
                return Ok(ForwardResult {
                    iterate: candidate.iterate,
                    step,
                    objective: j,
                });
            }
            stats.filter_rejections += 1;
        } else {
            stats.guard_rejections += 1;
        }
        step *= 0.5;
    }
    Err(StepFailure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backward::StageGains;
    use alloc::vec;
    use alloc::vec::Vec;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    #[test]
    fn empty_filter_accepts_anything() {
        let f = StepFilter::new(1e-3, 1e-3);
        assert!(f.is_acceptable(123.0, 1e9));
    }

    #[test]
    fn filter_accepts_halved_infeasibility() {
        let mut f = StepFilter::new(1e-3, 1e-3);
        f.insert(1.0, 10.0);
        assert!(f.is_acceptable(0.5, 10.5));
    }

    #[test]
    fn filter_rejects_equal_point() {
        let mut f = StepFilter::new(1e-3, 1e-3);
        f.insert(1.0, 10.0);
        assert!(!f.is_acceptable(1.0, 10.0));
    }

    #[test]
    fn filter_prunes_dominated_entries() {
        let mut f = StepFilter::new(1e-5, 1e-5);
        f.insert(1.0, 10.0);
        f.insert(2.0, 5.0);
        f.insert(0.5, 4.0); // dominates (1, 10) and (2, 5)
        assert_eq!(f.entries().len(), 1);
        assert_eq!(f.entries()[0], (0.5, 4.0));
        // Mutually non-dominated entries coexist.
        f.insert(0.1, 8.0);
        assert_eq!(f.entries().len(), 2);
    }

    fn guard_case(s_old: f64, eta: f64, step: f64, tau: f64) -> bool {
        let s_new = s_old + step * eta;
        s_new >= (1.0 - tau) * s_old
    }

    #[test]
    fn fraction_to_boundary_arithmetic() {
        // s=1, eta=-2, full step crosses zero; quarter step keeps s=1/2.
        assert!(!guard_case(1.0, -2.0, 1.0, 0.995));
        assert!(guard_case(1.0, -2.0, 0.25, 0.995));
    }

    fn scalar_gains(alpha: f64, beta: f64) -> StageGains {
        StageGains {
            control_ff: DVector::from_element(1, alpha),
            control_fb: DMatrix::from_element(1, 1, beta),
            dual_ff: DVector::zeros(0),
            dual_fb: DMatrix::zeros(0, 1),
            slack_ff: None,
            slack_fb: None,
        }
    }

    fn scalar_problem(x0: f64, horizon: usize) -> OcProblem {
        use crate::fdcheck::FiniteDiffModel;
        let model = FiniteDiffModel::new(
            1,
            1,
            0,
            |x: &DVector<f64>, u: &DVector<f64>| DVector::from_element(1, x[0] + u[0]),
            |x: &DVector<f64>, u: &DVector<f64>| 0.5 * (x[0] * x[0] + u[0] * u[0]),
            |x: &DVector<f64>| 0.5 * x[0] * x[0],
            |_x: &DVector<f64>, _u: &DVector<f64>| DVector::zeros(0),
        );
        OcProblem::new(1, 1, 0, horizon, DVector::from_element(1, x0), model).unwrap()
    }

    fn scalar_iterate(problem: &OcProblem, u: &[f64]) -> Iterate {
        let controls: Vec<DVector<f64>> =
            u.iter().map(|&v| DVector::from_element(1, v)).collect();
        let states = crate::problem::rollout(problem, &controls).unwrap();
        let duals = (0..u.len()).map(|_| DVector::zeros(0)).collect();
        Iterate {
            states,
            controls,
            duals,
            slacks: None,
        }
    }

    #[test]
    fn stationary_gains_identity() {
        let p = scalar_problem(1.0, 2);
        let w = scalar_iterate(&p, &[0.3, -0.2]);
        let gains = vec![scalar_gains(0.0, 0.4), scalar_gains(0.0, -0.1)];
        let out = apply_gains(&p, &w, &gains, 0.5).unwrap();
        for t in 0..2 {
            assert_relative_eq!(out.controls[t][0], w.controls[t][0], epsilon = 1e-15);
            assert_relative_eq!(out.states[t][0], w.states[t][0], epsilon = 1e-15);
        }
    }

    #[test]
    fn open_loop_update_adds_feedforward() {
        let p = scalar_problem(1.0, 2);
        let w = scalar_iterate(&p, &[0.0, 0.0]);
        let gains = vec![scalar_gains(0.5, 0.0), scalar_gains(-0.25, 0.0)];
        let out = apply_gains(&p, &w, &gains, 1.0).unwrap();
        assert_relative_eq!(out.controls[0][0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(out.controls[1][0], -0.25, epsilon = 1e-15);
    }

    #[test]
    fn hand_rollout_scalar_example() {
        // alpha_0 = -1/3, beta_0 = 0: x_1 shifts by -1/3.
        let p = scalar_problem(1.0, 1);
        let w = scalar_iterate(&p, &[0.0]);
        let gains = vec![scalar_gains(-1.0 / 3.0, 0.0)];
        let out = apply_gains(&p, &w, &gains, 1.0).unwrap();
        assert_relative_eq!(out.states[1][0], w.states[1][0] - 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn feedback_only_smallest_step_is_identity() {
        // With zero feedforward the smallest grid step changes nothing:
        // dx stays zero along the whole rollout.
        let p = scalar_problem(2.0, 3);
        let w = scalar_iterate(&p, &[0.1, -0.3, 0.2]);
        let gains = vec![
            scalar_gains(0.0, 0.7),
            scalar_gains(0.0, -0.5),
            scalar_gains(0.0, 0.3),
        ];
        let out = apply_gains(&p, &w, &gains, 1.0 / 1024.0).unwrap();
        for t in 0..3 {
            assert_relative_eq!(out.controls[t][0], w.controls[t][0], epsilon = 1e-14);
        }
    }

    #[test]
    fn forward_pass_accepts_full_step_on_descent() {
        let p = scalar_problem(1.0, 2);
        let w = scalar_iterate(&p, &[0.0, 0.0]);
        // Any descent direction on the objective with an empty filter.
        let gains = vec![scalar_gains(-0.5, 0.0), scalar_gains(-0.1, 0.0)];
        let mut filter = StepFilter::new(1e-5, 1e-5);
        let res = forward_pass(
            &p,
            &w,
            &gains,
            &mut filter,
            1e-3,
            Variant::Feasible,
            ForwardParams::default(),
        )
        .unwrap();
        assert_eq!(res.step, 1.0);
        assert_eq!(filter.entries().len(), 1);
    }

    #[test]
    fn divergent_rollout_is_guard_failure() {
        let p = scalar_problem(1.0, 1);
        let w = scalar_iterate(&p, &[0.0]);
        let gains = vec![scalar_gains(f64::INFINITY, 0.0)];
        let mut filter = StepFilter::new(1e-5, 1e-5);
        // Every step is divergent (inf * anything), so the grid is exhausted.
        let err = forward_pass(
            &p,
            &w,
            &gains,
            &mut filter,
            1e-3,
            Variant::Feasible,
            ForwardParams::default(),
        )
        .unwrap_err();
        assert_eq!(err, StepFailure);
    }
}
