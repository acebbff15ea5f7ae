//! Backward pass: stage-wise quadratic expansion of the min-max cost-to-go,
//! primal-dual stage system solves (feasible and infeasible forms) by
//! condensation, and the value-function recursion.

use alloc::vec::Vec;
use core::fmt;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::problem::{Iterate, OcProblem, Variant};

/// Second-order expansion of `Q(x, u, s) = q + s'c + V(f(x, u))` around a
/// stage point. `con`, `con_jx`, `con_ju` are the constraint value and
/// Jacobians (the s-blocks of the expansion; the s-s block is identically
/// zero and never stored).
#[derive(Debug, Clone)]
pub struct QExpansion {
    pub q_x: DVector<f64>,
    pub q_u: DVector<f64>,
    pub q_xx: DMatrix<f64>,
    pub q_uu: DMatrix<f64>,
    pub q_xu: DMatrix<f64>,
    pub con: DVector<f64>,
    pub con_jx: DMatrix<f64>,
    pub con_ju: DMatrix<f64>,
}

/// Affine update coefficients for one stage: feedforward and feedback terms
/// for the control, dual and (infeasible variant) slack updates.
#[derive(Debug, Clone)]
pub struct StageGains {
    /// Control feedforward (m).
    pub control_ff: DVector<f64>,
    /// Control feedback (m×n).
    pub control_fb: DMatrix<f64>,
    /// Dual feedforward (l).
    pub dual_ff: DVector<f64>,
    /// Dual feedback (l×n).
    pub dual_fb: DMatrix<f64>,
    /// Slack feedforward (l, infeasible variant only).
    pub slack_ff: Option<DVector<f64>>,
    /// Slack feedback (l×n, infeasible variant only).
    pub slack_fb: Option<DMatrix<f64>>,
}

/// Quadratic value model coefficients at one stage (gradient and Hessian at
/// the current trajectory point).
#[derive(Debug, Clone)]
pub struct ValueCoeffs {
    pub vx: DVector<f64>,
    pub vxx: DMatrix<f64>,
}

/// Stage residuals entering the right-hand side of the stage system.
#[derive(Debug, Clone)]
pub enum StageResiduals {
    /// Perturbed complementarity `r = S c + mu`.
    Feasible { r: DVector<f64> },
    /// Primal residual `r_p = c + y`, dual residual `r_d = S y - mu` and the
    /// reduced right-hand side `r_hat = S r_p - r_d`.
    Infeasible {
        r_p: DVector<f64>,
        r_d: DVector<f64>,
        r_hat: DVector<f64>,
    },
}

/// Coefficients of the condensed stage system after eliminating the dual (and
/// slack) updates. `q_uu` carries the regularization used by the accompanying
/// gains so that the value recursion stays consistent with the feedback.
#[derive(Debug, Clone)]
pub struct CondensedCoeffs {
    pub q_x: DVector<f64>,
    pub q_u: DVector<f64>,
    pub q_xx: DMatrix<f64>,
    pub q_xu: DMatrix<f64>,
    pub q_uu: DMatrix<f64>,
    pub residuals: StageResiduals,
}

/// Backward pass failure: the condensed control Hessian lost positive
/// definiteness at `stage`; the caller should raise the regularization and
/// restart the pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackwardError {
    NotPositiveDefinite { stage: usize },
}

impl fmt::Display for BackwardError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackwardError::NotPositiveDefinite { stage } => {
                write!(f, "condensed control Hessian not positive definite at stage {stage}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for BackwardError {}

/// Evaluates the second-order expansion of `q + s'c + V_next(f)` at a stage
/// point. With `second_order` false the dynamics curvature contractions are
/// dropped (Gauss-Newton / iLQR style); the constraint curvature weighted by
/// the duals always stays.
pub fn stage_expansion(
    problem: &OcProblem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    s: &DVector<f64>,
    v_next: &ValueCoeffs,
    second_order: bool,
) -> QExpansion {
    let cost = problem.stage_cost_derivatives(x, u);
    let dyn_jac = problem.dynamics_jacobians(x, u);
    let con = problem.constraints(x, u);
    let con_jac = problem.constraint_jacobians(x, u);
    let l = problem.constraint_dim();

    let mut lag_x = cost.gx;
    let mut lag_u = cost.gu;
    let mut lag_xx = cost.hxx;
    let mut lag_uu = cost.huu;
    let mut lag_xu = cost.hxu;
    if l > 0 {
        lag_x += con_jac.jx.transpose() * s;
        lag_u += con_jac.ju.transpose() * s;
        let con_hess = problem.constraint_hessians(x, u);
        for j in 0..l {
            let w = s[j];
            if w != 0.0 {
                lag_xx += &con_hess.hxx[j] * w;
                lag_uu += &con_hess.huu[j] * w;
                lag_xu += &con_hess.hxu[j] * w;
            }
        }
    }

    let q_x = lag_x + dyn_jac.jx.transpose() * &v_next.vx;
    let q_u = lag_u + dyn_jac.ju.transpose() * &v_next.vx;
    let vxx_jx = &v_next.vxx * &dyn_jac.jx;
    let vxx_ju = &v_next.vxx * &dyn_jac.ju;
    let mut q_xx = lag_xx + dyn_jac.jx.transpose() * &vxx_jx;
    let mut q_uu = lag_uu + dyn_jac.ju.transpose() * &vxx_ju;
    let mut q_xu = lag_xu + dyn_jac.jx.transpose() * &vxx_ju;
    if second_order {
        let dyn_hess = problem.dynamics_hessians(x, u);
        for i in 0..problem.state_dim() {
            let w = v_next.vx[i];
            if w != 0.0 {
                q_xx += &dyn_hess.hxx[i] * w;
                q_uu += &dyn_hess.huu[i] * w;
                q_xu += &dyn_hess.hxu[i] * w;
            }
        }
    }

    QExpansion {
        q_x,
        q_u,
        q_xx,
        q_uu,
        q_xu,
        con,
        con_jx: con_jac.jx,
        con_ju: con_jac.ju,
    }
}

fn factorize(
    qhat_uu: &DMatrix<f64>,
    stage: usize,
) -> Result<Cholesky<f64, nalgebra::Dyn>, BackwardError> {
    // Symmetrize before factorizing; the condensation introduces harmless
    // round-off asymmetry.
    let sym = (qhat_uu + qhat_uu.transpose()) * 0.5;
    Cholesky::new(sym).ok_or(BackwardError::NotPositiveDefinite { stage })
}

/// Solves the feasible-variant stage system by condensation.
///
/// Requires `c < 0` and `s > 0` element-wise. Eliminating the dual update
/// from the saddle system gives a control system with coefficients
/// `Qhat_uu = (Q_uu + gamma I) - Q_us C^{-1} S Q_su` (and matching gradient
/// and cross terms); the dual gains follow by back-substitution.
pub fn solve_stage_feasible(
    qe: &QExpansion,
    s: &DVector<f64>,
    mu: f64,
    gamma_reg: f64,
    stage: usize,
) -> Result<(StageGains, CondensedCoeffs), BackwardError> {
    let l = s.len();
    let m = qe.q_u.len();
    let c = &qe.con;

    // r = S c + mu, and the diagonal scalings from C^{-1}.
    let mut r = DVector::zeros(l);
    let mut s_over_c = DVector::zeros(l);
    let mut r_over_c = DVector::zeros(l);
    for j in 0..l {
        r[j] = s[j] * c[j] + mu;
        s_over_c[j] = s[j] / c[j];
        r_over_c[j] = r[j] / c[j];
    }

    // q_us = con_ju' (m×l); scaled rows of the constraint Jacobians.
    let scaled_ju = DMatrix::from_fn(l, m, |j, k| s_over_c[j] * qe.con_ju[(j, k)]);
    let scaled_jx = DMatrix::from_fn(l, qe.q_x.len(), |j, k| s_over_c[j] * qe.con_jx[(j, k)]);

    let mut qhat_uu = qe.q_uu.clone();
    for d in 0..m {
        qhat_uu[(d, d)] += gamma_reg;
    }
    qhat_uu -= qe.con_ju.transpose() * &scaled_ju;
    let qhat_u = &qe.q_u - qe.con_ju.transpose() * &r_over_c;
    let qhat_x = &qe.q_x - qe.con_jx.transpose() * &r_over_c;
    let qhat_xx = &qe.q_xx - qe.con_jx.transpose() * &scaled_jx;
    let qhat_xu = &qe.q_xu - qe.con_jx.transpose() * &scaled_ju;

    let chol = factorize(&qhat_uu, stage)?;
    let control_ff = -chol.solve(&qhat_u);
    let control_fb = -chol.solve(&qhat_xu.transpose());

    // Back-substitution: delta_s = -C^{-1} (r + S Q_su du + S Q_sx dx).
    let ju_ff = &qe.con_ju * &control_ff;
    let ju_fb = &qe.con_ju * &control_fb;
    let mut dual_ff = DVector::zeros(l);
    let mut dual_fb = DMatrix::zeros(l, qe.q_x.len());
    for j in 0..l {
        dual_ff[j] = -(r[j] + s[j] * ju_ff[j]) / c[j];
        for k in 0..qe.q_x.len() {
            dual_fb[(j, k)] = -(s[j] * (qe.con_jx[(j, k)] + ju_fb[(j, k)])) / c[j];
        }
    }

    Ok((
        StageGains {
            control_ff,
            control_fb,
            dual_ff,
            dual_fb,
            slack_ff: None,
            slack_fb: None,
        },
        CondensedCoeffs {
            q_x: qhat_x,
            q_u: qhat_u,
            q_xx: qhat_xx,
            q_xu: qhat_xu,
            q_uu: qhat_uu,
            residuals: StageResiduals::Feasible { r },
        },
    ))
}

/// Solves the infeasible-variant stage system (with slacks `y`) by
/// elimination of the slack update followed by condensation.
///
/// Requires `s > 0` and `y > 0`. The reduced control system has coefficients
/// `Qhat_uu = (Q_uu + gamma I) + Q_us Y^{-1} S Q_su`; the slack gains come
/// from `dy = -r_p - Q_su du - Q_sx dx` and the dual gains from the reduced
/// second row.
pub fn solve_stage_infeasible(
    qe: &QExpansion,
    s: &DVector<f64>,
    y: &DVector<f64>,
    mu: f64,
    gamma_reg: f64,
    stage: usize,
) -> Result<(StageGains, CondensedCoeffs), BackwardError> {
    let l = s.len();
    let m = qe.q_u.len();
    let n = qe.q_x.len();
    let c = &qe.con;

    let mut r_p = DVector::zeros(l);
    let mut r_d = DVector::zeros(l);
    let mut r_hat = DVector::zeros(l);
    let mut s_over_y = DVector::zeros(l);
    let mut rhat_over_y = DVector::zeros(l);
    for j in 0..l {
        r_p[j] = c[j] + y[j];
        r_d[j] = s[j] * y[j] - mu;
        r_hat[j] = s[j] * r_p[j] - r_d[j];
        s_over_y[j] = s[j] / y[j];
        rhat_over_y[j] = r_hat[j] / y[j];
    }

    let scaled_ju = DMatrix::from_fn(l, m, |j, k| s_over_y[j] * qe.con_ju[(j, k)]);
    let scaled_jx = DMatrix::from_fn(l, n, |j, k| s_over_y[j] * qe.con_jx[(j, k)]);

    let mut qhat_uu = qe.q_uu.clone();
    for d in 0..m {
        qhat_uu[(d, d)] += gamma_reg;
    }
    qhat_uu += qe.con_ju.transpose() * &scaled_ju;
    let qhat_u = &qe.q_u + qe.con_ju.transpose() * &rhat_over_y;
    let qhat_x = &qe.q_x + qe.con_jx.transpose() * &rhat_over_y;
    let qhat_xx = &qe.q_xx + qe.con_jx.transpose() * &scaled_jx;
    let qhat_xu = &qe.q_xu + qe.con_jx.transpose() * &scaled_ju;

    let chol = factorize(&qhat_uu, stage)?;
    let control_ff = -chol.solve(&qhat_u);
    let control_fb = -chol.solve(&qhat_xu.transpose());

    // delta_s = Y^{-1} (r_hat + S Q_su du + S Q_sx dx)
    let ju_ff = &qe.con_ju * &control_ff;
    let ju_fb = &qe.con_ju * &control_fb;
    let mut dual_ff = DVector::zeros(l);
    let mut dual_fb = DMatrix::zeros(l, n);
    for j in 0..l {
        dual_ff[j] = (r_hat[j] + s[j] * ju_ff[j]) / y[j];
        for k in 0..n {
            dual_fb[(j, k)] = s[j] * (qe.con_jx[(j, k)] + ju_fb[(j, k)]) / y[j];
        }
    }
    // delta_y = -r_p - Q_su du - Q_sx dx
    let slack_ff = -&r_p - &ju_ff;
    let slack_fb = -&qe.con_jx - &ju_fb;

    Ok((
        StageGains {
            control_ff,
            control_fb,
            dual_ff,
            dual_fb,
            slack_ff: Some(slack_ff),
            slack_fb: Some(slack_fb),
        },
        CondensedCoeffs {
            q_x: qhat_x,
            q_u: qhat_u,
            q_xx: qhat_xx,
            q_xu: qhat_xu,
            q_uu: qhat_uu,
            residuals: StageResiduals::Infeasible { r_p, r_d, r_hat },
        },
    ))
}

/// Value recursion step: `V_x = Qhat_x + Qhat_xu a`, `V_xx = Qhat_xx +
/// Qhat_xu b`, followed by symmetrization of the Hessian.
pub fn value_update(cond: &CondensedCoeffs, gains: &StageGains) -> ValueCoeffs {
    let vx = &cond.q_x + &cond.q_xu * &gains.control_ff;
    let vxx = &cond.q_xx + &cond.q_xu * &gains.control_fb;
    let vxx = (&vxx + vxx.transpose()) * 0.5;
    ValueCoeffs { vx, vxx }
}

/// Scalar diagnostics accumulated over one backward pass.
#[derive(Debug, Clone)]
pub struct BackwardDiagnostics {
    /// max over stages of the control gradient infinity norm.
    pub max_qu_inf: f64,
    /// Feasible variant: max complementarity residual norm; infeasible:
    /// max over both primal and dual residual norms.
    pub max_residual_inf: f64,
    /// Smallest eigenvalue of the unregularized condensed control Hessian
    /// over all stages; computed only on request.
    pub min_qhat_uu_eig: Option<f64>,
}

/// Everything produced by one backward pass.
#[derive(Debug, Clone)]
pub struct BackwardOutput {
    /// Per-stage gains, index 0..N-1.
    pub gains: Vec<StageGains>,
    /// Value coefficients, index 0..N (terminal included).
    pub values: Vec<ValueCoeffs>,
    /// Per-stage Q expansions, index 0..N-1.
    pub expansions: Vec<QExpansion>,
    pub diagnostics: BackwardDiagnostics,
}

/// Options modifying a backward pass.
#[derive(Debug, Clone, Copy)]
pub struct BackwardOptions {
    /// Include the dynamics curvature contractions (full DDP). With `false`
    /// the pass is Gauss-Newton (iLQR-style).
    pub second_order_dynamics: bool,
    /// Compute the minimum eigenvalue diagnostic (symmetric eigensolve per
    /// stage; off by default for cost).
    pub min_eig_diagnostic: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            second_order_dynamics: true,
            min_eig_diagnostic: false,
        }
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// Runs the full backward recursion from the terminal stage.
///
/// Initializes the value model from the terminal cost and sweeps t = N-1..0,
/// expanding, solving the stage system for the chosen variant and updating
/// the value model. Fails with the stage index on loss of positive
/// definiteness, in which case the caller should raise `gamma_reg` and
/// restart the whole pass.
pub fn backward_pass(
    problem: &OcProblem,
    iterate: &Iterate,
    mu: f64,
    gamma_reg: f64,
    variant: Variant,
    options: BackwardOptions,
) -> Result<BackwardOutput, BackwardError> {
    let horizon = problem.horizon();
    let term = problem.terminal_cost_derivatives(&iterate.states[horizon]);
    let mut values: Vec<Option<ValueCoeffs>> = (0..=horizon).map(|_| None).collect();
    values[horizon] = Some(ValueCoeffs {
        vx: term.gx,
        vxx: (&term.hxx + term.hxx.transpose()) * 0.5,
    });

    let mut gains: Vec<Option<StageGains>> = (0..horizon).map(|_| None).collect();
    let mut expansions: Vec<Option<QExpansion>> = (0..horizon).map(|_| None).collect();
    let mut max_qu_inf = 0.0f64;
    let mut max_residual_inf = 0.0f64;
    let mut min_eig: Option<f64> = None;

    for t in (0..horizon).rev() {
        let v_next = values[t + 1].as_ref().expect("value recursion order");
        let qe = stage_expansion(
            problem,
            &iterate.states[t],
            &iterate.controls[t],
            &iterate.duals[t],
            v_next,
            options.second_order_dynamics,
        );
        let (stage_gains, cond) = match variant {
            Variant::Feasible => {
                solve_stage_feasible(&qe, &iterate.duals[t], mu, gamma_reg, t)?
            }
            Variant::Infeasible => {
                let y = iterate
                    .slacks
                    .as_ref()
                    .expect("infeasible variant requires slacks");
                solve_stage_infeasible(&qe, &iterate.duals[t], &y[t], mu, gamma_reg, t)?
            }
        };

        max_qu_inf = max_qu_inf.max(inf_norm(&qe.q_u));
        match &cond.residuals {
            StageResiduals::Feasible { r } => {
                max_residual_inf = max_residual_inf.max(inf_norm(r));
            }
            StageResiduals::Infeasible { r_p, r_d, .. } => {
                max_residual_inf = max_residual_inf.max(inf_norm(r_p)).max(inf_norm(r_d));
            }
        }
        if options.min_eig_diagnostic {
            // Eigenvalues of the unregularized matrix via the shift identity
            // eig(Qhat + gamma I) - gamma.
            let sym = (&cond.q_uu + cond.q_uu.transpose()) * 0.5;
            let eigs = sym.symmetric_eigenvalues();
            let smallest = eigs.iter().cloned().fold(f64::INFINITY, f64::min) - gamma_reg;
            min_eig = Some(min_eig.map_or(smallest, |m: f64| m.min(smallest)));
        }

        values[t] = Some(value_update(&cond, &stage_gains));
        gains[t] = Some(stage_gains);
        expansions[t] = Some(qe);
    }

    Ok(BackwardOutput {
        gains: gains.into_iter().map(|g| g.unwrap()).collect(),
        values: values.into_iter().map(|v| v.unwrap()).collect(),
        expansions: expansions.into_iter().map(|e| e.unwrap()).collect(),
        diagnostics: BackwardDiagnostics {
            max_qu_inf,
            max_residual_inf,
            min_qhat_uu_eig: min_eig,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_relative_eq;

    fn scalar_expansion(q_u: f64, q_uu: f64, c_u: f64, c_val: f64) -> QExpansion {
        QExpansion {
            q_x: DVector::zeros(1),
            q_u: DVector::from_element(1, q_u),
            q_xx: DMatrix::zeros(1, 1),
            q_uu: DMatrix::from_element(1, 1, q_uu),
            q_xu: DMatrix::zeros(1, 1),
            con: DVector::from_element(1, c_val),
            con_jx: DMatrix::zeros(1, 1),
            con_ju: DMatrix::from_element(1, 1, c_u),
        }
    }

    #[test]
    fn feasible_stage_solve_zero_residual() {
        // Q_uu=2, Q_u=1, c_u=1, s=1, c=-1, mu=1 => r=0, Qhat_uu=3, alpha=-1/3,
        // eta=-1/3.
        let qe = scalar_expansion(1.0, 2.0, 1.0, -1.0);
        let (gains, cond) =
            solve_stage_feasible(&qe, &DVector::from_element(1, 1.0), 1.0, 0.0, 0).unwrap();
        assert_relative_eq!(cond.q_uu[(0, 0)], 3.0, epsilon = 1e-14);
        assert_relative_eq!(gains.control_ff[0], -1.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(gains.dual_ff[0], -1.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn feasible_stage_solve_nonzero_residual() {
        // c=-1, s=2, mu=1 => r=-1; Q_u=0, Q_us=1, Q_uu=2: Qhat_u=-1, Qhat_uu=4,
        // alpha=1/4, eta=-1/2.
        let qe = scalar_expansion(0.0, 2.0, 1.0, -1.0);
        let (gains, cond) =
            solve_stage_feasible(&qe, &DVector::from_element(1, 2.0), 1.0, 0.0, 0).unwrap();
        assert_relative_eq!(cond.q_u[0], -1.0, epsilon = 1e-14);
        assert_relative_eq!(cond.q_uu[(0, 0)], 4.0, epsilon = 1e-14);
        assert_relative_eq!(gains.control_ff[0], 0.25, epsilon = 1e-14);
        assert_relative_eq!(gains.dual_ff[0], -0.5, epsilon = 1e-14);
    }

    #[test]
    fn stationary_stage_gives_zero_feedforward() {
        // Zero right-hand side: Q_u=0 and r=0 regardless of curvature.
        let qe = scalar_expansion(0.0, 7.0, 3.0, -0.5);
        let (gains, _) =
            solve_stage_feasible(&qe, &DVector::from_element(1, 2.0), 1.0, 0.0, 0).unwrap();
        assert_relative_eq!(gains.control_ff[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(gains.dual_ff[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn infeasible_stage_solve_hand_example() {
        // Q_uu=1, Q_us=1, Q_u=1, s=1, y=1, c=-2 (r_p=-1), mu=1 (r_d=0),
        // r_hat=-1 => Qhat_uu=2, Qhat_u=0, alpha=0, chi=1, eta=-1.
        let qe = scalar_expansion(1.0, 1.0, 1.0, -2.0);
        let (gains, cond) = solve_stage_infeasible(
            &qe,
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 1.0),
            1.0,
            0.0,
            0,
        )
        .unwrap();
        assert_relative_eq!(cond.q_uu[(0, 0)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(cond.q_u[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(gains.control_ff[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(gains.slack_ff.as_ref().unwrap()[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(gains.dual_ff[0], -1.0, epsilon = 1e-14);
    }

    #[test]
    fn infeasible_matches_feasible_when_slack_mirrors_constraint() {
        // With y = -c the two stage systems are algebraically identical.
        let qe = scalar_expansion(0.7, 2.5, 1.3, -0.8);
        let s = DVector::from_element(1, 1.9);
        let y = DVector::from_element(1, 0.8);
        let (gf, _) = solve_stage_feasible(&qe, &s, 0.3, 0.0, 0).unwrap();
        let (gi, _) = solve_stage_infeasible(&qe, &s, &y, 0.3, 0.0, 0).unwrap();
        assert_relative_eq!(gf.control_ff[0], gi.control_ff[0], epsilon = 1e-12);
        assert_relative_eq!(gf.control_fb[(0, 0)], gi.control_fb[(0, 0)], epsilon = 1e-12);
        assert_relative_eq!(gf.dual_ff[0], gi.dual_ff[0], epsilon = 1e-12);
        assert_relative_eq!(gf.dual_fb[(0, 0)], gi.dual_fb[(0, 0)], epsilon = 1e-12);
    }

    #[test]
    fn not_positive_definite_reported_with_stage() {
        let qe = scalar_expansion(0.0, -1.0, 0.0, -1.0);
        let err = solve_stage_feasible(&qe, &DVector::from_element(1, 1.0), 1.0, 0.0, 7)
            .unwrap_err();
        assert_eq!(err, BackwardError::NotPositiveDefinite { stage: 7 });
    }

    #[test]
    fn value_update_zero_gains_passthrough() {
        let cond = CondensedCoeffs {
            q_x: DVector::from_element(1, 3.0),
            q_u: DVector::from_element(1, 0.0),
            q_xx: DMatrix::from_element(1, 1, 4.0),
            q_xu: DMatrix::from_element(1, 1, 1.0),
            q_uu: DMatrix::from_element(1, 1, 2.0),
            residuals: StageResiduals::Feasible { r: DVector::zeros(0) },
        };
        let gains = StageGains {
            control_ff: DVector::zeros(1),
            control_fb: DMatrix::zeros(1, 1),
            dual_ff: DVector::zeros(0),
            dual_fb: DMatrix::zeros(0, 1),
            slack_ff: None,
            slack_fb: None,
        };
        let v = value_update(&cond, &gains);
        assert_eq!(v.vx[0], 3.0);
        assert_eq!(v.vxx[(0, 0)], 4.0);
    }

    #[test]
    fn value_update_scalar_riccati() {
        // Scalar LQR stage: Q_xx=2, Q_uu=2, Q_xu=1 -> beta=-1/2 and
        // V_xx = 2 + 1*(-1/2) = 3/2.
        let cond = CondensedCoeffs {
            q_x: DVector::zeros(1),
            q_u: DVector::zeros(1),
            q_xx: DMatrix::from_element(1, 1, 2.0),
            q_xu: DMatrix::from_element(1, 1, 1.0),
            q_uu: DMatrix::from_element(1, 1, 2.0),
            residuals: StageResiduals::Feasible { r: DVector::zeros(0) },
        };
        let gains = StageGains {
            control_ff: DVector::zeros(1),
            control_fb: DMatrix::from_element(1, 1, -0.5),
            dual_ff: DVector::zeros(0),
            dual_fb: DMatrix::zeros(0, 1),
            slack_ff: None,
            slack_fb: None,
        };
        let v = value_update(&cond, &gains);
        assert_relative_eq!(v.vxx[(0, 0)], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn value_update_two_form_equivalence() {
        // V_x computed as Qhat_x + b'Qhat_u + (Qhat_ux + Qhat_uu b)'a equals
        // Qhat_x + Qhat_xu a when b is the exact minimizer.
        let q_xx = DMatrix::from_row_slice(2, 2, &[3.0, 0.4, 0.4, 2.0]);
        let q_uu = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
        let q_xu = DMatrix::from_row_slice(2, 2, &[0.7, -0.2, 0.1, 0.5]);
        let q_x = DVector::from_column_slice(&[1.0, -2.0]);
        let q_u = DVector::from_column_slice(&[0.5, 0.25]);
        let chol = Cholesky::new(q_uu.clone()).unwrap();
        let alpha = -chol.solve(&q_u);
        let beta = -chol.solve(&q_xu.transpose());
        let cond = CondensedCoeffs {
            q_x: q_x.clone(),
            q_u: q_u.clone(),
            q_xx: q_xx.clone(),
            q_xu: q_xu.clone(),
            q_uu: q_uu.clone(),
            residuals: StageResiduals::Feasible { r: DVector::zeros(0) },
        };
        let gains = StageGains {
            control_ff: alpha.clone(),
            control_fb: beta.clone(),
            dual_ff: DVector::zeros(0),
            dual_fb: DMatrix::zeros(0, 2),
            slack_ff: None,
            slack_fb: None,
        };
        let v = value_update(&cond, &gains);
        let long_form = &q_x
            + beta.transpose() * &q_u
            + (q_xu.transpose() + &q_uu * &beta).transpose() * &alpha;
        assert!((v.vx - long_form).abs().max() < 1e-10);
    }

    #[test]
    fn dense_block_solve_oracle_feasible() {
        // Compare condensation against a dense LU solve of the full saddle
        // system on a 2-control, 2-constraint, 3-state instance.
        let m = 2;
        let l = 2;
        let n = 3;
        let q_uu = DMatrix::from_row_slice(m, m, &[3.0, 0.5, 0.5, 2.0]);
        let q_u = DVector::from_column_slice(&[0.3, -0.7]);
        let q_xu = DMatrix::from_row_slice(n, m, &[0.2, -0.1, 0.4, 0.3, -0.2, 0.1]);
        let con_ju = DMatrix::from_row_slice(l, m, &[1.0, -0.5, 0.3, 0.8]);
        let con_jx = DMatrix::from_row_slice(l, n, &[0.1, 0.2, -0.3, 0.0, 0.4, 0.2]);
        let c = DVector::from_column_slice(&[-0.6, -1.1]);
        let s = DVector::from_column_slice(&[0.9, 1.7]);
        let mu = 0.05;
        let qe = QExpansion {
            q_x: DVector::zeros(n),
            q_u: q_u.clone(),
            q_xx: DMatrix::zeros(n, n),
            q_uu: q_uu.clone(),
            q_xu: q_xu.clone(),
            con: c.clone(),
            con_jx: con_jx.clone(),
            con_ju: con_ju.clone(),
        };
        let (gains, _) = solve_stage_feasible(&qe, &s, mu, 0.0, 0).unwrap();

        // Dense assembly of [[Quu, Qus], [S Qsu, C]].
        let dim = m + l;
        let mut big = DMatrix::zeros(dim, dim);
        big.view_mut((0, 0), (m, m)).copy_from(&q_uu);
        big.view_mut((0, m), (m, l)).copy_from(&con_ju.transpose());
        for j in 0..l {
            for k in 0..m {
                big[(m + j, k)] = s[j] * con_ju[(j, k)];
            }
            big[(m + j, m + j)] = c[j];
        }
        let mut rhs = DMatrix::zeros(dim, 1 + n);
        for k in 0..m {
            rhs[(k, 0)] = q_u[k];
            for col in 0..n {
                rhs[(k, 1 + col)] = q_xu[(col, k)];
            }
        }
        for j in 0..l {
            rhs[(m + j, 0)] = s[j] * c[j] + mu;
            for col in 0..n {
                rhs[(m + j, 1 + col)] = s[j] * con_jx[(j, col)];
            }
        }
        let solved = big.lu().solve(&(-rhs)).unwrap();
        for k in 0..m {
            assert_relative_eq!(gains.control_ff[k], solved[(k, 0)], epsilon = 1e-10);
            for col in 0..n {
                assert_relative_eq!(
                    gains.control_fb[(k, col)],
                    solved[(k, 1 + col)],
                    epsilon = 1e-10
                );
            }
        }
        for j in 0..l {
            assert_relative_eq!(gains.dual_ff[j], solved[(m + j, 0)], epsilon = 1e-10);
            for col in 0..n {
                assert_relative_eq!(
                    gains.dual_fb[(j, col)],
                    solved[(m + j, 1 + col)],
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn dense_block_solve_oracle_infeasible() {
        // Full (m + 2l) system of the slack formulation vs the reduced solve.
        let m = 1;
        let l = 2;
        let n = 2;
        let q_uu = DMatrix::from_element(m, m, 2.2);
        let q_u = DVector::from_element(m, 0.4);
        let q_xu = DMatrix::from_row_slice(n, m, &[0.3, -0.6]);
        let con_ju = DMatrix::from_row_slice(l, m, &[0.9, -0.4]);
        let con_jx = DMatrix::from_row_slice(l, n, &[0.2, -0.1, 0.5, 0.3]);
        let c = DVector::from_column_slice(&[-0.3, 0.2]);
        let s = DVector::from_column_slice(&[1.1, 0.6]);
        let y = DVector::from_column_slice(&[0.5, 0.9]);
        let mu = 0.07;
        let qe = QExpansion {
            q_x: DVector::zeros(n),
            q_u: q_u.clone(),
            q_xx: DMatrix::zeros(n, n),
            q_uu: q_uu.clone(),
            q_xu: q_xu.clone(),
            con: c.clone(),
            con_jx: con_jx.clone(),
            con_ju: con_ju.clone(),
        };
        let (gains, _) = solve_stage_infeasible(&qe, &s, &y, mu, 0.0, 0).unwrap();

        // [[Quu, Qus, 0], [Qsu, 0, I], [0, Y, S]]
        let dim = m + 2 * l;
        let mut big = DMatrix::zeros(dim, dim);
        big.view_mut((0, 0), (m, m)).copy_from(&q_uu);
        big.view_mut((0, m), (m, l)).copy_from(&con_ju.transpose());
        big.view_mut((m, 0), (l, m)).copy_from(&con_ju);
        for j in 0..l {
            big[(m + j, m + l + j)] = 1.0;
            big[(m + l + j, m + j)] = y[j];
            big[(m + l + j, m + l + j)] = s[j];
        }
        let mut rhs = DMatrix::zeros(dim, 1 + n);
        for k in 0..m {
            rhs[(k, 0)] = q_u[k];
            for col in 0..n {
                rhs[(k, 1 + col)] = q_xu[(col, k)];
            }
        }
        for j in 0..l {
            rhs[(m + j, 0)] = c[j] + y[j];
            for col in 0..n {
                rhs[(m + j, 1 + col)] = con_jx[(j, col)];
            }
            rhs[(m + l + j, 0)] = s[j] * y[j] - mu;
        }
        let solved = big.lu().solve(&(-rhs)).unwrap();
        for k in 0..m {
            assert_relative_eq!(gains.control_ff[k], solved[(k, 0)], epsilon = 1e-10);
        }
        for j in 0..l {
            assert_relative_eq!(gains.dual_ff[j], solved[(m + j, 0)], epsilon = 1e-10);
            assert_relative_eq!(
                gains.slack_ff.as_ref().unwrap()[j],
                solved[(m + l + j, 0)],
                epsilon = 1e-10
            );
            for col in 0..n {
                assert_relative_eq!(
                    gains.dual_fb[(j, col)],
                    solved[(m + j, 1 + col)],
                    epsilon = 1e-10
                );
                assert_relative_eq!(
                    gains.slack_fb.as_ref().unwrap()[(j, col)],
                    solved[(m + l + j, 1 + col)],
                    epsilon = 1e-10
                );
            }
        }
    }

    /// Finite-difference oracle for the expansion of q + s'c + V(f(x,u)).
    #[test]
    fn stage_expansion_matches_fd_of_composite() {
        use crate::fdcheck::FiniteDiffModel;
        use crate::problem::OcProblem;

        let h = 0.05;
        let dynamics = move |x: &DVector<f64>, u: &DVector<f64>| {
            DVector::from_column_slice(&[x[0] + h * x[1], x[1] + h * x[0].sin() + h * u[0]])
        };
        let stage_cost = |x: &DVector<f64>, u: &DVector<f64>| {
            0.025 * (x[0] * x[0] + x[1] * x[1] + u[0] * u[0])
        };
        let terminal = |x: &DVector<f64>| 5.0 * (x[0] * x[0] + x[1] * x[1]);
        let cons = |_x: &DVector<f64>, u: &DVector<f64>| {
            DVector::from_column_slice(&[u[0] - 0.25, -u[0] - 0.25])
        };
        let model = FiniteDiffModel::new(2, 1, 2, dynamics, stage_cost, terminal, cons);
        let problem =
            OcProblem::new(2, 1, 2, 5, DVector::from_column_slice(&[1.0, 0.0]), model).unwrap();

        let x0 = DVector::from_column_slice(&[1.0, 0.0]);
        let u0 = DVector::from_element(1, 0.0);
        let s0 = DVector::from_column_slice(&[0.1, 0.1]);
        let term = problem.terminal_cost_derivatives(&dynamics(&x0, &u0));
        let v_next = ValueCoeffs {
            vx: term.gx,
            vxx: term.hxx,
        };
        let qe = stage_expansion(&problem, &x0, &u0, &s0, &v_next, true);

        // Scalar composite: g(x,u) = q + s'c + V(f(x,u)) with V the quadratic
        // model around f(x0, u0).
        let f0 = dynamics(&x0, &u0);
        let composite = |x: &DVector<f64>, u: &DVector<f64>| {
            let fx = dynamics(x, u);
            let d = &fx - &f0;
            stage_cost(x, u)
                + s0.dot(&cons(x, u))
                + v_next.vx.dot(&d)
                + 0.5 * (&v_next.vxx * &d).dot(&d)
        };
        let step = 1e-5;
        let grad = |idx: usize, ctrl: bool| {
            let mut xp = x0.clone();
            let mut up = u0.clone();
            let mut xm = x0.clone();
            let mut um = u0.clone();
            if ctrl {
                up[idx] += step;
                um[idx] -= step;
            } else {
                xp[idx] += step;
                xm[idx] -= step;
            }
            (composite(&xp, &up) - composite(&xm, &um)) / (2.0 * step)
        };
        for i in 0..2 {
            assert_relative_eq!(qe.q_x[i], grad(i, false), epsilon = 1e-5);
        }
        assert_relative_eq!(qe.q_u[0], grad(0, true), epsilon = 1e-5);

        // Hessian entries via central second differences of the composite.
        let hess = |a: (bool, usize), b: (bool, usize)| {
            let h2 = 1e-4;
            let eval = |sa: f64, sb: f64| {
                let mut xs = x0.clone();
                let mut us = u0.clone();
                if a.0 {
                    us[a.1] += sa;
                } else {
                    xs[a.1] += sa;
                }
                if b.0 {
                    us[b.1] += sb;
                } else {
                    xs[b.1] += sb;
                }
                composite(&xs, &us)
            };
            if a == b {
                (eval(h2, 0.0) - 2.0 * composite(&x0, &u0) + eval(-h2, 0.0)) / (h2 * h2)
            } else {
                (eval(h2, h2) - eval(h2, -h2) - eval(-h2, h2) + eval(-h2, -h2)) / (4.0 * h2 * h2)
            }
        };
        for i in 0..2 {
            for j in 0..2 {
                let fd = if i == j {
                    hess((false, i), (false, i))
                } else {
                    hess((false, i), (false, j))
                };
                assert_relative_eq!(qe.q_xx[(i, j)], fd, epsilon = 2e-4, max_relative = 1e-4);
            }
            let fd = hess((false, i), (true, 0));
            assert_relative_eq!(qe.q_xu[(i, 0)], fd, epsilon = 2e-4, max_relative = 1e-4);
        }
        assert_relative_eq!(
            qe.q_uu[(0, 0)],
            hess((true, 0), (true, 0)),
            epsilon = 2e-4,
            max_relative = 1e-4
        );
    }

    #[test]
    fn lqr_scalar_expansion_example() {
        use crate::problem::{
            ConstraintHessians, ConstraintJacobians, CostDerivatives, DynamicsHessians,
            DynamicsJacobians, OcpModel, TerminalDerivatives,
        };

        struct ScalarLqr;
        impl OcpModel for ScalarLqr {
            fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
                DVector::from_element(1, x[0] + u[0])
            }
            fn dynamics_jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DynamicsJacobians {
                DynamicsJacobians {
                    jx: DMatrix::from_element(1, 1, 1.0),
                    ju: DMatrix::from_element(1, 1, 1.0),
                }
            }
            fn dynamics_hessians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DynamicsHessians {
                DynamicsHessians {
                    hxx: vec![DMatrix::zeros(1, 1)],
                    huu: vec![DMatrix::zeros(1, 1)],
                    hxu: vec![DMatrix::zeros(1, 1)],
                }
            }
            fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
                0.5 * (x[0] * x[0] + u[0] * u[0])
            }
            fn stage_cost_derivatives(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostDerivatives {
                CostDerivatives {
                    gx: DVector::from_element(1, x[0]),
                    gu: DVector::from_element(1, u[0]),
                    hxx: DMatrix::from_element(1, 1, 1.0),
                    huu: DMatrix::from_element(1, 1, 1.0),
                    hxu: DMatrix::zeros(1, 1),
                }
            }
            fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
                0.5 * x[0] * x[0]
            }
            fn terminal_cost_derivatives(&self, x: &DVector<f64>) -> TerminalDerivatives {
                TerminalDerivatives {
                    gx: DVector::from_element(1, x[0]),
                    hxx: DMatrix::from_element(1, 1, 1.0),
                }
            }
            fn constraints(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
                DVector::zeros(0)
            }
            fn constraint_jacobians(
                &self,
                _x: &DVector<f64>,
                _u: &DVector<f64>,
            ) -> ConstraintJacobians {
                ConstraintJacobians {
                    jx: DMatrix::zeros(0, 1),
                    ju: DMatrix::zeros(0, 1),
                }
            }
            fn constraint_hessians(
                &self,
                _x: &DVector<f64>,
                _u: &DVector<f64>,
            ) -> ConstraintHessians {
                ConstraintHessians {
                    hxx: vec![],
                    huu: vec![],
                    hxu: vec![],
                }
            }
        }

        let problem = OcProblem::new(1, 1, 0, 1, DVector::zeros(1), ScalarLqr).unwrap();
        let x = DVector::zeros(1);
        let u = DVector::zeros(1);
        let s = DVector::zeros(0);
        let v = ValueCoeffs {
            vx: DVector::zeros(1),
            vxx: DMatrix::from_element(1, 1, 1.0),
        };
        let qe = stage_expansion(&problem, &x, &u, &s, &v, true);
        assert_eq!(qe.q_x[0], 0.0);
        assert_eq!(qe.q_u[0], 0.0);
        assert_eq!(qe.q_xx[(0, 0)], 2.0);
        assert_eq!(qe.q_uu[(0, 0)], 2.0);
        assert_eq!(qe.q_xu[(0, 0)], 1.0);

        // With V_x = 1 the gradient picks up the linear dynamics terms.
        let v1 = ValueCoeffs {
            vx: DVector::from_element(1, 1.0),
            vxx: DMatrix::from_element(1, 1, 1.0),
        };
        let qe1 = stage_expansion(&problem, &x, &u, &s, &v1, true);
        assert_eq!(qe1.q_x[0], 1.0);
        assert_eq!(qe1.q_u[0], 1.0);
    }
}
