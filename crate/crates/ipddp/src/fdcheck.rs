//! Finite-difference verification of analytic derivatives, plus a
//! derivative-free callback table for prototyping.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::problem::{
    ConstraintHessians, ConstraintJacobians, CostDerivatives, DynamicsHessians, DynamicsJacobians,
    OcProblem, OcpModel, TerminalDerivatives,
};

/// Central-difference step for first derivatives of a callback, scaled per
/// coordinate.
fn fd_step(coord: f64) -> f64 {
    f64::EPSILON.cbrt() * (1.0 + coord.abs())
}

/// Larger step for second differences of raw values (used by
/// [`FiniteDiffModel`] only).
fn fd_step2(coord: f64) -> f64 {
    f64::EPSILON.powf(0.25) * (1.0 + coord.abs())
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / f64::max(1.0, f64::max(analytic.abs(), fd.abs()))
}

/// Outcome of [`finite_diff_check`]: worst relative error over all derivative
/// blocks, with the offending block and entry on failure.
#[derive(Debug, Clone)]
pub struct DerivativeReport {
    pub pass: bool,
    pub max_rel_error: f64,
    pub worst_block: String,
    /// (row, col) of the worst entry within the worst block; for tensor
    /// blocks the row index encodes `component * rows + row`.
    pub worst_entry: (usize, usize),
}

struct BlockTracker {
    max: f64,
    block: String,
    entry: (usize, usize),
}

impl BlockTracker {
    fn new() -> Self {
        Self {
            max: 0.0,
            block: String::new(),
            entry: (0, 0),
        }
    }

    fn record(&mut self, block: &str, entry: (usize, usize), analytic: f64, fd: f64) {
        let e = rel_err(analytic, fd);
        if e > self.max {
            self.max = e;
            self.block = String::from(block);
            self.entry = entry;
        }
    }

    fn record_matrix(&mut self, block: &str, analytic: &DMatrix<f64>, fd: &DMatrix<f64>) {
        for i in 0..analytic.nrows() {
            for j in 0..analytic.ncols() {
                self.record(block, (i, j), analytic[(i, j)], fd[(i, j)]);
            }
        }
    }

    fn record_tensor(&mut self, block: &str, analytic: &[DMatrix<f64>], fd: &[DMatrix<f64>]) {
        for (k, (a, f)) in analytic.iter().zip(fd.iter()).enumerate() {
            let rows = a.nrows();
            for i in 0..rows {
                for j in 0..a.ncols() {
                    self.record(block, (k * rows + i, j), a[(i, j)], f[(i, j)]);
                }
            }
        }
    }
}

/// Central difference of a vector-valued callback along one coordinate of `x`
/// (or `u` when `wrt_control`).
fn central_diff_vec(
    eval: &dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
    coord: usize,
    wrt_control: bool,
) -> DVector<f64> {
    let base = if wrt_control { u[coord] } else { x[coord] };
    let h = fd_step(base);
    let mut xp = x.clone();
    let mut up = u.clone();
    let mut xm = x.clone();
    let mut um = u.clone();
    if wrt_control {
        up[coord] = base + h;
        um[coord] = base - h;
    } else {
        xp[coord] = base + h;
        xm[coord] = base - h;
    }
    (eval(&xp, &up) - eval(&xm, &um)) / (2.0 * h)
}

fn central_diff_mat(
    eval: &dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
    coord: usize,
    wrt_control: bool,
) -> DMatrix<f64> {
    let base = if wrt_control { u[coord] } else { x[coord] };
    let h = fd_step(base);
    let mut xp = x.clone();
    let mut up = u.clone();
    let mut xm = x.clone();
    let mut um = u.clone();
    if wrt_control {
        up[coord] = base + h;
        um[coord] = base - h;
    } else {
        xp[coord] = base + h;
        xm[coord] = base - h;
    }
    (eval(&xp, &up) - eval(&xm, &um)) / (2.0 * h)
}

/// Compares every analytic Jacobian and Hessian of the problem's callback
/// table against central finite differences at `(x, u)`.
///
/// First derivatives are differenced from raw values; second derivatives are
/// differenced from the analytic first derivatives, so the check also
/// exercises the internal consistency of the derivative chain. Passes iff the
/// worst relative error (with denominators floored at 1) is at most `rel_tol`.
pub fn finite_diff_check(
    problem: &OcProblem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    rel_tol: f64,
) -> DerivativeReport {
    assert!(rel_tol > 0.0);
    let n = problem.state_dim();
    let m = problem.control_dim();
    let l = problem.constraint_dim();
    let mut tracker = BlockTracker::new();

    // Dynamics Jacobians from values.
    let dj = problem.dynamics_jacobians(x, u);
    let f_eval = |x: &DVector<f64>, u: &DVector<f64>| problem.dynamics(x, u);
    let mut fd_jx = DMatrix::zeros(n, n);
    for j in 0..n {
        fd_jx.set_column(j, &central_diff_vec(&f_eval, x, u, j, false));
    }
    tracker.record_matrix("dynamics_jx", &dj.jx, &fd_jx);
    let mut fd_ju = DMatrix::zeros(n, m);
    for j in 0..m {
        fd_ju.set_column(j, &central_diff_vec(&f_eval, x, u, j, true));
    }
    tracker.record_matrix("dynamics_ju", &dj.ju, &fd_ju);

    // Dynamics Hessians from analytic Jacobians.
    let dh = problem.dynamics_hessians(x, u);
    let jx_eval = |x: &DVector<f64>, u: &DVector<f64>| problem.dynamics_jacobians(x, u).jx;
    let ju_eval = |x: &DVector<f64>, u: &DVector<f64>| problem.dynamics_jacobians(x, u).ju;
    // d(jx)/dx_k => hxx[i][(j, k)]
    let mut fd_hxx: Vec<DMatrix<f64>> = (0..n).map(|_| DMatrix::zeros(n, n)).collect();
    for k in 0..n {
        let d = central_diff_mat(&jx_eval, x, u, k, false);
        for i in 0..n {
            for j in 0..n {
                fd_hxx[i][(j, k)] = d[(i, j)];
            }
        }
    }
    tracker.record_tensor("dynamics_hxx", &dh.hxx, &fd_hxx);
    // d(ju)/du_k => huu[i][(j, k)]
    let mut fd_huu: Vec<DMatrix<f64>> = (0..n).map(|_| DMatrix::zeros(m, m)).collect();
    for k in 0..m {
        let d = central_diff_mat(&ju_eval, x, u, k, true);
        for i in 0..n {
            for j in 0..m {
                fd_huu[i][(j, k)] = d[(i, j)];
            }
        }
    }
    tracker.record_tensor("dynamics_huu", &dh.huu, &fd_huu);
    // d(jx)/du_k => hxu[i][(j, k)]
    let mut fd_hxu: Vec<DMatrix<f64>> = (0..n).map(|_| DMatrix::zeros(n, m)).collect();
    for k in 0..m {
        let d = central_diff_mat(&jx_eval, x, u, k, true);
        for i in 0..n {
            for j in 0..n {
                fd_hxu[i][(j, k)] = d[(i, j)];
            }
        }
    }
    tracker.record_tensor("dynamics_hxu", &dh.hxu, &fd_hxu);

    // Stage cost.
    let cd = problem.stage_cost_derivatives(x, u);
    let q_eval = |x: &DVector<f64>, u: &DVector<f64>| DVector::from_element(1, problem.stage_cost(x, u));
    let mut fd_gx = DVector::zeros(n);
    for j in 0..n {
        fd_gx[j] = central_diff_vec(&q_eval, x, u, j, false)[0];
    }
    tracker.record_matrix("stage_cost_gx", &DMatrix::from_column_slice(n, 1, cd.gx.as_slice()), &DMatrix::from_column_slice(n, 1, fd_gx.as_slice()));
    let mut fd_gu = DVector::zeros(m);
    for j in 0..m {
        fd_gu[j] = central_diff_vec(&q_eval, x, u, j, true)[0];
    }
    tracker.record_matrix("stage_cost_gu", &DMatrix::from_column_slice(m, 1, cd.gu.as_slice()), &DMatrix::from_column_slice(m, 1, fd_gu.as_slice()));
    let gx_eval = |x: &DVector<f64>, u: &DVector<f64>| {
        let g = problem.stage_cost_derivatives(x, u).gx;
        DMatrix::from_column_slice(g.len(), 1, g.as_slice())
    };
    let gu_eval = |x: &DVector<f64>, u: &DVector<f64>| {
        let g = problem.stage_cost_derivatives(x, u).gu;
        DMatrix::from_column_slice(g.len(), 1, g.as_slice())
    };
    let mut fd_q_hxx = DMatrix::zeros(n, n);
    for k in 0..n {
        fd_q_hxx.set_column(k, &central_diff_mat(&gx_eval, x, u, k, false).column(0).into_owned());
    }
    tracker.record_matrix("stage_cost_hxx", &cd.hxx, &fd_q_hxx);
    let mut fd_q_huu = DMatrix::zeros(m, m);
    for k in 0..m {
        fd_q_huu.set_column(k, &central_diff_mat(&gu_eval, x, u, k, true).column(0).into_owned());
    }
    tracker.record_matrix("stage_cost_huu", &cd.huu, &fd_q_huu);
    let mut fd_q_hxu = DMatrix::zeros(n, m);
    for k in 0..m {
        fd_q_hxu.set_column(k, &central_diff_mat(&gx_eval, x, u, k, true).column(0).into_owned());
    }
    tracker.record_matrix("stage_cost_hxu", &cd.hxu, &fd_q_hxu);

    // Terminal cost (control coordinates are irrelevant).
    let td = problem.terminal_cost_derivatives(x);
    let p_eval = |x: &DVector<f64>, _u: &DVector<f64>| DVector::from_element(1, problem.terminal_cost(x));
    let mut fd_pgx = DVector::zeros(n);
    for j in 0..n {
        fd_pgx[j] = central_diff_vec(&p_eval, x, u, j, false)[0];
    }
    tracker.record_matrix("terminal_gx", &DMatrix::from_column_slice(n, 1, td.gx.as_slice()), &DMatrix::from_column_slice(n, 1, fd_pgx.as_slice()));
    let pgx_eval = |x: &DVector<f64>, _u: &DVector<f64>| {
        let g = problem.terminal_cost_derivatives(x).gx;
        DMatrix::from_column_slice(g.len(), 1, g.as_slice())
    };
    let mut fd_p_hxx = DMatrix::zeros(n, n);
    for k in 0..n {
        fd_p_hxx.set_column(k, &central_diff_mat(&pgx_eval, x, u, k, false).column(0).into_owned());
    }
    tracker.record_matrix("terminal_hxx", &td.hxx, &fd_p_hxx);

    // Constraints.
    if l > 0 {
        let cj = problem.constraint_jacobians(x, u);
        let c_eval = |x: &DVector<f64>, u: &DVector<f64>| problem.constraints(x, u);
        let mut fd_cjx = DMatrix::zeros(l, n);
        for j in 0..n {
            fd_cjx.set_column(j, &central_diff_vec(&c_eval, x, u, j, false));
        }
        tracker.record_matrix("constraint_jx", &cj.jx, &fd_cjx);
        let mut fd_cju = DMatrix::zeros(l, m);
        for j in 0..m {
            fd_cju.set_column(j, &central_diff_vec(&c_eval, x, u, j, true));
        }
        tracker.record_matrix("constraint_ju", &cj.ju, &fd_cju);

        let ch = problem.constraint_hessians(x, u);
        let cjx_eval = |x: &DVector<f64>, u: &DVector<f64>| problem.constraint_jacobians(x, u).jx;
        let cju_eval = |x: &DVector<f64>, u: &DVector<f64>| problem.constraint_jacobians(x, u).ju;
        let mut fd_chxx: Vec<DMatrix<f64>> = (0..l).map(|_| DMatrix::zeros(n, n)).collect();
        for k in 0..n {
            let d = central_diff_mat(&cjx_eval, x, u, k, false);
            for row in 0..l {
                for j in 0..n {
                    fd_chxx[row][(j, k)] = d[(row, j)];
                }
            }
        }
        tracker.record_tensor("constraint_hxx", &ch.hxx, &fd_chxx);
        let mut fd_chuu: Vec<DMatrix<f64>> = (0..l).map(|_| DMatrix::zeros(m, m)).collect();
        for k in 0..m {
            let d = central_diff_mat(&cju_eval, x, u, k, true);
            for row in 0..l {
                for j in 0..m {
                    fd_chuu[row][(j, k)] = d[(row, j)];
                }
            }
        }
        tracker.record_tensor("constraint_huu", &ch.huu, &fd_chuu);
        let mut fd_chxu: Vec<DMatrix<f64>> = (0..l).map(|_| DMatrix::zeros(n, m)).collect();
        for k in 0..m {
            let d = central_diff_mat(&cjx_eval, x, u, k, true);
            for row in 0..l {
                for j in 0..n {
                    fd_chxu[row][(j, k)] = d[(row, j)];
                }
            }
        }
        tracker.record_tensor("constraint_hxu", &ch.hxu, &fd_chxu);
    }

    DerivativeReport {
        pass: tracker.max <= rel_tol,
        max_rel_error: tracker.max,
        worst_block: if tracker.block.is_empty() {
            format!("none")
        } else {
            tracker.block
        },
        worst_entry: tracker.entry,
    }
}

/// Callback table built from value-only closures, with every derivative
/// supplied by finite differences. Intended for prototyping problems before
/// writing analytic derivatives; accuracy is roughly `sqrt(eps)` for the
/// second-order blocks.
pub struct FiniteDiffModel<F, Q, P, C> {
    dynamics: F,
    stage_cost: Q,
    terminal_cost: P,
    constraints: C,
    state_dim: usize,
    control_dim: usize,
    constraint_dim: usize,
}

impl<F, Q, P, C> FiniteDiffModel<F, Q, P, C>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync,
    Q: Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync,
    P: Fn(&DVector<f64>) -> f64 + Send + Sync,
    C: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync,
{
    pub fn new(
        state_dim: usize,
        control_dim: usize,
        constraint_dim: usize,
        dynamics: F,
        stage_cost: Q,
        terminal_cost: P,
        constraints: C,
    ) -> Self {
        Self {
            dynamics,
            stage_cost,
            terminal_cost,
            constraints,
            state_dim,
            control_dim,
            constraint_dim,
        }
    }

    /// Central second difference of a scalar function of stacked (x, u).
    fn scalar_hessian_entry(
        g: &dyn Fn(&DVector<f64>, &DVector<f64>) -> f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        a: (bool, usize),
        b: (bool, usize),
    ) -> f64 {
        let coord = |ctrl: bool, idx: usize| if ctrl { u[idx] } else { x[idx] };
        let ha = fd_step2(coord(a.0, a.1));
        let hb = fd_step2(coord(b.0, b.1));
        let shift = |sa: f64, sb: f64| {
            let mut xs = x.clone();
            let mut us = u.clone();
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
            g(&xs, &us)
        };
        if a == b {
            (shift(ha, 0.0) - 2.0 * g(x, u) + shift(-ha, 0.0)) / (ha * ha)
        } else {
            (shift(ha, hb) - shift(ha, -hb) - shift(-ha, hb) + shift(-ha, -hb)) / (4.0 * ha * hb)
        }
    }

    fn scalar_grad(
        g: &dyn Fn(&DVector<f64>, &DVector<f64>) -> f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        wrt_control: bool,
    ) -> DVector<f64> {
        let dim = if wrt_control { u.len() } else { x.len() };
        let mut out = DVector::zeros(dim);
        for j in 0..dim {
            let base = if wrt_control { u[j] } else { x[j] };
            let h = fd_step(base);
            let mut xp = x.clone();
            let mut up = u.clone();
            let mut xm = x.clone();
            let mut um = u.clone();
            if wrt_control {
                up[j] = base + h;
                um[j] = base - h;
            } else {
                xp[j] = base + h;
                xm[j] = base - h;
            }
            out[j] = (g(&xp, &up) - g(&xm, &um)) / (2.0 * h);
        }
        out
    }

    fn vector_hessians(
        eval: &dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
        x: &DVector<f64>,
        u: &DVector<f64>,
        rows: usize,
    ) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let n = x.len();
        let m = u.len();
        let mut hxx: Vec<DMatrix<f64>> = (0..rows).map(|_| DMatrix::zeros(n, n)).collect();
        let mut huu: Vec<DMatrix<f64>> = (0..rows).map(|_| DMatrix::zeros(m, m)).collect();
        let mut hxu: Vec<DMatrix<f64>> = (0..rows).map(|_| DMatrix::zeros(n, m)).collect();
        for i in 0..rows {
            let g = |x: &DVector<f64>, u: &DVector<f64>| eval(x, u)[i];
            for a in 0..n {
                for b in a..n {
                    let v = Self::scalar_hessian_entry(&g, x, u, (false, a), (false, b));
                    hxx[i][(a, b)] = v;
                    hxx[i][(b, a)] = v;
                }
                for b in 0..m {
                    hxu[i][(a, b)] = Self::scalar_hessian_entry(&g, x, u, (false, a), (true, b));
                }
            }
            for a in 0..m {
                for b in a..m {
                    let v = Self::scalar_hessian_entry(&g, x, u, (true, a), (true, b));
                    huu[i][(a, b)] = v;
                    huu[i][(b, a)] = v;
                }
            }
        }
        (hxx, huu, hxu)
    }
}

impl<F, Q, P, C> OcpModel for FiniteDiffModel<F, Q, P, C>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync,
    Q: Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync,
    P: Fn(&DVector<f64>) -> f64 + Send + Sync,
    C: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync,
{
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.dynamics)(x, u)
    }

    fn dynamics_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> DynamicsJacobians {
        let eval = |x: &DVector<f64>, u: &DVector<f64>| (self.dynamics)(x, u);
        let mut jx = DMatrix::zeros(self.state_dim, self.state_dim);
        for j in 0..self.state_dim {
            jx.set_column(j, &central_diff_vec(&eval, x, u, j, false));
        }
        let mut ju = DMatrix::zeros(self.state_dim, self.control_dim);
        for j in 0..self.control_dim {
            ju.set_column(j, &central_diff_vec(&eval, x, u, j, true));
        }
        DynamicsJacobians { jx, ju }
    }

    fn dynamics_hessians(&self, x: &DVector<f64>, u: &DVector<f64>) -> DynamicsHessians {
        let eval = |x: &DVector<f64>, u: &DVector<f64>| (self.dynamics)(x, u);
        let (hxx, huu, hxu) = Self::vector_hessians(&eval, x, u, self.state_dim);
        DynamicsHessians { hxx, huu, hxu }
    }

    fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (self.stage_cost)(x, u)
    }

    fn stage_cost_derivatives(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostDerivatives {
        let g = |x: &DVector<f64>, u: &DVector<f64>| (self.stage_cost)(x, u);
        let n = self.state_dim;
        let m = self.control_dim;
        let mut hxx = DMatrix::zeros(n, n);
        let mut huu = DMatrix::zeros(m, m);
        let mut hxu = DMatrix::zeros(n, m);
        for a in 0..n {
            for b in a..n {
                let v = Self::scalar_hessian_entry(&g, x, u, (false, a), (false, b));
                hxx[(a, b)] = v;
                hxx[(b, a)] = v;
            }
            for b in 0..m {
                hxu[(a, b)] = Self::scalar_hessian_entry(&g, x, u, (false, a), (true, b));
            }
        }
        for a in 0..m {
            for b in a..m {
                let v = Self::scalar_hessian_entry(&g, x, u, (true, a), (true, b));
                huu[(a, b)] = v;
                huu[(b, a)] = v;
            }
        }
        CostDerivatives {
            gx: Self::scalar_grad(&g, x, u, false),
            gu: Self::scalar_grad(&g, x, u, true),
            hxx,
            huu,
            hxu,
        }
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        (self.terminal_cost)(x)
    }

    fn terminal_cost_derivatives(&self, x: &DVector<f64>) -> TerminalDerivatives {
        let u0 = DVector::zeros(self.control_dim);
        let g = |x: &DVector<f64>, _u: &DVector<f64>| (self.terminal_cost)(x);
        let n = self.state_dim;
        let mut hxx = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in a..n {
                let v = Self::scalar_hessian_entry(&g, x, &u0, (false, a), (false, b));
                hxx[(a, b)] = v;
                hxx[(b, a)] = v;
            }
        }
        TerminalDerivatives {
            gx: Self::scalar_grad(&g, x, &u0, false),
            hxx,
        }
    }

    fn constraints(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.constraints)(x, u)
    }

    fn constraint_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> ConstraintJacobians {
        let eval = |x: &DVector<f64>, u: &DVector<f64>| (self.constraints)(x, u);
        let mut jx = DMatrix::zeros(self.constraint_dim, self.state_dim);
        for j in 0..self.state_dim {
            jx.set_column(j, &central_diff_vec(&eval, x, u, j, false));
        }
        let mut ju = DMatrix::zeros(self.constraint_dim, self.control_dim);
        for j in 0..self.control_dim {
            ju.set_column(j, &central_diff_vec(&eval, x, u, j, true));
        }
        ConstraintJacobians { jx, ju }
    }

    fn constraint_hessians(&self, x: &DVector<f64>, u: &DVector<f64>) -> ConstraintHessians {
        let eval = |x: &DVector<f64>, u: &DVector<f64>| (self.constraints)(x, u);
        let (hxx, huu, hxu) = Self::vector_hessians(&eval, x, u, self.constraint_dim);
        ConstraintHessians { hxx, huu, hxu }
    }
}
