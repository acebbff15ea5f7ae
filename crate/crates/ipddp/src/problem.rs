//! Problem definition and trajectory data model.
//!
//! An [`OcProblem`] bundles the dimensions of a constrained finite-horizon
//! optimal control problem with an [`OcpModel`] callback table supplying the
//! dynamics, costs, constraints and their first/second derivatives. Shapes and
//! Hessian symmetry are validated once at construction.

use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};

/// Which solver family an iterate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Iterates keep `c(x,u) < 0` and `s > 0` strictly; requires a strictly
    /// feasible start.
    Feasible,
    /// Iterates carry slacks `y > 0` with `c + y = 0` enforced only in the
    /// limit; duals `s > 0`.
    Infeasible,
}

/// First derivatives of the dynamics: `jx` is n×n, `ju` is n×m.
#[derive(Debug, Clone)]
pub struct DynamicsJacobians {
    pub jx: DMatrix<f64>,
    pub ju: DMatrix<f64>,
}

/// Second derivatives of the dynamics, stored per output component `i`:
/// `hxx[i]` is the n×n Hessian of `f_i` in `x`, `huu[i]` the m×m Hessian in
/// `u`, and `hxu[i]` the n×m mixed block.
#[derive(Debug, Clone)]
pub struct DynamicsHessians {
    pub hxx: Vec<DMatrix<f64>>,
    pub huu: Vec<DMatrix<f64>>,
    pub hxu: Vec<DMatrix<f64>>,
}

/// Gradient and Hessian blocks of the stage cost.
#[derive(Debug, Clone)]
pub struct CostDerivatives {
    pub gx: DVector<f64>,
    pub gu: DVector<f64>,
    pub hxx: DMatrix<f64>,
    pub huu: DMatrix<f64>,
    pub hxu: DMatrix<f64>,
}

/// Gradient and Hessian of the terminal cost.
#[derive(Debug, Clone)]
pub struct TerminalDerivatives {
    pub gx: DVector<f64>,
    pub hxx: DMatrix<f64>,
}

/// Constraint Jacobians: `jx` is l×n, `ju` is l×m.
#[derive(Debug, Clone)]
pub struct ConstraintJacobians {
    pub jx: DMatrix<f64>,
    pub ju: DMatrix<f64>,
}

/// Constraint Hessians, one block per constraint row.
#[derive(Debug, Clone)]
pub struct ConstraintHessians {
    pub hxx: Vec<DMatrix<f64>>,
    pub huu: Vec<DMatrix<f64>>,
    pub hxu: Vec<DMatrix<f64>>,
}

/// Callback table for a twice continuously differentiable optimal control
/// problem. Implementations must be pure functions of their arguments; the
/// solver assumes evaluations can be repeated and shared across threads.
pub trait OcpModel: Send + Sync {
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn dynamics_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> DynamicsJacobians;
    fn dynamics_hessians(&self, x: &DVector<f64>, u: &DVector<f64>) -> DynamicsHessians;

    fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn stage_cost_derivatives(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostDerivatives;

    fn terminal_cost(&self, x: &DVector<f64>) -> f64;
    fn terminal_cost_derivatives(&self, x: &DVector<f64>) -> TerminalDerivatives;

    /// Inequality constraints `c(x, u) <= 0`, length l (possibly zero).
    fn constraints(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn constraint_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> ConstraintJacobians;
    fn constraint_hessians(&self, x: &DVector<f64>, u: &DVector<f64>) -> ConstraintHessians;
}

/// Errors detected while validating a problem definition.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemError {
    InvalidDimensions(&'static str),
    Shape {
        block: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    Asymmetric {
        block: &'static str,
        deviation: f64,
    },
}

impl fmt::Display for ProblemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProblemError::InvalidDimensions(what) => write!(f, "invalid dimensions: {what}"),
            ProblemError::Shape {
                block,
                expected,
                got,
            } => write!(
                f,
                "callback `{block}` returned shape {}x{}, expected {}x{}",
                got.0, got.1, expected.0, expected.1
            ),
            ProblemError::Asymmetric { block, deviation } => {
                write!(f, "Hessian block `{block}` asymmetric by {deviation:e}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ProblemError {}

/// A constrained finite-horizon optimal control problem instance.
#[derive(Clone)]
pub struct OcProblem {
    state_dim: usize,
    control_dim: usize,
    constraint_dim: usize,
    horizon: usize,
    initial_state: DVector<f64>,
    model: Arc<dyn OcpModel>,
}

impl fmt::Debug for OcProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OcProblem")
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("constraint_dim", &self.constraint_dim)
            .field("horizon", &self.horizon)
            .finish()
    }
}

const SYMMETRY_TOL: f64 = 1e-8;

fn check_shape(
    block: &'static str,
    expected: (usize, usize),
    m: &DMatrix<f64>,
) -> Result<(), ProblemError> {
    if m.shape() != expected {
        return Err(ProblemError::Shape {
            block,
            expected,
            got: m.shape(),
        });
    }
    Ok(())
}

fn check_symmetric(block: &'static str, m: &DMatrix<f64>) -> Result<(), ProblemError> {
    let mut worst = 0.0f64;
    let mut scale = 1.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            let d = (m[(i, j)] - m[(j, i)]).abs();
            if d > worst {
                worst = d;
            }
            let a = m[(i, j)].abs();
            if a > scale {
                scale = a;
            }
        }
    }
    if worst > SYMMETRY_TOL * scale {
        return Err(ProblemError::Asymmetric {
            block,
            deviation: worst,
        });
    }
    Ok(())
}

impl OcProblem {
    /// Builds a problem and validates the callback table once at the initial
    /// state with zero controls: output shapes must match the declared
    /// dimensions and all Hessian blocks must be symmetric.
    pub fn new(
        state_dim: usize,
        control_dim: usize,
        constraint_dim: usize,
        horizon: usize,
        initial_state: DVector<f64>,
        model: impl OcpModel + 'static,
    ) -> Result<Self, ProblemError> {
        Self::from_arc(
            state_dim,
            control_dim,
            constraint_dim,
            horizon,
            initial_state,
            Arc::new(model),
        )
    }

    pub fn from_arc(
        state_dim: usize,
        control_dim: usize,
        constraint_dim: usize,
        horizon: usize,
        initial_state: DVector<f64>,
        model: Arc<dyn OcpModel>,
    ) -> Result<Self, ProblemError> {
        if state_dim == 0 {
            return Err(ProblemError::InvalidDimensions("state dimension must be >= 1"));
        }
        if control_dim == 0 {
            return Err(ProblemError::InvalidDimensions("control dimension must be >= 1"));
        }
        if horizon == 0 {
            return Err(ProblemError::InvalidDimensions("horizon must be >= 1"));
        }
        if initial_state.len() != state_dim {
            return Err(ProblemError::InvalidDimensions(
                "initial state length must equal the state dimension",
            ));
        }
        let problem = Self {
            state_dim,
            control_dim,
            constraint_dim,
            horizon,
            initial_state,
            model,
        };
        problem.validate_at(&problem.initial_state.clone(), &DVector::zeros(control_dim))?;
        Ok(problem)
    }

    fn validate_at(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(), ProblemError> {
        let (n, m, l) = (self.state_dim, self.control_dim, self.constraint_dim);

        let fx = self.model.dynamics(x, u);
        if fx.len() != n {
            return Err(ProblemError::Shape {
                block: "dynamics",
                expected: (n, 1),
                got: (fx.len(), 1),
            });
        }
        let dj = self.model.dynamics_jacobians(x, u);
        check_shape("dynamics_jx", (n, n), &dj.jx)?;
        check_shape("dynamics_ju", (n, m), &dj.ju)?;
        let dh = self.model.dynamics_hessians(x, u);
        if dh.hxx.len() != n || dh.huu.len() != n || dh.hxu.len() != n {
            return Err(ProblemError::InvalidDimensions(
                "dynamics Hessians must have one block per state component",
            ));
        }
        for i in 0..n {
            check_shape("dynamics_hxx", (n, n), &dh.hxx[i])?;
            check_shape("dynamics_huu", (m, m), &dh.huu[i])?;
            check_shape("dynamics_hxu", (n, m), &dh.hxu[i])?;
            check_symmetric("dynamics_hxx", &dh.hxx[i])?;
            check_symmetric("dynamics_huu", &dh.huu[i])?;
        }

        let cd = self.model.stage_cost_derivatives(x, u);
        if cd.gx.len() != n || cd.gu.len() != m {
            return Err(ProblemError::InvalidDimensions("stage cost gradient shapes"));
        }
        check_shape("stage_cost_hxx", (n, n), &cd.hxx)?;
        check_shape("stage_cost_huu", (m, m), &cd.huu)?;
        check_shape("stage_cost_hxu", (n, m), &cd.hxu)?;
        check_symmetric("stage_cost_hxx", &cd.hxx)?;
        check_symmetric("stage_cost_huu", &cd.huu)?;

        let td = self.model.terminal_cost_derivatives(x);
        if td.gx.len() != n {
            return Err(ProblemError::InvalidDimensions("terminal cost gradient shape"));
        }
        check_shape("terminal_hxx", (n, n), &td.hxx)?;
        check_symmetric("terminal_hxx", &td.hxx)?;

        let cv = self.model.constraints(x, u);
        if cv.len() != l {
            return Err(ProblemError::Shape {
                block: "constraints",
                expected: (l, 1),
                got: (cv.len(), 1),
            });
        }
        let cj = self.model.constraint_jacobians(x, u);
        check_shape("constraint_jx", (l, n), &cj.jx)?;
        check_shape("constraint_ju", (l, m), &cj.ju)?;
        let ch = self.model.constraint_hessians(x, u);
        if ch.hxx.len() != l || ch.huu.len() != l || ch.hxu.len() != l {
            return Err(ProblemError::InvalidDimensions(
                "constraint Hessians must have one block per constraint row",
            ));
        }
        for j in 0..l {
            check_shape("constraint_hxx", (n, n), &ch.hxx[j])?;
            check_shape("constraint_huu", (m, m), &ch.huu[j])?;
            check_shape("constraint_hxu", (n, m), &ch.hxu[j])?;
            check_symmetric("constraint_hxx", &ch.hxx[j])?;
            check_symmetric("constraint_huu", &ch.huu[j])?;
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn constraint_dim(&self) -> usize {
        self.constraint_dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn initial_state(&self) -> &DVector<f64> {
        &self.initial_state
    }

    pub fn model(&self) -> &Arc<dyn OcpModel> {
        &self.model
    }

    pub fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.model.dynamics(x, u)
    }

    pub fn dynamics_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> DynamicsJacobians {
        self.model.dynamics_jacobians(x, u)
    }

    pub fn dynamics_hessians(&self, x: &DVector<f64>, u: &DVector<f64>) -> DynamicsHessians {
        self.model.dynamics_hessians(x, u)
    }

    pub fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.model.stage_cost(x, u)
    }

    pub fn stage_cost_derivatives(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostDerivatives {
        self.model.stage_cost_derivatives(x, u)
    }

    pub fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        self.model.terminal_cost(x)
    }

    pub fn terminal_cost_derivatives(&self, x: &DVector<f64>) -> TerminalDerivatives {
        self.model.terminal_cost_derivatives(x)
    }

    pub fn constraints(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.model.constraints(x, u)
    }

    pub fn constraint_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> ConstraintJacobians {
        self.model.constraint_jacobians(x, u)
    }

    pub fn constraint_hessians(&self, x: &DVector<f64>, u: &DVector<f64>) -> ConstraintHessians {
        self.model.constraint_hessians(x, u)
    }
}

/// A primal-dual trajectory tuple. States are always the rollout of the
/// controls (dynamic consistency is a construction invariant, not a solved
/// equation). Slacks are present only for the infeasible variant.
#[derive(Debug, Clone)]
pub struct Iterate {
    /// States x_0..x_N (N+1 entries).
    pub states: Vec<DVector<f64>>,
    /// Controls u_0..u_{N-1}.
    pub controls: Vec<DVector<f64>>,
    /// Inequality duals s_0..s_{N-1}, each of length l.
    pub duals: Vec<DVector<f64>>,
    /// Slacks y_0..y_{N-1} (infeasible variant only).
    pub slacks: Option<Vec<DVector<f64>>>,
}

impl Iterate {
    pub fn variant(&self) -> Variant {
        if self.slacks.is_some() {
            Variant::Infeasible
        } else {
            Variant::Feasible
        }
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }
}

/// Costate/equality multipliers for the dynamics constraints, one per state
/// node (N+1 entries).
#[derive(Debug, Clone)]
pub struct Multipliers {
    pub costates: Vec<DVector<f64>>,
}

/// Rollout diverged: a non-finite state component appeared at `stage`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DivergenceError {
    pub stage: usize,
}

impl fmt::Display for DivergenceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rollout diverged: non-finite state at stage {}", self.stage)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for DivergenceError {}

/// Rolls the controls through the dynamics from the problem's initial state.
///
/// Returns x_0..x_N; fails with the offending stage index if any state
/// component becomes non-finite.
pub fn rollout(
    problem: &OcProblem,
    controls: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>, DivergenceError> {
    assert_eq!(controls.len(), problem.horizon(), "control sequence length");
    let mut states = Vec::with_capacity(problem.horizon() + 1);
    states.push(problem.initial_state().clone());
    for (t, u) in controls.iter().enumerate() {
        let next = problem.dynamics(&states[t], u);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DivergenceError { stage: t + 1 });
        }
        states.push(next);
    }
    Ok(states)
}

/// Total objective `sum_t q(x_t, u_t) + p(x_N)` along a trajectory.
pub fn objective(problem: &OcProblem, states: &[DVector<f64>], controls: &[DVector<f64>]) -> f64 {
    assert_eq!(states.len(), controls.len() + 1, "trajectory lengths");
    let mut total = 0.0;
    for (x, u) in states.iter().zip(controls.iter()) {
        total += problem.stage_cost(x, u);
    }
    total + problem.terminal_cost(&states[controls.len()])
}

/// Per-stage strict feasibility of an iterate for the chosen variant.
#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    pub pass: bool,
    /// Smallest margin over all stages and components; positive iff `pass`.
    pub worst_margin: f64,
    pub worst_stage: usize,
    pub per_stage: Vec<bool>,
}

/// Checks Definition-style strict feasibility: the feasible variant needs
/// `c < 0` and `s > 0` at every stage, the infeasible variant needs `s > 0`
/// and `y > 0`. The margin of a stage is the smallest of the checked
/// quantities (`-c` counts positively).
pub fn check_strict_feasibility(
    problem: &OcProblem,
    iterate: &Iterate,
    variant: Variant,
) -> FeasibilityReport {
    let horizon = iterate.horizon();
    let mut per_stage = Vec::with_capacity(horizon);
    let mut worst_margin = f64::INFINITY;
    let mut worst_stage = 0;
    for t in 0..horizon {
        let mut margin = f64::INFINITY;
        let s = &iterate.duals[t];
        for j in 0..s.len() {
            margin = margin.min(s[j]);
        }
        match variant {
            Variant::Feasible => {
                let c = problem.constraints(&iterate.states[t], &iterate.controls[t]);
                for j in 0..c.len() {
                    margin = margin.min(-c[j]);
                }
            }
            Variant::Infeasible => {
                let y = iterate
                    .slacks
                    .as_ref()
                    .expect("infeasible variant requires slacks");
                for j in 0..y[t].len() {
                    margin = margin.min(y[t][j]);
                }
            }
        }
        if margin < worst_margin {
            worst_margin = margin;
            worst_stage = t;
        }
        per_stage.push(margin > 0.0);
    }
    if horizon == 0 || problem.constraint_dim() == 0 {
        worst_margin = f64::INFINITY;
    }
    FeasibilityReport {
        pass: per_stage.iter().all(|&ok| ok),
        worst_margin,
        worst_stage,
        per_stage,
    }
}
