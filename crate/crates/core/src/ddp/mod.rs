//! Constrained differential dynamic programming.
//!
//! The solver is iLQR-flavoured: dynamics enter the backward pass through their
//! Jacobians only, while cost Hessians are kept. Stage-wise control constraints
//! are handled with an augmented Lagrangian outer loop around the unconstrained
//! DDP iterations.

mod backward;
pub mod derivatives;
mod forward;
mod lagrangian;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backward::{
    backward_pass, backward_pass_regularized, BackwardPass, Regularization, SecondOrder, StageCurvature,
    StageLinearization,
};
pub use forward::{evaluate, forward_pass, rollout, Trajectory};
pub use lagrangian::{augmented_lagrangian_update, max_violation, AugmentedLagrangian};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("cost became non-finite and regularization is exhausted")]
    Diverged,
    #[error("regularization exceeded its upper bound")]
    RegularizationExhausted,
    #[error("control Hessian is not positive definite at stage {stage}")]
    NotPositiveDefinite { stage: usize },
    #[error("finite-difference derivative is not finite")]
    NonFiniteDerivative,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("model evaluation failed: {0}")]
    Model(String),
}

/// Second-order model of a stage cost around `(x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostExpansion {
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub luu: DMatrix<f64>,
    pub lux: DMatrix<f64>,
}

impl CostExpansion {
    pub fn zeros(nx: usize, nu: usize) -> Self {
        Self {
            lx: DVector::zeros(nx),
            lu: DVector::zeros(nu),
            lxx: DMatrix::zeros(nx, nx),
            luu: DMatrix::zeros(nu, nu),
            lux: DMatrix::zeros(nu, nx),
        }
    }

    /// Splits a gradient/Hessian over the concatenation `[x; u]`.
    pub fn from_joint(nx: usize, grad: &DVector<f64>, hess: &DMatrix<f64>) -> Self {
        let nu = grad.len() - nx;
        Self {
            lx: grad.rows(0, nx).into_owned(),
            lu: grad.rows(nx, nu).into_owned(),
            lxx: hess.view((0, 0), (nx, nx)).into_owned(),
            luu: hess.view((nx, nx), (nu, nu)).into_owned(),
            lux: hess.view((nx, 0), (nu, nx)).into_owned(),
        }
    }
}

/// A deterministic discrete-time optimal control problem with control-only
/// inequality constraints `c_k(u_k) <= 0`.
///
/// Derivative methods default to central finite differences.
pub trait Problem: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn initial_state(&self) -> DVector<f64>;

    fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, SolverError>;

    /// `(df/dx, df/du)`.
    fn step_jacobians(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), SolverError> {
        let fx = derivatives::jacobian(|x| self.step(k, x, u), x, derivatives::JACOBIAN_STEP)?;
        let fu = derivatives::jacobian(|u| self.step(k, x, u), u, derivatives::JACOBIAN_STEP)?;
        Ok((fx, fu))
    }

    /// Second derivatives of every state component of `step`.
    fn step_hessians(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        order: SecondOrder,
    ) -> Result<Option<StageCurvature>, SolverError> {
        let nx = x.len();
        let nu = u.len();
        match order {
            SecondOrder::None => Ok(None),
            SecondOrder::Control => {
                let fuu = derivatives::hessian_tensor(
                    |u| self.step(k, x, u),
                    u,
                    derivatives::HESSIAN_STEP,
                    &vec![self.control_scale(); nu],
                )?;
                Ok(Some(StageCurvature { fxx: None, fux: None, fuu }))
            }
            SecondOrder::Full => {
                let mut floors = vec![1.0; nx];
                floors.resize(nx + nu, self.control_scale());
                let joint = derivatives::hessian_tensor(
                    |z| {
                        let (x, u) = split(z, nx);
                        self.step(k, &x, &u)
                    },
                    &concat(x, u),
                    derivatives::HESSIAN_STEP,
                    &floors,
                )?;
                Ok(Some(split_curvature(joint, nx, nu)))
            }
        }
    }

    /// Typical control magnitude; floors finite-difference steps in the control.
    fn control_scale(&self) -> f64 {
        1.0
    }

    fn stage_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64;

    fn stage_cost_expansion(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<CostExpansion, SolverError> {
        let nx = x.len();
        let z = concat(x, u);
        let f = |z: &DVector<f64>| {
            let (x, u) = split(z, nx);
            self.stage_cost(k, &x, &u)
        };
        let grad = derivatives::gradient(f, &z, derivatives::JACOBIAN_STEP)?;
        let hess = derivatives::hessian(f, &z, derivatives::HESSIAN_STEP)?;
        Ok(CostExpansion::from_joint(nx, &grad, &hess))
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64;

    fn terminal_cost_expansion(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), SolverError> {
        let f = |x: &DVector<f64>| self.terminal_cost(x);
        Ok((
            derivatives::gradient(f, x, derivatives::JACOBIAN_STEP)?,
            derivatives::hessian(f, x, derivatives::HESSIAN_STEP)?,
        ))
    }

    fn constraint_count(&self, _k: usize) -> usize {
        0
    }

    fn constraints(&self, _k: usize, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn constraint_jacobian(&self, k: usize, u: &DVector<f64>) -> Result<DMatrix<f64>, SolverError> {
        derivatives::jacobian(|u| Ok(self.constraints(k, u)), u, derivatives::JACOBIAN_STEP)
    }

    /// Hessian of each constraint in the control.
    fn constraint_hessians(&self, k: usize, u: &DVector<f64>) -> Result<Vec<DMatrix<f64>>, SolverError> {
        derivatives::hessian_tensor(
            |u| Ok(self.constraints(k, u)),
            u,
            derivatives::HESSIAN_STEP,
            &vec![self.control_scale(); u.len()],
        )
    }
}

/// Splits joint `(x, u)` Hessians into their blocks.
pub fn split_curvature(joint: Vec<DMatrix<f64>>, nx: usize, nu: usize) -> StageCurvature {
    let mut fxx = Vec::with_capacity(joint.len());
    let mut fux = Vec::with_capacity(joint.len());
    let mut fuu = Vec::with_capacity(joint.len());
    for h in joint {
        fxx.push(h.view((0, 0), (nx, nx)).into_owned());
        fux.push(h.view((nx, 0), (nu, nx)).into_owned());
        fuu.push(h.view((nx, nx), (nu, nu)).into_owned());
    }
    StageCurvature { fxx: Some(fxx), fux: Some(fux), fuu }
}

pub(crate) fn concat(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z
}

pub(crate) fn split(z: &DVector<f64>, nx: usize) -> (DVector<f64>, DVector<f64>) {
    (
        z.rows(0, nx).into_owned(),
        z.rows(nx, z.len() - nx).into_owned(),
    )
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Tuning knobs. Defaults suit well-scaled problems with `O(1)` variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Total DDP iterations across all outer augmented Lagrangian rounds.
    pub max_iters: usize,
    pub max_outer_iters: usize,
    /// DDP iterations per augmented Lagrangian round.
    pub max_inner_iters: usize,
    /// Relative decrease of the augmented cost below which an inner loop stops.
    pub cost_tolerance: f64,
    /// Largest admissible constraint value at convergence.
    pub constraint_tolerance: f64,
    pub reg_init: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    pub reg_increase: f64,
    pub reg_decrease: f64,
    pub regularization: Regularization,
    pub second_order: SecondOrder,
    pub backtrack_factor: f64,
    pub min_step: f64,
    /// Accept a step when the actual decrease exceeds this fraction of the predicted one.
    pub armijo: f64,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    pub multiplier_max: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            max_outer_iters: 60,
            max_inner_iters: 100,
            cost_tolerance: 1e-10,
            constraint_tolerance: 1e-8,
            reg_init: 1e-6,
            reg_min: 1e-10,
            reg_max: 1e10,
            reg_increase: 10.0,
            reg_decrease: 2.5,
            regularization: Regularization::Control,
            second_order: SecondOrder::None,
            backtrack_factor: 0.5,
            min_step: 1.0 / 1024.0,
            armijo: 1e-4,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            penalty_max: 1e12,
            multiplier_max: 1e12,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = [
            ("cost_tolerance", self.cost_tolerance),
            ("constraint_tolerance", self.constraint_tolerance),
            ("reg_init", self.reg_init),
            ("reg_min", self.reg_min),
            ("reg_max", self.reg_max),
            ("reg_increase", self.reg_increase),
            ("reg_decrease", self.reg_decrease),
            ("min_step", self.min_step),
            ("armijo", self.armijo),
            ("penalty_init", self.penalty_init),
            ("penalty_growth", self.penalty_growth),
            ("penalty_max", self.penalty_max),
            ("multiplier_max", self.multiplier_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SolverError::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(SolverError::InvalidInput(format!(
                "backtrack_factor must lie in (0, 1), got {}",
                self.backtrack_factor
            )));
        }
        if self.max_iters == 0 || self.max_outer_iters == 0 || self.max_inner_iters == 0 {
            return Err(SolverError::InvalidInput("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the iteration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Augmented Lagrangian round; costs are only comparable within one round.
    pub outer: usize,
    /// Augmented cost after the iteration.
    pub cost: f64,
    pub objective: f64,
    pub violation: f64,
    pub regularization: f64,
    /// Accepted step length, or zero for a rejected iteration.
    pub step: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    MaxIterations,
    /// Regularization hit its ceiling without meeting the tolerances.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct SolverSolution {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub feedforward: Vec<DVector<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub constraint_values: Vec<DVector<f64>>,
    pub multipliers: Vec<DVector<f64>>,
    pub penalty: f64,
    /// Objective without augmented Lagrangian terms.
    pub cost: f64,
    pub max_violation: f64,
    pub log: Vec<IterationRecord>,
    pub status: SolverStatus,
    pub iterations: usize,
}

impl SolverSolution {
    pub fn converged(&self) -> bool {
        self.status == SolverStatus::Converged
    }
}

/// Derivatives of every stage of `traj`, including augmented Lagrangian terms.
/// `order` selects the second derivatives of the dynamics; any of them also
/// brings in the constraint Hessians.
pub fn linearize<P: Problem + ?Sized>(
    problem: &P,
    traj: &Trajectory,
    al: &AugmentedLagrangian,
    order: SecondOrder,
) -> Result<(Vec<StageLinearization>, DVector<f64>, DMatrix<f64>), SolverError> {
    let n = traj.controls.len();
    let mut stages = Vec::with_capacity(n);
    for k in 0..n {
        let (x, u) = (&traj.states[k], &traj.controls[k]);
        let (fx, fu) = problem.step_jacobians(k, x, u)?;
        let curv = problem.step_hessians(k, x, u, order)?;
        let mut e = problem.stage_cost_expansion(k, x, u)?;
        if problem.constraint_count(k) > 0 {
            let jac = problem.constraint_jacobian(k, u)?;
            let hess = if order != SecondOrder::None {
                Some(problem.constraint_hessians(k, u)?)
            } else {
                None
            };
            let (g, h) = al.expansion(k, &traj.constraint_values[k], &jac, hess.as_deref());
            e.lu += g;
            e.luu += h;
        }
        stages.push(StageLinearization {
            fx,
            fu,
            lx: e.lx,
            lu: e.lu,
            lxx: e.lxx,
            luu: e.luu,
            lux: e.lux,
            curvature: curv,
        });
    }
    let (vx, vxx) = problem.terminal_cost_expansion(&traj.states[n])?;
    Ok((stages, vx, vxx))
}

/// Gradient of the plain objective w.r.t. every control by the adjoint recursion.
pub fn objective_gradient<P: Problem + ?Sized>(
    problem: &P,
    controls: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>, SolverError> {
    let al = AugmentedLagrangian::new(&vec![0; controls.len()], 1.0);
    let traj = rollout(problem, controls, &al)?;
    let (stages, vx, _) = linearize(problem, &traj, &al, SecondOrder::None)?;
    let mut costate = vx;
    let mut grads = vec![DVector::zeros(0); controls.len()];
    for k in (0..controls.len()).rev() {
        let s = &stages[k];
        grads[k] = &s.lu + s.fu.transpose() * &costate;
        costate = &s.lx + s.fx.transpose() * &costate;
    }
    Ok(grads)
}

/// Minimizes the problem's objective from `init_controls`.
pub fn solve<P: Problem + ?Sized>(
    problem: &P,
    init_controls: &[DVector<f64>],
    opts: &SolverOptions,
) -> Result<SolverSolution, SolverError> {
    opts.validate()?;
    let n = problem.horizon();
    if init_controls.len() != n {
        return Err(SolverError::InvalidInput(format!(
            "expected {n} initial controls, got {}",
            init_controls.len()
        )));
    }
    let nu = problem.control_dim();
    for (k, u) in init_controls.iter().enumerate() {
        if u.len() != nu || u.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::InvalidInput(format!("initial control {k} is malformed")));
        }
    }

    let counts: Vec<usize> = (0..n).map(|k| problem.constraint_count(k)).collect();
    let constrained = counts.iter().any(|&m| m > 0);
    let mut al = AugmentedLagrangian::new(&counts, opts.penalty_init);
    let mut traj = rollout(problem, init_controls, &al)?;
    if !traj.augmented.is_finite() {
        return Err(SolverError::Diverged);
    }

    let mut reg = opts.reg_init;
    let mut log = Vec::new();
    let mut iterations = 0;
    let mut status = SolverStatus::MaxIterations;
    let mut last_pass: Option<BackwardPass> = None;

    'outer: for outer in 0..opts.max_outer_iters {
        let mut inner_done = false;
        let mut stalled = false;
        let round_start = iterations;
        let round_cap = if constrained { opts.max_inner_iters } else { opts.max_iters };
        while iterations < opts.max_iters && iterations - round_start < round_cap {
            iterations += 1;
            let backward = |order: SecondOrder| -> Result<(BackwardPass, f64), SolverError> {
                let (stages, vx, vxx) = linearize(problem, &traj, &al, order)?;
                backward_pass_regularized(
                    &stages,
                    &vx,
                    &vxx,
                    reg,
                    opts.regularization,
                    opts.reg_increase,
                    opts.reg_max,
                )
            };
            // Gauss-Newton step when the exact curvature cannot be regularized.
            let mut result = backward(opts.second_order);
            if opts.second_order != SecondOrder::None && matches!(result, Err(SolverError::RegularizationExhausted)) {
                result = backward(SecondOrder::None);
            }
            let (pass, used_reg) = match result {
                Ok(ok) => ok,
                Err(SolverError::RegularizationExhausted) => {
                    stalled = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            reg = used_reg;

            let scale = traj.augmented.abs().max(1e-300);
            if -pass.predicted_change(1.0) <= opts.cost_tolerance * scale {
                last_pass = Some(pass);
                inner_done = true;
                break;
            }

            let mut step = 1.0;
            let mut accepted = None;
            while step >= opts.min_step {
                if let Ok(cand) = forward_pass(problem, &traj, &pass, step, &al) {
                    let actual = traj.augmented - cand.augmented;
                    let predicted = -pass.predicted_change(step);
                    if cand.augmented.is_finite() && actual > opts.armijo * predicted {
                        accepted = Some((cand, step, actual));
                        break;
                    }
                }
                step *= opts.backtrack_factor;
            }

            match accepted {
                Some((cand, step, actual)) => {
                    traj = cand;
                    reg = (reg / opts.reg_decrease).max(opts.reg_min);
                    log.push(IterationRecord {
                        iteration: iterations,
                        outer,
                        cost: traj.augmented,
                        objective: traj.objective,
                        violation: max_violation(&traj.constraint_values),
                        regularization: reg,
                        step,
                        accepted: true,
                    });
                    last_pass = Some(pass);
                    if actual <= opts.cost_tolerance * scale {
                        inner_done = true;
                        break;
                    }
                }
                None => {
                    reg *= opts.reg_increase;
                    log.push(IterationRecord {
                        iteration: iterations,
                        outer,
                        cost: traj.augmented,
                        objective: traj.objective,
                        violation: max_violation(&traj.constraint_values),
                        regularization: reg,
                        step: 0.0,
                        accepted: false,
                    });
                    if reg > opts.reg_max {
                        stalled = true;
                        break;
                    }
                }
            }
        }

        if !traj.augmented.is_finite() {
            return Err(SolverError::Diverged);
        }
        let violation = max_violation(&traj.constraint_values);
        let feasible = violation <= opts.constraint_tolerance;
        if feasible && (inner_done || stalled) {
            status = if inner_done {
                SolverStatus::Converged
            } else {
                SolverStatus::Stalled
            };
            break 'outer;
        }
        if !constrained {
            status = if stalled {
                SolverStatus::Stalled
            } else {
                SolverStatus::MaxIterations
            };
            break 'outer;
        }
        if iterations >= opts.max_iters {
            break 'outer;
        }
        augmented_lagrangian_update(
            &mut al,
            &traj.constraint_values,
            opts.penalty_growth,
            opts.penalty_max,
            opts.multiplier_max,
        );
        traj = evaluate(problem, traj.states, traj.controls, &al);
        reg = reg.max(opts.reg_init);
    }

    // Gains at the returned trajectory for downstream feedback use.
    let pass = match linearize(problem, &traj, &al, opts.second_order)
        .and_then(|(s, vx, vxx)| backward_pass_regularized(&s, &vx, &vxx, reg, opts.regularization, opts.reg_increase, opts.reg_max))
    {
        Ok((pass, _)) => pass,
        Err(_) => last_pass.unwrap_or_else(|| BackwardPass {
            feedforward: vec![DVector::zeros(nu); n],
            gains: vec![DMatrix::zeros(nu, problem.state_dim()); n],
            d1: 0.0,
            d2: 0.0,
        }),
    };

    Ok(SolverSolution {
        max_violation: max_violation(&traj.constraint_values),
        cost: traj.objective,
        states: traj.states,
        controls: traj.controls,
        feedforward: pass.feedforward,
        gains: pass.gains,
        constraint_values: traj.constraint_values,
        multipliers: al.multipliers,
        penalty: al.penalty,
        log,
        status,
        iterations,
    })
}
