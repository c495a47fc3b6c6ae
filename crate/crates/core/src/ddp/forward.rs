use nalgebra::DVector;

use super::backward::BackwardPass;
use super::lagrangian::AugmentedLagrangian;
use super::{Problem, SolverError};

/// A rolled-out trajectory with its cost breakdown.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub constraint_values: Vec<DVector<f64>>,
    /// Stage costs plus terminal cost.
    pub objective: f64,
    /// Objective plus augmented Lagrangian terms.
    pub augmented: f64,
}

/// Open-loop rollout of `controls` from the problem's initial state.
pub fn rollout<P: Problem + ?Sized>(
    problem: &P,
    controls: &[DVector<f64>],
    al: &AugmentedLagrangian,
) -> Result<Trajectory, SolverError> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(problem.initial_state());
    for (k, u) in controls.iter().enumerate() {
        let next = problem.step(k, &states[k], u)?;
        states.push(next);
    }
    Ok(evaluate(problem, states, controls.to_vec(), al))
}

/// Costs and constraint values of a given state/control sequence.
pub fn evaluate<P: Problem + ?Sized>(
    problem: &P,
    states: Vec<DVector<f64>>,
    controls: Vec<DVector<f64>>,
    al: &AugmentedLagrangian,
) -> Trajectory {
    let n = controls.len();
    let mut objective = 0.0;
    let mut penalty = 0.0;
    let mut constraint_values = Vec::with_capacity(n);
    for k in 0..n {
        objective += problem.stage_cost(k, &states[k], &controls[k]);
        let c = problem.constraints(k, &controls[k]);
        penalty += al.cost(k, &c);
        constraint_values.push(c);
    }
    objective += problem.terminal_cost(&states[n]);
    Trajectory {
        states,
        controls,
        constraint_values,
        objective,
        augmented: objective + penalty,
    }
}

/// Closed-loop rollout `u = u_bar + step * k + K (x - x_bar)` around `nominal`.
pub fn forward_pass<P: Problem + ?Sized>(
    problem: &P,
    nominal: &Trajectory,
    pass: &BackwardPass,
    step: f64,
    al: &AugmentedLagrangian,
) -> Result<Trajectory, SolverError> {
    let n = nominal.controls.len();
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    states.push(nominal.states[0].clone());
    for k in 0..n {
        let dx = &states[k] - &nominal.states[k];
        let u = &nominal.controls[k] + &pass.feedforward[k] * step + &pass.gains[k] * dx;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Diverged);
        }
        let next = problem.step(k, &states[k], &u)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Diverged);
        }
        states.push(next);
        controls.push(u);
    }
    Ok(evaluate(problem, states, controls, al))
}
