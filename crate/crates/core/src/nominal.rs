//! Nominal solves: the deterministic core first, then the transcribed problem
//! warm-started from it. Models with a smoothed stage cost are solved along
//! their continuation schedule.

use nalgebra::DVector;

use crate::ddp::{self, SecondOrder, SolverError, SolverOptions, SolverSolution, SolverStatus};
use crate::transcription::{
    DeterministicProblem, StackedControl, StackedState, StochasticModel, StochasticProblem,
};

fn merge(mut acc: Option<SolverSolution>, next: SolverSolution) -> SolverSolution {
    match acc.take() {
        None => next,
        Some(prev) => {
            let offset = prev.iterations;
            let mut log = prev.log;
            log.extend(next.log.iter().cloned().map(|mut r| {
                r.iteration += offset;
                r
            }));
            SolverSolution {
                log,
                iterations: offset + next.iterations,
                ..next
            }
        }
    }
}

fn gauss_newton(opts: &SolverOptions) -> SolverOptions {
    SolverOptions {
        second_order: SecondOrder::None,
        ..opts.clone()
    }
}

/// Solves the deterministic problem along the model's smoothing schedule. The
/// returned costs refer to the last (finest) smoothing level. Deterministic
/// solves always use Gauss-Newton curvature; `opts.second_order` is ignored.
pub fn solve_deterministic<M: StochasticModel>(
    problem: &DeterministicProblem<M>,
    init: &[DVector<f64>],
    opts: &SolverOptions,
) -> Result<SolverSolution, SolverError> {
    let opts = &gauss_newton(opts);
    let schedule = problem.model.smoothing_schedule();
    if schedule.is_empty() {
        return ddp::solve(problem, init, opts);
    }
    let mut warm = init.to_vec();
    let mut acc = None;
    for s in schedule {
        let p = DeterministicProblem {
            model: problem.model.with_smoothing(s),
            ..problem.clone()
        };
        let sol = ddp::solve(&p, &warm, opts)?;
        warm = sol.controls.clone();
        acc = Some(merge(acc, sol));
    }
    Ok(acc.expect("schedule is not empty"))
}

/// [`solve_deterministic`] from a nearby solution: only the finest smoothing
/// level is solved.
pub fn solve_deterministic_warm<M: StochasticModel>(
    problem: &DeterministicProblem<M>,
    init: &[DVector<f64>],
    opts: &SolverOptions,
) -> Result<SolverSolution, SolverError> {
    let opts = &gauss_newton(opts);
    match problem.model.smoothing_schedule().last() {
        None => ddp::solve(problem, init, opts),
        Some(&s) => {
            let p = DeterministicProblem {
                model: problem.model.with_smoothing(s),
                ..problem.clone()
            };
            ddp::solve(&p, init, opts)
        }
    }
}

/// Result of a transcribed solve, unpacked into sigma points.
#[derive(Debug, Clone)]
pub struct StochasticSolution {
    pub solution: SolverSolution,
    pub states: Vec<StackedState>,
    pub controls: Vec<StackedControl>,
    /// `J_D` under the model's exact stage cost.
    pub objective: f64,
}

impl StochasticSolution {
    pub fn status(&self) -> SolverStatus {
        self.solution.status
    }
}

/// Column-replicates per-stage controls into stacked controls.
pub fn replicate(controls: &[DVector<f64>], nx: usize) -> Vec<DVector<f64>> {
    controls
        .iter()
        .map(|u| StackedControl::replicate(u, nx).flatten())
        .collect()
}

/// Solves the transcribed problem from stacked initial controls.
pub fn solve_stochastic<M: StochasticModel>(
    problem: &StochasticProblem<M>,
    init: &[DVector<f64>],
    opts: &SolverOptions,
) -> Result<StochasticSolution, SolverError> {
    let schedule = problem.model.smoothing_schedule();
    let solution = if schedule.is_empty() {
        ddp::solve(problem, init, opts)?
    } else {
        let mut warm = init.to_vec();
        let mut acc = None;
        for s in schedule {
            let mut p = problem.clone();
            p.model = problem.model.with_smoothing(s);
            let sol = ddp::solve(&p, &warm, opts)?;
            warm = sol.controls.clone();
            acc = Some(merge(acc, sol));
        }
        acc.expect("schedule is not empty")
    };
    unpack(problem, solution)
}

/// [`solve_stochastic`] from a nearby solution: only the finest smoothing level
/// is solved.
pub fn solve_stochastic_warm<M: StochasticModel>(
    problem: &StochasticProblem<M>,
    init: &[DVector<f64>],
    opts: &SolverOptions,
) -> Result<StochasticSolution, SolverError> {
    let solution = match problem.model.smoothing_schedule().last() {
        None => ddp::solve(problem, init, opts)?,
        Some(&s) => {
            let mut p = problem.clone();
            p.model = problem.model.with_smoothing(s);
            ddp::solve(&p, init, opts)?
        }
    };
    unpack(problem, solution)
}

fn unpack<M: StochasticModel>(
    problem: &StochasticProblem<M>,
    solution: SolverSolution,
) -> Result<StochasticSolution, SolverError> {
    let nx = problem.model.state_dim();
    let nu = problem.model.control_dim();
    let kappa = problem.options.kappa_x;
    let states = solution
        .states
        .iter()
        .map(|x| StackedState::from_flat(x, nx, kappa))
        .collect::<Result<Vec<_>, _>>()?;
    let controls: Vec<StackedControl> = solution
        .controls
        .iter()
        .map(|u| StackedControl::from_flat(u, nu))
        .collect();
    let objective = problem.total_objective(&states, &controls)?;
    Ok(StochasticSolution {
        solution,
        states,
        controls,
        objective,
    })
}

/// Deterministic solve at full duty followed by the transcribed solve warm-started
/// from its controls.
pub fn solve_tsddp<M: StochasticModel>(
    problem: &StochasticProblem<M>,
    opts: &SolverOptions,
) -> Result<(SolverSolution, StochasticSolution), SolverError> {
    let nx = problem.model.state_dim();
    let det = DeterministicProblem::remaining(
        problem.model.clone(),
        problem.offset,
        problem.horizon(),
        problem.init.mean().clone(),
    );
    let zeros = vec![DVector::zeros(problem.model.control_dim()); problem.horizon()];
    let det_sol = solve_deterministic(&det, &zeros, opts)?;
    let init = replicate(&det_sol.controls, nx);
    let stoch = solve_stochastic(problem, &init, opts)?;
    Ok((det_sol, stoch))
}
