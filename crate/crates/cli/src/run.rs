use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;
use tsddp::ddp::{IterationRecord, SolverError, SolverSolution, SolverStatus};
use tsddp::montecarlo::{write_cdf, write_trajectories, Campaign, McConfig, McError, McSummary};
use tsddp::nominal::{solve_deterministic, solve_tsddp};
use tsddp::policy::{fit_policies, AffineStagePolicy};
use tsddp::problems::{DoubleIntegrator, LowThrust};
use tsddp::transcription::{DeterministicProblem, StochasticModel, StochasticProblem};
use tsddp::validation::{run_all, ValidationOptions};

use crate::config::{ConfigError, ProblemKind, RunConfig, SolveMode};

#[derive(Debug, Error)]
pub enum Failure {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("solver failed: {0}")]
    Solver(#[from] SolverError),
    #[error("{failed} of {samples} samples failed")]
    Samples { failed: usize, samples: usize },
    #[error("{0} validation check(s) failed")]
    Validation(usize),
    #[error("cannot write output: {0}")]
    Io(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Solver(_) => 2,
            Failure::Samples { .. } => 3,
            Failure::Validation(_) => 4,
            Failure::Io(_) => 5,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn header(cfg: &RunConfig, command: &str) -> Vec<String> {
    vec![
        format!("tsddp {command} {}", env!("CARGO_PKG_VERSION")),
        format!("seed = {}", cfg.seed),
        format!("config = {}", cfg.to_json()),
    ]
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Failure> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// The resolved config, loadable again with `--config`.
fn write_config(dir: &Path, name: &str, cfg: &RunConfig, head: &[String]) -> Result<(), Failure> {
    let text = toml::to_string(cfg).map_err(|e| Failure::Io(e.to_string()))?;
    let mut w = create(dir, name)?;
    writeln!(w, "# {}", head[0])?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn cells(v: &DVector<f64>) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|x| x.to_string())
}

fn write_log(dir: &Path, log: &[IterationRecord], head: &[String]) -> Result<(), Failure> {
    let mut w = create(dir, "iterations.csv")?;
    for line in head {
        writeln!(w, "# {line}")?;
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "outer", "cost", "objective", "violation", "regularization", "step", "accepted"])?;
    for r in log {
        out.write_record([
            r.iteration.to_string(),
            r.outer.to_string(),
            r.cost.to_string(),
            r.objective.to_string(),
            r.violation.to_string(),
            r.regularization.to_string(),
            r.step.to_string(),
            r.accepted.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SolveSummary<'a> {
    command: &'static str,
    problem: ProblemKind,
    mode: SolveMode,
    seed: u64,
    status: SolverStatus,
    converged: bool,
    warning: Option<String>,
    iterations: usize,
    objective: f64,
    delta_v: f64,
    terminal: f64,
    /// Terminal penalty at the final mean state.
    terminal_at_mean: f64,
    max_violation: f64,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct PolicyRecord {
    stage: usize,
    u0: Vec<f64>,
    /// Row-major, one row per control component.
    gain: Vec<Vec<f64>>,
    x_ref: Vec<f64>,
    degenerate: bool,
}

#[derive(Serialize)]
struct PolicyFile<'a> {
    units: &'static str,
    stages: Vec<PolicyRecord>,
    seed: u64,
    config: &'a RunConfig,
}

fn policy_records(policies: &[AffineStagePolicy]) -> Vec<PolicyRecord> {
    policies
        .iter()
        .enumerate()
        .map(|(k, p)| PolicyRecord {
            stage: k,
            u0: p.u0.iter().copied().collect(),
            gain: p.gain.row_iter().map(|r| r.iter().copied().collect()).collect(),
            x_ref: p.x_ref.iter().copied().collect(),
            degenerate: p.degenerate,
        })
        .collect()
}

fn warning(sol: &SolverSolution) -> Option<String> {
    (sol.status != SolverStatus::Converged).then(|| format!("solver stopped with status {:?}", sol.status))
}

pub fn solve(cfg: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(&cfg.out_dir)?;
    match cfg.problem {
        ProblemKind::DoubleIntegrator => solve_model(cfg, DoubleIntegrator::new(cfg.double_integrator.clone())),
        ProblemKind::LowThrust => solve_model(cfg, LowThrust::new(cfg.low_thrust.clone())),
    }
}

fn solve_model<M: StochasticModel>(cfg: &RunConfig, model: M) -> Result<(), Failure> {
    let dir = cfg.out_dir.as_path();
    let head = header(cfg, "solve");
    let duty = cfg.duty();
    let nx = model.state_dim();
    let nu = model.control_dim();
    let (sol, delta_v, terminal, terminal_at_mean) = match cfg.solve.mode {
        SolveMode::Ddp => {
            let p = DeterministicProblem::new(model.clone()).with_duty(duty, false);
            let zeros = vec![DVector::zeros(nu); model.horizon()];
            let sol = solve_deterministic(&p, &zeros, &cfg.solver)?;
            let w = DVector::zeros(model.noise_dim());
            let delta_v: f64 = (0..model.horizon())
                .map(|k| model.stage_cost(k, &sol.states[k], &sol.controls[k], &w))
                .sum();
            let xn = sol.states.last().expect("horizon >= 1");
            let terminal = model.terminal_cost(xn);

            let mut w = create(dir, "nominal.csv")?;
            for line in &head {
                writeln!(w, "# {line}")?;
            }
            let mut out = csv::Writer::from_writer(w);
            let mut cols = vec!["stage".to_string()];
            cols.extend((0..nx).map(|i| format!("x{i}")));
            cols.extend((0..nu).map(|i| format!("u{i}")));
            cols.extend(["u_norm".to_string(), "constraint".to_string()]);
            out.write_record(&cols)?;
            for (k, x) in sol.states.iter().enumerate() {
                let mut row = vec![k.to_string()];
                row.extend(cells(&model.to_physical_state(x)));
                match sol.controls.get(k) {
                    Some(u) => {
                        let up = model.to_physical_control(u);
                        row.extend(cells(&up));
                        row.push(up.norm().to_string());
                        let c = sol.constraint_values[k].get(0).copied().unwrap_or(f64::NAN);
                        row.push(c.to_string());
                    }
                    None => row.extend(std::iter::repeat_n(String::new(), nu + 2)),
                }
                out.write_record(&row)?;
            }
            out.flush()?;
            (sol, delta_v, terminal, terminal)
        }
        SolveMode::Tsddp => {
            let sp = StochasticProblem::new(model.clone(), cfg.transcription.clone())
                .map_err(SolverError::from)?
                .with_duty(duty, false);
            let (_, st) = solve_tsddp(&sp, &cfg.solver)?;
            let mut delta_v = 0.0;
            for k in 0..sp.horizon() {
                delta_v += sp
                    .expected_stage_cost(k, &st.states[k], &st.controls[k])
                    .map_err(SolverError::from)?;
            }
            let last = st.states.last().expect("horizon >= 1");
            let terminal = sp.expected_terminal_cost(last).map_err(SolverError::from)?;
            let terminal_at_mean = model.terminal_cost(&last.mean());

            let policies = fit_policies(&st.states, &st.controls);
            write_json(
                dir,
                "policy.json",
                &PolicyFile {
                    units: "solver units (scaled for low_thrust)",
                    stages: policy_records(&policies),
                    seed: cfg.seed,
                    config: cfg,
                },
            )?;

            let mut w = create(dir, "nominal.csv")?;
            for line in &head {
                writeln!(w, "# {line}")?;
            }
            let mut out = csv::Writer::from_writer(w);
            let ns = 2 * nx + 1;
            let mut cols = vec!["stage".to_string()];
            cols.extend((0..nx).map(|i| format!("mean_x{i}")));
            for j in 0..ns {
                cols.extend((0..nu).map(|i| format!("sigma{j}_u{i}")));
            }
            cols.push("chance_constraint".into());
            out.write_record(&cols)?;
            for (k, x) in st.states.iter().enumerate() {
                let mut row = vec![k.to_string()];
                row.extend(cells(&model.to_physical_state(&x.mean())));
                match st.controls.get(k) {
                    Some(u) => {
                        for j in 0..ns {
                            row.extend(cells(&model.to_physical_control(&u.column(j))));
                        }
                        let c = sp.chance_constraint(k, u).unwrap_or(f64::NAN);
                        row.push(c.to_string());
                    }
                    None => row.extend(std::iter::repeat_n(String::new(), ns * nu + 1)),
                }
                out.write_record(&row)?;
            }
            out.flush()?;
            (st.solution, delta_v, terminal, terminal_at_mean)
        }
    };
    write_log(dir, &sol.log, &head)?;
    let summary = SolveSummary {
        command: "solve",
        problem: cfg.problem,
        mode: cfg.solve.mode,
        seed: cfg.seed,
        status: sol.status,
        converged: sol.converged(),
        warning: warning(&sol),
        iterations: sol.iterations,
        objective: delta_v + terminal,
        delta_v,
        terminal,
        terminal_at_mean,
        max_violation: sol.max_violation,
        config: cfg,
    };
    write_config(dir, "config.toml", cfg, &head)?;
    write_json(dir, "summary.json", &summary)?;
    println!(
        "{:?} {:?}: status {:?} after {} iterations, J = {:.6e} (dV {:.6e}, terminal {:.6e}), max violation {:.2e}",
        cfg.problem, cfg.solve.mode, sol.status, sol.iterations, delta_v + terminal, delta_v, terminal, sol.max_violation
    );
    if let Some(w) = summary.warning {
        println!("warning: {w}");
    }
    let files = match cfg.solve.mode {
        SolveMode::Ddp => "nominal.csv, iterations.csv, config.toml, summary.json",
        SolveMode::Tsddp => "nominal.csv, policy.json, iterations.csv, config.toml, summary.json",
    };
    println!("wrote {files} to {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct McFile<'a> {
    command: &'static str,
    problem: ProblemKind,
    mode: String,
    duty: f64,
    saturate: bool,
    seed: u64,
    summary: McSummary,
    config: &'a RunConfig,
}

pub fn montecarlo(cfg: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(&cfg.out_dir)?;
    match cfg.problem {
        ProblemKind::DoubleIntegrator => mc_model(cfg, DoubleIntegrator::new(cfg.double_integrator.clone())),
        ProblemKind::LowThrust => mc_model(cfg, LowThrust::new(cfg.low_thrust.clone())),
    }
}

fn mc_model<M: StochasticModel>(cfg: &RunConfig, model: M) -> Result<(), Failure> {
    let dir = cfg.out_dir.as_path();
    let head = header(cfg, "montecarlo");
    let mc = McConfig {
        samples: cfg.montecarlo.samples,
        seed: cfg.seed,
        mode: cfg.montecarlo.mode,
        duty_cycle: cfg.duty(),
        saturate: cfg.montecarlo.saturate,
        parallel: cfg.montecarlo.parallel,
    };
    let campaign = Campaign::new(model.clone(), mc.clone(), cfg.solver.clone(), cfg.transcription.clone(), None)
        .map_err(mc_failure)?;
    let (result, too_many) = match campaign.run() {
        Ok(r) => (r, None),
        Err(McError::TooManyFailures { failed, samples, result }) => (*result, Some((failed, samples))),
        Err(e) => return Err(mc_failure(e)),
    };
    let tag = format!("{}_duty{}", mc.mode, mc.duty_cycle);
    write_trajectories(create(dir, &format!("{tag}_trajectories.csv"))?, &result, &model, &head)?;
    write_cdf(create(dir, &format!("{tag}_cdf_total.csv"))?, &result.totals(), &head)?;
    write_cdf(create(dir, &format!("{tag}_cdf_terminal_difference.csv"))?, &result.misses(), &head)?;
    write_cdf(create(dir, &format!("{tag}_cdf_delta_v.csv"))?, &result.delta_vs(), &head)?;
    write_config(dir, &format!("{tag}_config.toml"), cfg, &head)?;
    if let Ok(summary) = result.summary() {
        println!(
            "{:?} {}: median J {:.6e} [{:.6e}, {:.6e}], median dV {:.6e}, median miss {:.6e}, violation fraction {:.4}, failed {}",
            cfg.problem,
            tag,
            summary.total.median,
            summary.total.p05,
            summary.total.p95,
            summary.delta_v.median,
            summary.miss.median,
            summary.violation.aggregate,
            summary.failed
        );
        write_json(
            dir,
            &format!("{tag}_summary.json"),
            &McFile {
                command: "montecarlo",
                problem: cfg.problem,
                mode: mc.mode.to_string(),
                duty: mc.duty_cycle,
                saturate: mc.saturate,
                seed: cfg.seed,
                summary,
                config: cfg,
            },
        )?;
    }
    match too_many {
        Some((failed, samples)) => Err(Failure::Samples { failed, samples }),
        None => Ok(()),
    }
}

fn mc_failure(e: McError) -> Failure {
    match e {
        McError::InvalidConfig { key, reason } => Failure::Config(ConfigError::Invalid {
            key: format!("montecarlo.{key}"),
            reason,
        }),
        McError::Nominal(s) => Failure::Solver(s),
        McError::TooManyFailures { failed, samples, .. } => Failure::Samples { failed, samples },
        McError::EmptyInput => Failure::Samples { failed: 0, samples: 0 },
    }
}

pub fn validate(perturbation: f64) -> Result<(), Failure> {
    let results = run_all(ValidationOptions {
        ut_weight_perturbation: perturbation,
    });
    println!("{:<24} {:<6} {:>12} {:>12}", "check", "result", "value", "tolerance");
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<24} {:<6} {:>12.3e} {:>12.3e}  {}",
            r.name,
            if r.passed { "pass" } else { "FAIL" },
            r.value,
            r.tolerance,
            r.detail
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Failure::Validation(failed));
    }
    Ok(())
}
