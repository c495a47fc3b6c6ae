//! Seeded Monte Carlo campaigns: sampled initial states and process noise,
//! closed by re-optimization or by fitted policies.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ddp::{SolverError, SolverOptions, SolverStatus};
use crate::gaussian::{psd_sqrt, GaussianState};
use crate::nominal::{
    solve_deterministic, solve_deterministic_warm, solve_stochastic_warm, solve_tsddp, StochasticSolution,
};
use crate::policy::{fit_policies, saturate, AffineStagePolicy};
use crate::transcription::{DeterministicProblem, StochasticModel, StochasticProblem, TranscriptionOptions};

/// Relative slack on the control bound when counting violations.
pub const VIOLATION_SLACK: f64 = 1e-6;

/// Largest tolerated fraction of failed samples.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McMode {
    /// Deterministic re-solve of the remaining horizon at every stage.
    DdpReopt,
    /// Transcribed re-solve of the remaining horizon, from a point belief.
    TsddpReopt,
    /// Fitted affine policies of the nominal transcribed solution.
    TsddpPolicy,
}

impl McMode {
    pub fn name(self) -> &'static str {
        match self {
            McMode::DdpReopt => "ddp_reopt",
            McMode::TsddpReopt => "tsddp_reopt",
            McMode::TsddpPolicy => "tsddp_policy",
        }
    }
}

impl fmt::Display for McMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for McMode {
    type Err = McError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ddp_reopt" => Ok(McMode::DdpReopt),
            "tsddp_reopt" => Ok(McMode::TsddpReopt),
            "tsddp_policy" => Ok(McMode::TsddpPolicy),
            other => Err(McError::InvalidConfig {
                key: "mode".into(),
                reason: format!("unknown mode `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub samples: usize,
    pub seed: u64,
    pub mode: McMode,
    /// Bound fraction for stages after the first in the re-optimizing modes.
    pub duty_cycle: f64,
    /// Clamp applied controls onto the full bound.
    pub saturate: bool,
    pub parallel: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            samples: 500,
            seed: 0,
            mode: McMode::TsddpPolicy,
            duty_cycle: 1.0,
            saturate: false,
            parallel: true,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<(), McError> {
        if self.samples == 0 {
            return Err(McError::InvalidConfig {
                key: "samples".into(),
                reason: "must be at least 1".into(),
            });
        }
        if !(self.duty_cycle > 0.0 && self.duty_cycle <= 1.0) {
            return Err(McError::InvalidConfig {
                key: "duty_cycle".into(),
                reason: "must lie in (0, 1]".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum McError {
    #[error("invalid `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },
    #[error("empty input")]
    EmptyInput,
    #[error("nominal solve failed: {0}")]
    Nominal(#[from] SolverError),
    #[error("{failed} of {samples} samples failed")]
    TooManyFailures {
        failed: usize,
        samples: usize,
        result: Box<McResult>,
    },
}

/// One simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub states: Vec<DVector<f64>>,
    /// Applied controls.
    pub controls: Vec<DVector<f64>>,
    pub delta_v: f64,
    pub terminal: f64,
    pub total: f64,
    /// Distance of the final state from the target.
    pub miss: f64,
    /// Re-solves that stopped without converging.
    pub unconverged: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub config: McConfig,
    pub bound: f64,
    pub samples: Vec<SampleRecord>,
}

impl McResult {
    pub fn successful(&self) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(|s| s.failure.is_none())
    }

    pub fn failed(&self) -> usize {
        self.samples.iter().filter(|s| s.failure.is_some()).count()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.successful().map(|s| s.total).collect()
    }

    pub fn delta_vs(&self) -> Vec<f64> {
        self.successful().map(|s| s.delta_v).collect()
    }

    pub fn misses(&self) -> Vec<f64> {
        self.successful().map(|s| s.miss).collect()
    }

    pub fn terminals(&self) -> Vec<f64> {
        self.successful().map(|s| s.terminal).collect()
    }

    pub fn summary(&self) -> Result<McSummary, McError> {
        Ok(McSummary {
            samples: self.samples.len(),
            failed: self.failed(),
            failed_samples: self.samples.iter().filter(|s| s.failure.is_some()).map(|s| s.index).collect(),
            unconverged_solves: self.samples.iter().map(|s| s.unconverged).sum(),
            total: Percentiles::of(&self.totals())?,
            delta_v: Percentiles::of(&self.delta_vs())?,
            terminal: Percentiles::of(&self.terminals())?,
            miss: Percentiles::of(&self.misses())?,
            violation: violation_stats(self, self.bound),
        })
    }
}

/// Median and the 5th / 95th percentiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub median: f64,
    pub p05: f64,
    pub p95: f64,
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Result<Self, McError> {
        if values.is_empty() {
            return Err(McError::EmptyInput);
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(Self {
            median: quantile(&v, 0.5),
            p05: quantile(&v, 0.05),
            p95: quantile(&v, 0.95),
        })
    }
}

/// Linear interpolation between order statistics of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationStats {
    /// Fraction of control realizations above the bound at each stage.
    pub per_stage: Vec<f64>,
    pub aggregate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub samples: usize,
    pub failed: usize,
    pub failed_samples: Vec<usize>,
    pub unconverged_solves: usize,
    pub total: Percentiles,
    pub delta_v: Percentiles,
    pub terminal: Percentiles,
    pub miss: Percentiles,
    pub violation: ViolationStats,
}

/// Sorted `(value, i / n)` pairs.
pub fn empirical_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>, McError> {
    if values.is_empty() {
        return Err(McError::EmptyInput);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    Ok(v.into_iter().enumerate().map(|(i, x)| (x, (i + 1) as f64 / n)).collect())
}

/// Fractions of applied controls with `|u| > bound`, per stage and overall.
pub fn violation_stats(result: &McResult, bound: f64) -> ViolationStats {
    let limit = bound * (1.0 + VIOLATION_SLACK);
    let stages = result.successful().map(|s| s.controls.len()).max().unwrap_or(0);
    let mut counts = vec![0usize; stages];
    let mut runs = vec![0usize; stages];
    for s in result.successful() {
        for (k, u) in s.controls.iter().enumerate() {
            runs[k] += 1;
            if u.norm() > limit {
                counts[k] += 1;
            }
        }
    }
    let per_stage = counts
        .iter()
        .zip(&runs)
        .map(|(c, r)| if *r == 0 { 0.0 } else { *c as f64 / *r as f64 })
        .collect();
    let total: usize = runs.iter().sum();
    let aggregate = if total == 0 {
        0.0
    } else {
        counts.iter().sum::<usize>() as f64 / total as f64
    };
    ViolationStats { per_stage, aggregate }
}

/// Independent standard-normal stream of one sample.
pub fn sample_rng(seed: u64, sample: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64);
    rng
}

fn normal_vector(rng: &mut ChaCha20Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

/// Realized initial state and per-stage noise of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub x0: DVector<f64>,
    pub noise: Vec<DVector<f64>>,
}

/// Draws a sample's initial state and noise; every mode sees the same draws
/// for the same `(seed, sample)`.
pub fn draw<M: StochasticModel>(model: &M, seed: u64, sample: usize) -> Result<Draw, McError> {
    let mut rng = sample_rng(seed, sample);
    let init = model.initial_state();
    let s0 = psd_sqrt(init.cov()).map_err(|e| SolverError::Model(e.to_string()))?;
    let x0 = init.mean() + s0 * normal_vector(&mut rng, model.state_dim());
    let mut noise = Vec::with_capacity(model.horizon());
    for k in 0..model.horizon() {
        let r = psd_sqrt(&model.noise_cov(k)).map_err(|e| SolverError::Model(e.to_string()))?;
        noise.push(r * normal_vector(&mut rng, model.noise_dim()));
    }
    Ok(Draw { x0, noise })
}

/// Inputs shared by all samples of a campaign.
#[derive(Debug, Clone)]
pub struct Campaign<M> {
    pub model: M,
    pub config: McConfig,
    pub solver: SolverOptions,
    pub transcription: TranscriptionOptions,
    /// Deterministic solution from the mean initial state, used at stage 0.
    deterministic: Option<Vec<DVector<f64>>>,
    /// Transcribed nominal solution.
    nominal: Option<StochasticSolution>,
    policies: Vec<AffineStagePolicy>,
    deterministic_start: bool,
}

impl<M: StochasticModel> Campaign<M> {
    /// Prepares the nominal solutions the mode needs. `nominal` skips the
    /// transcribed solve when one is already at hand.
    pub fn new(
        model: M,
        config: McConfig,
        solver: SolverOptions,
        transcription: TranscriptionOptions,
        nominal: Option<StochasticSolution>,
    ) -> Result<Self, McError> {
        config.validate()?;
        let init = model.initial_state();
        let deterministic_start = init.cov().iter().all(|v| *v == 0.0);
        let n = model.horizon();
        let mut c = Self {
            model,
            config,
            solver,
            transcription,
            deterministic: None,
            nominal,
            policies: vec![],
            deterministic_start,
        };
        match c.config.mode {
            McMode::DdpReopt => {
                let p = DeterministicProblem::remaining(c.model.clone(), 0, n, init.mean().clone())
                    .with_duty(c.config.duty_cycle, true);
                let zeros = vec![DVector::zeros(c.model.control_dim()); n];
                c.deterministic = Some(solve_deterministic(&p, &zeros, &c.solver)?.controls);
            }
            McMode::TsddpReopt | McMode::TsddpPolicy => {
                if c.nominal.is_none() {
                    let p = StochasticProblem::new(c.model.clone(), c.transcription.clone())
                        .map_err(SolverError::from)?;
                    c.nominal = Some(solve_tsddp(&p, &c.solver)?.1);
                }
                let nominal = c.nominal.as_ref().expect("set above");
                let bound = c.config.saturate.then(|| c.model.control_bound());
                c.policies = fit_policies(&nominal.states, &nominal.controls)
                    .into_iter()
                    .map(|p| p.with_saturation(bound))
                    .collect();
            }
        }
        Ok(c)
    }

    pub fn policies(&self) -> &[AffineStagePolicy] {
        &self.policies
    }

    pub fn nominal(&self) -> Option<&StochasticSolution> {
        self.nominal.as_ref()
    }

    /// Runs every sample; fails when more than 1% of them fail.
    pub fn run(&self) -> Result<McResult, McError> {
        let run = |i: usize| self.run_sample(i);
        let samples: Vec<SampleRecord> = if self.config.parallel {
            (0..self.config.samples).into_par_iter().map(run).collect()
        } else {
            (0..self.config.samples).map(run).collect()
        };
        let result = McResult {
            config: self.config.clone(),
            bound: self.model.control_bound(),
            samples,
        };
        let failed = result.failed();
        if failed as f64 > MAX_FAILURE_FRACTION * self.config.samples as f64 {
            return Err(McError::TooManyFailures {
                failed,
                samples: self.config.samples,
                result: Box::new(result),
            });
        }
        Ok(result)
    }

    pub fn run_sample(&self, index: usize) -> SampleRecord {
        let mut record = SampleRecord {
            index,
            states: vec![],
            controls: vec![],
            delta_v: 0.0,
            terminal: 0.0,
            total: 0.0,
            miss: 0.0,
            unconverged: 0,
            failure: None,
        };
        if let Err(e) = self.simulate(index, &mut record) {
            record.failure = Some(e.to_string());
        }
        record
    }

    fn simulate(&self, index: usize, rec: &mut SampleRecord) -> Result<(), McError> {
        let d = draw(&self.model, self.config.seed, index)?;
        let n = self.model.horizon();
        let full = self.model.control_bound();
        let clamp = self.config.saturate.then_some(full);
        let mut x = d.x0;
        let mut warm: Vec<DVector<f64>> = match self.config.mode {
            McMode::DdpReopt => self.deterministic.clone().expect("prepared in new"),
            _ => self.nominal.as_ref().map(|s| s.solution.controls.clone()).unwrap_or_default(),
        };
        let mut delta_v = 0.0;
        for k in 0..n {
            rec.states.push(x.clone());
            let u = match self.config.mode {
                McMode::TsddpPolicy => self.policies[k].eval(&x),
                McMode::DdpReopt => {
                    let controls = if k == 0 && self.deterministic_start {
                        warm.clone()
                    } else {
                        let p = DeterministicProblem::remaining(self.model.clone(), k, n - k, x.clone())
                            .with_duty(self.config.duty_cycle, true);
                        let sol = solve_deterministic_warm(&p, &warm, &self.solver)?;
                        if sol.status != SolverStatus::Converged {
                            rec.unconverged += 1;
                        }
                        sol.controls
                    };
                    let u = controls[0].clone();
                    warm = controls[1..].to_vec();
                    saturate(u, clamp)
                }
                McMode::TsddpReopt => {
                    let controls = if k == 0 && self.deterministic_start {
                        warm.clone()
                    } else {
                        let p = StochasticProblem::remaining(
                            self.model.clone(),
                            k,
                            n - k,
                            GaussianState::degenerate(x.clone()),
                            self.transcription.clone(),
                        )
                        .map_err(SolverError::from)?
                        .with_duty(self.config.duty_cycle, true);
                        let sol = solve_stochastic_warm(&p, &warm, &self.solver)?;
                        if sol.status() != SolverStatus::Converged {
                            rec.unconverged += 1;
                        }
                        sol.solution.controls
                    };
                    let nu = self.model.control_dim();
                    let u = controls[0].rows(0, nu).into_owned();
                    warm = controls[1..].to_vec();
                    saturate(u, clamp)
                }
            };
            delta_v += self.model.stage_cost(k, &x, &u, &d.noise[k]);
            x = self
                .model
                .dynamics(k, &x, &u, &d.noise[k])
                .map_err(|e| SolverError::Model(e.to_string()))?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(SolverError::Diverged.into());
            }
            rec.controls.push(u);
        }
        rec.states.push(x.clone());
        rec.delta_v = delta_v;
        rec.terminal = self.model.terminal_cost(&x);
        rec.total = rec.delta_v + rec.terminal;
        rec.miss = self.model.terminal_miss(&x);
        Ok(())
    }
}

fn write_comments<W: Write>(w: &mut W, header: &[String]) -> std::io::Result<()> {
    for line in header {
        writeln!(w, "# {line}")?;
    }
    Ok(())
}

/// One row per sample and stage, in physical units. The last stage of each
/// sample has empty control fields. `header` lines are written first as
/// `#` comments.
pub fn write_trajectories<W: Write, M: StochasticModel>(
    mut w: W,
    result: &McResult,
    model: &M,
    header: &[String],
) -> Result<(), csv::Error> {
    write_comments(&mut w, header)?;
    let nx = model.state_dim();
    let nu = model.control_dim();
    let mut out = csv::Writer::from_writer(w);
    let mut cols = vec!["sample".to_string(), "stage".to_string()];
    cols.extend((0..nx).map(|i| format!("x{i}")));
    cols.extend((0..nu).map(|i| format!("u{i}")));
    cols.push("u_norm".into());
    out.write_record(&cols)?;
    for s in result.successful() {
        for (k, x) in s.states.iter().enumerate() {
            let mut row = vec![s.index.to_string(), k.to_string()];
            row.extend(model.to_physical_state(x).iter().map(|v| v.to_string()));
            match s.controls.get(k) {
                Some(u) => {
                    let up = model.to_physical_control(u);
                    row.extend(up.iter().map(|v| v.to_string()));
                    row.push(up.norm().to_string());
                }
                None => row.extend(std::iter::repeat_n(String::new(), nu + 1)),
            }
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `value,probability` rows of an empirical CDF.
pub fn write_cdf<W: Write>(mut w: W, values: &[f64], header: &[String]) -> Result<(), csv::Error> {
    write_comments(&mut w, header)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["value", "probability"])?;
    if !values.is_empty() {
        for (v, p) in empirical_cdf(values).expect("non-empty") {
            out.write_record([v.to_string(), p.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}
