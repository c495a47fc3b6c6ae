//! Browser demo: an unscented transform explorer, double integrator solves
//! with and without the sigma-point transcription, and small Monte Carlo runs.
//!
//! Every export returns a JSON string. The plain functions underneath are
//! usable (and tested) natively.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use tsddp::gaussian::{make_sigma_set, psd_sqrt, unscented_transform, GaussianState, DEFAULT_KAPPA};
use tsddp::montecarlo::{empirical_cdf, sample_rng, Campaign, McConfig, McMode};
use tsddp::nominal::{solve_deterministic, solve_tsddp, StochasticSolution};
use tsddp::problems::{DoubleIntegrator, DoubleIntegratorConfig};
use tsddp::transcription::{DeterministicProblem, StochasticModel, StochasticProblem};

/// Largest Monte Carlo cloud returned by [`ut_view`].
pub const MAX_UT_SAMPLES: usize = 5000;
/// Largest campaign accepted by [`di_montecarlo`].
pub const MAX_MC_SAMPLES: usize = 500;
/// Sample trajectories returned by [`di_montecarlo`].
pub const SHOWN_TRAJECTORIES: usize = 25;

#[derive(Debug, Clone, Serialize)]
pub struct Moments {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl Moments {
    fn of(g: &GaussianState) -> Self {
        let m = g.mean();
        let p = g.cov();
        Self {
            mean: [m[0], m[1]],
            cov: [[p[(0, 0)], p[(0, 1)]], [p[(1, 0)], p[(1, 1)]]],
        }
    }
}

/// A polar belief `(range, bearing)` pushed into Cartesian coordinates.
#[derive(Debug, Clone, Serialize)]
pub struct UtView {
    pub sigma_polar: Vec<[f64; 2]>,
    pub sigma_cartesian: Vec<[f64; 2]>,
    pub unscented: Moments,
    pub sampled: Moments,
    pub linearized: Moments,
    pub samples: Vec<[f64; 2]>,
}

fn polar(p: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![p[0] * p[1].cos(), p[0] * p[1].sin()])
}

pub fn ut_view(
    range: f64,
    bearing: f64,
    sd_range: f64,
    sd_bearing: f64,
    samples: usize,
    seed: u64,
) -> Result<UtView, String> {
    if samples < 2 || samples > MAX_UT_SAMPLES {
        return Err(format!("samples must lie in [2, {MAX_UT_SAMPLES}], got {samples}"));
    }
    if !(sd_range >= 0.0 && sd_bearing >= 0.0) {
        return Err("standard deviations must be non-negative".into());
    }
    let g = GaussianState::new(
        DVector::from_vec(vec![range, bearing]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![sd_range * sd_range, sd_bearing * sd_bearing])),
    )
    .map_err(|e| e.to_string())?;
    let set = make_sigma_set(&g, DEFAULT_KAPPA).map_err(|e| e.to_string())?;
    let pts: Vec<DVector<f64>> = (0..set.len()).map(|i| set.point(i)).collect();
    let ut = unscented_transform(polar, &g, DEFAULT_KAPPA).map_err(|e| e.to_string())?;

    let root = psd_sqrt(g.cov()).map_err(|e| e.to_string())?;
    let mut rng = sample_rng(seed, 0);
    let cloud: Vec<DVector<f64>> = (0..samples)
        .map(|_| {
            let z = DVector::from_iterator(2, (0..2).map(|_| StandardNormal.sample(&mut rng)));
            polar(&(g.mean() + &root * z))
        })
        .collect();
    let n = samples as f64;
    let mean = cloud.iter().fold(DVector::zeros(2), |a, y| a + y) / n;
    let cov = cloud
        .iter()
        .fold(DMatrix::zeros(2, 2), |a, y| a + (y - &mean) * (y - &mean).transpose())
        / (n - 1.0);

    let (r, t) = (range, bearing);
    let jac = DMatrix::from_row_slice(2, 2, &[t.cos(), -r * t.sin(), t.sin(), r * t.cos()]);
    let lin_cov = &jac * g.cov() * jac.transpose();
    let lin_mean = polar(g.mean());

    let pair = |v: &DVector<f64>| [v[0], v[1]];
    Ok(UtView {
        sigma_polar: pts.iter().map(pair).collect(),
        sigma_cartesian: pts.iter().map(|p| pair(&polar(p))).collect(),
        unscented: Moments::of(&ut),
        sampled: Moments {
            mean: pair(&mean),
            cov: [[cov[(0, 0)], cov[(0, 1)]], [cov[(1, 0)], cov[(1, 1)]]],
        },
        linearized: Moments {
            mean: pair(&lin_mean),
            cov: [[lin_cov[(0, 0)], lin_cov[(0, 1)]], [lin_cov[(1, 0)], lin_cov[(1, 1)]]],
        },
        samples: cloud.iter().map(pair).collect(),
    })
}

/// One nominal double integrator solution. `controls[k]` holds one entry per
/// sigma point for the transcribed solve and a single entry otherwise.
#[derive(Debug, Clone, Serialize)]
pub struct SolveView {
    pub mode: String,
    pub status: String,
    pub iterations: usize,
    pub objective: f64,
    pub dt: f64,
    pub bound: f64,
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    /// Per-stage position standard deviation, zero for the deterministic solve.
    pub position_sd: Vec<f64>,
    pub controls: Vec<Vec<f64>>,
}

thread_local! {
    static NOMINAL: RefCell<Option<(u64, StochasticSolution)>> = const { RefCell::new(None) };
}

fn model(duty: f64) -> Result<DoubleIntegrator, String> {
    let cfg = DoubleIntegratorConfig {
        duty_cycle: duty,
        ..DoubleIntegratorConfig::default()
    };
    cfg.validate().map_err(|e| format!("duty: {e}"))?;
    Ok(DoubleIntegrator::new(cfg))
}

fn nominal(m: &DoubleIntegrator) -> Result<StochasticSolution, String> {
    let key = m.config.duty_cycle.to_bits();
    if let Some(sol) = NOMINAL.with(|c| c.borrow().as_ref().filter(|(k, _)| *k == key).map(|(_, s)| s.clone())) {
        return Ok(sol);
    }
    let p = StochasticProblem::new(m.clone(), m.config.transcription())
        .map_err(|e| e.to_string())?
        .with_duty(m.config.duty_cycle, false);
    let (_, sol) = solve_tsddp(&p, &m.config.solver()).map_err(|e| e.to_string())?;
    NOMINAL.with(|c| *c.borrow_mut() = Some((key, sol.clone())));
    Ok(sol)
}

pub fn di_solve(mode: &str, duty: f64) -> Result<SolveView, String> {
    let m = model(duty)?;
    let dt = m.config.dt;
    let bound = m.control_bound();
    match mode {
        "ddp" => {
            let p = DeterministicProblem::new(m.clone()).with_duty(duty, false);
            let zeros = vec![DVector::zeros(1); m.horizon()];
            let sol = solve_deterministic(&p, &zeros, &m.config.solver()).map_err(|e| e.to_string())?;
            let w = DVector::zeros(m.noise_dim());
            let objective = (0..m.horizon())
                .map(|k| m.stage_cost(k, &sol.states[k], &sol.controls[k], &w))
                .sum::<f64>()
                + m.terminal_cost(sol.states.last().expect("horizon >= 1"));
            Ok(SolveView {
                mode: mode.into(),
                status: format!("{:?}", sol.status),
                iterations: sol.iterations,
                objective,
                dt,
                bound,
                position: sol.states.iter().map(|x| x[0]).collect(),
                velocity: sol.states.iter().map(|x| x[1]).collect(),
                position_sd: vec![0.0; sol.states.len()],
                controls: sol.controls.iter().map(|u| vec![u[0]]).collect(),
            })
        }
        "tsddp" => {
            let sol = nominal(&m)?;
            let moments: Vec<GaussianState> = sol.states.iter().map(|s| s.moments()).collect();
            Ok(SolveView {
                mode: mode.into(),
                status: format!("{:?}", sol.status()),
                iterations: sol.solution.iterations,
                objective: sol.objective,
                dt,
                bound,
                position: moments.iter().map(|g| g.mean()[0]).collect(),
                velocity: moments.iter().map(|g| g.mean()[1]).collect(),
                position_sd: moments.iter().map(|g| g.cov()[(0, 0)].max(0.0).sqrt()).collect(),
                controls: sol.controls.iter().map(|u| u.flatten().iter().copied().collect()).collect(),
            })
        }
        other => Err(format!("mode: unknown `{other}`, expected ddp or tsddp")),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct McView {
    pub mode: String,
    pub samples: usize,
    pub failed: usize,
    pub median_total: f64,
    pub median_delta_v: f64,
    pub violation: f64,
    /// `[value, probability]` pairs of the total cost.
    pub cdf_total: Vec<[f64; 2]>,
    /// Positions of the first few samples.
    pub trajectories: Vec<Vec<f64>>,
}

pub fn di_montecarlo(mode: &str, duty: f64, samples: usize, seed: u64, saturate: bool) -> Result<McView, String> {
    if samples == 0 || samples > MAX_MC_SAMPLES {
        return Err(format!("samples must lie in [1, {MAX_MC_SAMPLES}], got {samples}"));
    }
    let mc_mode: McMode = mode.parse().map_err(|e: tsddp::montecarlo::McError| e.to_string())?;
    let m = model(duty)?;
    let cached = match mc_mode {
        McMode::TsddpPolicy | McMode::TsddpReopt => Some(nominal(&model(1.0)?)?),
        McMode::DdpReopt => None,
    };
    let config = McConfig {
        samples,
        seed,
        mode: mc_mode,
        duty_cycle: duty,
        saturate,
        parallel: false,
    };
    let campaign = Campaign::new(
        m.clone(),
        config,
        m.config.solver(),
        m.config.transcription(),
        cached,
    )
    .map_err(|e| e.to_string())?;
    let result = campaign.run().map_err(|e| e.to_string())?;
    let summary = result.summary().map_err(|e| e.to_string())?;
    let cdf = empirical_cdf(&result.totals()).map_err(|e| e.to_string())?;
    Ok(McView {
        mode: mode.into(),
        samples,
        failed: summary.failed,
        median_total: summary.total.median,
        median_delta_v: summary.delta_v.median,
        violation: summary.violation.aggregate,
        cdf_total: cdf.into_iter().map(|(v, p)| [v, p]).collect(),
        trajectories: result
            .successful()
            .take(SHOWN_TRAJECTORIES)
            .map(|s| s.states.iter().map(|x| x[0]).collect())
            .collect(),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = utView)]
pub fn ut_view_js(
    range: f64,
    bearing: f64,
    sd_range: f64,
    sd_bearing: f64,
    samples: usize,
    seed: u64,
) -> Result<String, JsError> {
    to_js(ut_view(range, bearing, sd_range, sd_bearing, samples, seed))
}

#[wasm_bindgen(js_name = diSolve)]
pub fn di_solve_js(mode: &str, duty: f64) -> Result<String, JsError> {
    to_js(di_solve(mode, duty))
}

#[wasm_bindgen(js_name = diMontecarlo)]
pub fn di_montecarlo_js(mode: &str, duty: f64, samples: usize, seed: u64, saturate: bool) -> Result<String, JsError> {
    to_js(di_montecarlo(mode, duty, samples, seed, saturate))
}
