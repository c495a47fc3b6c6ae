//! One-dimensional double integrator with an L1 control cost.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ddp::{CostExpansion, SecondOrder, SolverError, SolverOptions};
use crate::gaussian::GaussianState;
use crate::transcription::{ModelError, StochasticModel, TranscriptionOptions};

/// Duty cycle that leaves room for a 3-sigma velocity correction per stage.
pub const DI_COMPENSATING_DUTY: f64 = 0.81;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoubleIntegratorConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Velocity change per unit control.
    pub b: f64,
    /// Diagonal of the process noise covariance (position, velocity).
    pub noise_variance: [f64; 2],
    pub initial_state: [f64; 2],
    /// Diagonal of the initial covariance.
    pub initial_variance: [f64; 2],
    pub target: [f64; 2],
    pub terminal_weight: f64,
    pub control_bound: f64,
    pub duty_cycle: f64,
}

impl Default for DoubleIntegratorConfig {
    fn default() -> Self {
        Self {
            horizon: 39,
            dt: 0.15,
            b: 0.25,
            noise_variance: [1e-20, 2.5e-4],
            initial_state: [-10.0, 0.0],
            initial_variance: [0.0, 0.0],
            target: [0.0, 0.0],
            terminal_weight: 1e4,
            control_bound: 1.0,
            duty_cycle: 1.0,
        }
    }
}

impl DoubleIntegratorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.horizon == 0 {
            return Err("horizon must be at least 1".into());
        }
        for (name, v) in [
            ("dt", self.dt),
            ("b", self.b),
            ("terminal_weight", self.terminal_weight),
            ("control_bound", self.control_bound),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.duty_cycle > 0.0 && self.duty_cycle <= 1.0) {
            return Err(format!("duty_cycle must lie in (0, 1], got {}", self.duty_cycle));
        }
        if self
            .noise_variance
            .iter()
            .chain(&self.initial_variance)
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err("variances must be non-negative".into());
        }
        Ok(())
    }

    pub fn transcription(&self) -> TranscriptionOptions {
        TranscriptionOptions::default()
    }

    /// Solver settings for this problem: all second derivatives of the
    /// transcribed dynamics are cheap enough at this size.
    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            second_order: SecondOrder::Full,
            ..SolverOptions::default()
        }
    }
}

/// The double integrator model. `smoothing = s` replaces `|u|` with
/// `sqrt(u^2 + s)` for optimization; zero gives the exact cost.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleIntegrator {
    pub config: DoubleIntegratorConfig,
    pub smoothing: f64,
}

impl DoubleIntegrator {
    pub fn new(config: DoubleIntegratorConfig) -> Self {
        Self {
            config,
            smoothing: 0.0,
        }
    }

    /// `[r + dt v + w1, v + b u + w2]`.
    pub fn step(&self, x: &DVector<f64>, u: f64, w: &DVector<f64>) -> DVector<f64> {
        let c = &self.config;
        DVector::from_vec(vec![x[0] + c.dt * x[1] + w[0], x[1] + c.b * u + w[1]])
    }
}

impl Default for DoubleIntegrator {
    fn default() -> Self {
        Self::new(DoubleIntegratorConfig::default())
    }
}

impl StochasticModel for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn initial_state(&self) -> GaussianState {
        let c = &self.config;
        GaussianState::new(
            DVector::from_column_slice(&c.initial_state),
            DMatrix::from_diagonal(&DVector::from_column_slice(&c.initial_variance)),
        )
        .unwrap_or_else(|_| GaussianState::degenerate(DVector::from_column_slice(&c.initial_state)))
    }

    fn noise_cov(&self, _k: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.config.noise_variance))
    }

    fn control_bound(&self) -> f64 {
        self.config.control_bound
    }

    fn dynamics(
        &self,
        _k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DVector<f64>, ModelError> {
        Ok(self.step(x, u[0], w))
    }

    fn stage_cost(&self, _k: usize, _x: &DVector<f64>, u: &DVector<f64>, _w: &DVector<f64>) -> f64 {
        if self.smoothing > 0.0 {
            (u[0] * u[0] + self.smoothing).sqrt()
        } else {
            u[0].abs()
        }
    }

    fn stage_cost_expansion(
        &self,
        _k: usize,
        _x: &DVector<f64>,
        u: &DVector<f64>,
        _w: &DVector<f64>,
    ) -> Result<CostExpansion, SolverError> {
        let mut e = CostExpansion::zeros(2, 1);
        let r = (u[0] * u[0] + self.smoothing).sqrt();
        if r > 0.0 {
            e.lu[0] = u[0] / r;
            e.luu[(0, 0)] = self.smoothing / (r * r * r);
        }
        Ok(e)
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        let t = &self.config.target;
        let d0 = x[0] - t[0];
        let d1 = x[1] - t[1];
        self.config.terminal_weight * (d0 * d0 + d1 * d1)
    }

    fn terminal_cost_expansion(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), SolverError> {
        let t = DVector::from_column_slice(&self.config.target);
        let cf = self.config.terminal_weight;
        Ok(((x - t) * (2.0 * cf), DMatrix::identity(2, 2) * (2.0 * cf)))
    }

    fn terminal_miss(&self, x: &DVector<f64>) -> f64 {
        (x - DVector::from_column_slice(&self.config.target)).norm()
    }

    fn smoothing_schedule(&self) -> Vec<f64> {
        vec![1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-8]
    }

    fn with_smoothing(&self, s: f64) -> Self {
        Self {
            config: self.config.clone(),
            smoothing: s,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn step_examples() {
        let m = DoubleIntegrator::default();
        let z = DVector::zeros(2);
        assert_eq!(m.step(&v(&[-10.0, 0.0]), 1.0, &z), v(&[-10.0, 0.25]));
        assert_eq!(m.step(&v(&[3.0, 0.0]), 0.0, &z), v(&[3.0, 0.0]));
        assert!((m.step(&v(&[0.0, 1.0]), 0.0, &z) - v(&[0.15, 1.0])).norm() < 1e-15);
    }

    #[test]
    fn costs() {
        let m = DoubleIntegrator::default();
        let z = DVector::zeros(2);
        assert_eq!(m.stage_cost(0, &z, &v(&[0.0]), &z), 0.0);
        assert_eq!(m.stage_cost(0, &z, &v(&[-0.4]), &z), 0.4);
        assert_eq!(m.terminal_cost(&v(&[0.0, 0.0])), 0.0);
        assert_eq!(m.terminal_cost(&v(&[1.0, 0.0])), 1e4);
    }

    #[test]
    fn smoothed_expansion_matches_differences() {
        let m = DoubleIntegrator::default().with_smoothing(1e-3);
        let z = DVector::zeros(2);
        let u = v(&[0.3]);
        let e = m.stage_cost_expansion(0, &z, &u, &z).unwrap();
        let h = 1e-6;
        let fd = (m.stage_cost(0, &z, &v(&[0.3 + h]), &z) - m.stage_cost(0, &z, &v(&[0.3 - h]), &z)) / (2.0 * h);
        assert!((e.lu[0] - fd).abs() < 1e-8);
    }

    #[test]
    fn config_validation() {
        let mut c = DoubleIntegratorConfig::default();
        assert!(c.validate().is_ok());
        c.duty_cycle = 1.5;
        assert!(c.validate().is_err());
    }
}
