//! Planar heliocentric low-thrust transfer under two-body gravity.
//!
//! Everything the solver touches is nondimensional: lengths are divided by
//! `length_scale`, times by `time_scale`.

use nalgebra::{DMatrix, DVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::ddp::{CostExpansion, SecondOrder, SolverError, SolverOptions};
use crate::gaussian::GaussianState;
use crate::transcription::{ModelError, StochasticModel, TranscriptionOptions};

/// Duty cycle used for the reduced-thrust comparison.
pub const LT_COMPENSATING_DUTY: f64 = 0.80;

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowThrustConfig {
    pub horizon: usize,
    pub time_of_flight_days: f64,
    /// Sun gravitational parameter, km^3/s^2.
    pub gm: f64,
    /// Thrust acceleration bound, km/s^2.
    pub thrust_bound: f64,
    /// Per-stage position noise variance, km^2.
    pub position_variance: f64,
    /// Per-stage velocity noise variance, km^2/s^2.
    pub velocity_variance: f64,
    pub r_earth: [f64; 2],
    pub v_earth: [f64; 2],
    pub r_mars: [f64; 2],
    pub v_mars: [f64; 2],
    pub terminal_weight: f64,
    pub length_scale: f64,
    pub time_scale: f64,
    /// Guard inside `sqrt(|u|^2 + eps)`, in scaled units.
    pub mass_leak: f64,
    /// RK4 substeps per stage.
    pub substeps: usize,
    pub duty_cycle: f64,
}

impl Default for LowThrustConfig {
    fn default() -> Self {
        Self {
            horizon: 40,
            time_of_flight_days: 348.79,
            gm: 1.32712442099e11,
            thrust_bound: 1e-6,
            position_variance: 1e-12,
            velocity_variance: 2.522627e-5,
            r_earth: [-140_699_693.0, -51_614_428.0],
            v_earth: [9.774596, -28.07828],
            r_mars: [-172_682_023.0, 176_959_469.0],
            v_mars: [-16.427384, -14.860506],
            terminal_weight: 1e6,
            length_scale: 1e8,
            time_scale: 1e6,
            mass_leak: 1e-6,
            substeps: 6,
            duty_cycle: 1.0,
        }
    }
}

impl LowThrustConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.horizon == 0 {
            return Err("horizon must be at least 1".into());
        }
        if self.substeps == 0 {
            return Err("substeps must be at least 1".into());
        }
        for (name, v) in [
            ("time_of_flight_days", self.time_of_flight_days),
            ("gm", self.gm),
            ("thrust_bound", self.thrust_bound),
            ("terminal_weight", self.terminal_weight),
            ("length_scale", self.length_scale),
            ("time_scale", self.time_scale),
            ("mass_leak", self.mass_leak),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.position_variance >= 0.0 && self.velocity_variance >= 0.0) {
            return Err("variances must be non-negative".into());
        }
        if !(self.duty_cycle > 0.0 && self.duty_cycle <= 1.0) {
            return Err(format!("duty_cycle must lie in (0, 1], got {}", self.duty_cycle));
        }
        Ok(())
    }

    fn velocity_scale(&self) -> f64 {
        self.length_scale / self.time_scale
    }

    fn acceleration_scale(&self) -> f64 {
        self.length_scale / (self.time_scale * self.time_scale)
    }

    pub fn scale_length(&self, l: f64) -> f64 {
        l / self.length_scale
    }

    pub fn scale_time(&self, t: f64) -> f64 {
        t / self.time_scale
    }

    pub fn unscale_time(&self, t: f64) -> f64 {
        t * self.time_scale
    }

    pub fn scale_state(&self, x: &DVector<f64>) -> DVector<f64> {
        let (l, v) = (self.length_scale, self.velocity_scale());
        DVector::from_vec(vec![x[0] / l, x[1] / l, x[2] / v, x[3] / v])
    }

    pub fn unscale_state(&self, x: &DVector<f64>) -> DVector<f64> {
        let (l, v) = (self.length_scale, self.velocity_scale());
        DVector::from_vec(vec![x[0] * l, x[1] * l, x[2] * v, x[3] * v])
    }

    pub fn scale_control(&self, u: &DVector<f64>) -> DVector<f64> {
        u / self.acceleration_scale()
    }

    pub fn unscale_control(&self, u: &DVector<f64>) -> DVector<f64> {
        u * self.acceleration_scale()
    }

    /// Scaled gravitational parameter.
    pub fn scaled_gm(&self) -> f64 {
        self.gm * self.time_scale * self.time_scale / self.length_scale.powi(3)
    }

    /// Scaled stage duration.
    pub fn scaled_dt(&self) -> f64 {
        self.scale_time(self.time_of_flight_days * SECONDS_PER_DAY) / self.horizon as f64
    }

    pub fn scaled_thrust_bound(&self) -> f64 {
        self.thrust_bound / self.acceleration_scale()
    }

    /// Chance-constraint settings with the variance guard expressed relative to
    /// the bound, so it is as small against `|u|^4` as it is for a unit bound.
    pub fn transcription(&self) -> TranscriptionOptions {
        let b = self.scaled_thrust_bound();
        TranscriptionOptions {
            epsilon: 1e-4 * b.powi(4),
            ..TranscriptionOptions::default()
        }
    }

    /// Solver settings for this problem: control-block second derivatives only.
    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            second_order: SecondOrder::Full,
            ..SolverOptions::default()
        }
    }

    fn physical_state(r: [f64; 2], v: [f64; 2]) -> DVector<f64> {
        DVector::from_vec(vec![r[0], r[1], v[0], v[1]])
    }

    pub fn earth_state(&self) -> DVector<f64> {
        Self::physical_state(self.r_earth, self.v_earth)
    }

    pub fn mars_state(&self) -> DVector<f64> {
        Self::physical_state(self.r_mars, self.v_mars)
    }
}

/// `d/dt [r, v] = [v, -gm r / |r|^3 + u]`.
pub fn two_body_derivative(
    x: &Vector4<f64>,
    u: &Vector2<f64>,
    gm: f64,
    min_radius: f64,
) -> Result<Vector4<f64>, ModelError> {
    let r2 = x[0] * x[0] + x[1] * x[1];
    let r = r2.sqrt();
    if !(r >= min_radius) {
        return Err(ModelError::SingularRadius { radius: r });
    }
    let f = -gm / (r2 * r);
    Ok(Vector4::new(x[2], x[3], f * x[0] + u[0], f * x[1] + u[1]))
}

/// One classical RK4 step of `dx/dt = f(x)`.
pub fn rk4_step<F, E>(f: F, x: &Vector4<f64>, dt: f64) -> Result<Vector4<f64>, E>
where
    F: Fn(&Vector4<f64>) -> Result<Vector4<f64>, E>,
{
    let k1 = f(x)?;
    let k2 = f(&(x + k1 * (0.5 * dt)))?;
    let k3 = f(&(x + k2 * (0.5 * dt)))?;
    let k4 = f(&(x + k3 * dt))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Specific orbital energy `|v|^2 / 2 - gm / |r|`.
pub fn orbital_energy(x: &Vector4<f64>, gm: f64) -> f64 {
    0.5 * (x[2] * x[2] + x[3] * x[3]) - gm / (x[0] * x[0] + x[1] * x[1]).sqrt()
}

/// Specific angular momentum `r x v`.
pub fn angular_momentum(x: &Vector4<f64>) -> f64 {
    x[0] * x[3] - x[1] * x[2]
}

/// The transfer model in scaled units.
#[derive(Debug, Clone, PartialEq)]
pub struct LowThrust {
    pub config: LowThrustConfig,
    gm: f64,
    dt: f64,
    min_radius: f64,
    target: DVector<f64>,
}

impl LowThrust {
    pub fn new(config: LowThrustConfig) -> Self {
        let gm = config.scaled_gm();
        let dt = config.scaled_dt();
        let min_radius = config.scale_length(1.0);
        let target = config.scale_state(&config.mars_state());
        Self {
            config,
            gm,
            dt,
            min_radius,
            target,
        }
    }

    pub fn gm(&self) -> f64 {
        self.gm
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    /// Zero-order-hold propagation over one stage with `substeps` RK4 steps.
    pub fn rk4_stage(&self, x: &Vector4<f64>, u: &Vector2<f64>) -> Result<Vector4<f64>, ModelError> {
        let n = self.config.substeps;
        let h = self.dt / n as f64;
        let mut s = *x;
        for _ in 0..n {
            s = rk4_step(|y| two_body_derivative(y, u, self.gm, self.min_radius), &s, h)?;
        }
        Ok(s)
    }

    /// Deterministic propagation plus additive noise.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let next = self.rk4_stage(&Vector4::new(x[0], x[1], x[2], x[3]), &Vector2::new(u[0], u[1]))?;
        Ok(DVector::from_vec(vec![
            next[0] + w[0],
            next[1] + w[1],
            next[2] + w[2],
            next[3] + w[3],
        ]))
    }
}

impl Default for LowThrust {
    fn default() -> Self {
        Self::new(LowThrustConfig::default())
    }
}

impl StochasticModel for LowThrust {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn noise_dim(&self) -> usize {
        4
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn initial_state(&self) -> GaussianState {
        GaussianState::degenerate(self.config.scale_state(&self.config.earth_state()))
    }

    fn noise_cov(&self, _k: usize) -> DMatrix<f64> {
        let c = &self.config;
        let vs = c.velocity_scale();
        let pr = c.position_variance / (c.length_scale * c.length_scale);
        let pv = c.velocity_variance / (vs * vs);
        DMatrix::from_diagonal(&DVector::from_vec(vec![pr, pr, pv, pv]))
    }

    fn control_bound(&self) -> f64 {
        self.config.scaled_thrust_bound()
    }

    fn dynamics(
        &self,
        _k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DVector<f64>, ModelError> {
        self.step(x, u, w)
    }

    fn stage_cost(&self, _k: usize, _x: &DVector<f64>, u: &DVector<f64>, _w: &DVector<f64>) -> f64 {
        (u.norm_squared() + self.config.mass_leak).sqrt()
    }

    fn stage_cost_expansion(
        &self,
        _k: usize,
        _x: &DVector<f64>,
        u: &DVector<f64>,
        _w: &DVector<f64>,
    ) -> Result<CostExpansion, SolverError> {
        let mut e = CostExpansion::zeros(4, 2);
        let r = (u.norm_squared() + self.config.mass_leak).sqrt();
        e.lu = u / r;
        e.luu = (DMatrix::identity(2, 2) * (r * r) - u * u.transpose()) / (r * r * r);
        Ok(e)
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        self.config.terminal_weight * (x - &self.target).norm_squared()
    }

    fn terminal_cost_expansion(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), SolverError> {
        let cf = self.config.terminal_weight;
        Ok(((x - &self.target) * (2.0 * cf), DMatrix::identity(4, 4) * (2.0 * cf)))
    }

    fn terminal_miss(&self, x: &DVector<f64>) -> f64 {
        (x - &self.target).norm()
    }

    fn to_physical_state(&self, x: &DVector<f64>) -> DVector<f64> {
        self.config.unscale_state(x)
    }

    fn to_physical_control(&self, u: &DVector<f64>) -> DVector<f64> {
        self.config.unscale_control(u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_constants() {
        let c = LowThrustConfig::default();
        let e = c.scale_state(&c.earth_state());
        assert!((e[0] + 1.40699693).abs() < 1e-15);
        assert!((e[1] + 0.51614428).abs() < 1e-15);
        assert!((c.scaled_thrust_bound() - 0.01).abs() < 1e-17);
        assert!((c.scaled_gm() - 0.132712442099).abs() < 1e-15);
    }

    #[test]
    fn scale_round_trip() {
        let c = LowThrustConfig::default();
        let x = c.mars_state();
        let back = c.unscale_state(&c.scale_state(&x));
        for i in 0..4 {
            assert!((back[i] - x[i]).abs() <= 1e-15 * x[i].abs());
        }
        let u = DVector::from_vec(vec![3e-7, -8e-7]);
        let back = c.unscale_control(&c.scale_control(&u));
        assert!((back - &u).norm() <= 1e-15 * u.norm());
    }

    #[test]
    fn circular_orbit_acceleration() {
        let (gm, a) = (2.0_f64, 3.0_f64);
        let x = Vector4::new(a, 0.0, 0.0, (gm / a).sqrt());
        let d = two_body_derivative(&x, &Vector2::zeros(), gm, 1e-9).unwrap();
        assert!((d[2] + gm / (a * a)).abs() < 1e-15);
        assert_eq!(d[3], 0.0);
    }

    #[test]
    fn thrust_enters_linearly() {
        let x = Vector4::new(1.1, -0.3, 0.2, 0.9);
        let u = Vector2::new(0.004, -0.007);
        let with = two_body_derivative(&x, &u, 0.13, 1e-8).unwrap();
        let without = two_body_derivative(&x, &Vector2::zeros(), 0.13, 1e-8).unwrap();
        let d = with - without;
        assert_eq!((d[0], d[1]), (0.0, 0.0));
        assert!((d[2] - u[0]).abs() < 1e-15 && (d[3] - u[1]).abs() < 1e-15);
    }

    #[test]
    fn singular_radius_is_reported() {
        let x = Vector4::new(1e-9, 0.0, 0.0, 0.0);
        let r = two_body_derivative(&x, &Vector2::zeros(), 0.13, 1e-8);
        assert!(matches!(r, Err(ModelError::SingularRadius { .. })));
    }

    #[test]
    fn earth_gravity_magnitude() {
        let c = LowThrustConfig::default();
        let e = c.earth_state();
        let x = Vector4::new(e[0], e[1], e[2], e[3]);
        let d = two_body_derivative(&x, &Vector2::zeros(), c.gm, 1.0).unwrap();
        let a = (d[2] * d[2] + d[3] * d[3]).sqrt();
        let r2 = e[0] * e[0] + e[1] * e[1];
        assert!((a - c.gm / r2).abs() < 1e-12 * a);
        assert!((a - 5.9e-6).abs() < 0.05e-6);
    }

    #[test]
    fn noise_is_additive() {
        let m = LowThrust::default();
        let x = m.initial_state().mean().clone();
        let u = DVector::from_vec(vec![0.003, 0.001]);
        let w = DVector::from_vec(vec![1e-6, -2e-6, 3e-5, 4e-5]);
        let a = m.step(&x, &u, &w).unwrap();
        let b = m.step(&x, &u, &DVector::zeros(4)).unwrap();
        assert!((&a - &b - &w).norm() < 1e-15);
    }

    #[test]
    fn mass_leak_floor() {
        let m = LowThrust::default();
        let z = DVector::zeros(4);
        assert!((m.stage_cost(0, &z, &DVector::zeros(2), &z) - 1e-3).abs() < 1e-18);
    }
}
