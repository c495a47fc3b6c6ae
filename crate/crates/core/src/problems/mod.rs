//! The two benchmark problems.

mod double_integrator;
mod low_thrust;

pub use double_integrator::{DoubleIntegrator, DoubleIntegratorConfig, DI_COMPENSATING_DUTY};
pub use low_thrust::{
    angular_momentum, orbital_energy, rk4_step, two_body_derivative, LowThrust, LowThrustConfig,
    LT_COMPENSATING_DUTY,
};
