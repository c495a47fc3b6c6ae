//! Augmented Lagrangian treatment of stage-wise inequality constraints `c(u) <= 0`.
//!
//! Each constraint contributes `(max(0, lambda + rho c)^2 - lambda^2) / (2 rho)`
//! to the stage cost. The backward pass sees its gradient and the Gauss-Newton
//! Hessian `rho g g^T` on the active set, plus the constraint curvature when
//! it is supplied.

use nalgebra::{DMatrix, DVector};

/// Multipliers per stage and a single penalty weight.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedLagrangian {
    pub multipliers: Vec<DVector<f64>>,
    pub penalty: f64,
    /// Violation recorded at the last penalty decision.
    pub reference_violation: f64,
}

impl AugmentedLagrangian {
    pub fn new(counts: &[usize], penalty: f64) -> Self {
        Self {
            multipliers: counts.iter().map(|&m| DVector::zeros(m)).collect(),
            penalty,
            reference_violation: f64::INFINITY,
        }
    }

    /// Penalty term for stage `k` given its constraint values.
    pub fn cost(&self, k: usize, values: &DVector<f64>) -> f64 {
        let rho = self.penalty;
        values
            .iter()
            .zip(self.multipliers[k].iter())
            .map(|(c, l)| {
                let t = (l + rho * c).max(0.0);
                (t * t - l * l) / (2.0 * rho)
            })
            .sum()
    }

    /// Gradient and Hessian of the penalty term w.r.t. the control.
    pub fn expansion(
        &self,
        k: usize,
        values: &DVector<f64>,
        jacobian: &DMatrix<f64>,
        hessians: Option<&[DMatrix<f64>]>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let nu = jacobian.ncols();
        let mut grad = DVector::zeros(nu);
        let mut hess = DMatrix::zeros(nu, nu);
        let rho = self.penalty;
        for (i, (c, l)) in values.iter().zip(self.multipliers[k].iter()).enumerate() {
            let t = l + rho * c;
            if t > 0.0 {
                let g = jacobian.row(i).transpose();
                grad.axpy(t, &g, 1.0);
                hess.ger(rho, &g, &g, 1.0);
                if let Some(h) = hessians {
                    hess += &h[i] * t;
                }
            }
        }
        (grad, hess)
    }
}

/// `lambda <- clamp(max(0, lambda + rho c))`; `rho` grows when the worst violation
/// has not shrunk by at least a factor of four since the previous update.
pub fn augmented_lagrangian_update(
    al: &mut AugmentedLagrangian,
    values: &[DVector<f64>],
    growth: f64,
    max_penalty: f64,
    max_multiplier: f64,
) {
    let rho = al.penalty;
    for (lambda, c) in al.multipliers.iter_mut().zip(values) {
        for (l, v) in lambda.iter_mut().zip(c.iter()) {
            *l = (*l + rho * v).clamp(0.0, max_multiplier);
        }
    }
    let violation = max_violation(values);
    if al.reference_violation.is_finite() && violation > 0.25 * al.reference_violation {
        al.penalty = (al.penalty * growth).min(max_penalty);
    }
    al.reference_violation = violation;
}

/// Largest positive constraint value, or zero when all are satisfied.
pub fn max_violation(values: &[DVector<f64>]) -> f64 {
    values
        .iter()
        .flat_map(|v| v.iter())
        .fold(0.0_f64, |acc, c| acc.max(*c))
}
