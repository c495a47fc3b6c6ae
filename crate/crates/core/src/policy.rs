//! Affine feedback laws fitted to optimized sigma-point controls, for running a
//! nominal solution against sampled noise without re-optimizing.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::transcription::{StackedControl, StackedState};

/// Relative eigenvalue threshold of the pseudo-inverse in the fit.
pub const PINV_TOL: f64 = 1e-12;

/// `u(x) = u0 + K (x - x_ref)` with an optional norm bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineStagePolicy {
    pub u0: DVector<f64>,
    pub gain: DMatrix<f64>,
    pub x_ref: DVector<f64>,
    pub saturation: Option<f64>,
    /// Set when the sigma points collapsed in a direction where the controls
    /// still differ; the policy is then the constant weighted control mean.
    pub degenerate: bool,
}

impl AffineStagePolicy {
    pub fn constant(u0: DVector<f64>, nx: usize) -> Self {
        let nu = u0.len();
        Self {
            u0,
            gain: DMatrix::zeros(nu, nx),
            x_ref: DVector::zeros(nx),
            saturation: None,
            degenerate: false,
        }
    }

    pub fn with_saturation(mut self, bound: Option<f64>) -> Self {
        self.saturation = bound;
        self
    }

    /// The affine law without the bound.
    pub fn eval_raw(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.u0 + &self.gain * (x - &self.x_ref)
    }

    /// The affine law, rescaled onto the bound when saturation is set and exceeded.
    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        saturate(self.eval_raw(x), self.saturation)
    }
}

/// Rescales `u` to norm `bound` if it is longer, keeping its direction.
pub fn saturate(u: DVector<f64>, bound: Option<f64>) -> DVector<f64> {
    match bound {
        Some(b) => {
            let n = u.norm();
            if n > b {
                u * (b / n)
            } else {
                u
            }
        }
        None => u,
    }
}

/// Pseudo-inverse of a symmetric PSD matrix and the dimension of its null space.
fn pinv_sym(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let eig = SymmetricEigen::new(m.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(*v));
    let n = m.nrows();
    let mut inv = DMatrix::zeros(n, n);
    let mut null = 0;
    for (i, l) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        if lmax > 0.0 && *l > PINV_TOL * lmax {
            inv += v * v.transpose() / *l;
        } else {
            null += 1;
        }
    }
    (inv, null)
}

/// Weighted least-squares affine fit of the controls over the sigma points,
/// anchored at the centre point.
pub fn fit_policy(x: &StackedState, u: &StackedControl) -> AffineStagePolicy {
    let points = x.sigma.points();
    let w = x.sigma.weights();
    let controls = &u.controls;
    let n = points.nrows();
    let x_ref = points.column(0).into_owned();
    let x_mean = points * w;
    let u_mean = controls * w;

    let dx = points - &x_mean * DVector::from_element(points.ncols(), 1.0).transpose();
    let du = controls - &u_mean * DVector::from_element(controls.ncols(), 1.0).transpose();
    let wd = DMatrix::from_diagonal(w);
    let cxx = &dx * &wd * dx.transpose();
    let cux = &du * &wd * dx.transpose();
    let (inv, null) = pinv_sym(&cxx);

    let scale = controls.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    let mut degenerate = false;
    if null > 0 && points.ncols() == 2 * n + 1 {
        // A collapsed direction matters only if some pair of points that differ
        // along it alone carry different controls.
        let spread = (0..n)
            .map(|j| (points.column(1 + j) - points.column(1 + n + j)).norm())
            .fold(0.0_f64, f64::max);
        for j in 0..n {
            let px = (points.column(1 + j) - points.column(1 + n + j)).norm();
            let pu = (controls.column(1 + j) - controls.column(1 + n + j)).norm();
            if px <= PINV_TOL.sqrt() * spread.max(f64::MIN_POSITIVE) && pu > 1e-9 * scale {
                degenerate = true;
            }
        }
        if spread == 0.0 && du.iter().any(|v| v.abs() > 1e-9 * scale) {
            degenerate = true;
        }
    }

    if degenerate {
        return AffineStagePolicy {
            u0: u_mean,
            gain: DMatrix::zeros(controls.nrows(), n),
            x_ref,
            saturation: None,
            degenerate: true,
        };
    }
    let gain = cux * inv;
    let u0 = &u_mean - &gain * (&x_mean - &x_ref);
    AffineStagePolicy {
        u0,
        gain,
        x_ref,
        saturation: None,
        degenerate: false,
    }
}

/// One fitted policy per stage.
pub fn fit_policies(states: &[StackedState], controls: &[StackedControl]) -> Vec<AffineStagePolicy> {
    states.iter().zip(controls).map(|(x, u)| fit_policy(x, u)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::SigmaSet;

    fn stacked(points: DMatrix<f64>) -> StackedState {
        StackedState {
            sigma: SigmaSet::from_points(points, 2.0).unwrap(),
        }
    }

    #[test]
    fn hand_example_1d() {
        let x = stacked(DMatrix::from_row_slice(1, 3, &[0.0, 2.0, -2.0]));
        let u = StackedControl {
            controls: DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 0.0]),
        };
        let p = fit_policy(&x, &u);
        assert!((p.u0[0] - 1.0).abs() < 1e-14);
        assert!((p.gain[(0, 0)] - 0.5).abs() < 1e-14);
        assert!(!p.degenerate);
    }

    #[test]
    fn identical_controls_give_constant_policy() {
        let x = stacked(DMatrix::from_row_slice(2, 5, &[1.0, 2.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, -1.0]));
        let u = StackedControl::replicate(&DVector::from_vec(vec![0.3, -0.2]), 2);
        let p = fit_policy(&x, &u);
        assert!(p.gain.norm() < 1e-14);
        assert!((p.u0 - DVector::from_vec(vec![0.3, -0.2])).norm() < 1e-14);
    }

    #[test]
    fn collapsed_points_with_different_controls_are_degenerate() {
        let x = stacked(DMatrix::from_row_slice(2, 5, &[1.0, 2.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let u = StackedControl {
            controls: DMatrix::from_row_slice(1, 5, &[0.0, 0.0, 1.0, 0.0, -0.5]),
        };
        let p = fit_policy(&x, &u);
        assert!(p.degenerate);
        assert!(p.gain.norm() == 0.0);
        let mean = (u.controls.clone() * x.sigma.weights())[0];
        assert!((p.u0[0] - mean).abs() < 1e-15);
    }

    #[test]
    fn saturation_keeps_direction() {
        let mut p = AffineStagePolicy::constant(DVector::from_vec(vec![0.9, 0.0]), 1);
        p.gain = DMatrix::from_row_slice(2, 1, &[0.3, 0.0]);
        let x = DVector::from_vec(vec![1.0]);
        assert!((p.eval_raw(&x).norm() - 1.2).abs() < 1e-15);
        let p = p.with_saturation(Some(1.0));
        let u = p.eval(&x);
        assert!((u.norm() - 1.0).abs() < 1e-15);
        assert!(u[1] == 0.0 && u[0] > 0.0);
    }
}
