use nalgebra::{DMatrix, DVector};

use super::SolverError;

/// First and second derivatives of one stage of the (augmented) problem.
#[derive(Debug, Clone)]
pub struct StageLinearization {
    /// `df/dx`
    pub fx: DMatrix<f64>,
    /// `df/du`
    pub fu: DMatrix<f64>,
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub luu: DMatrix<f64>,
    /// `d2l/du dx`, control rows by state columns.
    pub lux: DMatrix<f64>,
    /// Second derivatives of the dynamics, when they are used.
    pub curvature: Option<StageCurvature>,
}

/// Second derivatives of each state component `m` of the dynamics. The state
/// blocks are absent when only the control block is kept.
#[derive(Debug, Clone)]
pub struct StageCurvature {
    pub fxx: Option<Vec<DMatrix<f64>>>,
    pub fux: Option<Vec<DMatrix<f64>>>,
    pub fuu: Vec<DMatrix<f64>>,
}

/// Which second derivatives of the dynamics enter the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondOrder {
    /// Gauss-Newton: none.
    #[default]
    None,
    /// `d2f/du2` only.
    Control,
    /// All blocks.
    Full,
}

/// Where the Levenberg shift is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    /// `Q_uu + mu I`.
    #[default]
    Control,
    /// `V_xx + mu I` inside `Q_uu` and `Q_ux`, penalizing state deviations.
    State,
}

/// Output of a backward sweep.
#[derive(Debug, Clone)]
pub struct BackwardPass {
    pub feedforward: Vec<DVector<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    /// Sum of `k^T Q_u`; the predicted change for step `a` is `a d1 + a^2/2 d2`.
    pub d1: f64,
    /// Sum of `k^T Q_uu k`.
    pub d2: f64,
}

impl BackwardPass {
    /// Predicted cost change for a step of length `alpha` (negative for descent).
    pub fn predicted_change(&self, alpha: f64) -> f64 {
        alpha * self.d1 + 0.5 * alpha * alpha * self.d2
    }
}

/// One Riccati-like sweep from the terminal stage, shifted by `regularization`
/// as selected by `kind`. Fails with `NotPositiveDefinite` when the shifted control
/// Hessian has no Cholesky factor.
pub fn backward_pass(
    stages: &[StageLinearization],
    terminal_grad: &DVector<f64>,
    terminal_hess: &DMatrix<f64>,
    regularization: f64,
    kind: Regularization,
) -> Result<BackwardPass, SolverError> {
    let n = stages.len();
    let mut vx = terminal_grad.clone();
    let mut vxx = terminal_hess.clone();
    let mut feedforward = vec![DVector::zeros(0); n];
    let mut gains = vec![DMatrix::zeros(0, 0); n];
    let (mut d1, mut d2) = (0.0, 0.0);

    for k in (0..n).rev() {
        let s = &stages[k];
        let fxt_vxx = s.fx.transpose() * &vxx;
        let fut_vxx = s.fu.transpose() * &vxx;
        let qx = &s.lx + s.fx.transpose() * &vx;
        let qu = &s.lu + s.fu.transpose() * &vx;
        let mut qxx = &s.lxx + &fxt_vxx * &s.fx;
        let mut quu = &s.luu + &fut_vxx * &s.fu;
        let mut qux = &s.lux + &fut_vxx * &s.fx;
        if let Some(c) = &s.curvature {
            for (m, h) in c.fuu.iter().enumerate() {
                quu += h * vx[m];
            }
            if let (Some(fxx), Some(fux)) = (&c.fxx, &c.fux) {
                for m in 0..vx.len() {
                    qxx += &fxx[m] * vx[m];
                    qux += &fux[m] * vx[m];
                }
            }
        }

        let nu = quu.nrows();
        let (mut quu_reg, qux_reg) = match kind {
            Regularization::Control => (quu.clone(), qux.clone()),
            Regularization::State => {
                let fut = s.fu.transpose() * regularization;
                (&quu + &fut * &s.fu, &qux + &fut * &s.fx)
            }
        };
        quu_reg = super::symmetrize(&quu_reg);
        if kind == Regularization::Control {
            for i in 0..nu {
                quu_reg[(i, i)] += regularization;
            }
        }
        let chol = quu_reg
            .cholesky()
            .ok_or(SolverError::NotPositiveDefinite { stage: k })?;
        let kff = -chol.solve(&qu);
        let kfb = -chol.solve(&qux_reg);
        if kff.iter().chain(kfb.iter()).any(|v| !v.is_finite()) {
            return Err(SolverError::NotPositiveDefinite { stage: k });
        }

        let quu_k = &quu * &kff;
        d1 += kff.dot(&qu);
        d2 += kff.dot(&quu_k);

        let kt = kfb.transpose();
        vx = &qx + &kt * &quu_k + &kt * &qu + qux.transpose() * &kff;
        let vxx_raw = &qxx + &kt * &quu * &kfb + &kt * &qux + qux.transpose() * &kfb;
        vxx = super::symmetrize(&vxx_raw);

        feedforward[k] = kff;
        gains[k] = kfb;
    }
    Ok(BackwardPass {
        feedforward,
        gains,
        d1,
        d2,
    })
}

/// Retries [`backward_pass`] with growing regularization. Returns the pass and the
/// regularization that succeeded.
pub fn backward_pass_regularized(
    stages: &[StageLinearization],
    terminal_grad: &DVector<f64>,
    terminal_hess: &DMatrix<f64>,
    mut regularization: f64,
    kind: Regularization,
    increase: f64,
    max_regularization: f64,
) -> Result<(BackwardPass, f64), SolverError> {
    loop {
        match backward_pass(stages, terminal_grad, terminal_hess, regularization, kind) {
            Ok(bp) => return Ok((bp, regularization)),
            Err(SolverError::NotPositiveDefinite { .. }) => {
                regularization *= increase;
                if regularization > max_regularization {
                    return Err(SolverError::RegularizationExhausted);
                }
            }
            Err(e) => return Err(e),
        }
    }
}
