//! Deterministic transcription of a stochastic optimal control problem.
//!
//! The belief at stage `k` is carried by `2 nx + 1` state sigma points, each with
//! its own control. Propagation pushes every (state point, noise point) pair
//! through the dynamics, fits a Gaussian to the images and resamples a fresh
//! sigma set from it, so the stacked state keeps a fixed size. The solver sees
//! the stacked points as one long state vector (column-major flattening).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ddp::{self, derivatives, CostExpansion, SecondOrder, SolverError, StageCurvature};
use crate::gaussian::{
    make_sigma_set, moments_from_points, sigma_points_with_jitter, sigma_weights, GaussianError,
    GaussianState, SigmaSet, DEFAULT_KAPPA,
};

/// Jitter added to the scaled covariance before its square root while
/// differentiating the propagation.
pub const DIFFERENTIATION_JITTER: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("radius {radius:.3e} is too close to the central body")]
    SingularRadius { radius: f64 },
    #[error("dynamics produced a non-finite state")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TranscriptionError {
    #[error("dynamics failed at stage {stage}: {source}")]
    DynamicsFailure { stage: usize, source: ModelError },
    #[error("non-finite cost at stage {stage}")]
    CostFailure { stage: usize },
    #[error("non-finite constraint value")]
    ConstraintFailure,
    #[error("{0}")]
    Dimension(String),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

impl From<TranscriptionError> for SolverError {
    fn from(e: TranscriptionError) -> Self {
        SolverError::Model(e.to_string())
    }
}

/// A discrete-time stochastic system `x' = f_k(x, u, w)`, `w ~ N(0, R_k)`, with
/// stage cost `l_k(x, u, w)` and terminal cost `phi(x)`. Stage indices are absolute.
pub trait StochasticModel: Clone + Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn initial_state(&self) -> GaussianState;
    fn noise_cov(&self, k: usize) -> DMatrix<f64>;
    /// Norm bound on the control at full duty.
    fn control_bound(&self) -> f64;

    fn dynamics(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DVector<f64>, ModelError>;

    fn stage_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> f64;

    fn stage_cost_expansion(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<CostExpansion, SolverError> {
        let nx = x.len();
        let z = ddp::concat(x, u);
        let f = |z: &DVector<f64>| {
            let (x, u) = ddp::split(z, nx);
            self.stage_cost(k, &x, &u, w)
        };
        let grad = derivatives::gradient(f, &z, derivatives::JACOBIAN_STEP)?;
        let hess = derivatives::hessian(f, &z, derivatives::HESSIAN_STEP)?;
        Ok(CostExpansion::from_joint(nx, &grad, &hess))
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64;

    fn terminal_cost_expansion(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), SolverError> {
        let f = |x: &DVector<f64>| self.terminal_cost(x);
        Ok((
            derivatives::gradient(f, x, derivatives::JACOBIAN_STEP)?,
            derivatives::hessian(f, x, derivatives::HESSIAN_STEP)?,
        ))
    }

    /// Distance of a final state from the target.
    fn terminal_miss(&self, x: &DVector<f64>) -> f64;

    /// Smoothing levels for continuation, coarse to fine. Empty when the stage
    /// cost needs none.
    fn smoothing_schedule(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Copy of the model whose stage cost uses smoothing `s`.
    fn with_smoothing(&self, _s: f64) -> Self {
        self.clone()
    }

    fn to_physical_state(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn to_physical_control(&self, u: &DVector<f64>) -> DVector<f64> {
        u.clone()
    }
}

/// Settings of the transcription itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranscriptionOptions {
    pub kappa_x: f64,
    pub kappa_w: f64,
    /// Number of standard deviations kept inside the control bound.
    pub sigma_multiplier: f64,
    /// Regularizer inside the square root of the constraint variance.
    pub epsilon: f64,
}

impl Default for TranscriptionOptions {
    fn default() -> Self {
        Self {
            kappa_x: DEFAULT_KAPPA,
            kappa_w: DEFAULT_KAPPA,
            sigma_multiplier: 3.0,
            epsilon: 1e-4,
        }
    }
}

impl TranscriptionOptions {
    pub fn validate(&self) -> Result<(), TranscriptionError> {
        for (name, v) in [
            ("kappa_x", self.kappa_x),
            ("kappa_w", self.kappa_w),
            ("epsilon", self.epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TranscriptionError::Dimension(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.sigma_multiplier >= 0.0 && self.sigma_multiplier.is_finite()) {
            return Err(TranscriptionError::Dimension(format!(
                "sigma_multiplier must be non-negative, got {}",
                self.sigma_multiplier
            )));
        }
        Ok(())
    }
}

/// State sigma points of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedState {
    pub sigma: SigmaSet,
}

impl StackedState {
    pub fn from_gaussian(g: &GaussianState, kappa: f64) -> Result<Self, TranscriptionError> {
        Ok(Self {
            sigma: make_sigma_set(g, kappa)?,
        })
    }

    pub fn from_flat(v: &DVector<f64>, nx: usize, kappa: f64) -> Result<Self, TranscriptionError> {
        if v.len() != nx * (2 * nx + 1) {
            return Err(TranscriptionError::Dimension(format!(
                "stacked state of length {} does not fit nx = {nx}",
                v.len()
            )));
        }
        let points = DMatrix::from_column_slice(nx, 2 * nx + 1, v.as_slice());
        Ok(Self {
            sigma: SigmaSet::from_points(points, kappa)?,
        })
    }

    pub fn flatten(&self) -> DVector<f64> {
        DVector::from_column_slice(self.sigma.points().as_slice())
    }

    pub fn mean(&self) -> DVector<f64> {
        self.sigma.point(0)
    }

    pub fn moments(&self) -> GaussianState {
        self.sigma.moments()
    }
}

/// Controls attached to each state sigma point, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedControl {
    pub controls: DMatrix<f64>,
}

impl StackedControl {
    /// The same control at every sigma point.
    pub fn replicate(u: &DVector<f64>, nx: usize) -> Self {
        let mut controls = DMatrix::zeros(u.len(), 2 * nx + 1);
        for mut c in controls.column_iter_mut() {
            c.copy_from(u);
        }
        Self { controls }
    }

    pub fn from_flat(v: &DVector<f64>, nu: usize) -> Self {
        Self {
            controls: DMatrix::from_column_slice(nu, v.len() / nu.max(1), v.as_slice()),
        }
    }

    pub fn flatten(&self) -> DVector<f64> {
        DVector::from_column_slice(self.controls.as_slice())
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        self.controls.column(i).into_owned()
    }
}

/// Weighted mean plus `m` weighted standard deviations of `values`, with the
/// singularity guard `epsilon` cancelling when the variance vanishes.
fn moment_bound(values: &[f64], weights: &DVector<f64>, multiplier: f64, epsilon: f64) -> (f64, f64, f64) {
    let mean: f64 = values.iter().zip(weights.iter()).map(|(v, c)| c * v).sum();
    let var: f64 = values
        .iter()
        .zip(weights.iter())
        .map(|(v, c)| c * (v - mean) * (v - mean))
        .sum();
    let value = mean + multiplier * (var + epsilon).sqrt() - multiplier * epsilon.sqrt();
    (value, mean, var)
}

/// `E[c] + m sqrt(V[c] + eps) - m sqrt(eps)` over the sigma-point controls.
pub fn chance_constraint_general<C>(
    c: C,
    controls: &DMatrix<f64>,
    weights: &DVector<f64>,
    multiplier: f64,
    epsilon: f64,
) -> Result<f64, TranscriptionError>
where
    C: Fn(&DVector<f64>) -> f64,
{
    if controls.ncols() != weights.len() {
        return Err(TranscriptionError::Dimension(format!(
            "{} controls but {} weights",
            controls.ncols(),
            weights.len()
        )));
    }
    let values: Vec<f64> = controls.column_iter().map(|u| c(&u.into_owned())).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(TranscriptionError::ConstraintFailure);
    }
    Ok(moment_bound(&values, weights, multiplier, epsilon).0)
}

/// Chance-constrained form of `|u|^2 <= u_ub^2`; feasible when non-positive.
pub fn chance_constraint_norm2(
    controls: &DMatrix<f64>,
    weights: &DVector<f64>,
    u_ub: f64,
    multiplier: f64,
    epsilon: f64,
) -> f64 {
    let b2 = u_ub * u_ub;
    let values: Vec<f64> = controls.column_iter().map(|u| u.norm_squared() - b2).collect();
    moment_bound(&values, weights, multiplier, epsilon).0
}

/// Gradient of [`chance_constraint_norm2`] w.r.t. the column-major flattened controls.
pub fn chance_constraint_norm2_gradient(
    controls: &DMatrix<f64>,
    weights: &DVector<f64>,
    u_ub: f64,
    multiplier: f64,
    epsilon: f64,
) -> DVector<f64> {
    let b2 = u_ub * u_ub;
    let values: Vec<f64> = controls.column_iter().map(|u| u.norm_squared() - b2).collect();
    let (_, mean, var) = moment_bound(&values, weights, multiplier, epsilon);
    let root = (var + epsilon).sqrt();
    let nu = controls.nrows();
    let mut grad = DVector::zeros(controls.len());
    for (i, u) in controls.column_iter().enumerate() {
        let dv = weights[i] * (1.0 + multiplier * (values[i] - mean) / root);
        grad.rows_mut(i * nu, nu).copy_from(&(u * (2.0 * dv)));
    }
    grad
}

/// Hessian of [`chance_constraint_norm2`] w.r.t. the flattened controls.
pub fn chance_constraint_norm2_hessian(
    controls: &DMatrix<f64>,
    weights: &DVector<f64>,
    u_ub: f64,
    multiplier: f64,
    epsilon: f64,
) -> DMatrix<f64> {
    let b2 = u_ub * u_ub;
    let values: Vec<f64> = controls.column_iter().map(|u| u.norm_squared() - b2).collect();
    let (_, mean, var) = moment_bound(&values, weights, multiplier, epsilon);
    let root = (var + epsilon).sqrt();
    let nu = controls.nrows();
    let n = controls.len();
    // Per-point value gradients g_i = 2 U_i, embedded in the flat vector.
    let mut g = DMatrix::zeros(n, controls.ncols());
    for (i, u) in controls.column_iter().enumerate() {
        g.view_mut((i * nu, i), (nu, 1)).copy_from(&(u * 2.0));
    }
    let de = &g * weights;
    let mut dv = DVector::zeros(n);
    let mut hv = -(&de * de.transpose()) * 2.0;
    for i in 0..controls.ncols() {
        let gi = g.column(i);
        let d = values[i] - mean;
        dv.axpy(2.0 * weights[i] * d, &gi, 1.0);
        hv.ger(2.0 * weights[i], &gi, &gi, 1.0);
        for r in 0..nu {
            hv[(i * nu + r, i * nu + r)] += 4.0 * weights[i] * d;
        }
    }
    let mut h = hv / (2.0 * root) - (&dv * dv.transpose()) / (4.0 * root.powi(3));
    h *= multiplier;
    for i in 0..controls.ncols() {
        for r in 0..nu {
            h[(i * nu + r, i * nu + r)] += 2.0 * weights[i];
        }
    }
    h
}

/// A stochastic problem over stages `offset..offset + horizon` of a model, ready
/// for the solver. Implements [`ddp::Problem`] on the stacked variables.
#[derive(Debug, Clone)]
pub struct StochasticProblem<M> {
    pub model: M,
    pub offset: usize,
    pub init: GaussianState,
    pub options: TranscriptionOptions,
    /// Control norm bound per local stage; `None` leaves the stage unconstrained.
    pub bounds: Vec<Option<f64>>,
    noise: Vec<SigmaSet>,
    weights: DVector<f64>,
}

impl<M: StochasticModel> StochasticProblem<M> {
    /// The full-horizon problem with the model's own initial belief and bound.
    pub fn new(model: M, options: TranscriptionOptions) -> Result<Self, TranscriptionError> {
        let init = model.initial_state();
        let n = model.horizon();
        Self::remaining(model, 0, n, init, options)
    }

    /// Stages `offset..offset + horizon` starting from `init`, bounded at full duty.
    pub fn remaining(
        model: M,
        offset: usize,
        horizon: usize,
        init: GaussianState,
        options: TranscriptionOptions,
    ) -> Result<Self, TranscriptionError> {
        options.validate()?;
        let nx = model.state_dim();
        if horizon == 0 || offset + horizon > model.horizon() {
            return Err(TranscriptionError::Dimension(format!(
                "stages {offset}..{} exceed the model horizon {}",
                offset + horizon,
                model.horizon()
            )));
        }
        if init.dim() != nx {
            return Err(TranscriptionError::Dimension(format!(
                "initial belief has dimension {}, model state {nx}",
                init.dim()
            )));
        }
        let mut noise = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let r = model.noise_cov(offset + k);
            let g = GaussianState::new(DVector::zeros(model.noise_dim()), r)?;
            noise.push(make_sigma_set(&g, options.kappa_w)?);
        }
        let weights = sigma_weights(nx, options.kappa_x)?;
        let bound = model.control_bound();
        Ok(Self {
            model,
            offset,
            init,
            options,
            bounds: vec![Some(bound); horizon],
            noise,
            weights,
        })
    }

    /// Tightens every bound to `duty` times the full bound; the first stage keeps
    /// the full bound when `first_stage_full` is set.
    pub fn with_duty(mut self, duty: f64, first_stage_full: bool) -> Self {
        let full = self.model.control_bound();
        for (k, b) in self.bounds.iter_mut().enumerate() {
            *b = Some(if k == 0 && first_stage_full { full } else { duty * full });
        }
        self
    }

    pub fn horizon(&self) -> usize {
        self.bounds.len()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn noise_set(&self, k: usize) -> &SigmaSet {
        &self.noise[k]
    }

    pub fn initial_stacked(&self) -> Result<StackedState, TranscriptionError> {
        StackedState::from_gaussian(&self.init, self.options.kappa_x)
    }

    fn points_of(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let nx = self.model.state_dim();
        DMatrix::from_column_slice(nx, 2 * nx + 1, x.as_slice())
    }

    fn controls_of(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let nx = self.model.state_dim();
        DMatrix::from_column_slice(self.model.control_dim(), 2 * nx + 1, u.as_slice())
    }

    /// Mean and covariance of the next state before resampling.
    pub fn propagate_moments(
        &self,
        k: usize,
        points: &DMatrix<f64>,
        controls: &DMatrix<f64>,
    ) -> Result<GaussianState, TranscriptionError> {
        let nx = self.model.state_dim();
        let stage = self.offset + k;
        let noise = &self.noise[k];
        let np = points.ncols();
        let nw = noise.len();
        let mut images = DMatrix::zeros(nx, np * nw);
        let mut weights = DVector::zeros(np * nw);
        for i in 0..np {
            let x = points.column(i).into_owned();
            let u = controls.column(i).into_owned();
            for j in 0..nw {
                let y = self
                    .model
                    .dynamics(stage, &x, &u, &noise.point(j))
                    .map_err(|source| TranscriptionError::DynamicsFailure { stage, source })?;
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(TranscriptionError::DynamicsFailure {
                        stage,
                        source: ModelError::NonFinite,
                    });
                }
                images.set_column(i * nw + j, &y);
                weights[i * nw + j] = self.weights[i] * noise.weights()[j];
            }
        }
        Ok(moments_from_points(&images, &weights)?)
    }

    fn propagate_points(
        &self,
        k: usize,
        points: &DMatrix<f64>,
        controls: &DMatrix<f64>,
        jitter: f64,
    ) -> Result<DMatrix<f64>, TranscriptionError> {
        let next = self.propagate_moments(k, points, controls)?;
        Ok(sigma_points_with_jitter(
            next.mean(),
            next.cov(),
            self.options.kappa_x,
            jitter,
        )?)
    }

    /// Jacobian of the stacked step with respect to `[x; u]` and, when `second`
    /// is set, one Hessian per output. Per-point dynamics are differenced; the
    /// moment and square-root stages are differentiated exactly.
    #[allow(clippy::type_complexity)]
    fn stage_derivatives(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        second: bool,
    ) -> Result<(DMatrix<f64>, Option<Vec<DMatrix<f64>>>), SolverError> {
        let n = self.model.state_dim();
        let nu = self.model.control_dim();
        let np = 2 * n + 1;
        let nz = (n + nu) * np;
        let stage = self.offset + k;
        let noise = &self.noise[k];
        let points = self.points_of(x);
        let controls = self.controls_of(u);
        let scale = self.model.control_bound();
        let mut floors = vec![1.0; n];
        floors.resize(n + nu, scale);

        struct Image {
            owner: usize,
            weight: f64,
            y: DVector<f64>,
            jac: DMatrix<f64>,
            hess: Vec<DMatrix<f64>>,
        }
        let mut images = Vec::with_capacity(np * noise.len());
        for i in 0..np {
            let xi = points.column(i).into_owned();
            let ui = controls.column(i).into_owned();
            for j in 0..noise.len() {
                let w = noise.point(j);
                let g = |z: &DVector<f64>| -> Result<DVector<f64>, SolverError> {
                    let y = self
                        .model
                        .dynamics(stage, &z.rows(0, n).into_owned(), &z.rows(n, nu).into_owned(), &w)
                        .map_err(|source| TranscriptionError::DynamicsFailure { stage, source })?;
                    if y.iter().any(|v| !v.is_finite()) {
                        return Err(TranscriptionError::DynamicsFailure {
                            stage,
                            source: ModelError::NonFinite,
                        }
                        .into());
                    }
                    Ok(y)
                };
                let mut z = DVector::zeros(n + nu);
                z.rows_mut(0, n).copy_from(&xi);
                z.rows_mut(n, nu).copy_from(&ui);
                let y = g(&z)?;
                let jx = derivatives::jacobian(
                    |xx| {
                        let mut zz = z.clone();
                        zz.rows_mut(0, n).copy_from(xx);
                        g(&zz)
                    },
                    &xi,
                    derivatives::JACOBIAN_STEP,
                )?;
                let ju = derivatives::jacobian_scaled(
                    |uu| {
                        let mut zz = z.clone();
                        zz.rows_mut(n, nu).copy_from(uu);
                        g(&zz)
                    },
                    &ui,
                    derivatives::JACOBIAN_STEP,
                    scale,
                )?;
                let mut jac = DMatrix::zeros(n, n + nu);
                jac.columns_mut(0, n).copy_from(&jx);
                jac.columns_mut(n, nu).copy_from(&ju);
                let hess = if second {
                    derivatives::hessian_tensor(&g, &z, derivatives::HESSIAN_STEP, &floors)?
                } else {
                    Vec::new()
                };
                images.push(Image {
                    owner: i,
                    weight: self.weights[i] * noise.weights()[j],
                    y,
                    jac,
                    hess,
                });
            }
        }
        let index = |i: usize| -> Vec<usize> {
            (0..n).map(|r| i * n + r).chain((0..nu).map(|r| n * np + i * nu + r)).collect()
        };
        let owners: Vec<Vec<usize>> = (0..np).map(index).collect();

        let mut mean = DVector::zeros(n);
        for im in &images {
            mean += &im.y * im.weight;
        }
        let dev: Vec<DVector<f64>> = images.iter().map(|im| &im.y - &mean).collect();
        let mut cov = DMatrix::zeros(n, n);
        for (im, d) in images.iter().zip(&dev) {
            cov += d * d.transpose() * im.weight;
        }

        // Moment coordinates: the mean, then the upper triangle of the covariance.
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|r| (r..n).map(move |s| (r, s))).collect();
        let mut jmean = DMatrix::zeros(n, nz);
        for im in &images {
            for (l, &g) in owners[im.owner].iter().enumerate() {
                for r in 0..n {
                    jmean[(r, g)] += im.weight * im.jac[(r, l)];
                }
            }
        }
        let mut jcov = DMatrix::zeros(pairs.len(), nz);
        for (im, d) in images.iter().zip(&dev) {
            for (c, &(r, s)) in pairs.iter().enumerate() {
                for (l, &g) in owners[im.owner].iter().enumerate() {
                    jcov[(c, g)] += im.weight * (d[s] * im.jac[(r, l)] + d[r] * im.jac[(s, l)]);
                }
            }
        }

        let spread = n as f64 + self.options.kappa_x;
        let mut scaled = &cov * spread;
        for i in 0..n {
            scaled[(i, i)] += DIFFERENTIATION_JITTER;
        }
        let sq = crate::gaussian::SqrtDerivatives::new(&scaled).map_err(TranscriptionError::from)?;
        let basis: Vec<DMatrix<f64>> = pairs
            .iter()
            .map(|&(r, s)| {
                let mut e = DMatrix::zeros(n, n);
                e[(r, s)] = spread;
                e[(s, r)] = spread;
                e
            })
            .collect();
        let droot: Vec<DMatrix<f64>> = basis.iter().map(|e| sq.first(e)).collect();

        // Output (row r, column c) of the resampled points is mean[r] + sign * root[(r, col)].
        let outputs: Vec<(usize, Option<(usize, f64)>)> = (0..np)
            .flat_map(|c| {
                (0..n).map(move |r| {
                    let col = match c {
                        0 => None,
                        c if c <= n => Some((c - 1, 1.0)),
                        c => Some((c - 1 - n, -1.0)),
                    };
                    (r, col)
                })
            })
            .collect();
        let mut fz = DMatrix::zeros(n * np, nz);
        for (m, &(r, col)) in outputs.iter().enumerate() {
            let mut row = jmean.row(r).into_owned();
            if let Some((j, sign)) = col {
                for (c, dr) in droot.iter().enumerate() {
                    row += jcov.row(c) * (sign * dr[(r, j)]);
                }
            }
            fz.set_row(m, &row);
        }
        if !second {
            return Ok((fz, None));
        }

        let scatter = |h: &mut DMatrix<f64>, local: &DMatrix<f64>, idx: &[usize], w: f64| {
            for (a, &ga) in idx.iter().enumerate() {
                for (b, &gb) in idx.iter().enumerate() {
                    h[(ga, gb)] += w * local[(a, b)];
                }
            }
        };
        let hmean: Vec<DMatrix<f64>> = (0..n)
            .map(|r| {
                let mut h = DMatrix::zeros(nz, nz);
                for im in &images {
                    scatter(&mut h, &im.hess[r], &owners[im.owner], im.weight);
                }
                h
            })
            .collect();
        let hcov: Vec<DMatrix<f64>> = pairs
            .iter()
            .map(|&(r, s)| {
                let mut h = DMatrix::zeros(nz, nz);
                for (im, d) in images.iter().zip(&dev) {
                    let jr = im.jac.row(r);
                    let js = im.jac.row(s);
                    let local = jr.transpose() * js + js.transpose() * jr + &im.hess[s] * d[r] + &im.hess[r] * d[s];
                    scatter(&mut h, &local, &owners[im.owner], im.weight);
                }
                let mr = jmean.row(r);
                let ms = jmean.row(s);
                h - mr.transpose() * ms - ms.transpose() * mr
            })
            .collect();
        let nq = pairs.len();
        let mut d2root = vec![vec![DMatrix::zeros(0, 0); nq]; nq];
        for a in 0..nq {
            for b in a..nq {
                let m = sq.second(&basis[a], &basis[b]);
                d2root[b][a] = m.clone();
                d2root[a][b] = m;
            }
        }
        let mut hessians = Vec::with_capacity(outputs.len());
        for &(r, col) in &outputs {
            let mut h = hmean[r].clone();
            if let Some((j, sign)) = col {
                for (c, dr) in droot.iter().enumerate() {
                    h += &hcov[c] * (sign * dr[(r, j)]);
                }
                let inner = DMatrix::from_fn(nq, nq, |a, b| sign * d2root[a][b][(r, j)]);
                h += jcov.transpose() * inner * &jcov;
            }
            hessians.push(h);
        }
        Ok((fz, Some(hessians)))
    }

    /// One transcribed step: propagate every sigma pair and resample.
    pub fn propagate(
        &self,
        k: usize,
        x: &StackedState,
        u: &StackedControl,
    ) -> Result<StackedState, TranscriptionError> {
        self.check_stage(k, x, u)?;
        let points = self.propagate_points(k, x.sigma.points(), &u.controls, 0.0)?;
        Ok(StackedState {
            sigma: SigmaSet::from_points(points, self.options.kappa_x)?,
        })
    }

    fn check_stage(&self, k: usize, x: &StackedState, u: &StackedControl) -> Result<(), TranscriptionError> {
        let nx = self.model.state_dim();
        if k >= self.horizon() {
            return Err(TranscriptionError::Dimension(format!("stage {k} is past the horizon")));
        }
        if x.sigma.dim() != nx
            || u.controls.nrows() != self.model.control_dim()
            || u.controls.ncols() != 2 * nx + 1
        {
            return Err(TranscriptionError::Dimension("stacked dimensions do not match the model".into()));
        }
        Ok(())
    }

    /// `L_k = sum_i sum_j c_i c_j l_k(X_i, U_i, W_j)`.
    pub fn expected_stage_cost(
        &self,
        k: usize,
        x: &StackedState,
        u: &StackedControl,
    ) -> Result<f64, TranscriptionError> {
        self.check_stage(k, x, u)?;
        let v = self.stage_cost_points(k, x.sigma.points(), &u.controls);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TranscriptionError::CostFailure { stage: self.offset + k })
        }
    }

    fn stage_cost_points(&self, k: usize, points: &DMatrix<f64>, controls: &DMatrix<f64>) -> f64 {
        let stage = self.offset + k;
        let noise = &self.noise[k];
        let mut total = 0.0;
        for i in 0..points.ncols() {
            let x = points.column(i).into_owned();
            let u = controls.column(i).into_owned();
            let mut inner = 0.0;
            for j in 0..noise.len() {
                inner += noise.weights()[j] * self.model.stage_cost(stage, &x, &u, &noise.point(j));
            }
            total += self.weights[i] * inner;
        }
        total
    }

    /// `Phi = sum_i c_i phi(X_i)`.
    pub fn expected_terminal_cost(&self, x: &StackedState) -> Result<f64, TranscriptionError> {
        let v = self.terminal_cost_points(x.sigma.points());
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TranscriptionError::CostFailure {
                stage: self.offset + self.horizon(),
            })
        }
    }

    fn terminal_cost_points(&self, points: &DMatrix<f64>) -> f64 {
        points
            .column_iter()
            .zip(self.weights.iter())
            .map(|(x, c)| c * self.model.terminal_cost(&x.into_owned()))
            .sum()
    }

    /// `J_D`: expected stage costs plus expected terminal cost.
    pub fn total_objective(
        &self,
        xs: &[StackedState],
        us: &[StackedControl],
    ) -> Result<f64, TranscriptionError> {
        if xs.len() != self.horizon() + 1 || us.len() != self.horizon() {
            return Err(TranscriptionError::Dimension(format!(
                "expected {} states and {} controls",
                self.horizon() + 1,
                self.horizon()
            )));
        }
        let mut j = 0.0;
        for k in 0..self.horizon() {
            j += self.expected_stage_cost(k, &xs[k], &us[k])?;
        }
        Ok(j + self.expected_terminal_cost(&xs[self.horizon()])?)
    }

    /// Chance-constrained control bound of stage `k` (zero bound when unconstrained).
    pub fn chance_constraint(&self, k: usize, u: &StackedControl) -> Option<f64> {
        self.bounds[k].map(|b| {
            chance_constraint_norm2(
                &u.controls,
                &self.weights,
                b,
                self.options.sigma_multiplier,
                self.options.epsilon,
            )
        })
    }

    /// Rolls the stacked dynamics forward from the initial belief.
    pub fn rollout(&self, us: &[StackedControl]) -> Result<Vec<StackedState>, TranscriptionError> {
        let mut xs = vec![self.initial_stacked()?];
        for (k, u) in us.iter().enumerate() {
            let next = self.propagate(k, &xs[k], u)?;
            xs.push(next);
        }
        Ok(xs)
    }
}

impl<M: StochasticModel> ddp::Problem for StochasticProblem<M> {
    fn state_dim(&self) -> usize {
        let nx = self.model.state_dim();
        nx * (2 * nx + 1)
    }

    fn control_dim(&self) -> usize {
        let nx = self.model.state_dim();
        self.model.control_dim() * (2 * nx + 1)
    }

    fn horizon(&self) -> usize {
        self.bounds.len()
    }

    fn initial_state(&self) -> DVector<f64> {
        self.initial_stacked()
            .map(|s| s.flatten())
            .unwrap_or_else(|_| DVector::from_element(ddp::Problem::state_dim(self), f64::NAN))
    }

    fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
        let points = self.propagate_points(k, &self.points_of(x), &self.controls_of(u), 0.0)?;
        Ok(DVector::from_column_slice(points.as_slice()))
    }

    fn step_jacobians(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), SolverError> {
        let (fz, _) = self.stage_derivatives(k, x, u, false)?;
        let nx = x.len();
        Ok((fz.columns(0, nx).into_owned(), fz.columns(nx, u.len()).into_owned()))
    }

    fn step_hessians(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        order: SecondOrder,
    ) -> Result<Option<StageCurvature>, SolverError> {
        if order == SecondOrder::None {
            return Ok(None);
        }
        let (_, joint) = self.stage_derivatives(k, x, u, true)?;
        let mut c = ddp::split_curvature(joint.unwrap_or_default(), x.len(), u.len());
        if order == SecondOrder::Control {
            c.fxx = None;
            c.fux = None;
        }
        Ok(Some(c))
    }

    fn control_scale(&self) -> f64 {
        self.model.control_bound()
    }

    fn stage_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.stage_cost_points(k, &self.points_of(x), &self.controls_of(u))
    }

    fn stage_cost_expansion(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<CostExpansion, SolverError> {
        let nx = self.model.state_dim();
        let nu = self.model.control_dim();
        let stage = self.offset + k;
        let points = self.points_of(x);
        let controls = self.controls_of(u);
        let noise = &self.noise[k];
        let mut e = CostExpansion::zeros(x.len(), u.len());
        for i in 0..points.ncols() {
            let xi = points.column(i).into_owned();
            let ui = controls.column(i).into_owned();
            for j in 0..noise.len() {
                let c = self.weights[i] * noise.weights()[j];
                let p = self.model.stage_cost_expansion(stage, &xi, &ui, &noise.point(j))?;
                let (xo, uo) = (i * nx, i * nu);
                e.lx.rows_mut(xo, nx).axpy(c, &p.lx, 1.0);
                e.lu.rows_mut(uo, nu).axpy(c, &p.lu, 1.0);
                let mut b = e.lxx.view_mut((xo, xo), (nx, nx));
                b += p.lxx * c;
                let mut b = e.luu.view_mut((uo, uo), (nu, nu));
                b += p.luu * c;
                let mut b = e.lux.view_mut((uo, xo), (nu, nx));
                b += p.lux * c;
            }
        }
        Ok(e)
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        self.terminal_cost_points(&self.points_of(x))
    }

    fn terminal_cost_expansion(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), SolverError> {
        let nx = self.model.state_dim();
        let points = self.points_of(x);
        let mut g = DVector::zeros(x.len());
        let mut h = DMatrix::zeros(x.len(), x.len());
        for i in 0..points.ncols() {
            let (gi, hi) = self.model.terminal_cost_expansion(&points.column(i).into_owned())?;
            let c = self.weights[i];
            g.rows_mut(i * nx, nx).axpy(c, &gi, 1.0);
            let mut b = h.view_mut((i * nx, i * nx), (nx, nx));
            b += hi * c;
        }
        Ok((g, h))
    }

    fn constraint_count(&self, k: usize) -> usize {
        usize::from(self.bounds[k].is_some())
    }

    /// The chance constraint divided by the squared bound, so its scale does not
    /// depend on the units of the control.
    fn constraints(&self, k: usize, u: &DVector<f64>) -> DVector<f64> {
        match self.bounds[k] {
            Some(b) => {
                let c = chance_constraint_norm2(
                    &self.controls_of(u),
                    &self.weights,
                    b,
                    self.options.sigma_multiplier,
                    self.options.epsilon,
                );
                DVector::from_element(1, c / (b * b))
            }
            None => DVector::zeros(0),
        }
    }

    fn constraint_jacobian(&self, k: usize, u: &DVector<f64>) -> Result<DMatrix<f64>, SolverError> {
        match self.bounds[k] {
            Some(b) => {
                let g = chance_constraint_norm2_gradient(
                    &self.controls_of(u),
                    &self.weights,
                    b,
                    self.options.sigma_multiplier,
                    self.options.epsilon,
                );
                Ok(DMatrix::from_row_slice(1, g.len(), (g / (b * b)).as_slice()))
            }
            None => Ok(DMatrix::zeros(0, u.len())),
        }
    }

    fn constraint_hessians(&self, k: usize, u: &DVector<f64>) -> Result<Vec<DMatrix<f64>>, SolverError> {
        match self.bounds[k] {
            Some(b) => {
                let h = chance_constraint_norm2_hessian(
                    &self.controls_of(u),
                    &self.weights,
                    b,
                    self.options.sigma_multiplier,
                    self.options.epsilon,
                );
                Ok(vec![h / (b * b)])
            }
            None => Ok(vec![]),
        }
    }
}

/// The noise-free core of a model: `w = 0`, point initial state, and the
/// constraint `|u|^2 <= b^2` per stage (also divided by `b^2`).
#[derive(Debug, Clone)]
pub struct DeterministicProblem<M> {
    pub model: M,
    pub offset: usize,
    pub x0: DVector<f64>,
    pub bounds: Vec<Option<f64>>,
}

impl<M: StochasticModel> DeterministicProblem<M> {
    pub fn new(model: M) -> Self {
        let x0 = model.initial_state().mean().clone();
        let n = model.horizon();
        Self::remaining(model, 0, n, x0)
    }

    pub fn remaining(model: M, offset: usize, horizon: usize, x0: DVector<f64>) -> Self {
        let bound = model.control_bound();
        Self {
            model,
            offset,
            x0,
            bounds: vec![Some(bound); horizon],
        }
    }

    pub fn with_duty(mut self, duty: f64, first_stage_full: bool) -> Self {
        let full = self.model.control_bound();
        for (k, b) in self.bounds.iter_mut().enumerate() {
            *b = Some(if k == 0 && first_stage_full { full } else { duty * full });
        }
        self
    }

    fn zero_noise(&self) -> DVector<f64> {
        DVector::zeros(self.model.noise_dim())
    }
}

impl<M: StochasticModel> ddp::Problem for DeterministicProblem<M> {
    fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.model.control_dim()
    }

    fn horizon(&self) -> usize {
        self.bounds.len()
    }

    fn initial_state(&self) -> DVector<f64> {
        self.x0.clone()
    }

    fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
        self.model
            .dynamics(self.offset + k, x, u, &self.zero_noise())
            .map_err(|e| SolverError::Model(e.to_string()))
    }

    fn stage_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.model.stage_cost(self.offset + k, x, u, &self.zero_noise())
    }

    fn stage_cost_expansion(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<CostExpansion, SolverError> {
        self.model
            .stage_cost_expansion(self.offset + k, x, u, &self.zero_noise())
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        self.model.terminal_cost(x)
    }

    fn terminal_cost_expansion(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), SolverError> {
        self.model.terminal_cost_expansion(x)
    }

    fn constraint_count(&self, k: usize) -> usize {
        usize::from(self.bounds[k].is_some())
    }

    fn constraints(&self, k: usize, u: &DVector<f64>) -> DVector<f64> {
        match self.bounds[k] {
            Some(b) => DVector::from_element(1, (u.norm_squared() - b * b) / (b * b)),
            None => DVector::zeros(0),
        }
    }

    fn constraint_jacobian(&self, k: usize, u: &DVector<f64>) -> Result<DMatrix<f64>, SolverError> {
        match self.bounds[k] {
            Some(b) => Ok(DMatrix::from_row_slice(1, u.len(), (u * (2.0 / (b * b))).as_slice())),
            None => Ok(DMatrix::zeros(0, u.len())),
        }
    }

    fn constraint_hessians(&self, k: usize, u: &DVector<f64>) -> Result<Vec<DMatrix<f64>>, SolverError> {
        match self.bounds[k] {
            Some(b) => Ok(vec![DMatrix::identity(u.len(), u.len()) * (2.0 / (b * b))]),
            None => Ok(vec![]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w3() -> DVector<f64> {
        sigma_weights(1, 2.0).unwrap()
    }

    #[test]
    fn norm2_zero_variance_is_plain_bound() {
        let u = DMatrix::from_element(1, 3, 0.7);
        let c = chance_constraint_norm2(&u, &w3(), 1.0, 3.0, 1e-4);
        assert!((c - (0.49 - 1.0)).abs() < 1e-15);
        let z = DMatrix::zeros(2, 5);
        let c = chance_constraint_norm2(&z, &sigma_weights(2, 2.0).unwrap(), 2.0, 3.0, 1e-4);
        assert!((c + 4.0).abs() < 1e-15);
    }

    #[test]
    fn norm2_hand_example() {
        let u = DMatrix::from_row_slice(1, 3, &[0.5, 0.8, 0.2]);
        let c = chance_constraint_norm2(&u, &w3(), 1.0, 3.0, 1e-4);
        // E = 0.28, V = 0.0318.
        let expected = 0.28 + 3.0 * (0.0318_f64 + 1e-4).sqrt() - 0.03 - 1.0;
        assert!((c - expected).abs() < 1e-12);
    }

    #[test]
    fn general_matches_norm2_bitwise() {
        let u = DMatrix::from_row_slice(2, 5, &[0.3, 0.1, -0.4, 0.9, 0.2, 0.0, 0.5, 0.25, -0.6, 0.1]);
        let w = sigma_weights(2, 2.0).unwrap();
        let b: f64 = 0.8;
        let g = chance_constraint_general(|u| u.norm_squared() - b * b, &u, &w, 3.0, 1e-4).unwrap();
        assert_eq!(g, chance_constraint_norm2(&u, &w, b, 3.0, 1e-4));
    }

    #[test]
    fn general_linear_hand_example() {
        let u = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, -1.0]);
        let c = chance_constraint_general(|u| u[0], &u, &w3(), 3.0, 1e-4).unwrap();
        let expected = 3.0 * (1.0_f64 / 3.0 + 1e-4).sqrt() - 3.0 * 1e-2;
        assert!((c - expected).abs() < 1e-14);
    }

    #[test]
    fn general_reports_non_finite() {
        let u = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, -1.0]);
        let res = chance_constraint_general(|_| f64::NAN, &u, &w3(), 3.0, 1e-4);
        assert!(matches!(res, Err(TranscriptionError::ConstraintFailure)));
    }

    #[test]
    fn norm2_gradient_matches_finite_differences() {
        let u = DMatrix::from_row_slice(2, 5, &[0.3, 0.1, -0.4, 0.9, 0.2, 0.0, 0.5, 0.25, -0.6, 0.1]);
        let w = sigma_weights(2, 2.0).unwrap();
        let g = chance_constraint_norm2_gradient(&u, &w, 0.8, 3.0, 1e-4);
        let flat = DVector::from_column_slice(u.as_slice());
        let fd = derivatives::gradient(
            |v| chance_constraint_norm2(&DMatrix::from_column_slice(2, 5, v.as_slice()), &w, 0.8, 3.0, 1e-4),
            &flat,
            1e-6,
        )
        .unwrap();
        assert!((g - fd).norm() < 1e-7);
    }

    #[test]
    fn norm2_hessian_matches_finite_differences() {
        let u = DMatrix::from_row_slice(2, 5, &[0.3, 0.1, -0.4, 0.9, 0.2, 0.0, 0.5, 0.25, -0.6, 0.1]);
        let w = sigma_weights(2, 2.0).unwrap();
        let h = chance_constraint_norm2_hessian(&u, &w, 0.8, 3.0, 1e-4);
        let flat = DVector::from_column_slice(u.as_slice());
        let fd = derivatives::jacobian(
            |v| Ok(chance_constraint_norm2_gradient(&DMatrix::from_column_slice(2, 5, v.as_slice()), &w, 0.8, 3.0, 1e-4)),
            &flat,
            1e-6,
        )
        .unwrap();
        assert!((&h - &fd).norm() < 1e-6 * fd.norm().max(1.0), "{}", (&h - &fd).norm());
        assert!((&h - h.transpose()).norm() < 1e-12);
    }
}
