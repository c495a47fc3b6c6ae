//! Gaussian beliefs, symmetric matrix square roots and the unscented transform.
//!
//! Sigma sets follow the classic symmetric `2n + 1` layout: column 0 is the
//! mean, columns `1..=n` are `mean + s_j` and columns `n+1..=2n` are
//! `mean - s_j`, where `s_j` is the j-th column of `sqrt((n + kappa) P)`.
//! The square root is the symmetric one computed by eigendecomposition.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance on `|M - M^T|` accepted as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues down to `-PSD_TOL * lambda_max` are treated as numerical jitter.
pub const PSD_TOL: f64 = 1e-10;
/// Default unscented transform parameter.
pub const DEFAULT_KAPPA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaussianError {
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:.3e}, largest {largest:.3e})")]
    NotPsd { eigenvalue: f64, largest: f64 },
    #[error("{points} points but {weights} weights")]
    WeightMismatch { points: usize, weights: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("kappa must be positive and finite, got {0}")]
    InvalidKappa(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// A Gaussian belief `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianState {
    /// Validates symmetry and semidefiniteness of `cov`.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, GaussianError> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(GaussianError::DimensionMismatch {
                expected: n,
                got: cov.nrows().max(cov.ncols()),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(GaussianError::NonFinite("mean"));
        }
        check_symmetric(&cov)?;
        check_psd(&cov)?;
        Ok(Self { mean, cov })
    }

    /// A point mass at `mean` (zero covariance).
    pub fn degenerate(mean: DVector<f64>) -> Self {
        let n = mean.len();
        Self {
            mean,
            cov: DMatrix::zeros(n, n),
        }
    }

    /// Builds without validation; `cov` is symmetrized.
    pub(crate) fn from_parts_unchecked(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        let cov = symmetrize(&cov);
        Self { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>) {
        (self.mean, self.cov)
    }
}

/// Weighted sigma points of a Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSet {
    points: DMatrix<f64>,
    weights: DVector<f64>,
    kappa: f64,
}

impl SigmaSet {
    /// Wraps an explicit point matrix with the standard weights for `kappa`.
    pub fn from_points(points: DMatrix<f64>, kappa: f64) -> Result<Self, GaussianError> {
        let n = points.nrows();
        if points.ncols() != 2 * n + 1 {
            return Err(GaussianError::WeightMismatch {
                points: points.ncols(),
                weights: 2 * n + 1,
            });
        }
        let weights = sigma_weights(n, kappa)?;
        Ok(Self {
            points,
            weights,
            kappa,
        })
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        self.points.column(i).into_owned()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Weighted mean and scatter of the points.
    pub fn moments(&self) -> GaussianState {
        // Lengths agree by construction.
        moments_from_points(&self.points, &self.weights).expect("sigma set weights match points")
    }

    pub fn into_points(self) -> DMatrix<f64> {
        self.points
    }
}

/// Returns `(M + M^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<(), GaussianError> {
    if m.nrows() != m.ncols() {
        return Err(GaussianError::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GaussianError::NonFinite("matrix"));
    }
    let scale = max_abs(m);
    if scale == 0.0 {
        return Ok(());
    }
    let asym = max_abs(&(m - m.transpose())) / scale;
    if asym > SYMMETRY_TOL {
        return Err(GaussianError::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

fn check_psd(m: &DMatrix<f64>) -> Result<(), GaussianError> {
    if m.nrows() == 0 {
        return Ok(());
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let largest = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let smallest = eig.eigenvalues.min();
    if smallest < -PSD_TOL * largest {
        return Err(GaussianError::NotPsd {
            eigenvalue: smallest,
            largest,
        });
    }
    Ok(())
}

/// Symmetric square root `S = V diag(sqrt(max(lambda, 0))) V^T` of a PSD matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, GaussianError> {
    check_symmetric(m)?;
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let largest = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let smallest = eig.eigenvalues.min();
    if smallest < -PSD_TOL * largest {
        return Err(GaussianError::NotPsd {
            eigenvalue: smallest,
            largest,
        });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, r) in roots.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*r);
    }
    Ok(symmetrize(&(scaled * v.transpose())))
}

/// First and second directional derivatives of the square root at a positive
/// definite matrix, from divided differences of `sqrt` over its eigenvalues.
#[derive(Debug, Clone)]
pub struct SqrtDerivatives {
    v: DMatrix<f64>,
    roots: DVector<f64>,
    pub root: DMatrix<f64>,
}

impl SqrtDerivatives {
    pub fn new(a: &DMatrix<f64>) -> Result<Self, GaussianError> {
        check_symmetric(a)?;
        let eig = SymmetricEigen::new(symmetrize(a));
        let smallest = eig.eigenvalues.min();
        if !(smallest > 0.0) {
            let largest = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            return Err(GaussianError::NotPsd {
                eigenvalue: smallest,
                largest,
            });
        }
        let roots = eig.eigenvalues.map(f64::sqrt);
        let v = eig.eigenvectors;
        let mut scaled = v.clone();
        for (j, r) in roots.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*r);
        }
        let root = symmetrize(&(scaled * v.transpose()));
        Ok(Self { v, roots, root })
    }

    /// `d sqrt(A)[E]`.
    pub fn first(&self, e: &DMatrix<f64>) -> DMatrix<f64> {
        let et = self.v.transpose() * e * &self.v;
        let m = DMatrix::from_fn(et.nrows(), et.ncols(), |i, j| et[(i, j)] / (self.roots[i] + self.roots[j]));
        &self.v * m * self.v.transpose()
    }

    /// `d2 sqrt(A)[E, F]`.
    pub fn second(&self, e: &DMatrix<f64>, f: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.roots.len();
        let et = self.v.transpose() * e * &self.v;
        let ft = self.v.transpose() * f * &self.v;
        let s = &self.roots;
        let m = DMatrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| {
                    let h = -1.0 / ((s[i] + s[k]) * (s[k] + s[j]) * (s[i] + s[j]));
                    h * (et[(i, k)] * ft[(k, j)] + ft[(i, k)] * et[(k, j)])
                })
                .sum::<f64>()
        });
        &self.v * m * self.v.transpose()
    }
}

/// Weights `kappa/(n+kappa)` for the centre point and `1/(2(n+kappa))` for the rest.
pub fn sigma_weights(n: usize, kappa: f64) -> Result<DVector<f64>, GaussianError> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(GaussianError::InvalidKappa(kappa));
    }
    let denom = n as f64 + kappa;
    let mut w = DVector::from_element(2 * n + 1, 1.0 / (2.0 * denom));
    w[0] = kappa / denom;
    Ok(w)
}

/// Sigma points for `g`, optionally adding `jitter * I` to the scaled covariance
/// before taking its square root.
pub(crate) fn sigma_points_with_jitter(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    kappa: f64,
    jitter: f64,
) -> Result<DMatrix<f64>, GaussianError> {
    let n = mean.len();
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(GaussianError::InvalidKappa(kappa));
    }
    let mut scaled = cov * (n as f64 + kappa);
    if jitter > 0.0 {
        for i in 0..n {
            scaled[(i, i)] += jitter;
        }
    }
    let root = psd_sqrt(&scaled)?;
    let mut points = DMatrix::zeros(n, 2 * n + 1);
    points.set_column(0, mean);
    for j in 0..n {
        let col = root.column(j);
        points.set_column(1 + j, &(mean + col));
        points.set_column(1 + n + j, &(mean - col));
    }
    Ok(points)
}

/// Sigma points and weights representing `g`.
pub fn make_sigma_set(g: &GaussianState, kappa: f64) -> Result<SigmaSet, GaussianError> {
    let weights = sigma_weights(g.dim(), kappa)?;
    let points = sigma_points_with_jitter(&g.mean, &g.cov, kappa, 0.0)?;
    Ok(SigmaSet {
        points,
        weights,
        kappa,
    })
}

/// Weighted mean and symmetrized weighted scatter of the columns of `points`.
pub fn moments_from_points(
    points: &DMatrix<f64>,
    weights: &DVector<f64>,
) -> Result<GaussianState, GaussianError> {
    if points.ncols() != weights.len() {
        return Err(GaussianError::WeightMismatch {
            points: points.ncols(),
            weights: weights.len(),
        });
    }
    let n = points.nrows();
    let mean = points * weights;
    let mut cov = DMatrix::zeros(n, n);
    for (i, w) in weights.iter().enumerate() {
        let d = points.column(i) - &mean;
        cov.ger(*w, &d, &d, 1.0);
    }
    Ok(GaussianState::from_parts_unchecked(mean, cov))
}

/// Pushes `g` through `f` with the unscented transform.
pub fn unscented_transform<F>(f: F, g: &GaussianState, kappa: f64) -> Result<GaussianState, GaussianError>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let set = make_sigma_set(g, kappa)?;
    let images: Vec<DVector<f64>> = (0..set.len()).map(|i| f(&set.point(i))).collect();
    let m = images.first().map(|v| v.len()).unwrap_or(0);
    if images.iter().any(|y| y.len() != m) {
        return Err(GaussianError::DimensionMismatch {
            expected: m,
            got: images.iter().map(|y| y.len()).max().unwrap_or(0),
        });
    }
    let mut ys = DMatrix::zeros(m, images.len());
    for (i, y) in images.iter().enumerate() {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(GaussianError::NonFinite("transformed sigma point"));
        }
        ys.set_column(i, y);
    }
    moments_from_points(&ys, &set.weights)
}
