//! Central finite differences.
//!
//! Coordinate `i` is perturbed by `h_i = rel_step * max(1, |x_i|)`. Evaluation
//! order is fixed (coordinates ascending, `+h` before `-h`) so results are
//! reproducible bit for bit.

use nalgebra::{DMatrix, DVector};

use super::SolverError;

/// Relative step for first derivatives.
pub const JACOBIAN_STEP: f64 = 1e-6;
/// Relative step for second derivatives.
pub const HESSIAN_STEP: f64 = 1e-4;

fn step_for(x: f64, rel: f64, floor: f64) -> f64 {
    rel * x.abs().max(floor)
}

/// Jacobian of a vector function by central differences.
pub fn jacobian<F>(f: F, x: &DVector<f64>, rel_step: f64) -> Result<DMatrix<f64>, SolverError>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, SolverError>,
{
    jacobian_scaled(f, x, rel_step, 1.0)
}

/// [`jacobian`] with steps `rel_step * max(floor, |x_i|)`, for variables whose
/// natural size is far from one.
pub fn jacobian_scaled<F>(f: F, x: &DVector<f64>, rel_step: f64, floor: f64) -> Result<DMatrix<f64>, SolverError>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, SolverError>,
{
    let mut probe = x.clone();
    let mut jac: Option<DMatrix<f64>> = None;
    for i in 0..x.len() {
        let h = step_for(x[i], rel_step, floor);
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        let jac = jac.get_or_insert_with(|| DMatrix::zeros(plus.len(), x.len()));
        let col = (plus - minus) / (2.0 * h);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFiniteDerivative);
        }
        jac.set_column(i, &col);
    }
    Ok(jac.unwrap_or_else(|| DMatrix::zeros(0, 0)))
}

/// Gradient of a scalar function by central differences.
pub fn gradient<F>(f: F, x: &DVector<f64>, rel_step: f64) -> Result<DVector<f64>, SolverError>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut grad = DVector::zeros(x.len());
    for i in 0..x.len() {
        let h = step_for(x[i], rel_step, 1.0);
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * h);
        if !grad[i].is_finite() {
            return Err(SolverError::NonFiniteDerivative);
        }
    }
    Ok(grad)
}

/// Hessian of a scalar function by the four-point central formula.
pub fn hessian<F>(f: F, x: &DVector<f64>, rel_step: f64) -> Result<DMatrix<f64>, SolverError>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|v| step_for(*v, rel_step, 1.0)).collect();
    let mut probe = x.clone();
    let mut hess = DMatrix::zeros(n, n);
    let f0 = f(x);
    for i in 0..n {
        probe[i] = x[i] + h[i];
        let fp = f(&probe);
        probe[i] = x[i] - h[i];
        let fm = f(&probe);
        probe[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                probe[i] = x[i] + si * h[i];
                probe[j] = x[j] + sj * h[j];
                let v = f(&probe);
                probe[i] = x[i];
                probe[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    if hess.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteDerivative);
    }
    Ok(hess)
}

/// Second derivatives of every output of a vector function, one matrix per
/// output, from the same four-point stencil as [`hessian`]. `floors[i]` plays the
/// role of one in the step of variable `i`.
pub fn hessian_tensor<F>(
    f: F,
    x: &DVector<f64>,
    rel_step: f64,
    floors: &[f64],
) -> Result<Vec<DMatrix<f64>>, SolverError>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, SolverError>,
{
    let n = x.len();
    let h: Vec<f64> = x.iter().zip(floors).map(|(v, fl)| step_for(*v, rel_step, *fl)).collect();
    let mut probe = x.clone();
    let f0 = f(x)?;
    let m = f0.len();
    let mut out = vec![DMatrix::zeros(n, n); m];
    for i in 0..n {
        probe[i] = x[i] + h[i];
        let fp = f(&probe)?;
        probe[i] = x[i] - h[i];
        let fm = f(&probe)?;
        probe[i] = x[i];
        let d = (fp - &f0 * 2.0 + fm) / (h[i] * h[i]);
        for (o, v) in out.iter_mut().zip(d.iter()) {
            o[(i, i)] = *v;
        }
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                probe[i] = x[i] + si * h[i];
                probe[j] = x[j] + sj * h[j];
                let v = f(&probe);
                probe[i] = x[i];
                probe[j] = x[j];
                v
            };
            let d = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?)
                / (4.0 * h[i] * h[j]);
            for (o, v) in out.iter_mut().zip(d.iter()) {
                o[(i, j)] = *v;
                o[(j, i)] = *v;
            }
        }
    }
    if out.iter().flat_map(|o| o.iter()).any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteDerivative);
    }
    Ok(out)
}
