use nalgebra::{DMatrix, DVector};
use tsddp::ddp::{Problem, SecondOrder};
use tsddp::gaussian::GaussianState;
use tsddp::problems::{DoubleIntegrator, LowThrust};
use tsddp::transcription::{StochasticModel, StochasticProblem, StackedState};

fn central<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, z: &DVector<f64>, h: &[f64]) -> DMatrix<f64> {
    let m = f(z).len();
    let mut j = DMatrix::zeros(m, z.len());
    for i in 0..z.len() {
        let mut p = z.clone();
        p[i] += h[i];
        let fp = f(&p);
        p[i] -= 2.0 * h[i];
        let fm = f(&p);
        j.set_column(i, &((fp - fm) / (2.0 * h[i])));
    }
    j
}

fn check<M: StochasticModel>(model: M, mean: DVector<f64>, cov: DMatrix<f64>, hx: f64, hu: f64) {
    let n = model.state_dim();
    let nu = model.control_dim();
    let b = model.control_bound();
    let opts = tsddp::transcription::TranscriptionOptions::default();
    let init = GaussianState::new(mean, cov).unwrap();
    let p = StochasticProblem::remaining(model, 3, 5, init.clone(), opts).unwrap();
    let x = StackedState::from_gaussian(&init, 2.0).unwrap().flatten();
    let u = DVector::from_fn(nu * (2 * n + 1), |i, _| b * (0.3 + 0.4 * ((i * 7 % 11) as f64 / 11.0 - 0.5)));
    let nx = x.len();
    let mut z = x.clone().resize_vertically(nx + u.len(), 0.0);
    z.rows_mut(nx, u.len()).copy_from(&u);
    let f = |z: &DVector<f64>| p.step(0, &z.rows(0, nx).into_owned(), &z.rows(nx, z.len() - nx).into_owned()).unwrap();
    let mut steps = vec![hx; nx];
    steps.resize(z.len(), hu);

    let (fx, fu) = p.step_jacobians(0, &x, &u).unwrap();
    let oracle = central(f, &z, &steps);
    let err_x = (&fx - oracle.columns(0, nx)).norm() / oracle.columns(0, nx).norm();
    let err_u = (&fu - oracle.columns(nx, u.len())).norm() / oracle.columns(nx, u.len()).norm();
    assert!(err_x < 1e-5, "fx relative error {err_x:e}");
    assert!(err_u < 1e-5, "fu relative error {err_u:e}");

    let curv = p.step_hessians(0, &x, &u, SecondOrder::Full).unwrap().unwrap();
    let (fxx, fux) = (curv.fxx.unwrap(), curv.fux.unwrap());
    let steps2: Vec<f64> = steps.iter().map(|h| h * 100.0).collect();
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for m in 0..nx {
        let g = |z: &DVector<f64>| central(|w| DVector::from_element(1, f(w)[m]), z, &steps2).row(0).transpose();
        let h = central(g, &z, &steps2);
        let h = (&h + h.transpose()) * 0.5;
        let mut joint = DMatrix::zeros(z.len(), z.len());
        joint.view_mut((0, 0), (nx, nx)).copy_from(&fxx[m]);
        joint.view_mut((nx, 0), (u.len(), nx)).copy_from(&fux[m]);
        joint.view_mut((0, nx), (nx, u.len())).copy_from(&fux[m].transpose());
        joint.view_mut((nx, nx), (u.len(), u.len())).copy_from(&curv.fuu[m]);
        worst = worst.max((&joint - &h).norm());
        scale = scale.max(h.norm());
    }
    assert!(worst / scale < 1e-3, "Hessian relative error {:e}", worst / scale);
}

#[test]
fn double_integrator_stage_derivatives() {
    let cov = DMatrix::from_row_slice(2, 2, &[0.02, 0.005, 0.005, 0.01]);
    check(DoubleIntegrator::default(), DVector::from_vec(vec![-5.0, 1.0]), cov, 1e-6, 1e-6);
}

#[test]
fn low_thrust_stage_derivatives() {
    let m = LowThrust::default();
    let mean = m.config.scale_state(&m.config.earth_state());
    let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1e-6, 2e-6, 1e-6, 3e-6]));
    let b = m.config.scaled_thrust_bound();
    check(m, mean, cov, 1e-6, 1e-6 * b);
}
