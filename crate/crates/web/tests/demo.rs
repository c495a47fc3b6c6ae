use tsddp_web::{di_montecarlo, di_solve, ut_view};

#[test]
fn ut_matches_samples_better_than_linearization() {
    let v = ut_view(1.0, 0.3, 0.02, 0.6, 5000, 3).unwrap();
    assert_eq!(v.sigma_polar.len(), 5);
    assert_eq!(v.samples.len(), 5000);
    // mean range shrinks by exp(-sd^2 / 2) along the bearing
    let shrink = (-0.18f64).exp();
    let exact = [shrink * 0.3f64.cos(), shrink * 0.3f64.sin()];
    let err = |m: [f64; 2]| ((m[0] - exact[0]).powi(2) + (m[1] - exact[1]).powi(2)).sqrt();
    assert!(err(v.unscented.mean) < err(v.linearized.mean));
    assert!(err(v.sampled.mean) < 0.03);
}

#[test]
fn ut_rejects_bad_input() {
    assert!(ut_view(1.0, 0.0, -0.1, 0.1, 100, 0).is_err());
    assert!(ut_view(1.0, 0.0, 0.1, 0.1, 1, 0).is_err());
}

#[test]
fn deterministic_solve_reaches_target() {
    let v = di_solve("ddp", 1.0).unwrap();
    assert_eq!(v.status, "Converged");
    assert_eq!(v.position.len(), v.controls.len() + 1);
    assert!(v.position.last().unwrap().abs() < 1e-2);
    assert!((v.objective - 17.697).abs() < 0.01, "{}", v.objective);
    assert!(v.controls.iter().all(|u| u[0].abs() <= v.bound * (1.0 + 1e-6)));
    assert!(di_solve("lqr", 1.0).unwrap_err().contains("mode"));
    assert!(di_solve("ddp", 1.5).unwrap_err().contains("duty"));
}

#[test]
fn transcribed_solve_feeds_policy_campaign() {
    let v = di_solve("tsddp", 1.0).unwrap();
    assert_eq!(v.status, "Converged");
    assert_eq!(v.controls[0].len(), 5);
    assert!(v.position_sd.last().unwrap() > &0.0);

    let a = di_montecarlo("tsddp_policy", 1.0, 20, 5, false).unwrap();
    let b = di_montecarlo("tsddp_policy", 1.0, 20, 5, false).unwrap();
    assert_eq!(a.failed, 0);
    assert_eq!(a.cdf_total.len(), 20);
    assert!(a.cdf_total.windows(2).all(|w| w[0][0] <= w[1][0] && w[0][1] < w[1][1]));
    assert_eq!(serde_json::to_string(&a.cdf_total).unwrap(), serde_json::to_string(&b.cdf_total).unwrap());
    assert!(di_montecarlo("tsddp_policy", 1.0, 0, 5, false).is_err());
    assert!(di_montecarlo("open_loop", 1.0, 5, 5, false).is_err());
}
