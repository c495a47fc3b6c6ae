use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use tsddp::gaussian::{unscented_transform, GaussianState, DEFAULT_KAPPA};
use tsddp::montecarlo::{empirical_cdf, quantile, sample_rng};
use tsddp::policy::{fit_policy, saturate};
use tsddp::transcription::{StackedControl, StackedState};

fn spd(n: usize, seed: &[f64]) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |i, j| seed[(i * n + j) % seed.len()]);
    &b * b.transpose() + DMatrix::identity(n, n) * 0.05
}

fn belief(n: usize, vals: &[f64]) -> GaussianState {
    let mean = DVector::from_fn(n, |i, _| vals[i % vals.len()] * 3.0);
    GaussianState::new(mean, spd(n, vals)).unwrap()
}

proptest! {
    #[test]
    fn affine_controls_are_recovered(
        n in 1usize..5,
        nu in 1usize..3,
        vals in prop::collection::vec(-1.0f64..1.0, 25),
    ) {
        let x = StackedState::from_gaussian(&belief(n, &vals), DEFAULT_KAPPA).unwrap();
        let a = DVector::from_fn(nu, |i, _| vals[(i + 3) % 25]);
        let g = DMatrix::from_fn(nu, n, |i, j| vals[(7 * i + j + 11) % 25]);
        let pts = x.sigma.points();
        let controls = DMatrix::from_fn(nu, pts.ncols(), |r, c| (&a + &g * pts.column(c))[r]);
        let p = fit_policy(&x, &StackedControl { controls });
        prop_assert!(!p.degenerate);
        for c in 0..pts.ncols() {
            let xc = pts.column(c).into_owned();
            let err = (p.eval_raw(&xc) - (&a + &g * &xc)).norm();
            prop_assert!(err < 1e-8 * (1.0 + a.norm() + g.norm() * xc.norm()), "err {err}");
        }
    }

    #[test]
    fn fitted_residuals_satisfy_normal_equations(
        n in 1usize..5,
        vals in prop::collection::vec(-1.0f64..1.0, 25),
        us in prop::collection::vec(-2.0f64..2.0, 9),
    ) {
        let x = StackedState::from_gaussian(&belief(n, &vals), DEFAULT_KAPPA).unwrap();
        let pts = x.sigma.points();
        let w = x.sigma.weights();
        let controls = DMatrix::from_fn(1, pts.ncols(), |_, c| us[c]);
        let p = fit_policy(&x, &StackedControl { controls: controls.clone() });
        let mean = pts * w;
        let mut r0 = 0.0;
        let mut r1 = DVector::zeros(n);
        for c in 0..pts.ncols() {
            let xc = pts.column(c).into_owned();
            let r = controls[(0, c)] - p.eval_raw(&xc)[0];
            r0 += w[c] * r;
            r1 += (&xc - &mean) * (w[c] * r);
        }
        prop_assert!(r0.abs() < 1e-9);
        prop_assert!(r1.norm() < 1e-9);
    }

    #[test]
    fn saturation_respects_bound_and_direction(
        v in prop::collection::vec(-10.0f64..10.0, 1..4),
        b in 0.01f64..5.0,
    ) {
        let u = DVector::from_vec(v);
        let s = saturate(u.clone(), Some(b));
        prop_assert!(s.norm() <= b * (1.0 + 1e-12));
        if u.norm() <= b {
            prop_assert_eq!(&s, &u);
        } else {
            prop_assert!((s.dot(&u) - s.norm() * u.norm()).abs() <= 1e-9 * u.norm_squared());
        }
        prop_assert_eq!(saturate(u.clone(), None), u);
    }

    #[test]
    fn empirical_cdf_is_monotone(v in prop::collection::vec(-1e3f64..1e3, 1..200)) {
        let cdf = empirical_cdf(&v).unwrap();
        prop_assert_eq!(cdf.len(), v.len());
        prop_assert!(cdf.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 < w[1].1));
        prop_assert!((cdf.last().unwrap().1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quantiles_are_monotone_and_bracketed(
        mut v in prop::collection::vec(-1e3f64..1e3, 1..100),
        p in 0.0f64..1.0,
        q in 0.0f64..1.0,
    ) {
        v.sort_by(f64::total_cmp);
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let (a, b) = (quantile(&v, lo), quantile(&v, hi));
        prop_assert!(a <= b);
        prop_assert!(v[0] <= a && b <= v[v.len() - 1]);
    }

    #[test]
    fn sample_streams_are_reproducible(seed in any::<u64>(), i in 0usize..1000, j in 0usize..1000) {
        let a: Vec<u64> = (0..8).map({ let mut r = sample_rng(seed, i); move |_| r.random() }).collect();
        let b: Vec<u64> = (0..8).map({ let mut r = sample_rng(seed, i); move |_| r.random() }).collect();
        prop_assert_eq!(&a, &b);
        if i != j {
            let c: Vec<u64> = (0..8).map({ let mut r = sample_rng(seed, j); move |_| r.random() }).collect();
            prop_assert_ne!(a, c);
        }
    }

    #[test]
    fn unscented_transform_is_exact_for_affine_maps(
        n in 1usize..6,
        m in 1usize..4,
        vals in prop::collection::vec(-1.0f64..1.0, 36),
    ) {
        let g = belief(n, &vals);
        let a = DMatrix::from_fn(m, n, |i, j| vals[(5 * i + 2 * j + 1) % 36]);
        let c = DVector::from_fn(m, |i, _| vals[(i + 17) % 36]);
        let out = unscented_transform(|x| &a * x + &c, &g, DEFAULT_KAPPA).unwrap();
        let mean = &a * g.mean() + &c;
        let cov = &a * g.cov() * a.transpose();
        prop_assert!((out.mean() - &mean).norm() < 1e-10 * (1.0 + mean.norm()));
        prop_assert!((out.cov() - &cov).norm() < 1e-10 * (1.0 + cov.norm()));
    }
}
