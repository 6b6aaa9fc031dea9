use nalgebra::DMatrix;
use volterra_neutral::ergodicity::*;
use volterra_neutral::operators::{LiftedState, Segment, SpectralSystem};
use volterra_neutral::solver::solve_neutral_sde;
use volterra_neutral::{Error, Tolerance, VolterraKernel};

fn fou(lambda: f64) -> SpectralSystem {
    SpectralSystem::scalar(lambda, 1.0, 0.0, 0.0, 1.0).unwrap()
}

fn fbm() -> VolterraKernel {
    VolterraKernel::fbm(0.75).unwrap()
}

#[test]
fn invariant_variance_closed_form_grid() {
    for lambda in [1.0, 2.0] {
        for hurst in [0.6, 0.75] {
            let k = VolterraKernel::fbm(hurst).unwrap();
            let q = invariant_covariance(&fou(lambda), &k, Tolerance::default()).unwrap();
            let want = fou_stationary_variance(lambda, hurst, 1.0);
            assert!((q[(0, 0)] / want - 1.0).abs() <= 1e-4, "λ={lambda} H={hurst}: {} vs {want}", q[(0, 0)]);
        }
    }
}

#[test]
fn invariant_variance_decreases_with_lambda() {
    let tol = Tolerance::default();
    let a = invariant_covariance(&fou(1.0), &fbm(), tol).unwrap()[(0, 0)];
    let b = invariant_covariance(&fou(2.0), &fbm(), tol).unwrap()[(0, 0)];
    assert!(b < a);
}

#[test]
fn multimode_covariance_is_psd() {
    let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 1.0, 0.2, 0.2]);
    let sys = SpectralSystem::new(vec![1.0, 2.5, 4.0], 1.0).unwrap().with_noise_b(b).unwrap();
    let q = invariant_covariance(&sys, &fbm(), Tolerance::default()).unwrap();
    assert_eq!(q, q.transpose());
    assert!(q.clone().cholesky().is_some(), "{q}");
}

#[test]
fn invariant_covariance_rejects_delay_and_nonstationary_kernels() {
    let tol = Tolerance::default();
    let delayed = SpectralSystem::scalar(1.0, 1.0, 0.3, 0.0, 1.0).unwrap();
    assert!(matches!(invariant_covariance(&delayed, &fbm(), tol), Err(Error::InvalidArgument(_))));
    let k = VolterraKernel::liouville(0.25).unwrap();
    assert!(matches!(invariant_covariance(&fou(1.0), &k, tol), Err(Error::InvalidArgument(_))));
}

#[test]
fn time_average_is_exact_on_constants_and_affine() {
    let dt = 0.05;
    let phi = LiftedState::new(vec![0.3], Segment::constant(1.0, dt, &[0.3]).unwrap()).unwrap();
    let traj = solve_neutral_sde(&fou(1.0), &fbm(), &phi, 20.0, dt, 9, Tolerance::default()).unwrap();
    let c = Functional::Linear { weights: vec![0.0], offset: 2.5 };
    assert_eq!(time_average(&traj, &c, 0.0).unwrap(), 2.5);
    let id = Functional::Linear { weights: vec![1.0], offset: 0.0 };
    let sq = Functional::Quadratic { weights: vec![1.0], clip: None };
    let aff = Functional::Linear { weights: vec![3.0], offset: -1.0 };
    let (m1, m2) = (time_average(&traj, &id, 5.0).unwrap(), time_average(&traj, &sq, 5.0).unwrap());
    assert!((time_average(&traj, &aff, 5.0).unwrap() - (3.0 * m1 - 1.0)).abs() < 1e-12);
    let both = Functional::Quadratic { weights: vec![2.0], clip: None };
    assert!((time_average(&traj, &both, 5.0).unwrap() - 2.0 * m2).abs() < 1e-12);
    assert!(matches!(time_average(&traj, &id, 20.0), Err(Error::EmptyWindow { .. })));
}

#[test]
fn stationary_start_matches_invariant_second_moment() {
    let sq = Functional::Quadratic { weights: vec![1.0], clip: None };
    let rep = ergodic_test_stationary(&fou(1.0), &fbm(), &sq, 500.0, 0.05, 16, 100, &ErgodicOptions::default()).unwrap();
    assert!(rep.pass, "{rep:?}");
    assert!((rep.space_average - 0.664670).abs() < 1e-5);
}

#[test]
fn running_averages_approach_the_reference() {
    let sq = Functional::Quadratic { weights: vec![1.0], clip: None };
    let rep = ergodic_test_stationary(&fou(1.0), &fbm(), &sq, 200.0, 0.05, 64, 101, &ErgodicOptions::default()).unwrap();
    let first = &rep.horizons[0];
    let last = rep.horizons.last().unwrap();
    assert!(rep.horizons.windows(2).all(|w| w[0].horizon < w[1].horizon));
    assert!(last.median_abs_dev < first.median_abs_dev, "{rep:?}");
}

#[test]
fn stationary_start_linear_average_is_zero() {
    let id = Functional::Linear { weights: vec![1.0], offset: 0.0 };
    let rep = ergodic_test_stationary(&fou(1.0), &fbm(), &id, 200.0, 0.05, 16, 4, &ErgodicOptions::default()).unwrap();
    assert_eq!(rep.space_average, 0.0);
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn arbitrary_start_respects_coupling_bound() {
    let dt = 0.05;
    let x0 = LiftedState::new(vec![5.0], Segment::constant(1.0, dt, &[5.0]).unwrap()).unwrap();
    let f = Functional::ClippedLipschitz { weights: vec![1.0], clip: 2.0 };
    let rep = ergodic_test_arbitrary(&fou(1.0), &fbm(), &x0, &f, 500.0, dt, 16, 1, &ErgodicOptions::default()).unwrap();
    assert_eq!(rep.coupled_bound_holds, Some(true), "{rep:?}");
    for h in &rep.horizons {
        assert!(h.coupled_diff.unwrap() <= h.i1_bound.unwrap());
    }
}

#[test]
fn arbitrary_start_needs_lipschitz_functional() {
    let dt = 0.05;
    let x0 = LiftedState::new(vec![5.0], Segment::constant(1.0, dt, &[5.0]).unwrap()).unwrap();
    let sq = Functional::Quadratic { weights: vec![1.0], clip: None };
    let err = ergodic_test_arbitrary(&fou(1.0), &fbm(), &x0, &sq, 10.0, dt, 4, 1, &ErgodicOptions::default());
    assert!(matches!(err, Err(Error::MissingLipschitzConstant)));
}

#[test]
fn stationarity_detects_transients() {
    let opts = ErgodicOptions::default();
    let ok = stationarity_test(&fou(1.0), &fbm(), 40.0, 0.05, 200, 4, 3, &StartMode::Stationary, &opts).unwrap();
    assert!(ok.pass, "{ok:?}");
    let bad = stationarity_test(&fou(1.0), &fbm(), 40.0, 0.05, 200, 4, 3, &StartMode::Fixed(vec![10.0]), &opts).unwrap();
    assert!(!bad.pass);
    let one = stationarity_test(&fou(1.0), &fbm(), 40.0, 0.05, 1, 4, 3, &StartMode::Stationary, &opts);
    assert!(matches!(one, Err(Error::InsufficientSamples { .. })));
}

#[test]
fn delay_system_uses_ensemble_reference() {
    let sys = SpectralSystem::scalar(1.0, 1.0, 0.3, 0.5, 1.0).unwrap();
    let id = Functional::Linear { weights: vec![1.0], offset: 0.0 };
    let rep = ergodic_test_stationary(&sys, &fbm(), &id, 100.0, 0.05, 16, 2, &ErgodicOptions::default()).unwrap();
    assert_eq!(rep.reference_kind, "ensemble");
    assert!(rep.z.is_finite());
}
