//! Tube cross-sections: closed-form box limits, invariance and Monte-Carlo containment.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use tube_dmpc::model::{exp_and_integral, ModelKind, SubsystemDynamics};
use tube_dmpc::setgeom::{linear_map, SetDescriptor};
use tube_dmpc::tube::{check_rpi_montecarlo, compute_rpi, integrate_closed_loop, AuxLaw};

const ROBOT_GAIN: [f64; 3] = [-6.0, -6.0, -5.5];
const ROBOT_W: [f64; 3] = [0.694, 0.694, 0.6429];
const DT: f64 = 1.0 / 3.0;

fn sampled(lambda: &[f64], w: &[f64], dt: f64) -> (DMatrix<f64>, SetDescriptor) {
    let l = DMatrix::from_diagonal(&DVector::from_row_slice(lambda));
    let (ad, integral) = exp_and_integral(&l, dt).unwrap();
    let w_d = linear_map(&integral, &SetDescriptor::symmetric_box(w).unwrap()).unwrap();
    (ad, w_d)
}

fn half_widths(p: &SetDescriptor) -> Vec<f64> {
    let (lo, hi) = p.bounding_box().unwrap();
    lo.iter().zip(&hi).map(|(l, h)| 0.5 * (h - l)).collect()
}

/// Every vertex image `Λ_d v + w` stays in the set.
fn is_invariant(ad: &DMatrix<f64>, p: &SetDescriptor, w_d: &SetDescriptor, tol: f64) -> bool {
    let pv = p.vertices().unwrap();
    let wv = w_d.vertices().unwrap();
    pv.iter().all(|v| {
        let img = ad * DVector::from_row_slice(v);
        wv.iter().all(|w| {
            let x: Vec<f64> = img.iter().zip(w).map(|(a, b)| a + b).collect();
            p.contains(&x, tol)
        })
    })
}

#[test]
fn robot_tube_matches_reference_box() {
    let (ad, w_d) = sampled(&ROBOT_GAIN, &ROBOT_W, DT);
    let p = compute_rpi(&ad, &w_d, 1e-4).unwrap();
    let got = half_widths(&p);
    let expected = [0.1157, 0.1157, 0.1169];
    for (g, e) in got.iter().zip(expected) {
        assert!((g - e).abs() / e < 0.02, "half-widths {got:?}");
    }
    // Continuous-time limit of the geometric series: w / |λ|.
    for i in 0..3 {
        assert!((got[i] - ROBOT_W[i] / -ROBOT_GAIN[i]).abs() < 1e-12);
    }
    let pos = (got[0].powi(2) + got[1].powi(2)).sqrt();
    assert!((pos - 0.1636).abs() < 1e-3);
}

#[test]
fn robot_tube_contains_random_walks() {
    let (ad, w_d) = sampled(&ROBOT_GAIN, &ROBOT_W, DT);
    let p = compute_rpi(&ad, &w_d, 1e-4).unwrap();
    let rep = check_rpi_montecarlo(&ad, &p, &w_d, 100, 100_000, 3);
    assert_eq!(rep.steps, 100_000);
    assert_eq!(rep.exits, 0, "worst violation {:.3e}", rep.max_violation);
}

#[test]
fn compensated_error_follows_linear_dynamics() {
    let dyn_ = SubsystemDynamics::new(ModelKind::OmniRobot { l: 0.2, r: 1.0 }, DT, 10).unwrap();
    let lambda = DMatrix::from_diagonal(&DVector::from_row_slice(&ROBOT_GAIN));
    let u_set = SetDescriptor::symmetric_box(&[15.0; 3]).unwrap();
    let x = DVector::from_row_slice(&[0.05, -0.08, 0.1]);
    let xhat = DVector::from_row_slice(&[0.0, 0.0, -0.01]);
    let uhat = DVector::from_row_slice(&[8.0, -5.0, 3.0]);
    let w = DVector::from_row_slice(&[0.3, -0.2, 0.1]);
    let (ad, integral) = exp_and_integral(&lambda, DT).unwrap();
    let expected = &ad * (&x - &xhat) + &integral * &w;
    let gap = |compensate| {
        let aux = AuxLaw::omni(&lambda, 0.2, 1.0, compensate).unwrap();
        let step = integrate_closed_loop(&dyn_, &aux, &u_set, &x, &xhat, &uhat, &w).unwrap();
        (&step.x_next - &step.xhat_next - &expected).amax()
    };
    assert!(gap(true) < 1e-5, "{}", gap(true));
    // Without compensation the heading mismatch leaks into the position error.
    assert!(gap(false) > 1e-2, "{}", gap(false));
}

#[test]
fn unstable_transition_is_rejected() {
    let ad = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.2, 0.5]));
    let w = SetDescriptor::symmetric_box(&[0.1, 0.1]).unwrap();
    assert!(compute_rpi(&ad, &w, 1e-4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn diagonal_tube_is_closed_form_and_invariant(
        lambda in prop::array::uniform3(-8.0..-0.5f64),
        w in prop::array::uniform3(0.01..1.0f64),
        dt in 0.05..0.5f64,
    ) {
        let (ad, w_d) = sampled(&lambda, &w, dt);
        let p = compute_rpi(&ad, &w_d, 1e-4).unwrap();
        for (i, h) in half_widths(&p).iter().enumerate() {
            prop_assert!((h - w[i] / -lambda[i]).abs() <= 1e-9 * (1.0 + h));
        }
        prop_assert!(is_invariant(&ad, &p, &w_d, 1e-9));
    }

    #[test]
    fn rotating_tube_is_invariant(rho in 0.1..0.9f64, theta in 0.0..std::f64::consts::PI, w in prop::array::uniform2(0.01..1.0f64)) {
        let (s, c) = theta.sin_cos();
        let ad = DMatrix::from_row_slice(2, 2, &[rho * c, -rho * s, rho * s, rho * c]);
        let w_d = SetDescriptor::symmetric_box(&w).unwrap();
        // A box can only be invariant when the entrywise magnitude is contractive.
        let abs_radius = rho * (c.abs() + s.abs());
        let p = match compute_rpi(&ad, &w_d, 1e-4) {
            Ok(p) => p,
            Err(_) => {
                prop_assert!(abs_radius >= 1.0 - 1e-6);
                return Ok(());
            }
        };
        prop_assert!(abs_radius < 1.0);
        prop_assert!(p.contains(&[0.0, 0.0], 0.0));
        prop_assert!(is_invariant(&ad, &p, &w_d, 1e-9));
        // The outer box never undercuts the disturbance itself.
        let h = half_widths(&p);
        prop_assert!(h[0] >= w[0] - 1e-12 && h[1] >= w[1] - 1e-12);
    }
}
