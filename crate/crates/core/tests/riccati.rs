//! Terminal cost: Riccati solutions and closed-loop stability.

use std::path::Path;

use nalgebra::DMatrix;
use proptest::prelude::*;
use tube_dmpc::harness::Scenario;
use tube_dmpc::terminal::{lqr_gain, solve_dare};

/// Residual evaluated with an explicit inverse, independent of the library helper.
fn residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let m = (r + b.transpose() * p * b).try_inverse().unwrap();
    let rhs = a.transpose() * p * a - a.transpose() * p * b * m * b.transpose() * p * a + q;
    (rhs - p).amax()
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[test]
fn scalar_case_gives_golden_ratio() {
    let one = DMatrix::from_element(1, 1, 1.0);
    let p = solve_dare(&one, &one, &one, &one).unwrap();
    assert!((p[(0, 0)] - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-9);
}

#[test]
fn robot_linearization_is_solved_to_tight_residual() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let sc = Scenario::load(&root.join("connectivity_xi2.5.json")).unwrap();
    for i in 0..sc.agents.len() {
        let dyn_ = sc.dynamics(i).unwrap();
        let xi = nalgebra::DVector::from_vec(sc.agents[i].xi.clone());
        let u_xi = dyn_.steady_input(&xi).unwrap();
        let (_, a, b) = dyn_.nominal_step_jac(&xi, &u_xi);
        let q = sc.agents[i].q.to_matrix().unwrap();
        let r = sc.agents[i].r.to_matrix().unwrap();
        let p = solve_dare(&a, &b, &q, &r).unwrap();
        assert!(residual(&a, &b, &q, &r, &p) < 1e-8, "agent {i}");
        assert!(p.clone().cholesky().is_some());
        let k = lqr_gain(&a, &b, &r, &p).unwrap();
        assert!(spectral_radius(&(&a + &b * k)) < 1.0, "agent {i}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_controllable_pairs(a in prop::array::uniform4(-1.5..1.5f64), b in prop::array::uniform4(-1.0..1.0f64),
                                 q in prop::array::uniform2(0.1..10.0f64), r in prop::array::uniform2(0.1..10.0f64)) {
        let a = DMatrix::from_row_slice(2, 2, &a);
        let b = DMatrix::from_row_slice(2, 2, &b) + DMatrix::identity(2, 2) * 2.0;
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&q));
        let r = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&r));
        let p = solve_dare(&a, &b, &q, &r).unwrap();
        prop_assert!(residual(&a, &b, &q, &r, &p) < 1e-8 * p.amax().max(1.0));
        let k = lqr_gain(&a, &b, &r, &p).unwrap();
        prop_assert!(spectral_radius(&(&a + &b * k)) < 1.0);
    }
}
