//! Dense conic formulation of small linear local problems.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use tube_dmpc::model::{ModelKind, SubsystemDynamics};
use tube_dmpc::ocp::{solve_local, Consistency, InitialMode, LocalOcp, RefWindow, SolveStatus, TrajectoryWindow};
use tube_dmpc::ocp::sqp::SqpSettings;
use tube_dmpc::setgeom::SetDescriptor;
use tube_dmpc::terminal::{lqr_gain, solve_dare, TerminalIngredients};

pub const N: usize = 8;
pub const NX: usize = 2;
pub const NU: usize = 2;

#[derive(Debug, Clone)]
pub struct Instance {
    pub a: [f64; 4],
    pub b_noise: [f64; 4],
    pub xi: [f64; 2],
    pub q: [f64; 2],
    pub r: [f64; 2],
    pub x0_offset: [f64; 2],
    pub ref_noise: Vec<[f64; 2]>,
    pub u_half: f64,
    pub consistency: [f64; 2],
    pub state_margin: f64,
    pub level: f64,
    pub tube: Option<[f64; 2]>,
}

pub fn arb_instance() -> impl Strategy<Value = Instance> {
    (
        prop::array::uniform4(-0.9..0.9f64),
        prop::array::uniform4(-0.2..0.2f64),
        prop::array::uniform2(-1.0..1.0f64),
        prop::array::uniform2(0.5..5.0f64),
        prop::array::uniform2(0.5..5.0f64),
        prop::array::uniform2(-2.0..2.0f64),
        prop::collection::vec(prop::array::uniform2(-1.0..1.0f64), N),
        1.05..3.0f64,
        prop::array::uniform2(0.05..0.5f64),
        0.02..1.0f64,
        1.0..3.0f64,
        prop::option::of(prop::array::uniform2(0.01..0.3f64)),
    )
        .prop_map(|(a, b_noise, xi, q, r, x0_offset, ref_noise, u_half, consistency, state_margin, level, tube)| Instance {
            a,
            b_noise,
            xi,
            q,
            r,
            x0_offset,
            ref_noise,
            u_half,
            consistency,
            state_margin,
            level,
            tube,
        })
}

pub struct Built {
    pub dyn_: SubsystemDynamics,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub terminal: TerminalIngredients,
    pub tube: SetDescriptor,
    pub u_hat: SetDescriptor,
    pub state_set: SetDescriptor,
    pub refs: RefWindow,
    pub warm: TrajectoryWindow,
    pub x_meas: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

pub fn build(inst: &Instance) -> Built {
    let a = DMatrix::from_row_slice(NX, NX, &inst.a);
    let b = DMatrix::from_row_slice(NX, NU, &inst.b_noise) + DMatrix::identity(NX, NU);
    let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect::<Vec<Vec<f64>>>();
    let dyn_ = SubsystemDynamics::new(ModelKind::DiscreteLti { a: rows(&a), b: rows(&b) }, 1.0, 1).unwrap();
    let q = DMatrix::from_diagonal(&DVector::from_row_slice(&inst.q));
    let r = DMatrix::from_diagonal(&DVector::from_row_slice(&inst.r));
    let xi = DVector::from_row_slice(&inst.xi);
    let u_xi = dyn_.steady_input(&xi).unwrap();
    let p = solve_dare(&a, &b, &q, &r).unwrap();
    let k = lqr_gain(&a, &b, &r, &p).unwrap();

    let x_meas = &xi + DVector::from_row_slice(&inst.x0_offset);
    let inputs: Vec<DVector<f64>> = inst.ref_noise.iter().map(|w| &u_xi + DVector::from_row_slice(w)).collect();
    let warm = TrajectoryWindow::rollout(&dyn_, 0, &x_meas, inputs);
    let refs = RefWindow::from_window(&warm);

    let mut terminal = TerminalIngredients::new(xi.clone(), u_xi.clone(), p, k, 1.0, 1.0, 0.5).unwrap();
    let end_cost = terminal.cost(&warm.states[N]);
    terminal = terminal.with_gamma(end_cost * inst.level + 1e-6);

    let u_hat = SetDescriptor::new_box(
        u_xi.iter().map(|v| v - inst.u_half).collect(),
        u_xi.iter().map(|v| v + inst.u_half).collect(),
    )
    .unwrap();
    let mut lo = vec![f64::INFINITY; NX];
    let mut hi = vec![f64::NEG_INFINITY; NX];
    for s in &warm.states {
        for i in 0..NX {
            lo[i] = lo[i].min(s[i] - inst.state_margin);
            hi[i] = hi[i].max(s[i] + inst.state_margin);
        }
    }
    let state_set = SetDescriptor::new_box(lo, hi).unwrap();
    let tube = match inst.tube {
        Some(h) => SetDescriptor::symmetric_box(&h).unwrap(),
        None => SetDescriptor::zero(NX),
    };
    Built { dyn_, q, r, terminal, tube, u_hat, state_set, refs, warm, x_meas, a, b }
}

pub fn csc(dense: &DMatrix<f64>, upper_only: bool) -> CscMatrix<f64> {
    let (m, n) = dense.shape();
    let mut colptr = vec![0];
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    for j in 0..n {
        for i in 0..m {
            let v = dense[(i, j)];
            if v != 0.0 && (!upper_only || i <= j) {
                rowval.push(i);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

pub struct Oracle {
    pub cost: f64,
    pub xs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
}

/// Dense formulation over `z = [x_0..x_N, u_0..u_{N-1}]`.
pub fn oracle(bt: &Built, consistency: &[f64], pinned: bool) -> Option<Oracle> {
    let nz = (N + 1) * NX + N * NU;
    let xi_at = |k: usize| k * NX;
    let ui_at = |k: usize| (N + 1) * NX + k * NU;
    let ti = &bt.terminal;
    let (xi, u_xi) = (ti.xi(), ti.u_xi());

    let mut h = DMatrix::zeros(nz, nz);
    let mut g = vec![0.0; nz];
    let mut constant = 0.0;
    for k in 0..=N {
        let w = if k < N { bt.q.clone() } else { ti.p() * ti.sigma };
        h.view_mut((xi_at(k), xi_at(k)), (NX, NX)).copy_from(&(&w * 2.0));
        let lin = -(&w * xi) * 2.0;
        g[xi_at(k)..xi_at(k) + NX].copy_from_slice(lin.as_slice());
        constant += xi.dot(&(&w * xi));
    }
    for k in 0..N {
        h.view_mut((ui_at(k), ui_at(k)), (NU, NU)).copy_from(&(&bt.r * 2.0));
        let lin = -(&bt.r * u_xi) * 2.0;
        g[ui_at(k)..ui_at(k) + NU].copy_from_slice(lin.as_slice());
        constant += u_xi.dot(&(&bt.r * u_xi));
    }

    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    // Equalities first.
    let mut eq = 0;
    if pinned {
        for i in 0..NX {
            rows.push((vec![(xi_at(0) + i, 1.0)], bt.x_meas[i]));
            eq += 1;
        }
    }
    for k in 0..N {
        for i in 0..NX {
            let mut r = vec![(xi_at(k + 1) + i, 1.0)];
            for j in 0..NX {
                r.push((xi_at(k) + j, -bt.a[(i, j)]));
            }
            for j in 0..NU {
                r.push((ui_at(k) + j, -bt.b[(i, j)]));
            }
            rows.push((r, 0.0));
            eq += 1;
        }
    }
    let mut ineq = 0;
    let mut le = |rows: &mut Vec<(Vec<(usize, f64)>, f64)>, col: usize, sign: f64, rhs: f64| {
        rows.push((vec![(col, sign)], rhs));
        ineq += 1;
    };
    if !pinned {
        let (plo, phi) = bt.tube.bounding_box().unwrap();
        for i in 0..NX {
            le(&mut rows, xi_at(0) + i, 1.0, bt.x_meas[i] - plo[i]);
            le(&mut rows, xi_at(0) + i, -1.0, phi[i] - bt.x_meas[i]);
        }
    }
    let (ulo, uhi) = bt.u_hat.bounding_box().unwrap();
    let (slo, shi) = bt.state_set.bounding_box().unwrap();
    for k in 0..N {
        for i in 0..NU {
            le(&mut rows, ui_at(k) + i, 1.0, uhi[i]);
            le(&mut rows, ui_at(k) + i, -1.0, -ulo[i]);
        }
        for i in 0..NX {
            let rf = bt.refs.states[k][i];
            le(&mut rows, xi_at(k) + i, 1.0, rf + consistency[i]);
            le(&mut rows, xi_at(k) + i, -1.0, consistency[i] - rf);
        }
    }
    for k in 0..=N {
        for i in 0..NX {
            le(&mut rows, xi_at(k) + i, 1.0, shi[i]);
            le(&mut rows, xi_at(k) + i, -1.0, -slo[i]);
        }
    }
    // Terminal ellipsoid as a second-order cone: ‖Lᵀ(x_N − ξ)‖ ≤ √(γ/σ).
    let l = ti.p().clone().cholesky().unwrap().l();
    rows.push((vec![], (ti.gamma / ti.sigma).sqrt()));
    for i in 0..NX {
        let r: Vec<(usize, f64)> = (0..NX).map(|j| (xi_at(N) + j, -l[(j, i)])).collect();
        let rhs = -(0..NX).map(|j| l[(j, i)] * xi[j]).sum::<f64>();
        rows.push((r, rhs));
    }

    let mut amat = DMatrix::zeros(rows.len(), nz);
    let mut bvec = Vec::with_capacity(rows.len());
    for (ri, (r, rhs)) in rows.iter().enumerate() {
        for &(c, v) in r {
            amat[(ri, c)] += v;
        }
        bvec.push(*rhs);
    }
    let cones = [
        SupportedConeT::ZeroConeT(eq),
        SupportedConeT::NonnegativeConeT(ineq),
        SupportedConeT::SecondOrderConeT(NX + 1),
    ];
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(1e-11)
        .tol_gap_rel(1e-11)
        .tol_feas(1e-11)
        .build()
        .unwrap();
    let mut solver = DefaultSolver::new(&csc(&h, true), &g, &csc(&amat, false), &bvec, &cones, settings);
    solver.solve();
    if solver.solution.status != SolverStatus::Solved {
        return None;
    }
    let z = &solver.solution.x;
    Some(Oracle {
        cost: solver.solution.obj_val + constant,
        xs: (0..=N).map(|k| DVector::from_row_slice(&z[xi_at(k)..xi_at(k) + NX])).collect(),
        us: (0..N).map(|k| DVector::from_row_slice(&z[ui_at(k)..ui_at(k) + NU])).collect(),
    })
}


/// Solves `inst` with the structured solver and compares against the oracle.
pub fn check_instance(inst: &Instance) -> Result<(), TestCaseError> {
    let bt = build(inst);
    let coords = [0usize, 1];
    let ocp = LocalOcp {
        dyn_: &bt.dyn_,
        q: &bt.q,
        r: &bt.r,
        terminal: &bt.terminal,
        p: &bt.tube,
        u_hat: &bt.u_hat,
        x_meas: bt.x_meas.clone(),
        anchor: 0,
        horizon: N,
        initial: if inst.tube.is_some() { InitialMode::Tube } else { InitialMode::Pinned },
        consistency: Some(Consistency { refs: &bt.refs, coords: &coords, half_widths: &inst.consistency }),
        state_set: Some(&bt.state_set),
        frozen: Vec::new(),
        settings: SqpSettings::default(),
    };
    let sol = solve_local(&ocp, &bt.warm).unwrap();
    let orc = match oracle(&bt, &inst.consistency, inst.tube.is_none()) {
        Some(o) => o,
        None => return Err(TestCaseError::reject("oracle did not converge")),
    };
    prop_assert!(matches!(sol.status, SolveStatus::Optimal | SolveStatus::Suboptimal), "status {:?}", sol.status);
    let scale = orc.cost.abs().max(1.0);
    prop_assert!((sol.cost - orc.cost).abs() <= 1e-5 * scale, "cost {} vs oracle {}", sol.cost, orc.cost);
    for (x, y) in sol.window.states.iter().zip(&orc.xs) {
        prop_assert!((x - y).amax() <= 1e-4, "state {x} vs {y}");
    }
    for (u, v) in sol.window.inputs.iter().zip(&orc.us) {
        prop_assert!((u - v).amax() <= 1e-4, "input {u} vs {v}");
    }
    Ok(())
}
