//! Local optimal control problem of one agent: nominal trajectory windows,
//! candidate construction, the tube-based OCP with consistency constraints,
//! and the actual input law.

pub mod qp;
pub mod sqp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coupling::{self, ConstraintSpec};
use crate::error::{check_dim, Error, Result};
use crate::model::SubsystemDynamics;
use crate::setgeom::SetDescriptor;
use crate::terminal::{stage_cost, TerminalIngredients};
use crate::tube::AuxLaw;

use qp::QuadRow;
use sqp::{CostBlock, Rows, SqpSettings, StageProblem};

pub const FEAS_TOL: f64 = 1e-6;

/// States `x[k..=k+N]` and inputs `u[k..k+N]` anchored at time `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    pub anchor: usize,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl TrajectoryWindow {
    pub fn new(anchor: usize, states: Vec<DVector<f64>>, inputs: Vec<DVector<f64>>) -> Result<Self> {
        if states.len() != inputs.len() + 1 || inputs.is_empty() {
            return Err(Error::Dimension {
                context: "window states",
                expected: inputs.len() + 1,
                found: states.len(),
            });
        }
        Ok(Self { anchor, states, inputs })
    }

    /// Constant window resting at `x` with input `u`.
    pub fn constant(anchor: usize, x: &DVector<f64>, u: &DVector<f64>, horizon: usize) -> Self {
        Self {
            anchor,
            states: vec![x.clone(); horizon + 1],
            inputs: vec![u.clone(); horizon],
        }
    }

    /// Forward simulation of the nominal model from `x0` under `inputs`.
    pub fn rollout(dyn_: &SubsystemDynamics, anchor: usize, x0: &DVector<f64>, inputs: Vec<DVector<f64>>) -> Self {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(x0.clone());
        for u in &inputs {
            let next = dyn_.nominal_step(states.last().expect("nonempty"), u);
            states.push(next);
        }
        Self { anchor, states, inputs }
    }

    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// State predicted for absolute time `kappa`.
    pub fn at(&self, kappa: usize) -> &DVector<f64> {
        &self.states[kappa - self.anchor]
    }

    pub fn max_defect(&self, dyn_: &SubsystemDynamics) -> f64 {
        (0..self.horizon())
            .map(|k| (dyn_.nominal_step(&self.states[k], &self.inputs[k]) - &self.states[k + 1]).amax())
            .fold(0.0, f64::max)
    }

    pub fn is_consistent(&self, dyn_: &SubsystemDynamics, tol: f64) -> bool {
        self.max_defect(dyn_) <= tol
    }
}

/// Reference states `x_ref[k..k+N−1]` anchored at time `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefWindow {
    pub anchor: usize,
    pub states: Vec<DVector<f64>>,
}

impl RefWindow {
    /// First `N` states of a trajectory window.
    pub fn from_window(w: &TrajectoryWindow) -> Self {
        Self {
            anchor: w.anchor,
            states: w.states[..w.horizon()].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn at(&self, kappa: usize) -> &DVector<f64> {
        &self.states[kappa - self.anchor]
    }
}

/// Builds the shifted candidate: drop the first step, append one terminal-controller step.
pub fn build_candidate(prev: &TrajectoryWindow, dyn_: &SubsystemDynamics, ti: &TerminalIngredients) -> Result<TrajectoryWindow> {
    let n = prev.horizon();
    let last = &prev.states[n];
    if !ti.contains(last, FEAS_TOL) {
        return Err(Error::Violation(format!(
            "previous terminal state outside the terminal set (J_f = {:.3e} > {:.3e})",
            ti.cost(last),
            ti.gamma
        )));
    }
    let u_last = ti.control(last);
    let next = dyn_.nominal_step(last, &u_last);
    let mut states = prev.states[1..].to_vec();
    states.push(next);
    let mut inputs = prev.inputs[1..].to_vec();
    inputs.push(u_last);
    Ok(TrajectoryWindow {
        anchor: prev.anchor + 1,
        states,
        inputs,
    })
}

/// How the first predicted state relates to the measured state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialMode {
    /// `x̂[k|k] ∈ x[k] ⊕ (−𝒫)`.
    Tube,
    /// `x̂[k|k] = x[k]`.
    Pinned,
}

/// Box consistency constraint `x̂[κ] − x_ref[κ] ∈ C̄` on selected coordinates.
#[derive(Debug, Clone)]
pub struct Consistency<'a> {
    pub refs: &'a RefWindow,
    pub coords: &'a [usize],
    pub half_widths: &'a [f64],
}

/// A coupled constraint imposed directly with neighbors' trajectories frozen.
#[derive(Debug, Clone)]
pub struct FrozenCoupling {
    pub spec: ConstraintSpec,
    /// Index of the solving agent in `spec.participants`.
    pub slot: usize,
    /// Per participant, the frozen states for stages `0..=N` (unused for `slot`).
    pub others: Vec<Vec<DVector<f64>>>,
    /// Row-wise right-hand-side tightening.
    pub tighten: Vec<f64>,
}

impl FrozenCoupling {
    fn rows(&self, k: usize, x: &DVector<f64>, n: usize, m: usize) -> Rows {
        let states: Vec<&DVector<f64>> = (0..self.spec.participants.len())
            .map(|p| if p == self.slot { x } else { &self.others[p][k] })
            .collect();
        let grads = coupling::constraint_gradients(&self.spec, &states).expect("participant states supplied");
        let mut rows = Rows {
            value: DVector::zeros(grads.len()),
            jx: DMatrix::zeros(grads.len(), n),
            ju: DMatrix::zeros(grads.len(), m),
        };
        for (r, (v, g)) in grads.iter().enumerate() {
            rows.value[r] = v + self.tighten[r.min(self.tighten.len() - 1)];
            rows.jx.set_row(r, &g[self.slot].transpose());
        }
        rows
    }
}

#[derive(Debug, Clone)]
pub struct LocalOcp<'a> {
    pub dyn_: &'a SubsystemDynamics,
    pub q: &'a DMatrix<f64>,
    pub r: &'a DMatrix<f64>,
    pub terminal: &'a TerminalIngredients,
    pub p: &'a SetDescriptor,
    pub u_hat: &'a SetDescriptor,
    pub x_meas: DVector<f64>,
    pub anchor: usize,
    pub horizon: usize,
    pub initial: InitialMode,
    pub consistency: Option<Consistency<'a>>,
    pub state_set: Option<&'a SetDescriptor>,
    pub frozen: Vec<FrozenCoupling>,
    pub settings: SqpSettings,
}

/// Outcome class of a local solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    /// The solver stopped early but returned a feasible improvement.
    Suboptimal,
    /// The solver result was rejected and the feasible warm start kept.
    WarmStartKept,
    /// Neither the solver result nor the warm start is feasible.
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct LocalSolution {
    pub window: TrajectoryWindow,
    pub cost: f64,
    pub status: SolveStatus,
    pub sqp_iterations: usize,
    pub qp_iterations: usize,
    pub kkt: f64,
    pub violation: f64,
}

impl<'a> LocalOcp<'a> {
    fn halfspace_rows(set: &SetDescriptor, x: &DVector<f64>, shift: Option<&DVector<f64>>, sign: f64, m: usize) -> Rows {
        let (a, b) = set.halfspaces().expect("polyhedral set");
        // sign = +1: a x ≤ b (+ a shift); sign = −1: a (shift − x) ≤ b.
        let value = if sign > 0.0 {
            &a * x - &b
        } else {
            &a * (shift.expect("shift") - x) - &b
        };
        Rows {
            value,
            jx: &a * sign,
            ju: DMatrix::zeros(a.nrows(), m),
        }
    }

    fn rows_at(&self, k: usize, x: &DVector<f64>, u: Option<&DVector<f64>>) -> Rows {
        let n = self.dyn_.state_dim();
        let m = self.dyn_.input_dim();
        let mut parts: Vec<Rows> = Vec::new();
        if k == 0 && self.initial == InitialMode::Tube && !self.p.is_origin() {
            // x_meas − x̂ ∈ 𝒫.
            parts.push(Self::halfspace_rows(self.p, x, Some(&self.x_meas), -1.0, m));
        }
        if let Some(u) = u {
            let (a, b) = self.u_hat.halfspaces().expect("polyhedral input set");
            parts.push(Rows {
                value: &a * u - &b,
                jx: DMatrix::zeros(a.nrows(), n),
                ju: a,
            });
        }
        if let Some(c) = &self.consistency {
            if k < c.refs.len() {
                let rf = c.refs.at(self.anchor + k);
                let rows = 2 * c.coords.len();
                let mut r = Rows {
                    value: DVector::zeros(rows),
                    jx: DMatrix::zeros(rows, n),
                    ju: DMatrix::zeros(rows, m),
                };
                for (j, &ci) in c.coords.iter().enumerate() {
                    r.value[2 * j] = x[ci] - rf[ci] - c.half_widths[j];
                    r.jx[(2 * j, ci)] = 1.0;
                    r.value[2 * j + 1] = rf[ci] - x[ci] - c.half_widths[j];
                    r.jx[(2 * j + 1, ci)] = -1.0;
                }
                parts.push(r);
            }
        }
        if let Some(xs) = self.state_set {
            parts.push(Self::halfspace_rows(xs, x, None, 1.0, m));
        }
        for f in &self.frozen {
            parts.push(f.rows(k, x, n, m));
        }
        stack_rows(parts, n, m)
    }

    pub fn stage_cost_block(&self) -> CostBlock {
        let xi = self.terminal.xi();
        let u_xi = self.terminal.u_xi();
        let qx = self.q * xi;
        let ru = self.r * u_xi;
        CostBlock {
            hxx: self.q * 2.0,
            hux: DMatrix::zeros(self.dyn_.input_dim(), self.dyn_.state_dim()),
            huu: self.r * 2.0,
            hx: -&qx * 2.0,
            hu: -&ru * 2.0,
            constant: xi.dot(&qx) + u_xi.dot(&ru),
        }
    }

    /// Cost of a window: stage costs plus terminal cost.
    pub fn cost(&self, w: &TrajectoryWindow) -> f64 {
        let ti = self.terminal;
        let stages: f64 = (0..w.horizon())
            .map(|k| stage_cost(self.q, self.r, ti.xi(), ti.u_xi(), &w.states[k], &w.inputs[k]))
            .sum();
        stages + ti.cost(&w.states[w.horizon()])
    }

    /// Largest violation of any constraint family by `w` (dynamics included).
    pub fn violation(&self, w: &TrajectoryWindow) -> f64 {
        if w.horizon() != self.horizon {
            return f64::INFINITY;
        }
        sqp::max_violation(self, &w.states, &w.inputs)
    }
}

fn stack_rows(parts: Vec<Rows>, n: usize, m: usize) -> Rows {
    let total: usize = parts.iter().map(|p| p.value.len()).sum();
    let mut out = Rows {
        value: DVector::zeros(total),
        jx: DMatrix::zeros(total, n),
        ju: DMatrix::zeros(total, m),
    };
    let mut off = 0;
    for p in parts {
        let r = p.value.len();
        out.value.rows_mut(off, r).copy_from(&p.value);
        out.jx.view_mut((off, 0), (r, n)).copy_from(&p.jx);
        out.ju.view_mut((off, 0), (r, m)).copy_from(&p.ju);
        off += r;
    }
    out
}

impl<'a> StageProblem for LocalOcp<'a> {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn state_dim(&self) -> usize {
        self.dyn_.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.dyn_.input_dim()
    }

    fn fixed_initial(&self) -> Option<DVector<f64>> {
        match self.initial {
            InitialMode::Pinned => Some(self.x_meas.clone()),
            InitialMode::Tube if self.p.is_origin() => Some(self.x_meas.clone()),
            InitialMode::Tube => None,
        }
    }

    fn step(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.dyn_.nominal_step(x, u)
    }

    fn step_jac(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        self.dyn_.nominal_step_jac(x, u)
    }

    fn stage_cost(&self, _k: usize) -> CostBlock {
        self.stage_cost_block()
    }

    fn terminal_cost(&self) -> (DMatrix<f64>, DVector<f64>, f64) {
        let ti = self.terminal;
        let sp = ti.p() * ti.sigma;
        let spx = &sp * ti.xi();
        (&sp * 2.0, -&spx * 2.0, ti.xi().dot(&spx))
    }

    fn stage_rows(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Rows {
        self.rows_at(k, x, Some(u))
    }

    fn terminal_rows(&self, x: &DVector<f64>) -> Rows {
        self.rows_at(self.horizon, x, None)
    }

    fn terminal_quads(&self) -> Vec<QuadRow> {
        let (h, lin, c) = self.terminal_cost();
        vec![QuadRow {
            m: h,
            lin,
            offset: c - self.terminal.gamma,
        }]
    }
}

/// Solves the local problem from `warm`. The result is a dynamically
/// consistent window that is feasible and no worse than `warm` whenever
/// `warm` is feasible.
pub fn solve_local(ocp: &LocalOcp, warm: &TrajectoryWindow) -> Result<LocalSolution> {
    check_dim("warm start horizon", ocp.horizon, warm.horizon())?;
    check_dim("measured state", ocp.dyn_.state_dim(), ocp.x_meas.len())?;
    let warm_violation = ocp.violation(warm);
    let warm_cost = ocp.cost(warm);
    let warm_ok = warm_violation <= FEAS_TOL;

    let attempt = sqp::solve(ocp, &warm.states, &warm.inputs, &ocp.settings);
    let (candidate, iters, qp_iters, kkt, converged) = match attempt {
        Ok(res) => {
            let w = TrajectoryWindow::rollout(ocp.dyn_, ocp.anchor, &res.xs[0], res.us.clone());
            (Some(w), res.iterations, res.qp_iterations, res.kkt, res.converged)
        }
        Err(_) => (None, 0, 0, f64::INFINITY, false),
    };
    if let Some(w) = candidate {
        let v = ocp.violation(&w);
        let c = ocp.cost(&w);
        if v <= FEAS_TOL && (!warm_ok || c <= warm_cost + 1e-6) {
            return Ok(LocalSolution {
                window: w,
                cost: c,
                status: if converged { SolveStatus::Optimal } else { SolveStatus::Suboptimal },
                sqp_iterations: iters,
                qp_iterations: qp_iters,
                kkt,
                violation: v,
            });
        }
    }
    let mut window = warm.clone();
    window.anchor = ocp.anchor;
    Ok(LocalSolution {
        window,
        cost: warm_cost,
        status: if warm_ok { SolveStatus::WarmStartKept } else { SolveStatus::Infeasible },
        sqp_iterations: iters,
        qp_iterations: qp_iters,
        kkt,
        violation: warm_violation,
    })
}

/// `u = û*[k|k] + K(x, x̂*[k|k])`, which must lie in `𝒰`.
pub fn apply_control(x: &DVector<f64>, solution: &TrajectoryWindow, aux: &AuxLaw, u_set: &SetDescriptor) -> Result<DVector<f64>> {
    let u = &solution.inputs[0] + aux.eval(x, &solution.states[0], &solution.inputs[0]);
    if !u_set.contains(u.as_slice(), FEAS_TOL) {
        return Err(Error::InputViolation(format!("applied input {:?} leaves the input set", u.as_slice())));
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use crate::model::ModelKind;

    fn scalar_model(a: f64) -> SubsystemDynamics {
        SubsystemDynamics::new(
            ModelKind::DiscreteLti {
                a: vec![vec![a]],
                b: vec![vec![1.0]],
            },
            1.0,
            1,
        )
        .unwrap()
    }

    #[test]
    fn candidate_appends_terminal_step() {
        let dyn_ = scalar_model(0.5);
        let k = -0.3;
        let ti = TerminalIngredients::new(
            DVector::zeros(1),
            DVector::zeros(1),
            linalg::diag(&[1.0]),
            DMatrix::from_element(1, 1, k),
            1.0,
            10.0,
            0.1,
        )
        .unwrap();
        let prev = TrajectoryWindow::rollout(&dyn_, 0, &DVector::from_element(1, 1.0), vec![DVector::zeros(1); 3]);
        let cand = build_candidate(&prev, &dyn_, &ti).unwrap();
        assert_eq!(cand.anchor, 1);
        let xn = prev.states[3][0];
        assert!((cand.states[3][0] - (0.5 + k) * xn).abs() < 1e-15);
        assert!((cand.inputs[2][0] - k * xn).abs() < 1e-15);
    }
}
