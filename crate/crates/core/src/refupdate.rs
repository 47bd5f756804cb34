//! Consistency sets, initially feasible trajectories, the online reference
//! update with its acceptance conditions, and the reference-trajectory
//! validator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coupling::{self, ConstraintSpec, CouplingGraph, Uncertainty};
use crate::error::{Error, Result};
use crate::model::SubsystemDynamics;
use crate::ocp::qp::QuadRow;
use crate::ocp::sqp::{self, CostBlock, Rows, SqpSettings, StageProblem};
use crate::ocp::{RefWindow, TrajectoryWindow, FEAS_TOL};
use crate::setgeom::{self, SetDescriptor};
use crate::terminal::TerminalIngredients;

/// Consistency sets of one agent on the coordinates `coords`:
/// `Ĉ = B_min(α,β)`, `C = Ĉ ⊕ 𝒫` and the inscribed box `C̄` used by the solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencySets {
    pub alpha: f64,
    pub beta: f64,
    pub coords: Vec<usize>,
    pub c_hat: SetDescriptor,
    /// Outer box of `Ĉ ⊕ 𝒫` projected onto `coords`.
    pub c: SetDescriptor,
    pub c_bar: SetDescriptor,
    pub c_bar_half: Vec<f64>,
    /// The tube set `𝒫` in full state coordinates.
    pub p: SetDescriptor,
}

impl ConsistencySets {
    pub fn new(alpha: f64, beta: f64, p: &SetDescriptor, coords: Vec<usize>) -> Result<Self> {
        if !(alpha > 0.0) || !(beta > 0.0) {
            return Err(Error::Config("margins alpha and beta must be positive".into()));
        }
        let radius = alpha.min(beta);
        let d = coords.len();
        let c_hat = SetDescriptor::ball(vec![0.0; d], radius)?;
        let half = radius / (d as f64).sqrt();
        let c_bar_half = vec![half; d];
        let c_bar = SetDescriptor::symmetric_box(&c_bar_half)?;
        let c = setgeom::minkowski_sum(&c_hat, &p.project(&coords)?)?;
        Ok(Self {
            alpha,
            beta,
            coords,
            c_hat,
            c,
            c_bar,
            c_bar_half,
            p: p.clone(),
        })
    }

    pub fn radius(&self) -> f64 {
        self.alpha.min(self.beta)
    }

    /// `Ĉ ⊕ 𝒫` as an uncertainty (coordinates outside `coords` are free in `Ĉ`).
    pub fn c_uncertainty(&self) -> Uncertainty {
        let n = self.p.dim();
        let mut u = Uncertainty::new(n).with_set(self.p.clone());
        if self.coords.len() == n {
            u = u.with_ball(self.radius());
        } else {
            u = u.with_embedded(self.c_hat.clone(), self.coords.clone());
        }
        u
    }

    /// `𝒫 ⊕ B_β` used when computing initially feasible trajectories.
    pub fn init_uncertainty(&self) -> Uncertainty {
        Uncertainty::new(self.p.dim()).with_set(self.p.clone()).with_ball(self.beta)
    }
}

/// Precomputed right-hand-side tightenings for every constraint row.
#[derive(Debug, Clone)]
pub struct Tightenings {
    /// Per coupled constraint (graph order), per row.
    pub coupled: Vec<Vec<f64>>,
    /// Per agent, per row of its uncoupled state set.
    pub state: Vec<Vec<f64>>,
}

impl Tightenings {
    pub fn compute(graph: &CouplingGraph, state_sets: &[Option<SetDescriptor>], unc: &[Uncertainty]) -> Result<Self> {
        let mut coupled = Vec::with_capacity(graph.constraints.len());
        for c in &graph.constraints {
            let refs: Vec<&Uncertainty> = c.participants.iter().map(|&p| &unc[p]).collect();
            coupled.push(coupling::row_tightening(c, &refs)?);
        }
        let mut state = Vec::with_capacity(state_sets.len());
        for (i, xs) in state_sets.iter().enumerate() {
            let rows = match xs.as_ref().and_then(|s| s.halfspaces()) {
                Some((a, _)) => (0..a.nrows())
                    .map(|j| {
                        let d: Vec<f64> = a.row(j).iter().copied().collect();
                        unc[i].support(&d)
                    })
                    .collect(),
                None => Vec::new(),
            };
            if rows.iter().any(|v: &f64| !v.is_finite()) {
                return Err(Error::Unbounded(format!("state tightening of agent {i}")));
            }
            state.push(rows);
        }
        Ok(Self { coupled, state })
    }

    pub fn consistency(graph: &CouplingGraph, state_sets: &[Option<SetDescriptor>], sets: &[ConsistencySets]) -> Result<Self> {
        let unc: Vec<Uncertainty> = sets.iter().map(|s| s.c_uncertainty()).collect();
        Self::compute(graph, state_sets, &unc)
    }

    pub fn initial(graph: &CouplingGraph, state_sets: &[Option<SetDescriptor>], sets: &[ConsistencySets]) -> Result<Self> {
        let unc: Vec<Uncertainty> = sets.iter().map(|s| s.init_uncertainty()).collect();
        Self::compute(graph, state_sets, &unc)
    }
}

fn state_margin(set: &SetDescriptor, tighten: &[f64], x: &DVector<f64>) -> f64 {
    let (a, b) = set.halfspaces().expect("polyhedral state set");
    let v = &a * x - &b;
    v.iter().zip(tighten).map(|(v, t)| -(v + t)).fold(f64::INFINITY, f64::min)
}

fn coupled_margin(c: &ConstraintSpec, tighten: &[f64], states: &[&DVector<f64>]) -> f64 {
    coupling::eval_constraint(c, states)
        .expect("participant states supplied")
        .iter()
        .zip(tighten)
        .map(|(v, t)| -(v + t))
        .fold(f64::INFINITY, f64::min)
}

/// Agent data shared by the reference update and the validator.
#[derive(Debug, Clone, Copy)]
pub struct RefContext<'a> {
    pub graph: &'a CouplingGraph,
    pub sets: &'a [ConsistencySets],
    pub state_sets: &'a [Option<SetDescriptor>],
    pub tight: &'a Tightenings,
    pub terminals: &'a [TerminalIngredients],
}

/// Whether `x̂*_i[κ]` may become the reference: its `C_i`-neighborhood keeps
/// every uncoupled constraint, and every coupled constraint holds against
/// both the optimal and the previous reference states of all neighbors.
pub fn conditions_hold(
    ctx: &RefContext,
    i: usize,
    kappa: usize,
    optimal: &[&TrajectoryWindow],
    prev_refs: &[&RefWindow],
) -> bool {
    let xi = optimal[i].at(kappa);
    if let Some(set) = &ctx.state_sets[i] {
        if state_margin(set, &ctx.tight.state[i], xi) < 0.0 {
            return false;
        }
    }
    for ci in ctx.graph.constraints_of(i) {
        let c = &ctx.graph.constraints[ci];
        let others: Vec<usize> = (0..c.participants.len()).filter(|&p| c.participants[p] != i).collect();
        // Every combination of optimal / previous-reference states of the neighbors.
        for mask in 0..(1usize << others.len()) {
            let states: Vec<&DVector<f64>> = c
                .participants
                .iter()
                .enumerate()
                .map(|(slot, &j)| {
                    if j == i {
                        xi
                    } else {
                        let bit = others.iter().position(|&o| o == slot).expect("neighbor slot");
                        if mask & (1 << bit) == 0 {
                            optimal[j].at(kappa)
                        } else {
                            prev_refs[j].at(kappa)
                        }
                    }
                })
                .collect();
            if coupled_margin(c, &ctx.tight.coupled[ci], &states) < 0.0 {
                return false;
            }
        }
    }
    true
}

/// Result of one reference update.
#[derive(Debug, Clone)]
pub struct RefUpdate {
    pub refs: RefWindow,
    pub accepted: usize,
    pub checked: usize,
}

/// Reference update after solving at time `k`: entries `κ = k+1..k+N−1` take
/// the optimal state if the conditions hold (else keep the previous
/// reference), and the final entry `κ = k+N` is the optimal terminal state.
pub fn reference_update(
    ctx: &RefContext,
    i: usize,
    optimal: &[&TrajectoryWindow],
    prev_refs: &[&RefWindow],
) -> RefUpdate {
    let k = optimal[i].anchor;
    let n = optimal[i].horizon();
    let mut states = Vec::with_capacity(n);
    let mut accepted = 0;
    for kappa in k + 1..k + n {
        if conditions_hold(ctx, i, kappa, optimal, prev_refs) {
            states.push(optimal[i].at(kappa).clone());
            accepted += 1;
        } else {
            states.push(prev_refs[i].at(kappa).clone());
        }
    }
    states.push(optimal[i].at(k + n).clone());
    RefUpdate {
        refs: RefWindow { anchor: k + 1, states },
        accepted,
        checked: n.saturating_sub(1),
    }
}

/// Tentative update within time step `k` for the iterative scheme: entries
/// `κ = k..k+N−1` take the optimal state where the conditions hold.
pub fn tentative_update(
    ctx: &RefContext,
    i: usize,
    optimal: &[&TrajectoryWindow],
    prev_refs: &[&RefWindow],
) -> RefUpdate {
    let k = optimal[i].anchor;
    let n = optimal[i].horizon();
    let mut states = Vec::with_capacity(n);
    let mut accepted = 0;
    for kappa in k..k + n {
        if conditions_hold(ctx, i, kappa, optimal, prev_refs) {
            states.push(optimal[i].at(kappa).clone());
            accepted += 1;
        } else {
            states.push(prev_refs[i].at(kappa).clone());
        }
    }
    RefUpdate {
        refs: RefWindow { anchor: k, states },
        accepted,
        checked: n,
    }
}

/// Fixed-reference rule: keep established references, append the optimal
/// terminal state.
pub fn fixed_reference_update(optimal: &TrajectoryWindow, prev_ref: &RefWindow) -> RefWindow {
    let k = optimal.anchor;
    let n = optimal.horizon();
    let mut states: Vec<DVector<f64>> = (k + 1..k + n).map(|kappa| prev_ref.at(kappa).clone()).collect();
    states.push(optimal.at(k + n).clone());
    RefWindow { anchor: k + 1, states }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCheckReport {
    /// Worst surrogate margin of the constraint-implication part (≥ 0 passes).
    pub constraint_margin: f64,
    /// Worst margin of `x̂*[κ|k−1] ∈ x_ref[κ|k] ⊕ Ĉ` (≥ 0 passes).
    pub consistency_margin: f64,
    pub failures: Vec<String>,
}

impl ReferenceCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks reference windows of one round. `prev_optimal` are the optimal
/// windows of the previous time step (absent at `k = 0`).
pub fn validate_references(
    ctx: &RefContext,
    refs: &[&RefWindow],
    prev_optimal: Option<&[&TrajectoryWindow]>,
) -> ReferenceCheckReport {
    let mut report = ReferenceCheckReport {
        constraint_margin: f64::INFINITY,
        consistency_margin: f64::INFINITY,
        failures: Vec::new(),
    };
    let tol = 1e-9;
    let in_terminal = |i: usize, x: &DVector<f64>| ctx.terminals[i].contains(x, 1e-9);
    for (i, r) in refs.iter().enumerate() {
        if let Some(set) = &ctx.state_sets[i] {
            for (off, x) in r.states.iter().enumerate() {
                let m = state_margin(set, &ctx.tight.state[i], x);
                if m < -tol && !in_terminal(i, x) {
                    report.failures.push(format!("agent {i} state constraint at κ={}", r.anchor + off));
                }
                report.constraint_margin = report.constraint_margin.min(m);
            }
        }
    }
    for (ci, c) in ctx.graph.constraints.iter().enumerate() {
        let anchor = refs[c.participants[0]].anchor;
        let len = refs[c.participants[0]].len();
        for kappa in anchor..anchor + len {
            let states: Vec<&DVector<f64>> = c.participants.iter().map(|&p| refs[p].at(kappa)).collect();
            let m = coupled_margin(c, &ctx.tight.coupled[ci], &states);
            report.constraint_margin = report.constraint_margin.min(m);
            if m < -tol {
                let all_terminal = c.participants.iter().zip(&states).all(|(&p, x)| in_terminal(p, x));
                if !all_terminal {
                    report.failures.push(format!("{} at κ={kappa} (margin {m:.3e})", c.label()));
                }
            }
        }
    }
    if let Some(prev) = prev_optimal {
        for (i, r) in refs.iter().enumerate() {
            let w = prev[i];
            let coords = &ctx.sets[i].coords;
            let radius = ctx.sets[i].radius();
            let last = w.anchor + w.horizon();
            for kappa in r.anchor..(r.anchor + r.len()).min(last + 1) {
                let d: f64 = coords
                    .iter()
                    .map(|&c| (w.at(kappa)[c] - r.at(kappa)[c]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let m = radius - d;
                report.consistency_margin = report.consistency_margin.min(m);
                if m < -1e-7 {
                    report.failures.push(format!("agent {i} leaves its reference neighborhood at κ={kappa}"));
                }
            }
        }
    }
    report
}

/// Objective used for the initially feasible trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitObjective {
    /// Input effort only (with a tiny state regularization).
    #[default]
    MinEnergy,
    /// Track the initial guess with the stage weights.
    TrackGuess,
}

/// Initial guess for the centralized problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InitGuess {
    /// Straight-line interpolation reaching the target after `arrival` steps.
    #[default]
    Straight,
    /// Rotation about `center` by `angle` (positive is counter-clockwise)
    /// applied to position and heading.
    Arc { center: [f64; 2], angle: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSettings {
    #[serde(default)]
    pub objective: InitObjective,
    #[serde(default)]
    pub guess: InitGuess,
    /// Step at which the guess reaches the target (defaults to `N − 4`).
    #[serde(default)]
    pub arrival: Option<usize>,
    /// Extra margin added to every tightening.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    1e-6
}

impl Default for InitSettings {
    fn default() -> Self {
        Self {
            objective: InitObjective::MinEnergy,
            guess: InitGuess::Straight,
            arrival: None,
            margin: default_margin(),
        }
    }
}

/// Per-agent data for the centralized initial trajectory problem.
#[derive(Debug, Clone, Copy)]
pub struct InitAgent<'a> {
    pub dyn_: &'a SubsystemDynamics,
    pub q: &'a DMatrix<f64>,
    pub r: &'a DMatrix<f64>,
    pub x0: &'a DVector<f64>,
    pub terminal: &'a TerminalIngredients,
    pub u_hat: &'a SetDescriptor,
}

struct Stacked<'a> {
    agents: &'a [InitAgent<'a>],
    graph: &'a CouplingGraph,
    state_sets: &'a [Option<SetDescriptor>],
    tight: &'a Tightenings,
    margin: f64,
    horizon: usize,
    x_off: Vec<usize>,
    u_off: Vec<usize>,
    nx: usize,
    nu: usize,
    guess: Vec<DVector<f64>>,
    objective: InitObjective,
}

impl<'a> Stacked<'a> {
    fn split<'v>(&self, x: &'v DVector<f64>, i: usize) -> DVector<f64> {
        x.rows(self.x_off[i], self.agents[i].dyn_.state_dim()).into_owned()
    }

    fn splitu(&self, u: &DVector<f64>, i: usize) -> DVector<f64> {
        u.rows(self.u_off[i], self.agents[i].dyn_.input_dim()).into_owned()
    }

    fn state_rows(&self, x: &DVector<f64>) -> Rows {
        let mut value = Vec::new();
        let mut jrows: Vec<DVector<f64>> = Vec::new();
        for (i, set) in self.state_sets.iter().enumerate() {
            if let Some((a, b)) = set.as_ref().and_then(|s| s.halfspaces()) {
                let xi = self.split(x, i);
                for j in 0..a.nrows() {
                    value.push(a.row(j).dot(&xi.transpose()) - b[j] + self.tight.state[i][j] + self.margin);
                    let mut g = DVector::zeros(self.nx);
                    for c in 0..a.ncols() {
                        g[self.x_off[i] + c] = a[(j, c)];
                    }
                    jrows.push(g);
                }
            }
        }
        for (ci, c) in self.graph.constraints.iter().enumerate() {
            let parts: Vec<DVector<f64>> = c.participants.iter().map(|&p| self.split(x, p)).collect();
            let refs: Vec<&DVector<f64>> = parts.iter().collect();
            let grads = coupling::constraint_gradients(c, &refs).expect("participant states supplied");
            for (r, (v, gs)) in grads.iter().enumerate() {
                value.push(v + self.tight.coupled[ci][r] + self.margin);
                let mut g = DVector::zeros(self.nx);
                for (slot, &p) in c.participants.iter().enumerate() {
                    g.rows_mut(self.x_off[p], gs[slot].len()).copy_from(&gs[slot]);
                }
                jrows.push(g);
            }
        }
        let mut jx = DMatrix::zeros(value.len(), self.nx);
        for (r, g) in jrows.iter().enumerate() {
            jx.set_row(r, &g.transpose());
        }
        Rows {
            value: DVector::from_vec(value),
            jx,
            ju: DMatrix::zeros(0, self.nu),
        }
    }
}

impl<'a> StageProblem for Stacked<'a> {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn state_dim(&self) -> usize {
        self.nx
    }

    fn input_dim(&self) -> usize {
        self.nu
    }

    fn fixed_initial(&self) -> Option<DVector<f64>> {
        let mut x = DVector::zeros(self.nx);
        for (i, a) in self.agents.iter().enumerate() {
            x.rows_mut(self.x_off[i], a.x0.len()).copy_from(a.x0);
        }
        Some(x)
    }

    fn step(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.nx);
        for (i, a) in self.agents.iter().enumerate() {
            let next = a.dyn_.nominal_step(&self.split(x, i), &self.splitu(u, i));
            out.rows_mut(self.x_off[i], next.len()).copy_from(&next);
        }
        out
    }

    fn step_jac(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mut out = DVector::zeros(self.nx);
        let mut a_big = DMatrix::zeros(self.nx, self.nx);
        let mut b_big = DMatrix::zeros(self.nx, self.nu);
        for (i, ag) in self.agents.iter().enumerate() {
            let (f, a, b) = ag.dyn_.nominal_step_jac(&self.split(x, i), &self.splitu(u, i));
            out.rows_mut(self.x_off[i], f.len()).copy_from(&f);
            a_big.view_mut((self.x_off[i], self.x_off[i]), a.shape()).copy_from(&a);
            b_big.view_mut((self.x_off[i], self.u_off[i]), b.shape()).copy_from(&b);
        }
        (out, a_big, b_big)
    }

    fn stage_cost(&self, k: usize) -> CostBlock {
        let mut c = CostBlock {
            hxx: DMatrix::zeros(self.nx, self.nx),
            hux: DMatrix::zeros(self.nu, self.nx),
            huu: DMatrix::zeros(self.nu, self.nu),
            hx: DVector::zeros(self.nx),
            hu: DVector::zeros(self.nu),
            constant: 0.0,
        };
        for (i, a) in self.agents.iter().enumerate() {
            let (xo, uo) = (self.x_off[i], self.u_off[i]);
            let (n, m) = (a.dyn_.state_dim(), a.dyn_.input_dim());
            let (wq, target) = match self.objective {
                InitObjective::MinEnergy => (1e-6, a.terminal.xi().clone()),
                InitObjective::TrackGuess => (1.0, self.guess[k].rows(xo, n).into_owned()),
            };
            let q = a.q * wq;
            let qx = &q * &target;
            c.hxx.view_mut((xo, xo), (n, n)).copy_from(&(&q * 2.0));
            c.hx.rows_mut(xo, n).copy_from(&(-&qx * 2.0));
            let ru = a.r * a.terminal.u_xi();
            c.huu.view_mut((uo, uo), (m, m)).copy_from(&(a.r * 2.0));
            c.hu.rows_mut(uo, m).copy_from(&(-&ru * 2.0));
            c.constant += target.dot(&qx) + a.terminal.u_xi().dot(&ru);
        }
        c
    }

    fn terminal_cost(&self) -> (DMatrix<f64>, DVector<f64>, f64) {
        let c = self.stage_cost(self.horizon);
        (c.hxx, c.hx, 0.0)
    }

    fn stage_rows(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Rows {
        let mut value = Vec::new();
        let mut ju_rows: Vec<(usize, DVector<f64>)> = Vec::new();
        for (i, a) in self.agents.iter().enumerate() {
            let (ha, hb) = a.u_hat.halfspaces().expect("polyhedral input set");
            let ui = self.splitu(u, i);
            let v = &ha * &ui - &hb;
            for j in 0..ha.nrows() {
                value.push(v[j] + self.margin);
                ju_rows.push((i, ha.row(j).transpose()));
            }
        }
        let s = self.state_rows(x);
        let rows_u = value.len();
        let total = rows_u + s.value.len();
        let mut out = Rows {
            value: DVector::zeros(total),
            jx: DMatrix::zeros(total, self.nx),
            ju: DMatrix::zeros(total, self.nu),
        };
        for (r, (i, g)) in ju_rows.iter().enumerate() {
            out.value[r] = value[r];
            out.ju.view_mut((r, self.u_off[*i]), (1, g.len())).copy_from(&g.transpose());
        }
        out.value.rows_mut(rows_u, s.value.len()).copy_from(&s.value);
        out.jx.view_mut((rows_u, 0), (s.value.len(), self.nx)).copy_from(&s.jx);
        out
    }

    fn terminal_rows(&self, _x: &DVector<f64>) -> Rows {
        Rows::empty(self.nx, self.nu)
    }

    fn terminal_quads(&self) -> Vec<QuadRow> {
        self.agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let ti = a.terminal;
                let n = ti.xi().len();
                let sp = ti.p() * ti.sigma;
                let spx = &sp * ti.xi();
                let mut m = DMatrix::zeros(self.nx, self.nx);
                m.view_mut((self.x_off[i], self.x_off[i]), (n, n)).copy_from(&(&sp * 2.0));
                let mut lin = DVector::zeros(self.nx);
                lin.rows_mut(self.x_off[i], n).copy_from(&(-&spx * 2.0));
                // Shrink the level slightly so the rolled-out windows stay inside.
                QuadRow {
                    m,
                    lin,
                    offset: ti.xi().dot(&spx) - ti.gamma * (1.0 - 1e-6),
                }
            })
            .collect()
    }
}

fn guess_state(x0: &DVector<f64>, xi: &DVector<f64>, guess: &InitGuess, s: f64) -> DVector<f64> {
    match guess {
        InitGuess::Straight => x0 + (xi - x0) * s,
        InitGuess::Arc { center, angle } => {
            let th = angle * s;
            let (c, sn) = (th.cos(), th.sin());
            let (dx, dy) = (x0[0] - center[0], x0[1] - center[1]);
            let mut x = x0 + (xi - x0) * s;
            x[0] = center[0] + c * dx - sn * dy;
            x[1] = center[1] + sn * dx + c * dy;
            if x.len() > 2 {
                x[2] = x0[2] + th;
            }
            if s >= 1.0 {
                x = xi.clone();
            }
            x
        }
    }
}

/// Solves one centralized problem for initially feasible trajectories of all
/// agents, with tightenings for `𝒫 ⊕ B_β`, tightened inputs and terminal sets.
pub fn compute_initial_trajectories(
    agents: &[InitAgent],
    graph: &CouplingGraph,
    state_sets: &[Option<SetDescriptor>],
    sets: &[ConsistencySets],
    horizon: usize,
    settings: &InitSettings,
) -> Result<Vec<TrajectoryWindow>> {
    let tight = Tightenings::initial(graph, state_sets, sets)?;
    let mut x_off = Vec::new();
    let mut u_off = Vec::new();
    let (mut nx, mut nu) = (0, 0);
    for a in agents {
        x_off.push(nx);
        u_off.push(nu);
        nx += a.dyn_.state_dim();
        nu += a.dyn_.input_dim();
    }
    let arrival = settings.arrival.unwrap_or(horizon.saturating_sub(4).max(1)).min(horizon).max(1);
    let mut guess = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let s = (k as f64 / arrival as f64).min(1.0);
        let mut x = DVector::zeros(nx);
        for (i, a) in agents.iter().enumerate() {
            let g = guess_state(a.x0, a.terminal.xi(), &settings.guess, s);
            x.rows_mut(x_off[i], g.len()).copy_from(&g);
        }
        guess.push(x);
    }
    let problem = Stacked {
        agents,
        graph,
        state_sets,
        tight: &tight,
        margin: settings.margin,
        horizon,
        x_off,
        u_off,
        nx,
        nu,
        guess: guess.clone(),
        objective: settings.objective.clone(),
    };
    let mut u_guess = DVector::zeros(nu);
    for (i, a) in agents.iter().enumerate() {
        u_guess.rows_mut(problem.u_off[i], a.dyn_.input_dim()).copy_from(a.terminal.u_xi());
    }
    let us = vec![u_guess; horizon];
    let sqp_settings = SqpSettings {
        max_iter: 60,
        ..SqpSettings::default()
    };
    let res = sqp::solve(&problem, &guess, &us, &sqp_settings)?;
    let mut windows = Vec::with_capacity(agents.len());
    for (i, a) in agents.iter().enumerate() {
        let inputs: Vec<DVector<f64>> = res.us.iter().map(|u| problem.splitu(u, i)).collect();
        windows.push(TrajectoryWindow::rollout(a.dyn_, 0, a.x0, inputs));
    }
    // Re-check every family on the rolled-out windows.
    let mut stacked_states = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let mut x = DVector::zeros(nx);
        for (i, w) in windows.iter().enumerate() {
            x.rows_mut(problem.x_off[i], w.states[k].len()).copy_from(&w.states[k]);
        }
        stacked_states.push(x);
    }
    let mut failures = Vec::new();
    for k in 0..horizon {
        let rows = problem.stage_rows(k, &stacked_states[k], &res.us[k]);
        let worst = rows.value.iter().map(|v| v - settings.margin).fold(f64::NEG_INFINITY, f64::max);
        if worst > FEAS_TOL {
            failures.push(format!("step {k}: inflated state/coupled/input rows violated by {worst:.3e}"));
            break;
        }
    }
    for (i, w) in windows.iter().enumerate() {
        if !agents[i].terminal.contains(&w.states[horizon], 1e-9) {
            failures.push(format!("agent {i}: terminal set not reached"));
        }
    }
    if !failures.is_empty() {
        return Err(Error::Init {
            step: 4,
            msg: format!(
                "no initially feasible trajectories ({}; solver converged: {})",
                failures.join("; "),
                res.converged
            ),
        });
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consistency_box_is_inscribed() {
        let p = SetDescriptor::symmetric_box(&[0.1, 0.1, 0.2]).unwrap();
        let alpha = 2f64.sqrt() * 0.125;
        let s = ConsistencySets::new(alpha, alpha, &p, vec![0, 1]).unwrap();
        assert!((s.c_bar_half[0] - 0.125).abs() < 1e-12);
        let u = s.c_uncertainty();
        let r = u.radius(&[0, 1]).unwrap();
        assert!((r - (alpha + 0.1 * 2f64.sqrt())).abs() < 1e-12);
    }
}
