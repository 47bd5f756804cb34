//! Agent state machine: synchronous neighbor rounds over an in-process
//! message bus, the parallel scheme with optional inner iterations, and the
//! fixed-reference and sequential baselines.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{self, CouplingGraph, Uncertainty};
use crate::error::{Error, Result};
use crate::model::SubsystemDynamics;
use crate::ocp::sqp::SqpSettings;
use crate::ocp::{
    self, Consistency, FrozenCoupling, InitialMode, LocalOcp, LocalSolution, RefWindow, SolveStatus,
    TrajectoryWindow, FEAS_TOL,
};
use crate::refupdate::{self, ReferenceCheckReport, ConsistencySets, RefContext, Tightenings};
use crate::setgeom::SetDescriptor;
use crate::terminal::TerminalIngredients;
use crate::tube::TubeIngredients;

/// How the agents coordinate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControllerMode {
    /// Parallel solves with consistency constraints and online reference
    /// updates; `iterations > 1` re-solves within a step before applying.
    Proposed { iterations: usize },
    /// Parallel solves with references that never change once set.
    FixedReference,
    /// Agents solve one after another with coupled constraints imposed
    /// directly against neighbors' latest windows.
    Sequential { order: Vec<usize> },
}

impl ControllerMode {
    pub fn validate(&self, agents: usize) -> Result<()> {
        match self {
            ControllerMode::Proposed { iterations } if *iterations == 0 => {
                Err(Error::Config("at least one iteration is required".into()))
            }
            ControllerMode::Sequential { order } => {
                let mut seen = vec![false; agents];
                for &i in order {
                    if i >= agents || seen[i] {
                        return Err(Error::Config(format!("sequential order {order:?} is not a permutation")));
                    }
                    seen[i] = true;
                }
                if order.len() != agents {
                    return Err(Error::Config(format!("sequential order {order:?} is not a permutation")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Short label used in file names and tables.
    pub fn label(&self) -> String {
        match self {
            ControllerMode::Proposed { iterations: 1 } => "proposed".into(),
            ControllerMode::Proposed { iterations } => format!("proposed-it{iterations}"),
            ControllerMode::FixedReference => "fixedref".into(),
            ControllerMode::Sequential { .. } => "sequential-direct".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Predicted,
    Reference,
}

/// Identifies one exchange: time step, phase and inner iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Round {
    pub k: usize,
    pub phase: Phase,
    pub iteration: usize,
}

impl fmt::Display for Round {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k={} {:?} it={}", self.k, self.phase, self.iteration)
    }
}

#[derive(Debug, Clone)]
pub enum Payload {
    Window(TrajectoryWindow),
    Reference(RefWindow),
}

impl Payload {
    fn anchor(&self) -> usize {
        match self {
            Payload::Window(w) => w.anchor,
            Payload::Reference(r) => r.anchor,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoundMessage {
    pub sender: usize,
    pub receiver: usize,
    pub round: Round,
    pub payload: Payload,
}

/// Per-message delay `constant + U(0, jitter)` seconds, added to timing only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub constant: f64,
    pub jitter: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusStats {
    pub posted: usize,
    pub delivered: usize,
    pub barriers: usize,
}

/// In-process bus with barrier delivery. Inboxes are keyed by sender, so the
/// posting order (optionally shuffled) never affects what agents see.
#[derive(Debug)]
pub struct MessageBus {
    neighbors: Vec<Vec<usize>>,
    pending: Vec<RoundMessage>,
    shuffle: Option<ChaCha8Rng>,
    latency: Option<(LatencyModel, ChaCha8Rng)>,
    pub stats: BusStats,
}

pub type Inbox = BTreeMap<usize, Payload>;

impl MessageBus {
    pub fn new(graph: &CouplingGraph) -> Self {
        Self {
            neighbors: (0..graph.agents).map(|i| graph.neighbors(i)).collect(),
            pending: Vec::new(),
            shuffle: None,
            latency: None,
            stats: BusStats::default(),
        }
    }

    /// Delivers messages in a seeded random order.
    pub fn with_shuffle(mut self, seed: u64) -> Self {
        self.shuffle = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn with_latency(mut self, model: LatencyModel, seed: u64) -> Self {
        self.latency = Some((model, ChaCha8Rng::seed_from_u64(seed)));
        self
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Posts `payload` from `sender` to each of its neighbors.
    pub fn broadcast(&mut self, sender: usize, round: Round, payload: &Payload) -> Result<()> {
        let ok = match round.phase {
            Phase::Predicted => payload.anchor() == round.k,
            // Tentative references stay at k; final ones move to k + 1.
            Phase::Reference => payload.anchor() == round.k || payload.anchor() == round.k + 1,
        };
        if !ok {
            return Err(Error::Bus(format!("agent {sender} posted a payload anchored at {} in round {round}", payload.anchor())));
        }
        for &r in &self.neighbors[sender] {
            self.pending.push(RoundMessage {
                sender,
                receiver: r,
                round,
                payload: payload.clone(),
            });
            self.stats.posted += 1;
        }
        Ok(())
    }

    /// Barrier: returns each agent's inbox for `round` once every neighbor
    /// message is present, plus the largest simulated message delay.
    pub fn deliver(&mut self, round: Round) -> Result<(Vec<Inbox>, f64)> {
        let mut msgs = std::mem::take(&mut self.pending);
        if let Some(stale) = msgs.iter().find(|m| m.round != round) {
            return Err(Error::Bus(format!(
                "message from agent {} for round {} pending at barrier {round}",
                stale.sender, stale.round
            )));
        }
        if let Some(rng) = self.shuffle.as_mut() {
            msgs.shuffle(rng);
        }
        let mut delay: f64 = 0.0;
        let mut inboxes: Vec<Inbox> = vec![BTreeMap::new(); self.neighbors.len()];
        for m in msgs {
            if let Some((model, rng)) = self.latency.as_mut() {
                delay = delay.max(model.constant + model.jitter * rng.gen::<f64>());
            }
            if inboxes[m.receiver].insert(m.sender, m.payload).is_some() {
                return Err(Error::Bus(format!(
                    "duplicate message from agent {} to agent {} in round {round}",
                    m.sender, m.receiver
                )));
            }
            self.stats.delivered += 1;
        }
        for (i, inbox) in inboxes.iter().enumerate() {
            if let Some(&missing) = self.neighbors[i].iter().find(|j| !inbox.contains_key(j)) {
                return Err(Error::Bus(format!(
                    "agent {i} is waiting for agent {missing} at barrier {round}"
                )));
            }
        }
        self.stats.barriers += 1;
        Ok((inboxes, delay))
    }
}

/// Everything an agent knows that does not change online.
#[derive(Debug, Clone)]
pub struct AgentStatic {
    pub dyn_: SubsystemDynamics,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub u_set: SetDescriptor,
    /// Untightened uncoupled state set.
    pub state_set: Option<SetDescriptor>,
    /// `X ⊖ 𝒫`, imposed on nominal predictions.
    pub state_set_hat: Option<SetDescriptor>,
    pub tube: TubeIngredients,
    pub terminal: TerminalIngredients,
    pub sets: ConsistencySets,
}

/// Static controller data shared by all agents.
#[derive(Debug, Clone)]
pub struct Controller {
    pub agents: Vec<AgentStatic>,
    pub graph: CouplingGraph,
    pub horizon: usize,
    pub settings: SqpSettings,
    /// Tightenings for the reference conditions (`Ĉ ⊕ 𝒫`).
    pub tight: Tightenings,
    /// Per coupled constraint, tightenings for `𝒫` of every participant.
    pub tube_tight: Vec<Vec<f64>>,
    state_sets: Vec<Option<SetDescriptor>>,
    all_sets: Vec<ConsistencySets>,
    terminals: Vec<TerminalIngredients>,
    /// Run the reference validator after every reference update.
    pub validate_refs: bool,
}

impl Controller {
    pub fn new(agents: Vec<AgentStatic>, graph: CouplingGraph, horizon: usize, settings: SqpSettings) -> Result<Self> {
        if agents.len() != graph.agents {
            return Err(Error::Config("graph size differs from the number of agents".into()));
        }
        let state_sets: Vec<Option<SetDescriptor>> = agents.iter().map(|a| a.state_set.clone()).collect();
        let all_sets: Vec<ConsistencySets> = agents.iter().map(|a| a.sets.clone()).collect();
        let terminals = agents.iter().map(|a| a.terminal.clone()).collect();
        let tight = Tightenings::consistency(&graph, &state_sets, &all_sets)?;
        let unc: Vec<Uncertainty> = agents
            .iter()
            .map(|a| Uncertainty::new(a.dyn_.state_dim()).with_set(a.tube.p.clone()))
            .collect();
        let mut tube_tight = Vec::with_capacity(graph.constraints.len());
        for c in &graph.constraints {
            let u: Vec<&Uncertainty> = c.participants.iter().map(|&p| &unc[p]).collect();
            tube_tight.push(coupling::row_tightening(c, &u)?);
        }
        Ok(Self {
            agents,
            graph,
            horizon,
            settings,
            tight,
            tube_tight,
            state_sets,
            all_sets,
            terminals,
            validate_refs: true,
        })
    }

    pub fn ref_context(&self) -> RefContext<'_> {
        RefContext {
            graph: &self.graph,
            sets: &self.all_sets,
            state_sets: &self.state_sets,
            tight: &self.tight,
            terminals: &self.terminals,
        }
    }

    fn local_ocp<'a>(&'a self, i: usize, x: &DVector<f64>, k: usize, refs: Option<&'a RefWindow>) -> LocalOcp<'a> {
        let a = &self.agents[i];
        LocalOcp {
            dyn_: &a.dyn_,
            q: &a.q,
            r: &a.r,
            terminal: &a.terminal,
            p: &a.tube.p,
            u_hat: &a.tube.u_hat,
            x_meas: x.clone(),
            anchor: k,
            horizon: self.horizon,
            initial: InitialMode::Tube,
            consistency: refs.map(|r| Consistency {
                refs: r,
                coords: &a.sets.coords,
                half_widths: &a.sets.c_bar_half,
            }),
            state_set: a.state_set_hat.as_ref(),
            frozen: Vec::new(),
            settings: self.settings,
        }
    }
}

/// Online state of the closed loop at time `k`.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub k: usize,
    /// Measured actual states.
    pub x: Vec<DVector<f64>>,
    /// Optimal windows of the previous step (the initial windows at `k = 0`).
    pub prev: Vec<TrajectoryWindow>,
    /// References anchored at `k`.
    pub refs: Vec<RefWindow>,
}

impl WorldState {
    pub fn initial(x0: Vec<DVector<f64>>, windows: Vec<TrajectoryWindow>) -> Self {
        let refs = windows.iter().map(RefWindow::from_window).collect();
        Self {
            k: 0,
            x: x0,
            prev: windows,
            refs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Neither the solver result nor the candidate is feasible.
    Infeasible,
    /// The solver result was rejected and the candidate applied.
    CandidateApplied,
    /// The shifted candidate violates the local problem.
    CandidateViolation,
    /// The reference validator failed.
    ReferenceCheck,
    /// The applied input left the input set.
    InputViolation,
    /// The actual state left the tube around the nominal state.
    TubeExit,
    /// A coupled constraint was violated by actual states.
    ConstraintViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub k: usize,
    pub agent: Option<usize>,
    pub kind: EventKind,
    pub detail: String,
}

/// Diagnostics of one time step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub k: usize,
    pub statuses: Vec<SolveStatus>,
    /// Per agent, summed solve wall-clock over all inner iterations (s).
    pub solve_time: Vec<f64>,
    /// Per agent, reference update wall-clock (s).
    pub update_time: Vec<f64>,
    /// Critical-path control computation time of the step (s).
    pub critical_path: f64,
    pub messages: usize,
    /// Per agent, accepted and checked reference entries.
    pub accepted: Vec<usize>,
    pub checked: Vec<usize>,
    /// Per agent, violation of the local problem by the shifted candidate.
    pub candidate_violation: Vec<f64>,
    pub sqp_iterations: Vec<usize>,
    /// Optimal local costs.
    pub values: Vec<f64>,
    pub reference_check: Option<ReferenceCheckReport>,
    pub events: Vec<Event>,
}

/// Output of one time step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Optimal windows anchored at `k`.
    pub solutions: Vec<TrajectoryWindow>,
    /// `û*[k|k] + K(x[k], x̂*[k|k])`.
    pub applied: Vec<DVector<f64>>,
    /// References anchored at `k + 1`.
    pub refs: Vec<RefWindow>,
    pub diagnostics: StepDiagnostics,
}

/// Shift of the previous optimum extended by the terminal controller; falls
/// back to repeating the last input if the terminal state has left the set.
fn candidate(ctrl: &Controller, i: usize, prev: &TrajectoryWindow, k: usize) -> TrajectoryWindow {
    let a = &ctrl.agents[i];
    if prev.anchor == k {
        return prev.clone();
    }
    ocp::build_candidate(prev, &a.dyn_, &a.terminal).unwrap_or_else(|_| {
        let mut inputs: Vec<DVector<f64>> = prev.inputs[1..].to_vec();
        inputs.push(prev.inputs.last().expect("nonempty horizon").clone());
        TrajectoryWindow::rollout(&a.dyn_, k, &prev.states[1], inputs)
    })
}

struct Timed<T> {
    value: T,
    secs: f64,
}

fn timed<T>(f: impl FnOnce() -> T) -> Timed<T> {
    let t = Instant::now();
    let value = f();
    Timed {
        value,
        secs: t.elapsed().as_secs_f64(),
    }
}

fn status_events(k: usize, sols: &[LocalSolution], events: &mut Vec<Event>) {
    for (i, s) in sols.iter().enumerate() {
        match s.status {
            SolveStatus::Infeasible => events.push(Event {
                k,
                agent: Some(i),
                kind: EventKind::Infeasible,
                detail: format!("local problem infeasible (violation {:.3e})", s.violation),
            }),
            SolveStatus::WarmStartKept => events.push(Event {
                k,
                agent: Some(i),
                kind: EventKind::CandidateApplied,
                detail: format!("solver result rejected (kkt {:.3e})", s.kkt),
            }),
            _ => {}
        }
    }
}

/// Gathers the windows agent `i` may read: its own and those in its inbox.
/// Entries for non-neighbors point at the agent's own window and are never
/// read by the reference conditions.
fn view<'a>(i: usize, own: &'a [TrajectoryWindow], inbox: &'a Inbox) -> Vec<&'a TrajectoryWindow> {
    (0..own.len())
        .map(|j| match inbox.get(&j) {
            Some(Payload::Window(w)) => w,
            _ => &own[i],
        })
        .collect()
}

/// Runs one time step of the chosen scheme from the world state at `k`.
pub fn run_time_step(ctrl: &Controller, world: &WorldState, mode: &ControllerMode, bus: &mut MessageBus) -> Result<StepOutput> {
    mode.validate(ctrl.agents.len())?;
    match mode {
        ControllerMode::Proposed { iterations } => run_parallel(ctrl, world, *iterations, false, bus),
        ControllerMode::FixedReference => run_parallel(ctrl, world, 1, true, bus),
        ControllerMode::Sequential { order } => run_sequential(ctrl, world, order, bus),
    }
}

fn run_parallel(ctrl: &Controller, world: &WorldState, iterations: usize, fixed: bool, bus: &mut MessageBus) -> Result<StepOutput> {
    let k = world.k;
    let na = ctrl.agents.len();
    let posted0 = bus.stats.posted;
    let mut events = Vec::new();
    let mut critical = 0.0;
    let mut solve_time = vec![0.0; na];
    let mut update_time = vec![0.0; na];
    let mut sqp_iterations = vec![0; na];
    let mut accepted = vec![0; na];
    let mut checked = vec![0; na];

    let mut warm: Vec<TrajectoryWindow> = (0..na).map(|i| candidate(ctrl, i, &world.prev[i], k)).collect();
    let candidate_violation: Vec<f64> = (0..na)
        .map(|i| ctrl.local_ocp(i, &world.x[i], k, Some(&world.refs[i])).violation(&warm[i]))
        .collect();
    for (i, v) in candidate_violation.iter().enumerate() {
        if *v > FEAS_TOL {
            events.push(Event {
                k,
                agent: Some(i),
                kind: EventKind::CandidateViolation,
                detail: format!("candidate violates the local problem by {v:.3e}"),
            });
        }
    }
    let mut refs: Vec<RefWindow> = world.refs.clone();
    let mut sols: Vec<LocalSolution> = Vec::new();
    let mut inboxes: Vec<Inbox> = Vec::new();
    for it in 0..iterations {
        let results: Vec<Timed<Result<LocalSolution>>> = (0..na)
            .into_par_iter()
            .map(|i| timed(|| ocp::solve_local(&ctrl.local_ocp(i, &world.x[i], k, Some(&refs[i])), &warm[i])))
            .collect();
        let mut phase = 0.0f64;
        sols = Vec::with_capacity(na);
        for (i, r) in results.into_iter().enumerate() {
            solve_time[i] += r.secs;
            phase = phase.max(r.secs);
            let s = r.value?;
            sqp_iterations[i] += s.sqp_iterations;
            sols.push(s);
        }
        critical += phase;
        let windows: Vec<TrajectoryWindow> = sols.iter().map(|s| s.window.clone()).collect();
        let round = Round { k, phase: Phase::Predicted, iteration: it };
        for (i, w) in windows.iter().enumerate() {
            bus.broadcast(i, round, &Payload::Window(w.clone()))?;
        }
        let (delivered, delay) = bus.deliver(round)?;
        inboxes = delivered;
        critical += delay;
        if it + 1 < iterations {
            let updates: Vec<Timed<refupdate::RefUpdate>> = (0..na)
                .into_par_iter()
                .map(|i| {
                    timed(|| {
                        let opt = view(i, &windows, &inboxes[i]);
                        let prev: Vec<&RefWindow> = refs.iter().collect();
                        refupdate::tentative_update(&ctrl.ref_context(), i, &opt, &prev)
                    })
                })
                .collect();
            let mut phase = 0.0f64;
            let mut next = Vec::with_capacity(na);
            for (i, u) in updates.into_iter().enumerate() {
                update_time[i] += u.secs;
                phase = phase.max(u.secs);
                accepted[i] += u.value.accepted;
                checked[i] += u.value.checked;
                next.push(u.value.refs);
            }
            critical += phase;
            let round = Round { k, phase: Phase::Reference, iteration: it };
            for (i, r) in next.iter().enumerate() {
                bus.broadcast(i, round, &Payload::Reference(r.clone()))?;
            }
            let (_, delay) = bus.deliver(round)?;
            critical += delay;
            refs = next;
            warm = windows;
        }
    }
    status_events(k, &sols, &mut events);
    let solutions: Vec<TrajectoryWindow> = sols.iter().map(|s| s.window.clone()).collect();

    let mut applied = Vec::with_capacity(na);
    for (i, w) in solutions.iter().enumerate() {
        let a = &ctrl.agents[i];
        match ocp::apply_control(&world.x[i], w, &a.tube.aux, &a.u_set) {
            Ok(u) => applied.push(u),
            Err(e) => {
                events.push(Event {
                    k,
                    agent: Some(i),
                    kind: EventKind::InputViolation,
                    detail: e.to_string(),
                });
                applied.push(&w.inputs[0] + a.tube.aux.eval(&world.x[i], &w.states[0], &w.inputs[0]));
            }
        }
    }

    let updates: Vec<Timed<refupdate::RefUpdate>> = (0..na)
        .into_par_iter()
        .map(|i| {
            timed(|| {
                if fixed {
                    let r = refupdate::fixed_reference_update(&solutions[i], &refs[i]);
                    refupdate::RefUpdate {
                        refs: r,
                        accepted: 0,
                        checked: solutions[i].horizon().saturating_sub(1),
                    }
                } else {
                    let opt = view(i, &solutions, &inboxes[i]);
                    let prev: Vec<&RefWindow> = refs.iter().collect();
                    refupdate::reference_update(&ctrl.ref_context(), i, &opt, &prev)
                }
            })
        })
        .collect();
    let mut phase = 0.0f64;
    let mut new_refs = Vec::with_capacity(na);
    for (i, u) in updates.into_iter().enumerate() {
        update_time[i] += u.secs;
        phase = phase.max(u.secs);
        accepted[i] += u.value.accepted;
        checked[i] += u.value.checked;
        new_refs.push(u.value.refs);
    }
    critical += phase;
    let round = Round { k, phase: Phase::Reference, iteration: iterations - 1 };
    for (i, r) in new_refs.iter().enumerate() {
        bus.broadcast(i, round, &Payload::Reference(r.clone()))?;
    }
    let (_, delay) = bus.deliver(round)?;
    critical += delay;

    let reference_check = if ctrl.validate_refs {
        let refs_view: Vec<&RefWindow> = new_refs.iter().collect();
        let opt_view: Vec<&TrajectoryWindow> = solutions.iter().collect();
        let report = refupdate::validate_references(&ctrl.ref_context(), &refs_view, Some(&opt_view));
        for f in &report.failures {
            events.push(Event {
                k,
                agent: None,
                kind: EventKind::ReferenceCheck,
                detail: f.clone(),
            });
        }
        Some(report)
    } else {
        None
    };

    Ok(StepOutput {
        applied,
        refs: new_refs,
        diagnostics: StepDiagnostics {
            k,
            statuses: sols.iter().map(|s| s.status).collect(),
            solve_time,
            update_time,
            critical_path: critical,
            messages: bus.stats.posted - posted0,
            accepted,
            checked,
            candidate_violation,
            sqp_iterations,
            values: sols.iter().map(|s| s.cost).collect(),
            reference_check,
            events,
        },
        solutions,
    })
}

fn run_sequential(ctrl: &Controller, world: &WorldState, order: &[usize], bus: &mut MessageBus) -> Result<StepOutput> {
    let k = world.k;
    let na = ctrl.agents.len();
    let n1 = ctrl.horizon + 1;
    let posted0 = bus.stats.posted;
    let mut events = Vec::new();
    let mut critical = 0.0;
    let mut solve_time = vec![0.0; na];
    let mut sqp_iterations = vec![0; na];
    let candidates: Vec<TrajectoryWindow> = (0..na).map(|i| candidate(ctrl, i, &world.prev[i], k)).collect();
    // Latest window known for each agent: candidates until replaced.
    let mut latest = candidates.clone();
    let mut sols: Vec<Option<LocalSolution>> = vec![None; na];
    let mut candidate_violation = vec![0.0; na];
    for (pos, &i) in order.iter().enumerate() {
        let mut frozen = Vec::new();
        for ci in ctrl.graph.constraints_of(i) {
            let spec = ctrl.graph.constraints[ci].clone();
            let slot = spec.participants.iter().position(|&p| p == i).expect("participant");
            let others = spec
                .participants
                .iter()
                .map(|&p| if p == i { Vec::new() } else { latest[p].states[..n1].to_vec() })
                .collect();
            frozen.push(FrozenCoupling {
                spec,
                slot,
                others,
                tighten: ctrl.tube_tight[ci].clone(),
            });
        }
        let mut ocp_i = ctrl.local_ocp(i, &world.x[i], k, None);
        ocp_i.frozen = frozen;
        candidate_violation[i] = ocp_i.violation(&candidates[i]);
        let r = timed(|| ocp::solve_local(&ocp_i, &candidates[i]));
        solve_time[i] = r.secs;
        critical += r.secs;
        let s = r.value?;
        sqp_iterations[i] = s.sqp_iterations;
        latest[i] = s.window.clone();
        let round = Round { k, phase: Phase::Predicted, iteration: pos };
        // Only the solving agent posts in its slot; neighbors receive it.
        for &recv in &bus.neighbors[i].clone() {
            bus.pending.push(RoundMessage {
                sender: i,
                receiver: recv,
                round,
                payload: Payload::Window(s.window.clone()),
            });
            bus.stats.posted += 1;
        }
        bus.stats.delivered += bus.pending.len();
        bus.pending.clear();
        sols[i] = Some(s);
    }
    let sols: Vec<LocalSolution> = sols.into_iter().map(|s| s.expect("every agent solved")).collect();
    status_events(k, &sols, &mut events);
    let solutions: Vec<TrajectoryWindow> = sols.iter().map(|s| s.window.clone()).collect();
    let mut applied = Vec::with_capacity(na);
    for (i, w) in solutions.iter().enumerate() {
        let a = &ctrl.agents[i];
        match ocp::apply_control(&world.x[i], w, &a.tube.aux, &a.u_set) {
            Ok(u) => applied.push(u),
            Err(e) => {
                events.push(Event {
                    k,
                    agent: Some(i),
                    kind: EventKind::InputViolation,
                    detail: e.to_string(),
                });
                applied.push(&w.inputs[0] + a.tube.aux.eval(&world.x[i], &w.states[0], &w.inputs[0]));
            }
        }
    }
    let refs = solutions.iter().map(|w| {
        let mut r = RefWindow::from_window(w);
        r.states.remove(0);
        r.states.push(w.states[w.horizon()].clone());
        r.anchor = k + 1;
        r
    }).collect();
    Ok(StepOutput {
        applied,
        refs,
        diagnostics: StepDiagnostics {
            k,
            statuses: sols.iter().map(|s| s.status).collect(),
            solve_time,
            update_time: vec![0.0; na],
            critical_path: critical,
            messages: bus.stats.posted - posted0,
            accepted: vec![0; na],
            checked: vec![0; na],
            candidate_violation,
            sqp_iterations,
            values: sols.iter().map(|s| s.cost).collect(),
            reference_check: None,
            events,
        },
        solutions,
    })
}
