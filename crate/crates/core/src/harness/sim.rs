//! Closed-loop Monte-Carlo simulation.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::agents::{self, ControllerMode, Event, EventKind, LatencyModel, MessageBus, StepDiagnostics, WorldState};
use crate::coupling;
use crate::error::{Error, Result};
use crate::ocp::{SolveStatus, FEAS_TOL};
use crate::tube;

use super::init::Initialized;
use super::metrics::{self, RunMetrics, TrajRow};

const TUBE_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub mode: ControllerMode,
    pub runs: usize,
    pub seed: u64,
    /// Overrides the scenario's simulation length.
    pub t_sim: Option<usize>,
    /// Abort on infeasibility, failed reference checks or input and
    /// constraint violations.
    pub strict: bool,
    /// Scales sampled disturbances (0 disables them).
    pub disturbance_scale: f64,
    /// Shuffles message delivery with this seed.
    pub shuffle_bus: Option<u64>,
    pub latency: Option<LatencyModel>,
    /// Keep per-step diagnostics in the run record.
    pub keep_diagnostics: bool,
}

impl SimOptions {
    pub fn new(mode: ControllerMode, runs: usize, seed: u64) -> Self {
        Self {
            mode,
            runs,
            seed,
            t_sim: None,
            strict: false,
            disturbance_scale: 1.0,
            shuffle_bus: None,
            latency: None,
            keep_diagnostics: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub metrics: RunMetrics,
    pub rows: Vec<TrajRow>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Disturbance substream of `agent` in `run`.
pub fn stream_id(run: usize, agent: usize) -> u64 {
    ((run as u64) << 20) | agent as u64
}

fn in_box_hull(x: &DVector<f64>, xi: &DVector<f64>, half: &[f64]) -> bool {
    x.iter().zip(xi.iter()).zip(half).all(|((a, b), h)| (a - b).abs() <= h + 1e-12)
}

fn box_hull_distance(x: &DVector<f64>, xi: &DVector<f64>, half: &[f64]) -> f64 {
    x.iter()
        .zip(xi.iter())
        .zip(half)
        .map(|((a, b), h)| ((a - b).abs() - h).max(0.0).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn simulate_run(init: &Initialized, opts: &SimOptions, run: usize) -> Result<RunRecord> {
    let ctrl = &init.controller;
    let na = ctrl.agents.len();
    let t_sim = opts.t_sim.unwrap_or(init.scenario.t_sim);
    let streams: Vec<u64> = (0..na).map(|i| stream_id(run, i)).collect();
    let mut rngs: Vec<ChaCha8Rng> = streams
        .iter()
        .map(|&s| {
            let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
            r.set_stream(s);
            r
        })
        .collect();
    let mut bus = MessageBus::new(&ctrl.graph);
    if let Some(s) = opts.shuffle_bus {
        bus = bus.with_shuffle(s ^ run as u64);
    }
    if let Some(l) = opts.latency {
        bus = bus.with_latency(l, opts.seed ^ ((run as u64) << 32));
    }
    let half: Vec<Vec<f64>> = ctrl.agents.iter().map(|a| a.tube.p_half_widths()).collect();

    let mut world = WorldState::initial(init.x0.clone(), init.windows.clone());
    let mut rows = Vec::with_capacity(t_sim * na);
    let mut diags = Vec::new();
    let mut cost = vec![0.0; na];
    let mut step_time = Vec::with_capacity(t_sim);
    let mut min_distance = Vec::new();
    let mut max_distance = Vec::new();
    let mut events: Vec<Event> = Vec::new();
    let mut accepted = vec![0usize; na];
    let mut checked = vec![0usize; na];
    let mut prev_values: Option<Vec<f64>> = None;
    let mut value_increase = vec![f64::NEG_INFINITY; na];
    let mut max_candidate_violation: f64 = 0.0;
    let mut outside_since: Vec<Option<usize>> = vec![Some(0); na];
    let mut reference_failures = 0;

    for k in 0..t_sim {
        if let Some((lo, hi)) = metrics::pair_distances(&ctrl.graph, &world.x) {
            min_distance.push(lo);
            max_distance.push(hi);
        }
        for (i, x) in world.x.iter().enumerate() {
            let xi = ctrl.agents[i].terminal.xi();
            if !in_box_hull(x, xi, &half[i]) {
                outside_since[i] = None;
            } else if outside_since[i].is_none() {
                outside_since[i] = Some(k);
            }
        }
        for (ci, c) in ctrl.graph.constraints.iter().enumerate() {
            let states: Vec<&DVector<f64>> = c.participants.iter().map(|&p| &world.x[p]).collect();
            let worst = coupling::eval_constraint(c, &states)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
            if worst > FEAS_TOL {
                events.push(Event {
                    k,
                    agent: None,
                    kind: EventKind::ConstraintViolation,
                    detail: format!("constraint {ci} ({}) violated by {worst:.3e}", c.label()),
                });
            }
        }

        let out = agents::run_time_step(ctrl, &world, &opts.mode, &mut bus)?;
        let d = &out.diagnostics;
        step_time.push(d.critical_path);
        for i in 0..na {
            accepted[i] += d.accepted[i];
            checked[i] += d.checked[i];
        }
        max_candidate_violation = d.candidate_violation.iter().copied().fold(max_candidate_violation, f64::max);
        if let Some(prev) = &prev_values {
            for i in 0..na {
                value_increase[i] = value_increase[i].max(d.values[i] - prev[i]);
            }
        }
        prev_values = Some(d.values.clone());
        if let Some(rep) = &d.reference_check {
            if !rep.passed() {
                reference_failures += 1;
            }
        }
        events.extend(d.events.iter().cloned());
        if opts.strict {
            if let Some(e) = events.iter().find(|e| {
                matches!(
                    e.kind,
                    EventKind::Infeasible | EventKind::ReferenceCheck | EventKind::InputViolation | EventKind::ConstraintViolation
                )
            }) {
                return Err(Error::Violation(format!("run {run}, step {}: {:?}: {}", e.k, e.kind, e.detail)));
            }
        }

        let mut x_next = Vec::with_capacity(na);
        for i in 0..na {
            let a = &ctrl.agents[i];
            let sol = &out.solutions[i];
            let xhat = &sol.states[0];
            let uhat = &sol.inputs[0];
            let err = &world.x[i] - xhat;
            if !a.tube.p.contains(err.as_slice(), TUBE_TOL) {
                events.push(Event {
                    k,
                    agent: Some(i),
                    kind: EventKind::TubeExit,
                    detail: format!("state deviation {:?} outside the tube", err.as_slice()),
                });
            }
            let w = init.disturbances[i].sample(&mut rngs[i]) * opts.disturbance_scale;
            let step = tube::integrate_closed_loop(&a.dyn_, &a.tube.aux, &a.u_set, &world.x[i], xhat, uhat, &w)?;
            let ti = &a.terminal;
            cost[i] += metrics::actual_cost_term(&a.q, &a.r, ti.xi(), ti.u_xi(), world.x[i].as_slice(), step.u_applied.as_slice());
            rows.push(TrajRow {
                k,
                agent: i,
                x: world.x[i].iter().copied().collect(),
                x_nom: xhat.iter().copied().collect(),
                x_ref: world.refs[i].at(k).iter().copied().collect(),
                u: step.u_applied.iter().copied().collect(),
                u_nom: uhat.iter().copied().collect(),
            });
            x_next.push(step.x_next);
        }
        if opts.keep_diagnostics {
            diags.push(out.diagnostics.clone());
        }
        world = WorldState {
            k: k + 1,
            x: x_next,
            prev: out.solutions,
            refs: out.refs,
        };
    }

    let mut terminal_distance = Vec::with_capacity(na);
    for (i, x) in world.x.iter().enumerate() {
        let xi = ctrl.agents[i].terminal.xi();
        terminal_distance.push(box_hull_distance(x, xi, &half[i]));
        if !in_box_hull(x, xi, &half[i]) {
            outside_since[i] = None;
        } else if outside_since[i].is_none() {
            outside_since[i] = Some(t_sim);
        }
    }
    let infeasible = events
        .iter()
        .filter(|e| e.kind == EventKind::Infeasible)
        .count();
    let mean_step_time = if step_time.is_empty() {
        0.0
    } else {
        step_time.iter().sum::<f64>() / step_time.len() as f64
    };
    Ok(RunRecord {
        metrics: RunMetrics {
            run,
            seed: opts.seed,
            streams,
            steps: t_sim,
            cost,
            step_time,
            mean_step_time,
            min_distance,
            max_distance,
            final_states: world.x.iter().map(|x| x.iter().copied().collect()).collect(),
            terminal_distance,
            settled_at: outside_since,
            events,
            infeasible,
            reference_failures,
            acceptance_rate: accepted
                .iter()
                .zip(&checked)
                .map(|(&a, &c)| if c == 0 { 0.0 } else { a as f64 / c as f64 })
                .collect(),
            value_increase: value_increase.into_iter().map(|v| if v.is_finite() { v } else { 0.0 }).collect(),
            max_candidate_violation,
        },
        rows,
        diagnostics: diags,
    })
}

/// Runs `opts.runs` closed-loop simulations concurrently; results are in run order.
pub fn simulate(init: &Initialized, opts: &SimOptions) -> Result<Vec<RunRecord>> {
    opts.mode.validate(init.controller.agents.len())?;
    (0..opts.runs)
        .into_par_iter()
        .map(|run| simulate_run(init, opts, run))
        .collect()
}

/// Whether a window status counts as a solve failure.
pub fn is_failure(s: SolveStatus) -> bool {
    s == SolveStatus::Infeasible
}

