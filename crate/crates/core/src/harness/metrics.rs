//! Per-run metrics and batch aggregation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::agents::{Event, EventKind};
use crate::coupling::{ConstraintKind, CouplingGraph};

/// One persisted row: agent `agent` at step `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajRow {
    pub k: usize,
    pub agent: usize,
    pub x: Vec<f64>,
    pub x_nom: Vec<f64>,
    pub x_ref: Vec<f64>,
    pub u: Vec<f64>,
    pub u_nom: Vec<f64>,
}

/// `‖v‖_M = sqrt(vᵀ M v)`.
pub fn weighted_norm(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v)).max(0.0).sqrt()
}

/// One term of the actual cost `‖x − ξ‖_Q + ‖u − u_ξ‖_R`.
pub fn actual_cost_term(
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    xi: &DVector<f64>,
    u_xi: &DVector<f64>,
    x: &[f64],
    u: &[f64],
) -> f64 {
    weighted_norm(q, &(DVector::from_row_slice(x) - xi)) + weighted_norm(r, &(DVector::from_row_slice(u) - u_xi))
}

/// Smallest and largest distance over the distance-type constraints.
pub fn pair_distances(graph: &CouplingGraph, x: &[DVector<f64>]) -> Option<(f64, f64)> {
    let mut out: Option<(f64, f64)> = None;
    for c in &graph.constraints {
        if !matches!(c.kind, ConstraintKind::Connectivity { .. } | ConstraintKind::Collision { .. }) {
            continue;
        }
        let (i, j) = (c.participants[0], c.participants[1]);
        let d = c.pos.iter().map(|&p| (x[i][p] - x[j][p]).powi(2)).sum::<f64>().sqrt();
        out = Some(match out {
            None => (d, d),
            Some((lo, hi)) => (lo.min(d), hi.max(d)),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub seed: u64,
    /// Disturbance substream of each agent.
    pub streams: Vec<u64>,
    pub steps: usize,
    /// Actual cost per agent.
    pub cost: Vec<f64>,
    /// Critical-path control computation time per step (s).
    pub step_time: Vec<f64>,
    pub mean_step_time: f64,
    /// Per step, smallest and largest distance between constrained pairs.
    pub min_distance: Vec<f64>,
    pub max_distance: Vec<f64>,
    pub final_states: Vec<Vec<f64>>,
    /// Per agent, distance of the final state to `ξ ⊕ 𝒫` (box hull).
    pub terminal_distance: Vec<f64>,
    /// Per agent, first step from which the state stays in `ξ ⊕ 𝒫` (box hull).
    pub settled_at: Vec<Option<usize>>,
    pub events: Vec<Event>,
    pub infeasible: usize,
    pub reference_failures: usize,
    /// Per agent, share of checked reference entries that were accepted.
    pub acceptance_rate: Vec<f64>,
    /// Per agent, largest increase of the optimal local cost between steps.
    pub value_increase: Vec<f64>,
    pub max_candidate_violation: f64,
}

impl RunMetrics {
    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

/// Means over runs, summed in run order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub scenario: String,
    pub mode: String,
    pub seed: u64,
    pub runs: usize,
    pub mean_cost: Vec<f64>,
    pub mean_step_time: f64,
    pub infeasible: usize,
    pub reference_failures: usize,
    pub min_distance: Option<f64>,
    pub max_distance: Option<f64>,
    pub acceptance_rate: Vec<f64>,
}

pub fn summarize(scenario: &str, mode: &str, seed: u64, runs: &[RunMetrics]) -> BatchSummary {
    let mut sorted: Vec<&RunMetrics> = runs.iter().collect();
    sorted.sort_by_key(|r| r.run);
    let n = sorted.len().max(1) as f64;
    let agents = sorted.first().map(|r| r.cost.len()).unwrap_or(0);
    let mut mean_cost = vec![0.0; agents];
    let mut time = 0.0;
    let mut acc = vec![0.0; agents];
    for r in &sorted {
        for (m, c) in mean_cost.iter_mut().zip(&r.cost) {
            *m += c;
        }
        time += r.mean_step_time;
        for (a, v) in acc.iter_mut().zip(&r.acceptance_rate) {
            *a += v;
        }
    }
    mean_cost.iter_mut().chain(acc.iter_mut()).for_each(|m| *m /= n);
    let fold = |f: fn(&RunMetrics) -> &Vec<f64>, pick: fn(f64, f64) -> f64| {
        sorted.iter().flat_map(|r| f(r).iter().copied()).reduce(pick)
    };
    BatchSummary {
        scenario: scenario.to_string(),
        mode: mode.to_string(),
        seed,
        runs: sorted.len(),
        mean_cost,
        mean_step_time: time / n,
        infeasible: sorted.iter().map(|r| r.infeasible).sum(),
        reference_failures: sorted.iter().map(|r| r.reference_failures).sum(),
        min_distance: fold(|r| &r.min_distance, f64::min),
        max_distance: fold(|r| &r.max_distance, f64::max),
        acceptance_rate: acc,
    }
}
