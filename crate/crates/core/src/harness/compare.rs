//! Mode comparison: cost ratios and control computation times.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::ControllerMode;
use crate::error::Result;

use super::init::Initialized;
use super::metrics::{summarize, BatchSummary};
use super::persist;
use super::sim::{simulate, RunRecord, SimOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: String,
    pub mean_cost: Vec<f64>,
    /// Mean cost per agent divided by the baseline mode's.
    pub cost_ratio: Vec<f64>,
    pub mean_step_time: f64,
    pub time_ratio: f64,
    pub infeasible: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario: String,
    pub baseline: String,
    pub runs: usize,
    pub seed: u64,
    pub rows: Vec<ModeRow>,
}

/// Builds the table from batch summaries; the first `proposed` summary (or
/// the first summary) is the baseline.
pub fn table(summaries: &[BatchSummary]) -> Comparison {
    let base = summaries
        .iter()
        .find(|s| s.mode == "proposed")
        .or(summaries.first())
        .cloned();
    let rows = summaries
        .iter()
        .map(|s| {
            let (cost_ratio, time_ratio) = match &base {
                Some(b) => (
                    s.mean_cost.iter().zip(&b.mean_cost).map(|(c, r)| c / r).collect(),
                    s.mean_step_time / b.mean_step_time,
                ),
                None => (Vec::new(), 1.0),
            };
            ModeRow {
                mode: s.mode.clone(),
                mean_cost: s.mean_cost.clone(),
                cost_ratio,
                mean_step_time: s.mean_step_time,
                time_ratio,
                infeasible: s.infeasible,
            }
        })
        .collect();
    Comparison {
        scenario: summaries.first().map(|s| s.scenario.clone()).unwrap_or_default(),
        baseline: base.map(|b| b.mode).unwrap_or_default(),
        runs: summaries.first().map(|s| s.runs).unwrap_or(0),
        seed: summaries.first().map(|s| s.seed).unwrap_or(0),
        rows,
    }
}

/// Simulates every mode with the same seeds and tabulates the results.
pub fn compare(
    init: &Initialized,
    modes: &[ControllerMode],
    runs: usize,
    seed: u64,
    t_sim: Option<usize>,
) -> Result<(Comparison, Vec<Vec<RunRecord>>)> {
    let mut summaries = Vec::with_capacity(modes.len());
    let mut records = Vec::with_capacity(modes.len());
    for mode in modes {
        let mut opts = SimOptions::new(mode.clone(), runs, seed);
        opts.t_sim = t_sim;
        let recs = simulate(init, &opts)?;
        let metrics: Vec<_> = recs.iter().map(|r| r.metrics.clone()).collect();
        summaries.push(summarize(&init.scenario.name, &mode.label(), seed, &metrics));
        records.push(recs);
    }
    Ok((table(&summaries), records))
}

pub fn write_comparison(dir: &Path, cmp: &Comparison) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("{}_compare_{}", cmp.scenario, cmp.seed);
    persist::write_json(&dir.join(format!("{stem}.json")), cmp)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
    let agents = cmp.rows.first().map(|r| r.mean_cost.len()).unwrap_or(0);
    let mut header = vec!["mode".to_string()];
    header.extend((0..agents).map(|i| format!("cost{i}")));
    header.extend((0..agents).map(|i| format!("ratio{i}")));
    header.extend(["step_time".to_string(), "time_ratio".to_string(), "infeasible".to_string()]);
    w.write_record(&header)?;
    for r in &cmp.rows {
        let mut rec = vec![r.mode.clone()];
        rec.extend(r.mean_cost.iter().map(|v| v.to_string()));
        rec.extend(r.cost_ratio.iter().map(|v| v.to_string()));
        rec.extend([r.mean_step_time.to_string(), r.time_ratio.to_string(), r.infeasible.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
