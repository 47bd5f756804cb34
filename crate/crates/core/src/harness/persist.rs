//! Trajectory CSV files and JSON metrics.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

use super::metrics::TrajRow;

/// `{scenario}_{mode}_{seed}_run{run}`.
pub fn file_stem(scenario: &str, mode: &str, seed: u64, run: usize) -> String {
    format!("{scenario}_{mode}_{seed}_run{run:03}")
}

fn header(prefix: &str, len: usize) -> impl Iterator<Item = String> + '_ {
    (0..len).map(move |i| format!("{prefix}{i}"))
}

pub fn write_run_csv(dir: &Path, stem: &str, rows: &[TrajRow]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{stem}.csv"));
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(&path)?;
    if let Some(r) = rows.first() {
        let mut h = vec!["k".to_string(), "agent".to_string()];
        h.extend(header("x", r.x.len()));
        h.extend(header("xnom", r.x_nom.len()));
        h.extend(header("xref", r.x_ref.len()));
        h.extend(header("u", r.u.len()));
        h.extend(header("unom", r.u_nom.len()));
        w.write_record(&h)?;
    }
    for r in rows {
        let mut rec = vec![r.k.to_string(), r.agent.to_string()];
        for v in r.x.iter().chain(&r.x_nom).chain(&r.x_ref).chain(&r.u).chain(&r.u_nom) {
            // Shortest round-trip representation.
            rec.push(format!("{v:?}"));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(path)
}

/// Reads rows back; `dims` gives `(state_dim, input_dim)` per agent.
pub fn read_run_csv(path: &Path, dims: &[(usize, usize)]) -> Result<Vec<TrajRow>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Config(format!("short row in {}", path.display())))?
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad number in {}: {e}", path.display())))
        };
        let k = num(0)? as usize;
        let agent = num(1)? as usize;
        let (n, m) = *dims
            .get(agent)
            .ok_or_else(|| Error::Config(format!("unknown agent {agent} in {}", path.display())))?;
        let mut at = 2;
        let mut take = |len: usize| -> Result<Vec<f64>> {
            let v = (at..at + len).map(&num).collect::<Result<Vec<f64>>>()?;
            at += len;
            Ok(v)
        };
        rows.push(TrajRow {
            k,
            agent,
            x: take(n)?,
            x_nom: take(n)?,
            x_ref: take(n)?,
            u: take(m)?,
            u_nom: take(m)?,
        });
    }
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}
