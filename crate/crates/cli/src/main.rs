use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tube_dmpc::agents::ControllerMode;
use tube_dmpc::harness::{self, compare, metrics, persist, BatchSummary, Initialized, RunMetrics, Scenario, SimOptions};

#[derive(Parser)]
#[command(name = "tube-dmpc", version, about = "Parallel robust tube-based distributed MPC simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Proposed,
    Fixedref,
    Sequential,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo closed-loop simulation of one controller mode.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "proposed")]
        mode: ModeArg,
        /// Solve/update iterations per step (proposed mode).
        #[arg(long, default_value_t = 1)]
        iterations: usize,
        /// Solve order for the sequential mode (default: agent index order).
        #[arg(long, value_delimiter = ',')]
        order: Option<Vec<usize>>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of simulated steps.
        #[arg(long)]
        tsim: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Abort on the first infeasibility or constraint violation.
        #[arg(long)]
        strict: bool,
        /// Skip writing per-run trajectory CSV files.
        #[arg(long)]
        no_csv: bool,
    },
    /// Runs the initialization procedure and prints its certificate report.
    InitReport {
        #[arg(long)]
        scenario: PathBuf,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulates several modes with identical seeds and tabulates cost and time ratios.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "proposed,fixedref,sequential")]
        modes: Vec<ModeArg>,
        #[arg(long, default_value_t = 1)]
        iterations: usize,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tsim: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct RunOutput<'a> {
    summary: &'a BatchSummary,
    runs: Vec<&'a RunMetrics>,
}

fn controller_mode(arg: ModeArg, iterations: usize, order: Option<Vec<usize>>, agents: usize) -> ControllerMode {
    match arg {
        ModeArg::Proposed => ControllerMode::Proposed { iterations },
        ModeArg::Fixedref => ControllerMode::FixedReference,
        ModeArg::Sequential => ControllerMode::Sequential {
            order: order.unwrap_or_else(|| (0..agents).collect()),
        },
    }
}

fn load(path: &Path) -> Result<Initialized> {
    let scenario = Scenario::load(path).with_context(|| format!("loading {}", path.display()))?;
    let init = harness::initialize(&scenario).context("initialization failed")?;
    Ok(init)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            mode,
            iterations,
            order,
            runs,
            seed,
            tsim,
            out,
            strict,
            no_csv,
        } => {
            let init = load(&scenario)?;
            let defaults = &init.scenario.defaults;
            let mode = controller_mode(mode, iterations, order, init.scenario.agents.len());
            let mut opts = SimOptions::new(mode, runs.unwrap_or(defaults.runs), seed.unwrap_or(defaults.seed));
            opts.t_sim = tsim;
            opts.strict = strict;
            let records = harness::simulate(&init, &opts)?;
            let name = &init.scenario.name;
            let label = opts.mode.label();
            if !no_csv {
                for r in &records {
                    let stem = persist::file_stem(name, &label, opts.seed, r.metrics.run);
                    persist::write_run_csv(&out, &stem, &r.rows)?;
                }
            }
            let all: Vec<RunMetrics> = records.iter().map(|r| r.metrics.clone()).collect();
            let summary = metrics::summarize(name, &label, opts.seed, &all);
            let json = out.join(format!("{name}_{label}_{}.json", opts.seed));
            persist::write_json(&json, &RunOutput { summary: &summary, runs: all.iter().collect() })?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            eprintln!("wrote {}", json.display());
            if summary.infeasible > 0 {
                bail!("{} infeasible local problems", summary.infeasible);
            }
        }
        Command::InitReport { scenario, out } => {
            let init = load(&scenario)?;
            let text = serde_json::to_string_pretty(&init.report)?;
            println!("{text}");
            if let Some(path) = out {
                persist::write_json(&path, &init.report)?;
            }
        }
        Command::Compare {
            scenario,
            modes,
            iterations,
            runs,
            seed,
            tsim,
            out,
        } => {
            if modes.is_empty() {
                bail!("no modes given");
            }
            let init = load(&scenario)?;
            let defaults = &init.scenario.defaults;
            let agents = init.scenario.agents.len();
            let modes: Vec<ControllerMode> = modes
                .into_iter()
                .map(|m| controller_mode(m, iterations, None, agents))
                .collect();
            let seed = seed.unwrap_or(defaults.seed);
            let (table, _) = compare::compare(&init, &modes, runs.unwrap_or(defaults.runs), seed, tsim)?;
            compare::write_comparison(&out, &table)?;
            println!("{}", serde_json::to_string_pretty(&table)?);
        }
    }
    Ok(())
}
