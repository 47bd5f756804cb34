//! Offline initialization: constraint graph, tubes, terminal ingredients,
//! initially feasible trajectories and consistency sets.

use nalgebra::DVector;
use serde::Serialize;

use crate::agents::{AgentStatic, Controller};
use crate::coupling::{self, CouplingGraph};
use crate::error::{Error, Result};
use crate::model::DisturbanceSpec;
use crate::ocp::sqp::SqpSettings;
use crate::ocp::{RefWindow, TrajectoryWindow};
use crate::refupdate::{self, ReferenceCheckReport, ConsistencySets, InitAgent};
use crate::setgeom::SetDescriptor;
use crate::terminal::{self, CheckItem, TerminalAgent};
use crate::tube::{self, RpiReport};

use super::scenario::Scenario;

fn step_err(step: u8, e: Error) -> Error {
    match e {
        Error::Init { .. } => e,
        other => Error::Init {
            step,
            msg: other.to_string(),
        },
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AgentInitReport {
    pub p_half_widths: Vec<f64>,
    pub p_radius: f64,
    pub w_d: SetDescriptor,
    pub delta_u: SetDescriptor,
    pub u_hat: SetDescriptor,
    pub u_xi: Vec<f64>,
    pub sigma: f64,
    pub gamma_tilde: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub c_bar_half: Vec<f64>,
    pub terminal_checks: Vec<CheckItem>,
    pub rpi_check: RpiReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct InitReport {
    pub scenario: String,
    pub edges: Vec<(usize, usize)>,
    pub agents: Vec<AgentInitReport>,
    /// Worst tightened margin of the initial trajectories per constraint.
    pub initial_margins: Vec<(String, f64)>,
    pub reference_check: ReferenceCheckReport,
}

/// Result of initialization: everything needed to start the closed loop.
#[derive(Debug, Clone)]
pub struct Initialized {
    pub scenario: Scenario,
    pub controller: Controller,
    pub disturbances: Vec<DisturbanceSpec>,
    pub x0: Vec<DVector<f64>>,
    pub windows: Vec<TrajectoryWindow>,
    pub report: InitReport,
}

#[derive(Debug, Clone, Copy)]
pub struct InitOptions {
    /// Samples per Monte-Carlo certification.
    pub samples: usize,
    /// Steps of the RPI Monte-Carlo check.
    pub rpi_steps: usize,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            samples: 400,
            rpi_steps: 100_000,
        }
    }
}

pub fn initialize(scenario: &Scenario) -> Result<Initialized> {
    initialize_with(scenario, InitOptions::default())
}

pub fn initialize_with(scenario: &Scenario, opts: InitOptions) -> Result<Initialized> {
    scenario.validate().map_err(|e| step_err(1, e))?;
    let na = scenario.agents.len();

    // Step 1: constraint graph.
    let specs = coupling::expand_configs(na, &scenario.constraints).map_err(|e| step_err(1, e))?;
    let graph = CouplingGraph::new(na, specs).map_err(|e| step_err(1, e))?;
    let mut dyns = Vec::with_capacity(na);
    let mut qs = Vec::with_capacity(na);
    let mut rs = Vec::with_capacity(na);
    for i in 0..na {
        dyns.push(scenario.dynamics(i).map_err(|e| step_err(1, e))?);
        qs.push(scenario.agents[i].q.to_matrix()?);
        rs.push(scenario.agents[i].r.to_matrix()?);
    }

    // Step 2: tubes and tightened sets.
    let mut tubes = Vec::with_capacity(na);
    let mut hats = Vec::with_capacity(na);
    let mut disturbances = Vec::with_capacity(na);
    for (i, a) in scenario.agents.iter().enumerate() {
        let t = tube::build_tube(&dyns[i], &a.aux, &a.disturbance, &a.input_set, scenario.rpi_eps)
            .map_err(|e| step_err(2, e))?;
        let hat = match &a.state_set {
            Some(x) => Some(tube::tighten_state(x, &t.p).map_err(|e| step_err(2, e))?.ok_or_else(|| Error::Init {
                step: 2,
                msg: format!("agent {i}: tightened state set is empty"),
            })?),
            None => None,
        };
        disturbances.push(DisturbanceSpec::new(a.disturbance.clone(), t.w_d.clone()).map_err(|e| step_err(2, e))?);
        tubes.push(t);
        hats.push(hat);
    }

    // Step 3: terminal ingredients and a joint choice of levels.
    let mut sets = Vec::with_capacity(na);
    for (i, t) in tubes.iter().enumerate() {
        let coords = scenario.coords(i);
        let d = coords.len();
        sets.push(
            ConsistencySets::new(scenario.margins.alpha(d), scenario.margins.beta(d), &t.p, coords)
                .map_err(|e| step_err(5, e))?,
        );
    }
    let mut terminals = Vec::with_capacity(na);
    for (i, a) in scenario.agents.iter().enumerate() {
        let xi = DVector::from_row_slice(&a.xi);
        let ti = terminal::design_terminal(&dyns[i], &qs[i], &rs[i], &xi, &tubes[i].u_hat, sets[i].alpha, &scenario.terminal)
            .map_err(|e| step_err(3, e))?;
        terminals.push(ti);
    }
    let gammas = {
        let tas: Vec<TerminalAgent> = (0..na)
            .map(|i| TerminalAgent {
                dyn_: &dyns[i],
                q: &qs[i],
                r: &rs[i],
                ti: &terminals[i],
                u_hat: &tubes[i].u_hat,
                p: &tubes[i].p,
                state_set: hats[i].as_ref(),
            })
            .collect();
        terminal::select_gamma(&tas, &graph, opts.samples, scenario.terminal.seed).map_err(|e| step_err(3, e))?
    };
    for (t, g) in terminals.iter_mut().zip(&gammas) {
        *t = t.with_gamma(*g);
    }
    let mut terminal_reports = Vec::with_capacity(na);
    {
        let tas: Vec<TerminalAgent> = (0..na)
            .map(|i| TerminalAgent {
                dyn_: &dyns[i],
                q: &qs[i],
                r: &rs[i],
                ti: &terminals[i],
                u_hat: &tubes[i].u_hat,
                p: &tubes[i].p,
                state_set: hats[i].as_ref(),
            })
            .collect();
        for i in 0..na {
            let rep = terminal::verify_terminal_conditions(&tas, &graph, i, opts.samples, scenario.terminal.seed)
                .map_err(|e| step_err(3, e))?;
            if !rep.passed() {
                let failed: Vec<&str> = rep.items.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
                return Err(Error::Init {
                    step: 3,
                    msg: format!("agent {i}: terminal checks failed: {}", failed.join(", ")),
                });
            }
            terminal_reports.push(rep);
        }
    }

    // Step 4: initially feasible trajectories.
    let x0: Vec<DVector<f64>> = scenario.agents.iter().map(|a| DVector::from_row_slice(&a.x0)).collect();
    let state_sets: Vec<Option<SetDescriptor>> = scenario.agents.iter().map(|a| a.state_set.clone()).collect();
    let windows = {
        let init_agents: Vec<InitAgent> = (0..na)
            .map(|i| InitAgent {
                dyn_: &dyns[i],
                q: &qs[i],
                r: &rs[i],
                x0: &x0[i],
                terminal: &terminals[i],
                u_hat: &tubes[i].u_hat,
            })
            .collect();
        refupdate::compute_initial_trajectories(&init_agents, &graph, &state_sets, &sets, scenario.horizon, &scenario.init)?
    };
    let init_tight = refupdate::Tightenings::initial(&graph, &state_sets, &sets)?;
    let mut initial_margins = Vec::new();
    for (ci, c) in graph.constraints.iter().enumerate() {
        let mut worst = f64::INFINITY;
        for k in 0..scenario.horizon {
            let states: Vec<&DVector<f64>> = c.participants.iter().map(|&p| &windows[p].states[k]).collect();
            let v = coupling::eval_constraint(c, &states)?;
            for (v, t) in v.iter().zip(&init_tight.coupled[ci]) {
                worst = worst.min(-(v + t));
            }
        }
        initial_margins.push((c.label(), worst));
    }

    // Step 5: consistency sets and the initial reference check.
    let agents: Vec<AgentStatic> = (0..na)
        .map(|i| AgentStatic {
            dyn_: dyns[i].clone(),
            q: qs[i].clone(),
            r: rs[i].clone(),
            u_set: scenario.agents[i].input_set.clone(),
            state_set: state_sets[i].clone(),
            state_set_hat: hats[i].clone(),
            tube: tubes[i].clone(),
            terminal: terminals[i].clone(),
            sets: sets[i].clone(),
        })
        .collect();
    let controller = Controller::new(agents, graph, scenario.horizon, SqpSettings::default()).map_err(|e| step_err(5, e))?;
    let refs: Vec<RefWindow> = windows.iter().map(RefWindow::from_window).collect();
    let refs_view: Vec<&RefWindow> = refs.iter().collect();
    let reference_check = refupdate::validate_references(&controller.ref_context(), &refs_view, None);
    if !reference_check.passed() {
        return Err(Error::Init {
            step: 5,
            msg: format!("initial references fail the validator: {}", reference_check.failures.join("; ")),
        });
    }

    let mut agent_reports = Vec::with_capacity(na);
    for i in 0..na {
        let t = &tubes[i];
        let ti = &terminals[i];
        let rpi_check = tube::check_rpi_montecarlo(&t.lambda_d, &t.p, &t.w_d, 100, opts.rpi_steps, 11 + i as u64);
        agent_reports.push(AgentInitReport {
            p_half_widths: t.p_half_widths(),
            p_radius: t.p_radius(&sets[i].coords),
            w_d: t.w_d.clone(),
            delta_u: t.delta_u.clone(),
            u_hat: t.u_hat.clone(),
            u_xi: ti.u_xi().iter().copied().collect(),
            sigma: ti.sigma,
            gamma_tilde: ti.gamma_tilde,
            gamma: ti.gamma,
            alpha: sets[i].alpha,
            beta: sets[i].beta,
            c_bar_half: sets[i].c_bar_half.clone(),
            terminal_checks: terminal_reports[i].items.clone(),
            rpi_check,
        });
    }
    let report = InitReport {
        scenario: scenario.name.clone(),
        edges: controller.graph.edges(),
        agents: agent_reports,
        initial_margins,
        reference_check,
    };
    Ok(Initialized {
        scenario: scenario.clone(),
        controller,
        disturbances,
        x0,
        windows,
        report,
    })
}
