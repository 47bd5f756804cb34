//! Scenario files: agents, constraints, horizon and margins.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coupling::ConstraintConfig;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ModelKind, SubsystemDynamics};
use crate::refupdate::InitSettings;
use crate::setgeom::{SetDescriptor, SET_TOL};
use crate::terminal::TerminalDesignSettings;
use crate::tube::AuxSpec;

/// A weight matrix given either by its diagonal or in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Diag(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Diag(d) => Ok(linalg::diag(d)),
            MatrixSpec::Full(rows) => linalg::from_rows(rows),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub model: ModelKind,
    pub aux: AuxSpec,
    /// Continuous-time disturbance set (per-step set for discrete models).
    pub disturbance: SetDescriptor,
    pub input_set: SetDescriptor,
    #[serde(default)]
    pub state_set: Option<SetDescriptor>,
    pub q: MatrixSpec,
    pub r: MatrixSpec,
    pub x0: Vec<f64>,
    pub xi: Vec<f64>,
}

/// Consistency margins. `alpha` and `beta` default to `√2·c̄`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub c_bar: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
}

impl Margins {
    pub fn alpha(&self, dims: usize) -> f64 {
        self.alpha.unwrap_or(self.c_bar * (dims as f64).sqrt())
    }

    pub fn beta(&self, dims: usize) -> f64 {
        self.beta.unwrap_or(self.c_bar * (dims as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDefaults {
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_runs() -> usize {
    20
}
fn default_iterations() -> usize {
    1
}
fn default_seed() -> u64 {
    1
}
fn default_substeps() -> usize {
    10
}
fn default_eps() -> f64 {
    1e-4
}

impl Default for RunDefaults {
    fn default() -> Self {
        Self {
            runs: default_runs(),
            iterations: default_iterations(),
            seed: default_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub dt: f64,
    pub horizon: usize,
    pub t_sim: usize,
    /// RK4 substeps per sampling period; the auxiliary feedback is
    /// re-evaluated at every RK4 stage.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    pub margins: Margins,
    /// Coordinates carrying the consistency constraint; positions `[0, 1]`
    /// for robots and all coordinates otherwise when omitted.
    #[serde(default)]
    pub consistency_coords: Option<Vec<usize>>,
    #[serde(default = "default_eps")]
    pub rpi_eps: f64,
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub constraints: Vec<ConstraintConfig>,
    #[serde(default)]
    pub init: InitSettings,
    #[serde(default)]
    pub terminal: TerminalDesignSettings,
    #[serde(default)]
    pub defaults: RunDefaults,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn coords(&self, i: usize) -> Vec<usize> {
        match (&self.consistency_coords, &self.agents[i].model) {
            (Some(c), _) => c.clone(),
            (None, ModelKind::OmniRobot { .. }) => vec![0, 1],
            (None, _) => (0..self.agents[i].x0.len()).collect(),
        }
    }

    pub fn dynamics(&self, i: usize) -> Result<SubsystemDynamics> {
        SubsystemDynamics::new(self.agents[i].model.clone(), self.dt, self.substeps)
    }

    /// Dimensions, weights, sets and target equilibria.
    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::Config("scenario has no agents".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least one step".into()));
        }
        if !(self.margins.c_bar > 0.0) {
            return Err(Error::Config("c_bar must be positive".into()));
        }
        for (i, a) in self.agents.iter().enumerate() {
            let ctx = |m: &str| Error::Config(format!("agent {i}: {m}"));
            let dyn_ = self.dynamics(i)?;
            let (n, m) = (dyn_.state_dim(), dyn_.input_dim());
            if a.x0.len() != n || a.xi.len() != n {
                return Err(ctx("initial or target state has the wrong dimension"));
            }
            if a.disturbance.dim() != n {
                return Err(ctx("disturbance set has the wrong dimension"));
            }
            if a.input_set.dim() != m {
                return Err(ctx("input set has the wrong dimension"));
            }
            let q = a.q.to_matrix()?;
            let r = a.r.to_matrix()?;
            if q.shape() != (n, n) || r.shape() != (m, m) {
                return Err(ctx("weight matrices have the wrong shape"));
            }
            if linalg::spd_inverse(&r).is_none() || linalg::spd_inverse(&q).is_none() {
                return Err(ctx("weights must be positive definite"));
            }
            if self.coords(i).iter().any(|&c| c >= n) {
                return Err(ctx("consistency coordinates out of range"));
            }
            let xi = DVector::from_row_slice(&a.xi);
            let u_xi = dyn_.steady_input(&xi).map_err(|e| ctx(&format!("target is not admissible: {e}")))?;
            if !a.input_set.contains(u_xi.as_slice(), SET_TOL) {
                return Err(ctx("steady input of the target violates the input set"));
            }
            if let Some(x) = &a.state_set {
                if x.dim() != n {
                    return Err(ctx("state set has the wrong dimension"));
                }
                if !x.contains(&a.xi, SET_TOL) || !x.contains(&a.x0, SET_TOL) {
                    return Err(ctx("initial or target state violates the state set"));
                }
            }
        }
        Ok(())
    }
}
