//! Uncoupled and coupled state constraints, the coupling graph, and the
//! Lipschitz / support-function tightening used to make constraint checks
//! robust against set-valued uncertainty around nominal points.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::setgeom::{self, SetDescriptor};

/// User-supplied constraint `g(x_participants) ≤ 0` with a declared Lipschitz constant.
pub type CustomEval = Arc<dyn Fn(&[&DVector<f64>]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct CustomConstraint {
    pub name: String,
    pub lipschitz: f64,
    pub eval: CustomEval,
}

impl fmt::Debug for CustomConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomConstraint")
            .field("name", &self.name)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum ConstraintKind {
    /// `‖pos_i − pos_j‖ − d_max ≤ 0`.
    Connectivity { d_max: f64 },
    /// `d_min − ‖pos_i − pos_j‖ ≤ 0`.
    Collision { d_min: f64 },
    /// `A [x_p1; x_p2; ...] ≤ b` over the stacked participant states.
    AffineState { a: DMatrix<f64>, b: DVector<f64> },
    Custom(CustomConstraint),
}

/// A constraint and the agents it involves.
#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    pub kind: ConstraintKind,
    pub participants: Vec<usize>,
    /// Position coordinates used by distance constraints.
    pub pos: Vec<usize>,
}

/// Serializable constraint declaration used in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConstraintConfig {
    Connectivity {
        d_max: f64,
        #[serde(default)]
        pairs: Option<Vec<[usize; 2]>>,
    },
    Collision {
        d_min: f64,
        #[serde(default)]
        pairs: Option<Vec<[usize; 2]>>,
    },
    AffineState {
        participants: Vec<usize>,
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
    },
}

fn default_pos() -> Vec<usize> {
    vec![0, 1]
}

impl ConstraintSpec {
    pub fn connectivity(i: usize, j: usize, d_max: f64) -> Result<Self> {
        if !(d_max > 0.0) {
            return Err(Error::Config("connectivity distance must be positive".into()));
        }
        Ok(Self {
            kind: ConstraintKind::Connectivity { d_max },
            participants: vec![i, j],
            pos: default_pos(),
        })
    }

    pub fn collision(i: usize, j: usize, d_min: f64) -> Result<Self> {
        if !(d_min > 0.0) {
            return Err(Error::Config("collision distance must be positive".into()));
        }
        Ok(Self {
            kind: ConstraintKind::Collision { d_min },
            participants: vec![i, j],
            pos: default_pos(),
        })
    }

    pub fn affine(participants: Vec<usize>, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        check_dim("affine rhs", a.nrows(), b.len())?;
        if (0..a.nrows()).any(|i| a.row(i).norm() == 0.0) {
            return Err(Error::Config("affine constraint with a zero row".into()));
        }
        Ok(Self {
            kind: ConstraintKind::AffineState { a, b },
            participants,
            pos: default_pos(),
        })
    }

    pub fn custom(participants: Vec<usize>, c: CustomConstraint) -> Result<Self> {
        if !(c.lipschitz >= 0.0) || !c.lipschitz.is_finite() {
            return Err(Error::Config("custom constraint needs a finite Lipschitz constant".into()));
        }
        Ok(Self {
            kind: ConstraintKind::Custom(c),
            participants,
            pos: default_pos(),
        })
    }

    pub fn with_pos(mut self, pos: Vec<usize>) -> Self {
        self.pos = pos;
        self
    }

    pub fn is_coupled(&self) -> bool {
        self.participants.len() > 1
    }

    pub fn rows(&self) -> usize {
        match &self.kind {
            ConstraintKind::AffineState { a, .. } => a.nrows(),
            _ => 1,
        }
    }

    /// Lipschitz constant w.r.t. the per-participant sum of Euclidean norms.
    pub fn lipschitz(&self) -> f64 {
        match &self.kind {
            ConstraintKind::Connectivity { .. } | ConstraintKind::Collision { .. } => 1.0,
            ConstraintKind::AffineState { a, .. } => {
                (0..a.nrows()).map(|i| a.row(i).norm()).fold(0.0, f64::max)
            }
            ConstraintKind::Custom(c) => c.lipschitz,
        }
    }

    pub fn label(&self) -> String {
        let who: Vec<String> = self.participants.iter().map(|p| p.to_string()).collect();
        let name = match &self.kind {
            ConstraintKind::Connectivity { .. } => "connectivity".to_string(),
            ConstraintKind::Collision { .. } => "collision".to_string(),
            ConstraintKind::AffineState { .. } => "affine".to_string(),
            ConstraintKind::Custom(c) => c.name.clone(),
        };
        format!("{name}({})", who.join(","))
    }

    fn position_gap(&self, states: &[&DVector<f64>]) -> Result<(f64, DVector<f64>)> {
        let (a, b) = (states[0], states[1]);
        let mut diff = DVector::zeros(self.pos.len());
        for (k, &c) in self.pos.iter().enumerate() {
            if c >= a.len() || c >= b.len() {
                return Err(Error::Dimension {
                    context: "position coordinate",
                    expected: a.len().min(b.len()),
                    found: c,
                });
            }
            diff[k] = a[c] - b[c];
        }
        Ok((diff.norm(), diff))
    }
}

/// Margins of `c` at the given participant states (nonpositive means satisfied).
pub fn eval_constraint(c: &ConstraintSpec, states: &[&DVector<f64>]) -> Result<Vec<f64>> {
    if states.len() != c.participants.len() {
        return Err(Error::Config(format!(
            "{} expects {} participant states, got {}",
            c.label(),
            c.participants.len(),
            states.len()
        )));
    }
    Ok(match &c.kind {
        ConstraintKind::Connectivity { d_max } => vec![c.position_gap(states)?.0 - d_max],
        ConstraintKind::Collision { d_min } => vec![d_min - c.position_gap(states)?.0],
        ConstraintKind::AffineState { a, b } => {
            let total: usize = states.iter().map(|s| s.len()).sum();
            check_dim("affine constraint width", a.ncols(), total)?;
            let stacked = DVector::from_iterator(total, states.iter().flat_map(|s| s.iter().copied()));
            (a * stacked - b).iter().copied().collect()
        }
        ConstraintKind::Custom(cc) => vec![(cc.eval)(states)],
    })
}

/// Value and gradients (one per participant) of every constraint row.
pub fn constraint_gradients(
    c: &ConstraintSpec,
    states: &[&DVector<f64>],
) -> Result<Vec<(f64, Vec<DVector<f64>>)>> {
    let values = eval_constraint(c, states)?;
    match &c.kind {
        ConstraintKind::Connectivity { .. } | ConstraintKind::Collision { .. } => {
            let (dist, diff) = c.position_gap(states)?;
            let sign = if matches!(c.kind, ConstraintKind::Connectivity { .. }) { 1.0 } else { -1.0 };
            let mut gi = DVector::zeros(states[0].len());
            if dist > 1e-12 {
                for (k, &p) in c.pos.iter().enumerate() {
                    gi[p] = sign * diff[k] / dist;
                }
            } else if sign < 0.0 {
                // Any unit direction is a supergradient at coincident points.
                gi[c.pos[0]] = -1.0;
            }
            let gj = -gi.clone();
            Ok(vec![(values[0], vec![gi, gj])])
        }
        ConstraintKind::AffineState { a, .. } => {
            let mut out = Vec::with_capacity(a.nrows());
            for (r, v) in values.iter().enumerate() {
                let mut off = 0;
                let mut grads = Vec::with_capacity(states.len());
                for s in states {
                    grads.push(a.row(r).columns(off, s.len()).transpose());
                    off += s.len();
                }
                out.push((*v, grads));
            }
            Ok(out)
        }
        ConstraintKind::Custom(cc) => {
            let h = 1e-7;
            let mut grads = Vec::with_capacity(states.len());
            for (p, s) in states.iter().enumerate() {
                let mut g = DVector::zeros(s.len());
                for k in 0..s.len() {
                    let mut plus: Vec<DVector<f64>> = states.iter().map(|v| (*v).clone()).collect();
                    let mut minus = plus.clone();
                    plus[p][k] += h;
                    minus[p][k] -= h;
                    let pr: Vec<&DVector<f64>> = plus.iter().collect();
                    let mr: Vec<&DVector<f64>> = minus.iter().collect();
                    g[k] = ((cc.eval)(&pr) - (cc.eval)(&mr)) / (2.0 * h);
                }
                grads.push(g);
            }
            Ok(vec![(values[0], grads)])
        }
    }
}

/// Set-valued uncertainty around a nominal point: a Minkowski sum of convex
/// sets that may each live on a coordinate subspace (other coordinates free),
/// an optional ellipsoid `{e | eᵀ S⁻¹ e ≤ 1}` given by `S`, and a ball.
#[derive(Debug, Clone)]
pub struct Uncertainty {
    pub dim: usize,
    pub sets: Vec<(SetDescriptor, Vec<usize>)>,
    pub ellipsoid: Option<DMatrix<f64>>,
    pub ball: f64,
}

impl Uncertainty {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            sets: Vec::new(),
            ellipsoid: None,
            ball: 0.0,
        }
    }

    pub fn with_set(mut self, set: SetDescriptor) -> Self {
        let coords = (0..set.dim()).collect();
        self.sets.push((set, coords));
        self
    }

    pub fn with_embedded(mut self, set: SetDescriptor, coords: Vec<usize>) -> Self {
        self.sets.push((set, coords));
        self
    }

    pub fn with_ellipsoid(mut self, s: DMatrix<f64>) -> Self {
        self.ellipsoid = Some(s);
        self
    }

    pub fn with_ball(mut self, radius: f64) -> Self {
        self.ball += radius;
        self
    }

    /// Support function in direction `d` (full state space).
    pub fn support(&self, d: &[f64]) -> f64 {
        let mut total = self.ball * d.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (set, coords) in &self.sets {
            let free = d
                .iter()
                .enumerate()
                .any(|(k, v)| *v != 0.0 && !coords.contains(&k));
            if free {
                return f64::INFINITY;
            }
            let sub: Vec<f64> = coords.iter().map(|&k| d[k]).collect();
            total += set.support(&sub);
        }
        if let Some(s) = &self.ellipsoid {
            let dv = DVector::from_row_slice(d);
            total += dv.dot(&(s * &dv)).max(0.0).sqrt();
        }
        total
    }

    /// Largest Euclidean norm of the uncertainty projected onto `coords`.
    pub fn radius(&self, coords: &[usize]) -> Result<f64> {
        let mut total = self.ball;
        for (set, sc) in &self.sets {
            let mut idx = Vec::with_capacity(coords.len());
            for c in coords {
                match sc.iter().position(|k| k == c) {
                    Some(p) => idx.push(p),
                    None => return Err(Error::Unbounded(format!("coordinate {c} is free"))),
                }
            }
            let proj = set.project(&idx)?;
            total += setgeom::max_point_distance(&vec![0.0; idx.len()], &proj)?;
        }
        if let Some(s) = &self.ellipsoid {
            let e = linalg::selector(coords, self.dim);
            let sub = &e * s * e.transpose();
            let lmax = sub.symmetric_eigenvalues().max();
            total += lmax.max(0.0).sqrt();
        }
        Ok(total)
    }
}

/// Amount by which each row of `c` must be tightened at nominal points so that
/// the constraint holds for every point of the participants' uncertainty sets.
///
/// Distance and custom constraints use the Lipschitz bound `C · Σ_j d_max(0, U_j)`;
/// affine rows use exact support functions.
pub fn row_tightening(c: &ConstraintSpec, unc: &[&Uncertainty]) -> Result<Vec<f64>> {
    if unc.len() != c.participants.len() {
        return Err(Error::Config(format!("{}: uncertainty per participant required", c.label())));
    }
    match &c.kind {
        ConstraintKind::Connectivity { .. } | ConstraintKind::Collision { .. } => {
            let mut total = 0.0;
            for u in unc {
                total += u.radius(&c.pos)?;
            }
            Ok(vec![total])
        }
        ConstraintKind::AffineState { a, .. } => {
            let mut out = Vec::with_capacity(a.nrows());
            for r in 0..a.nrows() {
                let mut off = 0;
                let mut total = 0.0;
                for u in unc {
                    let d: Vec<f64> = (0..u.dim).map(|k| a[(r, off + k)]).collect();
                    let h = u.support(&d);
                    if !h.is_finite() {
                        return Err(Error::Unbounded(format!("{} row {r}", c.label())));
                    }
                    total += h;
                    off += u.dim;
                }
                out.push(total);
            }
            Ok(out)
        }
        ConstraintKind::Custom(cc) => {
            let mut total = 0.0;
            for u in unc {
                let all: Vec<usize> = (0..u.dim).collect();
                total += u.radius(&all)?;
            }
            Ok(vec![cc.lipschitz * total])
        }
    }
}

/// `C · d_max(0, ×_j S_j)` with the product distance bounded by the sum of the
/// per-participant distances, measured on the constraint's coordinates.
pub fn tightening_scalars(c: &ConstraintSpec, sets: &[SetDescriptor]) -> Result<f64> {
    let unc: Vec<Uncertainty> = sets
        .iter()
        .map(|s| Uncertainty::new(s.dim()).with_set(s.clone()))
        .collect();
    let refs: Vec<&Uncertainty> = unc.iter().collect();
    let rows = row_tightening(c, &refs)?;
    match &c.kind {
        ConstraintKind::AffineState { .. } => {
            // Lipschitz form for reporting: largest row norm times summed radii.
            let mut total = 0.0;
            for s in sets {
                total += setgeom::max_point_distance(&vec![0.0; s.dim()], s)?;
            }
            Ok(c.lipschitz() * total)
        }
        _ => Ok(rows[0]),
    }
}

/// `eval(c, centers) ≤ −tighten` row-wise.
pub fn check_tightened(c: &ConstraintSpec, centers: &[&DVector<f64>], tighten: &[f64]) -> Result<bool> {
    let vals = eval_constraint(c, centers)?;
    Ok(vals
        .iter()
        .enumerate()
        .all(|(r, v)| *v <= -tighten[r.min(tighten.len() - 1)] + 1e-12))
}

/// Undirected coupling topology with the global constraint list.
#[derive(Debug, Clone)]
pub struct CouplingGraph {
    pub agents: usize,
    pub constraints: Vec<ConstraintSpec>,
}

impl CouplingGraph {
    pub fn new(agents: usize, constraints: Vec<ConstraintSpec>) -> Result<Self> {
        for c in &constraints {
            let unique: BTreeSet<usize> = c.participants.iter().copied().collect();
            if unique.len() != c.participants.len() || c.participants.is_empty() {
                return Err(Error::Config(format!("{} has repeated participants", c.label())));
            }
            if let Some(&bad) = c.participants.iter().find(|&&p| p >= agents) {
                return Err(Error::Config(format!("{} names unknown agent {bad}", c.label())));
            }
            if matches!(c.kind, ConstraintKind::Connectivity { .. } | ConstraintKind::Collision { .. })
                && c.participants.len() != 2
            {
                return Err(Error::Config(format!("{} must have two participants", c.label())));
            }
        }
        Ok(Self { agents, constraints })
    }

    /// Merges per-agent constraint lists. A coupled constraint declared by any
    /// participant is shared by all of them; duplicates are collapsed.
    pub fn from_agent_lists(agents: usize, lists: Vec<Vec<ConstraintSpec>>) -> Result<Self> {
        let mut merged: Vec<ConstraintSpec> = Vec::new();
        for (owner, list) in lists.into_iter().enumerate() {
            for c in list {
                if !c.participants.contains(&owner) {
                    return Err(Error::Config(format!(
                        "agent {owner} declares {} without participating",
                        c.label()
                    )));
                }
                if !merged.iter().any(|m| same_constraint(m, &c)) {
                    merged.push(c);
                }
            }
        }
        Self::new(agents, merged)
    }

    /// Constraint indices involving agent `i`.
    pub fn constraints_of(&self, i: usize) -> Vec<usize> {
        (0..self.constraints.len())
            .filter(|&k| self.constraints[k].participants.contains(&i))
            .collect()
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut set = BTreeSet::new();
        for c in &self.constraints {
            if c.participants.contains(&i) {
                set.extend(c.participants.iter().copied().filter(|&p| p != i));
            }
        }
        set.into_iter().collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        for c in &self.constraints {
            for &a in &c.participants {
                for &b in &c.participants {
                    if a < b {
                        set.insert((a, b));
                    }
                }
            }
        }
        set.into_iter().collect()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.agents).map(|i| self.neighbors(i).len()).max().unwrap_or(0)
    }

    /// Symmetry of the neighbor relation and shared coupled constraints.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.agents {
            for j in self.neighbors(i) {
                if !self.neighbors(j).contains(&i) {
                    return Err(Error::Config(format!("neighbor relation {i}->{j} is not symmetric")));
                }
                let shared_i: Vec<usize> = self
                    .constraints_of(i)
                    .into_iter()
                    .filter(|&k| self.constraints[k].participants.contains(&j))
                    .collect();
                let shared_j: Vec<usize> = self
                    .constraints_of(j)
                    .into_iter()
                    .filter(|&k| self.constraints[k].participants.contains(&i))
                    .collect();
                if shared_i != shared_j {
                    return Err(Error::Config(format!("agents {i} and {j} disagree on shared constraints")));
                }
            }
        }
        Ok(())
    }
}

fn same_constraint(a: &ConstraintSpec, b: &ConstraintSpec) -> bool {
    let pa: BTreeSet<usize> = a.participants.iter().copied().collect();
    let pb: BTreeSet<usize> = b.participants.iter().copied().collect();
    if pa != pb || a.pos != b.pos {
        return false;
    }
    match (&a.kind, &b.kind) {
        (ConstraintKind::Connectivity { d_max: x }, ConstraintKind::Connectivity { d_max: y }) => x == y,
        (ConstraintKind::Collision { d_min: x }, ConstraintKind::Collision { d_min: y }) => x == y,
        (ConstraintKind::AffineState { a: a1, b: b1 }, ConstraintKind::AffineState { a: a2, b: b2 }) => {
            a.participants == b.participants && a1 == a2 && b1 == b2
        }
        (ConstraintKind::Custom(x), ConstraintKind::Custom(y)) => {
            a.participants == b.participants && x.name == y.name && Arc::ptr_eq(&x.eval, &y.eval)
        }
        _ => false,
    }
}

/// Expands scenario constraint declarations into specs (all pairs when no
/// pair list is given).
pub fn expand_configs(agents: usize, configs: &[ConstraintConfig]) -> Result<Vec<ConstraintSpec>> {
    let all_pairs = || {
        let mut v = Vec::new();
        for i in 0..agents {
            for j in i + 1..agents {
                v.push([i, j]);
            }
        }
        v
    };
    let mut out = Vec::new();
    for cfg in configs {
        match cfg {
            ConstraintConfig::Connectivity { d_max, pairs } => {
                for [i, j] in pairs.clone().unwrap_or_else(all_pairs) {
                    out.push(ConstraintSpec::connectivity(i, j, *d_max)?);
                }
            }
            ConstraintConfig::Collision { d_min, pairs } => {
                for [i, j] in pairs.clone().unwrap_or_else(all_pairs) {
                    out.push(ConstraintSpec::collision(i, j, *d_min)?);
                }
            }
            ConstraintConfig::AffineState { participants, a, b } => {
                out.push(ConstraintSpec::affine(
                    participants.clone(),
                    linalg::from_rows(a)?,
                    DVector::from_row_slice(b),
                )?);
            }
        }
    }
    Ok(out)
}
