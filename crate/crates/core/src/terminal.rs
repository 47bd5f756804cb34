//! Terminal cost, terminal controller and terminal level sets.
//!
//! The terminal cost is `J_f(x) = σ (x−ξ)ᵀ P (x−ξ)` with `P` the stabilizing
//! DARE solution of the linearization at `(ξ, u_ξ)`, and the terminal set is
//! the level set `J_f ≤ γ`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::coupling::{self, CouplingGraph, Uncertainty};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::SubsystemDynamics;
use crate::setgeom::SetDescriptor;

const DARE_MAX_ITER: usize = 80;

/// Stabilizing solution of `P = AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA + Q`
/// by structure-preserving doubling.
pub fn solve_dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Dare("inconsistent matrix shapes".into()));
    }
    if q.clone().cholesky().is_none() || r.clone().cholesky().is_none() {
        return Err(Error::Dare("Q and R must be symmetric positive definite".into()));
    }
    let rinv = linalg::spd_inverse(r).ok_or_else(|| Error::Dare("R is singular".into()))?;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * rinv * b.transpose();
    let mut hk = q.clone();
    let mut converged = false;
    for _ in 0..DARE_MAX_ITER {
        let w = &eye + &gk * &hk;
        let lu = w.lu();
        let wa = lu.solve(&ak).ok_or_else(|| Error::Dare("singular doubling iterate".into()))?;
        let wg = lu.solve(&gk).ok_or_else(|| Error::Dare("singular doubling iterate".into()))?;
        let h_next = &hk + ak.transpose() * &hk * &wa;
        let g_next = &gk + &ak * &wg * ak.transpose();
        let a_next = &ak * &wa;
        let change = (&h_next - &hk).amax();
        let scale = h_next.amax().max(1.0);
        hk = h_next;
        gk = g_next;
        ak = a_next;
        linalg::symmetrize(&mut hk);
        linalg::symmetrize(&mut gk);
        if !hk.iter().all(|v| v.is_finite()) || hk.amax() > 1e15 {
            return Err(Error::Dare("iterates diverge; pair is not stabilizable".into()));
        }
        if change <= 1e-14 * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Dare("doubling did not converge".into()));
    }
    let p = hk;
    if p.clone().cholesky().is_none() {
        return Err(Error::Dare("solution is not positive definite".into()));
    }
    let res = dare_residual(a, b, q, r, &p);
    if res > 1e-8 * p.amax().max(1.0) {
        return Err(Error::Dare(format!("residual {res:.3e} too large")));
    }
    Ok(p)
}

pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let bpa = b.transpose() * p * a;
    let m = r + b.transpose() * p * b;
    let sol = linalg::spd_solve(&m, &bpa).unwrap_or_else(|| DMatrix::from_element(bpa.nrows(), bpa.ncols(), f64::NAN));
    let lhs = a.transpose() * p * a - bpa.transpose() * sol + q - p;
    lhs.amax()
}

/// `K = −(R + BᵀPB)⁻¹ BᵀPA`.
pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = r + b.transpose() * p * b;
    linalg::spd_solve(&m, &(b.transpose() * p * a))
        .map(|k| -k)
        .ok_or_else(|| Error::Dare("singular gain system".into()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TerminalIngredients {
    pub xi: Vec<f64>,
    pub u_xi: Vec<f64>,
    pub p_ric: Vec<Vec<f64>>,
    pub k_f: Vec<Vec<f64>>,
    pub sigma: f64,
    pub gamma_tilde: f64,
    pub gamma: f64,
    pub alpha: f64,
    #[serde(skip)]
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    xi: DVector<f64>,
    u_xi: DVector<f64>,
    p: DMatrix<f64>,
    p_inv: DMatrix<f64>,
    k: DMatrix<f64>,
}

impl TerminalIngredients {
    pub fn new(xi: DVector<f64>, u_xi: DVector<f64>, p: DMatrix<f64>, k: DMatrix<f64>, sigma: f64, gamma: f64, alpha: f64) -> Result<Self> {
        let mut ti = Self {
            xi: xi.iter().copied().collect(),
            u_xi: u_xi.iter().copied().collect(),
            p_ric: linalg::to_rows(&p),
            k_f: linalg::to_rows(&k),
            sigma,
            gamma_tilde: gamma,
            gamma,
            alpha,
            cache: None,
        };
        ti.refresh()?;
        Ok(ti)
    }

    /// Rebuilds cached matrices after deserialization.
    pub fn refresh(&mut self) -> Result<()> {
        let p = linalg::from_rows(&self.p_ric)?;
        let p_inv = linalg::spd_inverse(&p).ok_or_else(|| Error::Dare("terminal matrix is singular".into()))?;
        self.cache = Some(Cache {
            xi: DVector::from_row_slice(&self.xi),
            u_xi: DVector::from_row_slice(&self.u_xi),
            p,
            p_inv,
            k: linalg::from_rows(&self.k_f)?,
        });
        Ok(())
    }

    fn c(&self) -> &Cache {
        self.cache.as_ref().expect("terminal ingredients not refreshed")
    }

    pub fn xi(&self) -> &DVector<f64> {
        &self.c().xi
    }

    pub fn u_xi(&self) -> &DVector<f64> {
        &self.c().u_xi
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.c().p
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.c().k
    }

    pub fn cost(&self, x: &DVector<f64>) -> f64 {
        let e = x - self.xi();
        self.sigma * e.dot(&(self.p() * &e))
    }

    pub fn control(&self, x: &DVector<f64>) -> DVector<f64> {
        self.u_xi() + self.gain() * (x - self.xi())
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.cost(x) <= self.gamma + tol
    }

    /// Shape matrix `S` of the level set written as `{ξ + e | eᵀ S⁻¹ e ≤ 1}`.
    pub fn ellipsoid_shape(&self) -> DMatrix<f64> {
        if self.sigma <= 0.0 {
            return DMatrix::zeros(self.xi.len(), self.xi.len());
        }
        &self.c().p_inv * (self.gamma / self.sigma)
    }

    /// Largest Euclidean extent of the level set on the given coordinates.
    pub fn extent(&self, coords: &[usize]) -> f64 {
        extent_for(&self.c().p_inv, self.sigma, self.gamma, coords)
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        let mut t = self.clone();
        t.gamma = gamma;
        t
    }

    /// Point of the level set `J_f = level·γ` (or inside it) from a random direction.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R, boundary: bool) -> DVector<f64> {
        sample_ellipsoid(rng, self.p(), self.xi(), self.gamma / self.sigma.max(1e-300), boundary)
    }
}

fn extent_for(p_inv: &DMatrix<f64>, sigma: f64, gamma: f64, coords: &[usize]) -> f64 {
    if sigma <= 0.0 || gamma <= 0.0 {
        return 0.0;
    }
    let e = linalg::selector(coords, p_inv.nrows());
    let sub = &e * p_inv * e.transpose();
    (gamma / sigma * sub.symmetric_eigenvalues().max()).max(0.0).sqrt()
}

fn sample_ellipsoid<R: rand::Rng + ?Sized>(rng: &mut R, p: &DMatrix<f64>, center: &DVector<f64>, level: f64, boundary: bool) -> DVector<f64> {
    let n = center.len();
    let d = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let q = d.dot(&(p * &d));
    if q <= 0.0 || level <= 0.0 {
        return center.clone();
    }
    let mut scale = (level / q).sqrt();
    if !boundary {
        let u: f64 = rng.gen();
        scale *= u.powf(1.0 / n as f64);
    }
    center + d * scale
}

/// Stage cost `‖x−ξ‖²_Q + ‖u−u_ξ‖²_R`.
pub fn stage_cost(q: &DMatrix<f64>, r: &DMatrix<f64>, xi: &DVector<f64>, u_xi: &DVector<f64>, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let e = x - xi;
    let v = u - u_xi;
    e.dot(&(q * &e)) + v.dot(&(r * &v))
}

/// Largest level `eᵀPe ≤ ρ` on which `u_ξ + K e ∈ Û` holds for every row of `Û`.
fn input_level(u_hat: &SetDescriptor, u_xi: &DVector<f64>, k: &DMatrix<f64>, p_inv: &DMatrix<f64>) -> Result<f64> {
    let (a, b) = u_hat
        .halfspaces()
        .ok_or_else(|| Error::Unsupported("input set must be a box or polytope".into()))?;
    let kpk = k * p_inv * k.transpose();
    let mut rho = f64::INFINITY;
    for j in 0..a.nrows() {
        let aj = a.row(j).transpose();
        let slack = b[j] - aj.dot(u_xi);
        if slack <= 0.0 {
            return Err(Error::Init {
                step: 3,
                msg: "steady input lies on or outside the tightened input set".into(),
            });
        }
        let w = aj.dot(&(&kpk * &aj));
        if w > 0.0 {
            rho = rho.min(slack * slack / w);
        }
    }
    Ok(rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalDesignSettings {
    pub samples: usize,
    pub seed: u64,
}

impl Default for TerminalDesignSettings {
    fn default() -> Self {
        Self { samples: 1000, seed: 7 }
    }
}

/// Worst sampled margins of the descent (`J_f(f̂) + l ≤ J_f`) and invariance
/// (`J_f(f̂) ≤ γ`) inequalities on the level set `eᵀPe ≤ level`.
fn descent_margins(
    dyn_: &SubsystemDynamics,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    ti: &TerminalIngredients,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let mut worst_descent = f64::INFINITY;
    let mut worst_invariance = f64::INFINITY;
    for s in 0..2 * samples {
        let x = ti.sample(rng, s < samples);
        let u = ti.control(&x);
        let next = dyn_.nominal_step(&x, &u);
        let jn = ti.cost(&next);
        let jx = ti.cost(&x);
        let l = stage_cost(q, r, ti.xi(), ti.u_xi(), &x, &u);
        worst_descent = worst_descent.min(jx - jn - l);
        worst_invariance = worst_invariance.min(ti.gamma - jn);
    }
    (worst_descent, worst_invariance)
}

/// Linearizes at `(ξ, u_ξ)`, solves the DARE and picks `σ` and the largest
/// verified level `γ̃`. The returned ingredients have `γ = γ̃`.
pub fn design_terminal(
    dyn_: &SubsystemDynamics,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    xi: &DVector<f64>,
    u_hat: &SetDescriptor,
    alpha: f64,
    settings: &TerminalDesignSettings,
) -> Result<TerminalIngredients> {
    let u_xi = dyn_.steady_input(xi)?;
    if !u_hat.contains(u_xi.as_slice(), crate::setgeom::SET_TOL) {
        return Err(Error::Init {
            step: 3,
            msg: "steady input is outside the tightened input set".into(),
        });
    }
    let (_, a, b) = dyn_.nominal_step_jac(xi, &u_xi);
    let p = solve_dare(&a, &b, q, r)?;
    let k = lqr_gain(&a, &b, r, &p)?;
    if linalg::spectral_radius(&(&a + &b * &k)) >= 1.0 {
        return Err(Error::Dare("terminal closed loop is not Schur".into()));
    }
    let p_inv = linalg::spd_inverse(&p).ok_or_else(|| Error::Dare("singular Riccati solution".into()))?;
    let mut level = input_level(u_hat, &u_xi, &k, &p_inv)?;
    if !level.is_finite() {
        level = 1e6;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    for _ in 0..60 {
        for e in 0..=10 {
            let sigma = f64::powi(2.0, e);
            let ti = TerminalIngredients::new(xi.clone(), u_xi.clone(), p.clone(), k.clone(), sigma, sigma * level, alpha)?;
            let (descent, invariance) = descent_margins(dyn_, q, r, &ti, settings.samples, &mut rng);
            if descent >= -1e-9 && invariance >= -1e-9 {
                return Ok(ti);
            }
        }
        level *= 0.5;
    }
    Err(Error::Init {
        step: 3,
        msg: "no terminal level set passes the descent check".into(),
    })
}

/// Data describing one agent for terminal-condition checks.
#[derive(Debug, Clone, Copy)]
pub struct TerminalAgent<'a> {
    pub dyn_: &'a SubsystemDynamics,
    pub q: &'a DMatrix<f64>,
    pub r: &'a DMatrix<f64>,
    pub ti: &'a TerminalIngredients,
    pub u_hat: &'a SetDescriptor,
    pub p: &'a SetDescriptor,
    /// Tightened uncoupled state set, if any.
    pub state_set: Option<&'a SetDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub pass: bool,
    pub worst_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalReport {
    pub agent: usize,
    pub items: Vec<CheckItem>,
}

impl TerminalReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.pass)
    }

    pub fn item(&self, name: &str) -> Option<&CheckItem> {
        self.items.iter().find(|i| i.name == name)
    }
}

fn terminal_uncertainty(agent: &TerminalAgent) -> Uncertainty {
    let n = agent.ti.xi.len();
    Uncertainty::new(n)
        .with_set(agent.p.clone())
        .with_ellipsoid(agent.ti.ellipsoid_shape())
        .with_ball(agent.ti.alpha)
}

/// Exact margin of the level set against `X̂ ⊖ B_α` (nonnegative passes).
fn state_margin(agent: &TerminalAgent) -> f64 {
    let Some(x) = agent.state_set else {
        return f64::INFINITY;
    };
    let Some((a, b)) = x.halfspaces() else {
        return f64::INFINITY;
    };
    let s = agent.ti.ellipsoid_shape();
    let xi = agent.ti.xi();
    let mut worst = f64::INFINITY;
    for j in 0..a.nrows() {
        let aj = a.row(j).transpose();
        let h = aj.dot(xi) + aj.dot(&(&s * &aj)).max(0.0).sqrt() + agent.ti.alpha * aj.norm();
        worst = worst.min(b[j] - h);
    }
    worst
}

/// Surrogate margins of every constraint on the inflated terminal sets.
fn coupled_margins(agents: &[TerminalAgent], graph: &CouplingGraph, only: Option<usize>) -> Result<Vec<(usize, f64)>> {
    let unc: Vec<Uncertainty> = agents.iter().map(terminal_uncertainty).collect();
    let mut out = Vec::new();
    for (ci, c) in graph.constraints.iter().enumerate() {
        if let Some(i) = only {
            if !c.participants.contains(&i) {
                continue;
            }
        }
        let refs: Vec<&Uncertainty> = c.participants.iter().map(|&p| &unc[p]).collect();
        let centers: Vec<&DVector<f64>> = c.participants.iter().map(|&p| agents[p].ti.xi()).collect();
        let vals = coupling::eval_constraint(c, &centers)?;
        let tight = coupling::row_tightening(c, &refs)?;
        let worst = vals
            .iter()
            .zip(&tight)
            .map(|(v, t)| -(v + t))
            .fold(f64::INFINITY, f64::min);
        out.push((ci, worst));
    }
    Ok(out)
}

/// Sampled certification of the terminal conditions for agent `i`.
pub fn verify_terminal_conditions(
    agents: &[TerminalAgent],
    graph: &CouplingGraph,
    i: usize,
    samples: usize,
    seed: u64,
) -> Result<TerminalReport> {
    let agent = &agents[i];
    let ti = agent.ti;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut input = f64::INFINITY;
    let mut invariance = f64::INFINITY;
    let mut descent = f64::INFINITY;
    let mut state_sampled = f64::INFINITY;
    let halfspaces = agent.u_hat.halfspaces();
    let xset = agent.state_set.and_then(|s| s.halfspaces());
    for s in 0..2 * samples {
        let x = ti.sample(&mut rng, s < samples);
        let u = ti.control(&x);
        if let Some((a, b)) = &halfspaces {
            input = input.min((b - a * &u).min());
        }
        let next = agent.dyn_.nominal_step(&x, &u);
        let jn = ti.cost(&next);
        invariance = invariance.min(ti.gamma - jn);
        let l = stage_cost(agent.q, agent.r, ti.xi(), ti.u_xi(), &x, &u);
        descent = descent.min(ti.cost(&x) - jn - l);
        if let Some((a, b)) = &xset {
            let ball: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let bn = ball.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let xb = &x + DVector::from_iterator(x.len(), ball.iter().map(|v| v / bn * ti.alpha));
            state_sampled = state_sampled.min((b - a * xb).min());
        }
    }
    let mut items = vec![
        CheckItem {
            name: "state_margin".into(),
            pass: state_margin(agent) >= -1e-9 && state_sampled >= -1e-9,
            worst_margin: state_margin(agent).min(state_sampled),
        },
        CheckItem {
            name: "input".into(),
            pass: input >= -1e-9,
            worst_margin: input,
        },
        CheckItem {
            name: "invariance".into(),
            pass: invariance >= -1e-9,
            worst_margin: invariance,
        },
        CheckItem {
            name: "descent".into(),
            pass: descent >= -1e-9,
            worst_margin: descent,
        },
    ];

    // Coupled constraints: analytic surrogate plus direct sampling of the
    // inflated sets of every participant.
    let analytic = coupled_margins(agents, graph, Some(i))?;
    let mut sampled = f64::INFINITY;
    for &ci in &graph.constraints_of(i) {
        let c = &graph.constraints[ci];
        for _ in 0..samples {
            let pts: Vec<DVector<f64>> = c
                .participants
                .iter()
                .map(|&p| {
                    let ag = &agents[p];
                    let mut x = ag.ti.sample(&mut rng, false);
                    x += DVector::from_row_slice(&ag.p.sample(&mut rng));
                    let ball = SetDescriptor::ball(vec![0.0; x.len()], ag.ti.alpha).expect("valid ball");
                    x += DVector::from_row_slice(&ball.sample(&mut rng));
                    x
                })
                .collect();
            let refs: Vec<&DVector<f64>> = pts.iter().collect();
            for v in coupling::eval_constraint(c, &refs)? {
                sampled = sampled.min(-v);
            }
        }
    }
    let worst = analytic.iter().map(|(_, m)| *m).fold(f64::INFINITY, f64::min).min(sampled);
    items.insert(
        1,
        CheckItem {
            name: "coupled_margin".into(),
            pass: worst >= -1e-9,
            worst_margin: worst,
        },
    );
    Ok(TerminalReport { agent: i, items })
}

fn analytic_ok(agents: &[TerminalAgent], graph: &CouplingGraph) -> Result<bool> {
    if agents.iter().any(|a| state_margin(a) < 0.0) {
        return Ok(false);
    }
    Ok(coupled_margins(agents, graph, None)?.iter().all(|(_, m)| *m >= 0.0))
}

fn with_gammas<'a>(base: &[TerminalAgent<'a>], tis: &'a [TerminalIngredients]) -> Vec<TerminalAgent<'a>> {
    base.iter()
        .zip(tis)
        .map(|(a, t)| TerminalAgent { ti: t, ..*a })
        .collect()
}

/// Chooses per-agent levels `γ_i ≤ γ̃_i` jointly so that the terminal sets,
/// inflated by the tube and the margin balls, satisfy every constraint.
///
/// A common scale of all `γ̃_i` is found by bisection on the analytic
/// surrogates, then each agent is enlarged in turn until nothing changes,
/// and finally the sampled certification must pass (otherwise all levels are
/// halved and re-checked).
pub fn select_gamma(agents: &[TerminalAgent], graph: &CouplingGraph, samples: usize, seed: u64) -> Result<Vec<f64>> {
    let tilde: Vec<f64> = agents.iter().map(|a| a.ti.gamma_tilde).collect();
    let make = |g: &[f64]| -> Vec<TerminalIngredients> {
        agents.iter().zip(g).map(|(a, &g)| a.ti.with_gamma(g)).collect()
    };
    let zero = make(&vec![0.0; agents.len()]);
    if !analytic_ok(&with_gammas(agents, &zero), graph)? {
        let worst = coupled_margins(&with_gammas(agents, &zero), graph, None)?
            .into_iter()
            .filter(|(_, m)| *m < 0.0)
            .map(|(c, m)| format!("{} (margin {m:.4})", graph.constraints[c].label()))
            .collect::<Vec<_>>();
        return Err(Error::Init {
            step: 3,
            msg: format!(
                "targets violate the constraints even with point terminal sets: {}",
                if worst.is_empty() { "state constraints".to_string() } else { worst.join(", ") }
            ),
        });
    }
    let scaled = |t: f64| -> Vec<f64> { tilde.iter().map(|g| g * t).collect() };
    let mut gam = if analytic_ok(&with_gammas(agents, &make(&tilde)), graph)? {
        tilde.clone()
    } else {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if analytic_ok(&with_gammas(agents, &make(&scaled(mid))), graph)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        scaled(lo)
    };
    for _round in 0..5 {
        let mut changed = false;
        for i in 0..agents.len() {
            let (mut lo, mut hi) = (gam[i], tilde[i]);
            if hi - lo <= 1e-9 * tilde[i] {
                continue;
            }
            let mut trial = gam.clone();
            trial[i] = hi;
            if analytic_ok(&with_gammas(agents, &make(&trial)), graph)? {
                lo = hi;
            } else {
                for _ in 0..40 {
                    let mid = 0.5 * (lo + hi);
                    trial[i] = mid;
                    if analytic_ok(&with_gammas(agents, &make(&trial)), graph)? {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
            }
            if lo > gam[i] * (1.0 + 1e-3) {
                changed = true;
            }
            gam[i] = lo;
        }
        if !changed {
            break;
        }
    }
    for _ in 0..20 {
        let tis = make(&gam);
        let view = with_gammas(agents, &tis);
        let mut ok = true;
        for i in 0..agents.len() {
            if !verify_terminal_conditions(&view, graph, i, samples, seed)?.passed() {
                ok = false;
                break;
            }
        }
        if ok {
            if gam.iter().any(|g| *g <= 0.0) {
                return Err(Error::Init {
                    step: 3,
                    msg: "no positive terminal level satisfies the constraints".into(),
                });
            }
            return Ok(gam);
        }
        for g in &mut gam {
            *g *= 0.5;
        }
    }
    Err(Error::Init {
        step: 3,
        msg: "sampled terminal certification keeps failing".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_dare_golden_ratio() {
        let p = solve_dare(&m1(1.0), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
        assert!((p[(0, 0)] - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_dynamics_give_q() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = solve_dare(&DMatrix::zeros(2, 2), &DMatrix::identity(2, 2), &q, &DMatrix::identity(2, 2)).unwrap();
        assert!((&p - &q).amax() < 1e-12);
    }

    #[test]
    fn unstabilizable_pair_is_rejected() {
        assert!(solve_dare(&m1(2.0), &m1(0.0), &m1(1.0), &m1(1.0)).is_err());
    }
}
