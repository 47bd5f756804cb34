//! Sequential quadratic programming over multiple-shooting transcriptions.

use nalgebra::{DMatrix, DVector};

use super::qp::{self, IpmSettings, Qp, QpStage, QpTerminal, QuadRow};
use crate::error::Result;

/// Inequality rows `g(x, u) ≤ 0` with Jacobians.
#[derive(Debug, Clone)]
pub struct Rows {
    pub value: DVector<f64>,
    pub jx: DMatrix<f64>,
    pub ju: DMatrix<f64>,
}

impl Rows {
    pub fn empty(n: usize, m: usize) -> Self {
        Self {
            value: DVector::zeros(0),
            jx: DMatrix::zeros(0, n),
            ju: DMatrix::zeros(0, m),
        }
    }
}

/// Quadratic cost `½ [x;u]ᵀ H [x;u] + hᵀ [x;u]` split into blocks.
#[derive(Debug, Clone)]
pub struct CostBlock {
    pub hxx: DMatrix<f64>,
    pub hux: DMatrix<f64>,
    pub huu: DMatrix<f64>,
    pub hx: DVector<f64>,
    pub hu: DVector<f64>,
    pub constant: f64,
}

/// A nonlinear optimal control problem in stage form.
pub trait StageProblem {
    fn horizon(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Fixed initial state, or `None` when it is a decision variable.
    fn fixed_initial(&self) -> Option<DVector<f64>>;
    fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn step_jac(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>);
    fn stage_cost(&self, k: usize) -> CostBlock;
    /// Terminal cost `(H, h, constant)`.
    fn terminal_cost(&self) -> (DMatrix<f64>, DVector<f64>, f64);
    fn stage_rows(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Rows;
    /// Terminal rows `g(x_N) ≤ 0` with Jacobian (the input block is ignored).
    fn terminal_rows(&self, x: &DVector<f64>) -> Rows;
    fn terminal_quads(&self) -> Vec<QuadRow>;
}

#[derive(Debug, Clone, Copy)]
pub struct SqpSettings {
    pub max_iter: usize,
    pub step_tol: f64,
    pub ipm: IpmSettings,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            max_iter: 15,
            step_tol: 1e-7,
            ipm: IpmSettings::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SqpResult {
    pub xs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
    pub iterations: usize,
    pub qp_iterations: usize,
    pub converged: bool,
    pub kkt: f64,
}

pub fn objective<P: StageProblem + ?Sized>(p: &P, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
    let n = p.horizon();
    let mut total = 0.0;
    for k in 0..n {
        let c = p.stage_cost(k);
        let (x, u) = (&xs[k], &us[k]);
        total += 0.5 * x.dot(&(&c.hxx * x))
            + u.dot(&(&c.hux * x))
            + 0.5 * u.dot(&(&c.huu * u))
            + c.hx.dot(x)
            + c.hu.dot(u)
            + c.constant;
    }
    let (h, hv, c0) = p.terminal_cost();
    total + 0.5 * xs[n].dot(&(&h * &xs[n])) + hv.dot(&xs[n]) + c0
}

/// ℓ1 infeasibility: dynamics defects plus positive parts of all rows.
pub fn infeasibility<P: StageProblem + ?Sized>(p: &P, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
    let n = p.horizon();
    let mut total = 0.0;
    if let Some(x0) = p.fixed_initial() {
        total += (x0 - &xs[0]).lp_norm(1);
    }
    for k in 0..n {
        total += (p.step(k, &xs[k], &us[k]) - &xs[k + 1]).lp_norm(1);
        total += p.stage_rows(k, &xs[k], &us[k]).value.iter().map(|v| v.max(0.0)).sum::<f64>();
    }
    total += p.terminal_rows(&xs[n]).value.iter().map(|v| v.max(0.0)).sum::<f64>();
    total += p.terminal_quads().iter().map(|q| q.eval(&xs[n]).max(0.0)).sum::<f64>();
    total
}

/// Largest single violation (dynamics, rows, quadratic rows).
pub fn max_violation<P: StageProblem + ?Sized>(p: &P, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
    let n = p.horizon();
    let mut worst: f64 = 0.0;
    if let Some(x0) = p.fixed_initial() {
        worst = worst.max((x0 - &xs[0]).amax());
    }
    for k in 0..n {
        worst = worst.max((p.step(k, &xs[k], &us[k]) - &xs[k + 1]).amax());
        worst = p.stage_rows(k, &xs[k], &us[k]).value.iter().fold(worst, |w, v| w.max(*v));
    }
    worst = p.terminal_rows(&xs[n]).value.iter().fold(worst, |w, v| w.max(*v));
    p.terminal_quads().iter().fold(worst, |w, q| w.max(q.eval(&xs[n])))
}

/// Linearization at `(xs, us)`. With `trial`, the constant terms are taken
/// at the trial point instead (second-order correction).
fn build_qp<P: StageProblem + ?Sized>(
    p: &P,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    trial: Option<(&[DVector<f64>], &[DVector<f64>])>,
) -> Qp {
    let n = p.horizon();
    let mut stages = Vec::with_capacity(n);
    for k in 0..n {
        let (fx, a, b) = p.step_jac(k, &xs[k], &us[k]);
        let rows = p.stage_rows(k, &xs[k], &us[k]);
        let (c, d) = match trial {
            None => (
                fx - &a * &xs[k] - &b * &us[k],
                &rows.jx * &xs[k] + &rows.ju * &us[k] - &rows.value,
            ),
            Some((tx, tu)) => {
                let ft = p.step(k, &tx[k], &tu[k]);
                let gt = p.stage_rows(k, &tx[k], &tu[k]).value;
                (
                    ft - &a * &tx[k] - &b * &tu[k],
                    &rows.jx * &tx[k] + &rows.ju * &tu[k] - gt,
                )
            }
        };
        let cost = p.stage_cost(k);
        stages.push(QpStage {
            a,
            b,
            c,
            hxx: cost.hxx,
            hux: cost.hux,
            huu: cost.huu,
            hx: cost.hx,
            hu: cost.hu,
            cx: rows.jx,
            cu: rows.ju,
            d,
        });
    }
    let (hxx, hx, _) = p.terminal_cost();
    let rows = p.terminal_rows(&xs[n]);
    let d = match trial {
        None => &rows.jx * &xs[n] - &rows.value,
        Some((tx, _)) => &rows.jx * &tx[n] - p.terminal_rows(&tx[n]).value,
    };
    Qp {
        stages,
        terminal: QpTerminal {
            hxx,
            hx,
            cx: rows.jx,
            d,
            quad: p.terminal_quads(),
        },
        x0: p.fixed_initial(),
    }
}

/// Runs SQP from `(xs, us)` with an ℓ1 merit line search.
pub fn solve<P: StageProblem + ?Sized>(
    p: &P,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    settings: &SqpSettings,
) -> Result<SqpResult> {
    let mut xs = xs.to_vec();
    let mut us = us.to_vec();
    let mut penalty: f64 = 1.0;
    let mut iterations = 0;
    let mut qp_iterations = 0;
    let mut converged = false;
    let mut kkt = f64::INFINITY;
    for it in 0..settings.max_iter {
        iterations = it + 1;
        let qp = build_qp(p, &xs, &us, None);
        let sol = qp::solve(&qp, &xs, &us, &settings.ipm)?;
        qp_iterations += sol.iterations;
        kkt = sol.kkt;
        if !sol.converged && sol.kkt > 1e-6 {
            break;
        }
        let dx: Vec<DVector<f64>> = sol.xs.iter().zip(&xs).map(|(a, b)| a - b).collect();
        let du: Vec<DVector<f64>> = sol.us.iter().zip(&us).map(|(a, b)| a - b).collect();
        let step = dx.iter().chain(du.iter()).map(|v| v.amax()).fold(0.0, f64::max);
        let lam_max = sol.lambda.iter().map(|l| l.amax()).fold(0.0, f64::max);
        penalty = penalty.max(2.0 * lam_max + 1.0).max(costate_bound(&qp, &sol));

        let f0 = objective(p, &xs, &us);
        let v0 = infeasibility(p, &xs, &us);
        let merit0 = f0 + penalty * v0;
        let model_dec = objective(p, &sol.xs, &sol.us) - f0;
        // Directional derivative bound of the ℓ1 merit along the QP step.
        let deriv = model_dec.min(0.0) - penalty * v0;
        let merit_at = |tx: &[DVector<f64>], tu: &[DVector<f64>]| objective(p, tx, tu) + penalty * infeasibility(p, tx, tu);
        let sufficient = |merit: f64, alpha: f64| merit <= merit0 + 1e-4 * alpha * deriv + 1e-12 * merit0.abs().max(1.0);
        let mut alpha = 1.0;
        let mut accepted = false;
        if !sufficient(merit_at(&sol.xs, &sol.us), 1.0) {
            // Second-order correction before backtracking.
            let soc = build_qp(p, &xs, &us, Some((&sol.xs, &sol.us)));
            if let Ok(corr) = qp::solve(&soc, &sol.xs, &sol.us, &settings.ipm) {
                qp_iterations += corr.iterations;
                if (corr.converged || corr.kkt <= 1e-6) && sufficient(merit_at(&corr.xs, &corr.us), 1.0) {
                    let step_soc = corr
                        .xs
                        .iter()
                        .zip(&xs)
                        .chain(corr.us.iter().zip(&us))
                        .map(|(a, b)| (a - b).amax())
                        .fold(0.0, f64::max);
                    xs = corr.xs;
                    us = corr.us;
                    if step_soc < settings.step_tol {
                        converged = true;
                        break;
                    }
                    continue;
                }
            }
        }
        for _ in 0..20 {
            let tx: Vec<DVector<f64>> = xs.iter().zip(&dx).map(|(x, d)| x + d * alpha).collect();
            let tu: Vec<DVector<f64>> = us.iter().zip(&du).map(|(u, d)| u + d * alpha).collect();
            if sufficient(merit_at(&tx, &tu), alpha) {
                xs = tx;
                us = tu;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        if step * alpha < settings.step_tol || stalled(p, &xs, &us, f0) {
            converged = true;
            break;
        }
    }
    Ok(SqpResult {
        xs,
        us,
        iterations,
        qp_iterations,
        converged,
        kkt,
    })
}

/// Feasible iterate whose objective no longer moves.
fn stalled<P: StageProblem + ?Sized>(p: &P, xs: &[DVector<f64>], us: &[DVector<f64>], f_prev: f64) -> bool {
    let f = objective(p, xs, us);
    (f - f_prev).abs() <= 1e-9 * f.abs().max(1.0) && max_violation(p, xs, us) <= 1e-9
}

/// Largest dynamics multiplier implied by the QP solution.
fn costate_bound(qp: &Qp, sol: &qp::QpSolution) -> f64 {
    let n = qp.stages.len();
    let t = &qp.terminal;
    let mut nu = &t.hxx * &sol.xs[n] + &t.hx;
    if !t.d.is_empty() {
        nu += t.cx.transpose() * sol.lambda[n].rows(0, t.d.len());
    }
    for (j, q) in t.quad.iter().enumerate() {
        nu += q.grad(&sol.xs[n]) * sol.lambda[n][t.d.len() + j];
    }
    let mut worst = nu.amax();
    for k in (1..n).rev() {
        let st = &qp.stages[k];
        nu = &st.hxx * &sol.xs[k] + st.hux.transpose() * &sol.us[k] + &st.hx + st.cx.transpose() * &sol.lambda[k] + st.a.transpose() * &nu;
        worst = worst.max(nu.amax());
    }
    2.0 * worst + 1.0
}
