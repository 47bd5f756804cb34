//! Primal-dual interior-point solver for stage-structured QCQPs.
//!
//! Problem form (absolute variables):
//!
//! ```text
//! min  Σ_k ½ [x;u]ᵀ H_k [x;u] + h_kᵀ [x;u]  +  ½ x_Nᵀ H_N x_N + h_Nᵀ x_N
//! s.t. x_{k+1} = A_k x_k + B_k u_k + c_k
//!      Cx_k x_k + Cu_k u_k ≤ d_k,          Cx_N x_N ≤ d_N
//!      ½ x_Nᵀ M_j x_N + m_jᵀ x_N + e_j ≤ 0   (convex, M_j ⪰ 0)
//! ```
//!
//! Newton systems are solved by a Riccati recursion in O(N); the factor is
//! reused for the Mehrotra predictor and corrector.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpStage {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub hxx: DMatrix<f64>,
    pub hux: DMatrix<f64>,
    pub huu: DMatrix<f64>,
    pub hx: DVector<f64>,
    pub hu: DVector<f64>,
    pub cx: DMatrix<f64>,
    pub cu: DMatrix<f64>,
    pub d: DVector<f64>,
}

/// Convex quadratic row `½ xᵀ M x + mᵀ x + e ≤ 0`.
#[derive(Debug, Clone)]
pub struct QuadRow {
    pub m: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub offset: f64,
}

impl QuadRow {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.m * x)) + self.lin.dot(x) + self.offset
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.m * x + &self.lin
    }
}

#[derive(Debug, Clone)]
pub struct QpTerminal {
    pub hxx: DMatrix<f64>,
    pub hx: DVector<f64>,
    pub cx: DMatrix<f64>,
    pub d: DVector<f64>,
    pub quad: Vec<QuadRow>,
}

#[derive(Debug, Clone)]
pub struct Qp {
    pub stages: Vec<QpStage>,
    pub terminal: QpTerminal,
    /// Fixed initial state, or `None` when `x_0` is a decision variable.
    pub x0: Option<DVector<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct IpmSettings {
    pub max_iter: usize,
    pub tol: f64,
    pub init_mu: f64,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self {
            max_iter: 60,
            tol: 1e-9,
            init_mu: 1e-1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub xs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
    /// Inequality multipliers per stage (terminal last, linear rows then quadratic rows).
    pub lambda: Vec<DVector<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub kkt: f64,
}

impl Qp {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    fn rows(&self, k: usize) -> usize {
        if k < self.stages.len() {
            self.stages[k].d.len()
        } else {
            self.terminal.d.len() + self.terminal.quad.len()
        }
    }

    pub fn objective(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
        let mut total = 0.0;
        for (k, st) in self.stages.iter().enumerate() {
            let (x, u) = (&xs[k], &us[k]);
            total += 0.5 * x.dot(&(&st.hxx * x))
                + u.dot(&(&st.hux * x))
                + 0.5 * u.dot(&(&st.huu * u))
                + st.hx.dot(x)
                + st.hu.dot(u);
        }
        let x = &xs[self.stages.len()];
        total + 0.5 * x.dot(&(&self.terminal.hxx * x)) + self.terminal.hx.dot(x)
    }

    /// Inequality values `g ≤ 0` per stage.
    pub fn constraint_values(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let n = self.stages.len();
        let mut out = Vec::with_capacity(n + 1);
        for (k, st) in self.stages.iter().enumerate() {
            out.push(&st.cx * &xs[k] + &st.cu * &us[k] - &st.d);
        }
        let t = &self.terminal;
        let mut g = DVector::zeros(t.d.len() + t.quad.len());
        if !t.d.is_empty() {
            g.rows_mut(0, t.d.len()).copy_from(&(&t.cx * &xs[n] - &t.d));
        }
        for (j, q) in t.quad.iter().enumerate() {
            g[t.d.len() + j] = q.eval(&xs[n]);
        }
        out.push(g);
        out
    }

    pub fn max_defect(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
        let mut worst: f64 = 0.0;
        if let Some(x0) = &self.x0 {
            worst = worst.max((x0 - &xs[0]).amax());
        }
        for (k, st) in self.stages.iter().enumerate() {
            let e = &st.a * &xs[k] + &st.b * &us[k] + &st.c - &xs[k + 1];
            worst = worst.max(e.amax());
        }
        worst
    }
}

struct Factor {
    p: Vec<DMatrix<f64>>,
    k: Vec<DMatrix<f64>>,
    rbar_chol: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    sbar: Vec<DMatrix<f64>>,
    p0_chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

struct Hess {
    qxx: Vec<DMatrix<f64>>,
    qux: Vec<DMatrix<f64>>,
    quu: Vec<DMatrix<f64>>,
}

fn cholesky_reg(m: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let mut reg = 0.0;
    let scale = m.diagonal().amax().max(1.0);
    for _ in 0..12 {
        let mut mm = m.clone();
        for i in 0..mm.nrows() {
            mm[(i, i)] += reg;
        }
        if let Some(ch) = mm.cholesky() {
            return Ok(ch);
        }
        reg = if reg == 0.0 { 1e-12 * scale } else { reg * 100.0 };
    }
    Err(Error::Solver("Riccati factor is not positive definite".into()))
}

fn factor(qp: &Qp, h: &Hess) -> Result<Factor> {
    let n = qp.stages.len();
    let mut p = vec![DMatrix::zeros(0, 0); n + 1];
    let mut kk = Vec::with_capacity(n);
    let mut chols = Vec::with_capacity(n);
    let mut sbars = Vec::with_capacity(n);
    p[n] = h.qxx[n].clone();
    for k in (0..n).rev() {
        let st = &qp.stages[k];
        let pb = &p[k + 1] * &st.b;
        let pa = &p[k + 1] * &st.a;
        let rbar = &h.quu[k] + st.b.transpose() * &pb;
        let sbar = &h.qux[k] + st.b.transpose() * &pa;
        let qbar = &h.qxx[k] + st.a.transpose() * &pa;
        let ch = cholesky_reg(rbar)?;
        let gain = -ch.solve(&sbar);
        let mut pk = qbar + sbar.transpose() * &gain;
        crate::linalg::symmetrize(&mut pk);
        p[k] = pk;
        kk.push(gain);
        chols.push(ch);
        sbars.push(sbar);
    }
    kk.reverse();
    chols.reverse();
    sbars.reverse();
    let p0_chol = if qp.x0.is_none() { Some(cholesky_reg(p[0].clone())?) } else { None };
    Ok(Factor {
        p,
        k: kk,
        rbar_chol: chols,
        sbar: sbars,
        p0_chol,
    })
}

/// Solves the LQ Newton system for gradients `(gx, gu)` and dynamics defects `e`.
fn solve_lq(
    qp: &Qp,
    f: &Factor,
    gx: &[DVector<f64>],
    gu: &[DVector<f64>],
    e: &[DVector<f64>],
    dx0: Option<&DVector<f64>>,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let n = qp.stages.len();
    let mut small_p = vec![DVector::zeros(0); n + 1];
    let mut small_k = vec![DVector::zeros(0); n];
    small_p[n] = gx[n].clone();
    for k in (0..n).rev() {
        let st = &qp.stages[k];
        let w = &f.p[k + 1] * &e[k] + &small_p[k + 1];
        let rbar = &gu[k] + st.b.transpose() * &w;
        let kv = -f.rbar_chol[k].solve(&rbar);
        small_p[k] = &gx[k] + st.a.transpose() * &w + f.sbar[k].transpose() * &kv;
        small_k[k] = kv;
    }
    let mut dx = Vec::with_capacity(n + 1);
    let mut du = Vec::with_capacity(n);
    let x0 = match (dx0, &f.p0_chol) {
        (Some(d), _) => d.clone(),
        (None, Some(ch)) => -ch.solve(&small_p[0]),
        (None, None) => DVector::zeros(gx[0].len()),
    };
    dx.push(x0);
    for k in 0..n {
        let st = &qp.stages[k];
        let u = &f.k[k] * &dx[k] + &small_k[k];
        let next = &st.a * &dx[k] + &st.b * &u + &e[k];
        du.push(u);
        dx.push(next);
    }
    (dx, du)
}

fn frac_to_boundary(v: &[DVector<f64>], dv: &[DVector<f64>], tau: f64) -> f64 {
    let mut alpha: f64 = 1.0;
    for (a, b) in v.iter().zip(dv) {
        for i in 0..a.len() {
            if b[i] < 0.0 {
                alpha = alpha.min(-tau * a[i] / b[i]);
            }
        }
    }
    alpha
}

fn dot_all(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// Solves the QCQP starting from the primal guess `(xs, us)`.
pub fn solve(qp: &Qp, xs: &[DVector<f64>], us: &[DVector<f64>], settings: &IpmSettings) -> Result<QpSolution> {
    let n = qp.stages.len();
    if xs.len() != n + 1 || us.len() != n {
        return Err(Error::Dimension {
            context: "qp warm start length",
            expected: n + 1,
            found: xs.len(),
        });
    }
    let mut xs: Vec<DVector<f64>> = xs.to_vec();
    let mut us: Vec<DVector<f64>> = us.to_vec();
    if let Some(x0) = &qp.x0 {
        xs[0] = x0.clone();
    }
    let total_rows: usize = (0..=n).map(|k| qp.rows(k)).sum();
    let t = &qp.terminal;
    let nlin_t = t.d.len();

    let g0 = qp.constraint_values(&xs, &us);
    let mut s: Vec<DVector<f64>> = g0.iter().map(|g| g.map(|v| (-v).max(settings.init_mu.sqrt()))).collect();
    let mut lam: Vec<DVector<f64>> = s.iter().map(|sv| sv.map(|v| settings.init_mu / v)).collect();

    let mut iterations = 0;
    let mut converged = false;
    let mut kkt = f64::INFINITY;

    for it in 0..settings.max_iter {
        iterations = it + 1;
        let g = qp.constraint_values(&xs, &us);
        let rp: Vec<DVector<f64>> = g.iter().zip(&s).map(|(g, s)| g + s).collect();
        let mu = if total_rows > 0 { dot_all(&s, &lam) / total_rows as f64 } else { 0.0 };

        // Objective gradients and constraint Jacobian transposes times multipliers.
        let mut fx = Vec::with_capacity(n + 1);
        let mut fu = Vec::with_capacity(n);
        for (k, st) in qp.stages.iter().enumerate() {
            fx.push(&st.hxx * &xs[k] + st.hux.transpose() * &us[k] + &st.hx);
            fu.push(&st.hux * &xs[k] + &st.huu * &us[k] + &st.hu);
        }
        fx.push(&t.hxx * &xs[n] + &t.hx);
        let quad_grads: Vec<DVector<f64>> = t.quad.iter().map(|q| q.grad(&xs[n])).collect();

        let jt = |k: usize, v: &DVector<f64>| -> (DVector<f64>, Option<DVector<f64>>) {
            if k < n {
                let st = &qp.stages[k];
                (st.cx.transpose() * v, Some(st.cu.transpose() * v))
            } else {
                let mut gx = if nlin_t > 0 {
                    t.cx.transpose() * v.rows(0, nlin_t)
                } else {
                    DVector::zeros(xs[n].len())
                };
                for (j, qg) in quad_grads.iter().enumerate() {
                    gx += qg * v[nlin_t + j];
                }
                (gx, None)
            }
        };

        // Dual residual via costates.
        let mut lgx = Vec::with_capacity(n + 1);
        let mut lgu = Vec::with_capacity(n);
        for k in 0..=n {
            let (jx, ju) = jt(k, &lam[k]);
            lgx.push(&fx[k] + jx);
            if let Some(ju) = ju {
                lgu.push(&fu[k] + ju);
            }
        }
        let mut nu = lgx[n].clone();
        let mut dual_res: f64 = 0.0;
        for k in (0..n).rev() {
            let st = &qp.stages[k];
            dual_res = dual_res.max((&lgu[k] + st.b.transpose() * &nu).amax());
            nu = &lgx[k] + st.a.transpose() * &nu;
        }
        if qp.x0.is_none() {
            dual_res = dual_res.max(nu.amax());
        }
        let defect = qp.max_defect(&xs, &us);
        let prim_res = rp.iter().map(|r| r.amax()).fold(0.0, f64::max).max(defect);
        let grad_scale = 1.0 + fx.iter().chain(fu.iter()).map(|v| v.amax()).fold(0.0, f64::max);
        kkt = prim_res.max(dual_res / grad_scale).max(mu);
        if prim_res <= settings.tol && dual_res <= settings.tol * grad_scale && mu <= settings.tol {
            converged = true;
            break;
        }

        // Condensed Hessian.
        let sigma: Vec<DVector<f64>> = lam.iter().zip(&s).map(|(l, s)| l.component_div(s)).collect();
        let mut hess = Hess {
            qxx: Vec::with_capacity(n + 1),
            qux: Vec::with_capacity(n),
            quu: Vec::with_capacity(n),
        };
        for (k, st) in qp.stages.iter().enumerate() {
            let scx = DMatrix::from_fn(st.cx.nrows(), st.cx.ncols(), |i, j| sigma[k][i] * st.cx[(i, j)]);
            let scu = DMatrix::from_fn(st.cu.nrows(), st.cu.ncols(), |i, j| sigma[k][i] * st.cu[(i, j)]);
            hess.qxx.push(&st.hxx + st.cx.transpose() * &scx);
            hess.qux.push(&st.hux + st.cu.transpose() * &scx);
            hess.quu.push(&st.huu + st.cu.transpose() * &scu);
        }
        let mut hn = t.hxx.clone();
        if nlin_t > 0 {
            let scx = DMatrix::from_fn(nlin_t, t.cx.ncols(), |i, j| sigma[n][i] * t.cx[(i, j)]);
            hn += t.cx.transpose() * scx;
        }
        for (j, q) in t.quad.iter().enumerate() {
            let l = lam[n][nlin_t + j];
            let sg = sigma[n][nlin_t + j];
            hn += &q.m * l + &quad_grads[j] * quad_grads[j].transpose() * sg;
        }
        hess.qxx.push(hn);
        let fac = factor(qp, &hess)?;

        let defects: Vec<DVector<f64>> = qp
            .stages
            .iter()
            .enumerate()
            .map(|(k, st)| &st.a * &xs[k] + &st.b * &us[k] + &st.c - &xs[k + 1])
            .collect();
        let dx0 = qp.x0.as_ref().map(|x0| x0 - &xs[0]);

        let direction = |rc: &[DVector<f64>]| -> (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
            let mut gx = Vec::with_capacity(n + 1);
            let mut gu = Vec::with_capacity(n);
            for k in 0..=n {
                let lhat = DVector::from_fn(lam[k].len(), |i, _| {
                    lam[k][i] + (lam[k][i] * rp[k][i] - rc[k][i]) / s[k][i]
                });
                let (jx, ju) = jt(k, &lhat);
                gx.push(&fx[k] + jx);
                if let Some(ju) = ju {
                    gu.push(&fu[k] + ju);
                }
            }
            let (dx, du) = solve_lq(qp, &fac, &gx, &gu, &defects, dx0.as_ref());
            let mut ds = Vec::with_capacity(n + 1);
            let mut dl = Vec::with_capacity(n + 1);
            for k in 0..=n {
                let jdz = if k < n {
                    &qp.stages[k].cx * &dx[k] + &qp.stages[k].cu * &du[k]
                } else {
                    let mut v = DVector::zeros(qp.rows(n));
                    if nlin_t > 0 {
                        v.rows_mut(0, nlin_t).copy_from(&(&t.cx * &dx[n]));
                    }
                    for (j, qg) in quad_grads.iter().enumerate() {
                        v[nlin_t + j] = qg.dot(&dx[n]);
                    }
                    v
                };
                let dsk = -&rp[k] - jdz;
                let dlk = DVector::from_fn(dsk.len(), |i, _| (-rc[k][i] - lam[k][i] * dsk[i]) / s[k][i]);
                ds.push(dsk);
                dl.push(dlk);
            }
            (dx, du, ds, dl)
        };

        // Predictor.
        let rc_aff: Vec<DVector<f64>> = s.iter().zip(&lam).map(|(s, l)| s.component_mul(l)).collect();
        let (dx, du, ds, dl) = direction(&rc_aff);
        let (dx, du, ds, dl) = if total_rows > 0 {
            let ap = frac_to_boundary(&s, &ds, 1.0);
            let ad = frac_to_boundary(&lam, &dl, 1.0);
            let mut mu_aff = 0.0;
            for k in 0..=n {
                for i in 0..s[k].len() {
                    mu_aff += (s[k][i] + ap * ds[k][i]) * (lam[k][i] + ad * dl[k][i]);
                }
            }
            mu_aff /= total_rows as f64;
            let centering = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
            let rc: Vec<DVector<f64>> = (0..=n)
                .map(|k| {
                    DVector::from_fn(s[k].len(), |i, _| {
                        s[k][i] * lam[k][i] + ds[k][i] * dl[k][i] - centering * mu
                    })
                })
                .collect();
            direction(&rc)
        } else {
            (dx, du, ds, dl)
        };

        let tau = (1.0 - mu).clamp(0.9, 0.995);
        let ap = frac_to_boundary(&s, &ds, tau);
        let ad = frac_to_boundary(&lam, &dl, tau);
        for k in 0..=n {
            xs[k] += &dx[k] * ap;
            s[k] += &ds[k] * ap;
            lam[k] += &dl[k] * ad;
        }
        for k in 0..n {
            us[k] += &du[k] * ap;
        }
        if xs.iter().chain(us.iter()).any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Solver("non-finite interior-point iterate".into()));
        }
    }
    Ok(QpSolution {
        xs,
        us,
        lambda: lam,
        iterations,
        converged,
        kkt,
    })
}
