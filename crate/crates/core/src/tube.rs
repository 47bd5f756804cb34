//! Error dynamics, robust positively invariant sets, the auxiliary control law
//! and its input-usage set, tightened constraint sets, and closed-loop
//! integration of the actual system around its nominal twin.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::model::{self, ModelKind, SubsystemDynamics};
use crate::setgeom::{self, SetDescriptor, Shape, SET_TOL};

const RPI_MAX_TERMS: usize = 500;

/// Auxiliary feedback `K(x, x̂)` keeping the actual state near the nominal one.
#[derive(Debug, Clone)]
pub enum AuxLaw {
    /// `(1/r) Bᵀ R(−ψ) Λ (x − x̂)` for the omni robot. With `compensate`, the
    /// term `(1/r) Bᵀ R(−ψ) (R(ψ̂) − R(ψ)) G û` is added so that the error
    /// obeys `ṗ = Λ p + w` even when the headings differ.
    Omni {
        lambda: Matrix3<f64>,
        bt_over_r: Matrix3<f64>,
        input_map: Matrix3<f64>,
        compensate: bool,
    },
    /// `K (x − x̂)`.
    Linear { k: DMatrix<f64> },
}

impl AuxLaw {
    pub fn omni(lambda: &DMatrix<f64>, l: f64, r: f64, compensate: bool) -> Result<Self> {
        check_dim("aux gain rows", 3, lambda.nrows())?;
        check_dim("aux gain cols", 3, lambda.ncols())?;
        if !(r > 0.0) {
            return Err(Error::Config("wheel radius must be positive".into()));
        }
        Ok(AuxLaw::Omni {
            lambda: Matrix3::from_iterator(lambda.iter().copied()),
            bt_over_r: model::omni_b(l).transpose() / r,
            input_map: model::omni_input_map(l, r)?,
            compensate,
        })
    }

    /// Auxiliary input for actual state `x`, nominal state `xhat` and nominal
    /// input `uhat`.
    pub fn eval(&self, x: &DVector<f64>, xhat: &DVector<f64>, uhat: &DVector<f64>) -> DVector<f64> {
        match self {
            AuxLaw::Omni {
                lambda,
                bt_over_r,
                input_map,
                compensate,
            } => {
                let p = Vector3::new(x[0] - xhat[0], x[1] - xhat[1], x[2] - xhat[2]);
                // Body-frame velocity correction.
                let mut body = model::rotation(-x[2]) * lambda * p;
                if *compensate {
                    let v = input_map * Vector3::new(uhat[0], uhat[1], uhat[2]);
                    body += (model::rotation(xhat[2] - x[2]) - Matrix3::identity()) * v;
                }
                let u = bt_over_r * body;
                DVector::from_column_slice(u.as_slice())
            }
            AuxLaw::Linear { k } => k * (x - xhat),
        }
    }
}

/// How the auxiliary law is configured for a subsystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AuxSpec {
    /// Continuous error gain `Λ` (Hurwitz); omni robots only.
    Omni {
        lambda: Vec<Vec<f64>>,
        /// Cancel the heading mismatch between actual and nominal rotation.
        #[serde(default = "enabled")]
        heading_compensation: bool,
    },
    /// Linear gain `u = K (x − x̂)`; continuous or discrete LTI models.
    Linear { k: Vec<Vec<f64>> },
}

fn enabled() -> bool {
    true
}

/// Tube ingredients of one subsystem.
#[derive(Debug, Clone)]
pub struct TubeIngredients {
    /// Continuous error gain (closed-loop matrix for discrete models).
    pub lambda: DMatrix<f64>,
    /// Discrete error transition matrix.
    pub lambda_d: DMatrix<f64>,
    pub w_d: SetDescriptor,
    pub p: SetDescriptor,
    pub delta_u: SetDescriptor,
    pub u_hat: SetDescriptor,
    pub aux: AuxLaw,
}

#[derive(Debug, Clone, Serialize)]
pub struct TubeDump {
    pub p: SetDescriptor,
    pub delta_u: SetDescriptor,
    pub u_hat: SetDescriptor,
    pub w_d: SetDescriptor,
    pub lambda_d: Vec<Vec<f64>>,
}

impl TubeIngredients {
    pub fn dump(&self) -> TubeDump {
        TubeDump {
            p: self.p.clone(),
            delta_u: self.delta_u.clone(),
            u_hat: self.u_hat.clone(),
            w_d: self.w_d.clone(),
            lambda_d: linalg::to_rows(&self.lambda_d),
        }
    }

    /// Half-widths of the bounding box of `𝒫`.
    pub fn p_half_widths(&self) -> Vec<f64> {
        let (lo, hi) = self.p.bounding_box().expect("tube set is bounded");
        lo.iter().zip(&hi).map(|(l, h)| h.max(-l)).collect()
    }

    /// Largest Euclidean norm of `𝒫` projected onto `coords`.
    pub fn p_radius(&self, coords: &[usize]) -> f64 {
        let proj = self.p.project(coords).expect("valid coordinates");
        setgeom::max_point_distance(&vec![0.0; coords.len()], &proj).expect("bounded tube")
    }
}

fn is_nonneg_diagonal(m: &DMatrix<f64>) -> bool {
    m.nrows() == m.ncols()
        && (0..m.nrows()).all(|i| {
            (0..m.ncols()).all(|j| if i == j { m[(i, j)] >= 0.0 } else { m[(i, j)] == 0.0 })
        })
}

/// Outer approximation of the minimal RPI set of `p⁺ = Λ_d p + w`, `w ∈ W_d`.
///
/// Nonnegative diagonal `Λ_d` with a box `W_d` gives the closed-form limit of
/// the Minkowski series. Otherwise the series is truncated at the first `s`
/// with `Λ_d^s W_d ⊆ a W_d`, `a ≤ eps`, and scaled by `1/(1−a)`.
pub fn compute_rpi(lambda_d: &DMatrix<f64>, w_d: &SetDescriptor, eps: f64) -> Result<SetDescriptor> {
    check_dim("rpi transition", w_d.dim(), lambda_d.nrows())?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Config(format!("rpi eps must lie in (0, 1), got {eps}")));
    }
    let rho = linalg::spectral_radius(lambda_d);
    if rho >= 1.0 - 1e-12 {
        return Err(Error::Rpi(format!("transition matrix is not Schur (radius {rho})")));
    }
    let n = w_d.dim();
    if !w_d.contains(&vec![0.0; n], SET_TOL) {
        return Err(Error::Rpi("disturbance set must contain the origin".into()));
    }
    if w_d.is_origin() {
        return Ok(SetDescriptor::zero(n));
    }
    if let (true, Shape::Box { lower, upper }) = (is_nonneg_diagonal(lambda_d), &w_d.shape) {
        let scale: Vec<f64> = (0..n).map(|i| 1.0 / (1.0 - lambda_d[(i, i)])).collect();
        return Ok(SetDescriptor {
            shape: Shape::Box {
                lower: lower.iter().zip(&scale).map(|(l, s)| l * s).collect(),
                upper: upper.iter().zip(&scale).map(|(u, s)| u * s).collect(),
            },
            exact: w_d.exact,
        });
    }
    let (w_a, w_b) = w_d
        .halfspaces()
        .ok_or_else(|| Error::Unsupported("rpi series needs a polyhedral disturbance".into()))?;
    if w_b.iter().any(|b| *b <= 0.0) {
        return Err(Error::Rpi("disturbance set must contain the origin in its interior".into()));
    }
    let mut power = DMatrix::identity(n, n);
    let mut sum = SetDescriptor::zero(n);
    for _ in 0..RPI_MAX_TERMS {
        sum = setgeom::minkowski_sum(&sum, &setgeom::linear_map(&power, w_d)?)?;
        power = lambda_d * &power;
        // Smallest a with power·W_d ⊆ a·W_d.
        let mut a = 0.0f64;
        for i in 0..w_a.nrows() {
            let dir: Vec<f64> = (power.transpose() * w_a.row(i).transpose()).iter().copied().collect();
            a = a.max(w_d.support(&dir) / w_b[i]);
        }
        if a <= eps {
            let (lo, hi) = sum.bounding_box()?;
            let s = 1.0 / (1.0 - a);
            let lo: Vec<f64> = lo.iter().map(|v| v * s).collect();
            let hi: Vec<f64> = hi.iter().map(|v| v * s).collect();
            return invariant_box(lambda_d, w_d, lo, hi);
        }
    }
    Err(Error::Rpi(format!(
        "series did not contract below eps={eps} within {RPI_MAX_TERMS} terms"
    )))
}

/// Grows the box `[lo, hi]` until `Λ_d·box ⊕ W_d ⊆ box`.
///
/// The box of a truncated series is not invariant in general once `Λ_d`
/// mixes coordinates; an invariant box exists iff `|Λ_d|` is Schur.
fn invariant_box(lambda_d: &DMatrix<f64>, w_d: &SetDescriptor, mut lo: Vec<f64>, mut hi: Vec<f64>) -> Result<SetDescriptor> {
    let abs_radius = linalg::spectral_radius(&lambda_d.abs());
    if abs_radius >= 1.0 - 1e-9 {
        return Err(Error::Rpi(format!(
            "no invariant box: |transition| has spectral radius {abs_radius:.4}"
        )));
    }
    let (wlo, whi) = w_d.bounding_box()?;
    let n = lo.len();
    for _ in 0..100_000 {
        let c = DVector::from_fn(n, |i, _| 0.5 * (lo[i] + hi[i]));
        let h = DVector::from_fn(n, |i, _| 0.5 * (hi[i] - lo[i]));
        let ic = lambda_d * c;
        let ih = lambda_d.abs() * h;
        let mut grown = false;
        for i in 0..n {
            let l = ic[i] - ih[i] + wlo[i];
            let u = ic[i] + ih[i] + whi[i];
            if l < lo[i] - SET_TOL {
                lo[i] = l;
                grown = true;
            }
            if u > hi[i] + SET_TOL {
                hi[i] = u;
                grown = true;
            }
        }
        if !grown {
            return Ok(SetDescriptor {
                shape: Shape::Box { lower: lo, upper: hi },
                exact: false,
            });
        }
    }
    Err(Error::Rpi("invariant box iteration did not settle".into()))
}

/// Outer box of the auxiliary input range `(1/r) Bᵀ Q`, with `Q` the rotation
/// union of `Λ 𝒫` widened by `planar_slack` in both position coordinates.
pub fn compute_delta_u(
    lambda: &DMatrix<f64>,
    p: &SetDescriptor,
    bt_over_r: &DMatrix<f64>,
    planar_slack: f64,
) -> Result<SetDescriptor> {
    check_dim("delta_u gain", p.dim(), lambda.ncols())?;
    let scaled = setgeom::linear_map(lambda, p)?;
    let mut q = setgeom::rotation_union_outer_box(&scaled)?;
    if planar_slack > 0.0 {
        let slack = SetDescriptor::symmetric_box(&[planar_slack, planar_slack, 0.0])?;
        q = setgeom::minkowski_sum(&q, &slack)?;
    }
    setgeom::linear_map(bt_over_r, &q)
}

/// Bound on the position part of the heading compensation term: a heading
/// error of at most `heading_bound` rotates a velocity `G u`, `u ∈ 𝒰`.
pub fn heading_compensation_bound(input_map: &Matrix3<f64>, u_set: &SetDescriptor, heading_bound: f64) -> Result<f64> {
    let (lo, hi) = u_set.bounding_box()?;
    let mut speed: f64 = 0.0;
    for mask in 0..(1 << lo.len()) {
        let u = Vector3::from_fn(|i, _| if mask & (1 << i) != 0 { hi[i] } else { lo[i] });
        let v = input_map * u;
        speed = speed.max(v[0].hypot(v[1]));
    }
    Ok(2.0 * (0.5 * heading_bound.min(std::f64::consts::PI)).sin() * speed)
}

/// `𝒳 ⊖ 𝒫`; `None` when the disturbance swallows the constraint set.
pub fn tighten_state(x: &SetDescriptor, p: &SetDescriptor) -> Result<Option<SetDescriptor>> {
    setgeom::pontryagin_diff(x, p)
}

/// Builds the tube for a subsystem from its aux law and disturbance set.
///
/// `w` is the continuous-time set for continuous models and the per-step set
/// for discrete ones.
pub fn build_tube(
    dyn_: &SubsystemDynamics,
    aux: &AuxSpec,
    w: &SetDescriptor,
    u_set: &SetDescriptor,
    eps: f64,
) -> Result<TubeIngredients> {
    let n = dyn_.state_dim();
    check_dim("disturbance set", n, w.dim())?;
    check_dim("input set", dyn_.input_dim(), u_set.dim())?;
    let (lambda, lambda_d, w_d, aux_law, delta_u_of) = match (&dyn_.kind, aux) {
        (
            ModelKind::OmniRobot { l, r },
            AuxSpec::Omni {
                lambda,
                heading_compensation,
            },
        ) => {
            let lambda = linalg::from_rows(lambda)?;
            let (ad, integral) = model::exp_and_integral(&lambda, dyn_.dt)?;
            let w_d = setgeom::linear_map(&integral, w)?;
            let law = AuxLaw::omni(&lambda, *l, *r, *heading_compensation)?;
            let bt = DMatrix::from_iterator(3, 3, (model::omni_b(*l).transpose() / *r).iter().copied());
            let map = heading_compensation.then(|| model::omni_input_map(*l, *r)).transpose()?;
            (lambda, ad, w_d, law, DeltaUKind::Rotational(bt, map))
        }
        (ModelKind::LinearLti { a, b }, AuxSpec::Linear { k }) => {
            let k = linalg::from_rows(k)?;
            let lambda = linalg::from_rows(a)? + linalg::from_rows(b)? * &k;
            let (ad, integral) = model::exp_and_integral(&lambda, dyn_.dt)?;
            let w_d = setgeom::linear_map(&integral, w)?;
            (lambda, ad, w_d, AuxLaw::Linear { k: k.clone() }, DeltaUKind::Linear(k))
        }
        (ModelKind::DiscreteLti { a, b }, AuxSpec::Linear { k }) => {
            let k = linalg::from_rows(k)?;
            let lambda = linalg::from_rows(a)? + linalg::from_rows(b)? * &k;
            (lambda.clone(), lambda, w.clone(), AuxLaw::Linear { k: k.clone() }, DeltaUKind::Linear(k))
        }
        _ => return Err(Error::Config("auxiliary law does not match the model kind".into())),
    };
    check_dim("aux gain", n, lambda.nrows())?;
    let p = compute_rpi(&lambda_d, &w_d, eps)?;
    let delta_u = match delta_u_of {
        DeltaUKind::Rotational(bt, map) => {
            let slack = match map {
                Some(g) => {
                    let (lo, hi) = p.bounding_box()?;
                    heading_compensation_bound(&g, u_set, 0.5 * (hi[2] - lo[2]))?
                }
                None => 0.0,
            };
            compute_delta_u(&lambda, &p, &bt, slack)?
        }
        DeltaUKind::Linear(k) => setgeom::linear_map(&k, &p)?,
    };
    let u_hat = setgeom::pontryagin_diff(u_set, &delta_u)?.ok_or_else(|| {
        Error::Init {
            step: 2,
            msg: "disturbance too large: tightened input set is empty".into(),
        }
    })?;
    Ok(TubeIngredients {
        lambda,
        lambda_d,
        w_d,
        p,
        delta_u,
        u_hat,
        aux: aux_law,
    })
}

enum DeltaUKind {
    Rotational(DMatrix<f64>, Option<Matrix3<f64>>),
    Linear(DMatrix<f64>),
}

#[derive(Debug, Clone, Serialize)]
pub struct RpiReport {
    pub starts: usize,
    pub steps: usize,
    pub exits: usize,
    pub max_violation: f64,
}

/// Simulates `p⁺ = Λ_d p + w` from random starts in `𝒫` with uniform `w ∈ W_d`
/// and counts exits from `𝒫`.
pub fn check_rpi_montecarlo(
    lambda_d: &DMatrix<f64>,
    p: &SetDescriptor,
    w_d: &SetDescriptor,
    starts: usize,
    steps: usize,
    seed: u64,
) -> RpiReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = p.halfspaces().expect("polyhedral tube");
    let mut exits = 0;
    let mut worst = f64::NEG_INFINITY;
    let per_start = steps.div_ceil(starts.max(1));
    for _ in 0..starts {
        let mut x = DVector::from_vec(p.sample(&mut rng));
        for _ in 0..per_start {
            x = lambda_d * x + DVector::from_vec(w_d.sample(&mut rng));
            let viol = (&a * &x - &b).max();
            worst = worst.max(viol);
            if viol > SET_TOL {
                exits += 1;
            }
        }
    }
    RpiReport {
        starts,
        steps: per_start * starts,
        exits,
        max_violation: worst,
    }
}

/// Result of integrating the actual and nominal system over one sampling period.
#[derive(Debug, Clone)]
pub struct ClosedLoopStep {
    pub x_next: DVector<f64>,
    pub xhat_next: DVector<f64>,
    /// Input applied at the sampling instant, `û + K(x, x̂)`.
    pub u_applied: DVector<f64>,
    /// Largest excursion of any intermediate input outside `𝒰` (≤ 0 inside).
    pub max_input_excess: f64,
}

/// Integrates `(x, x̂)` jointly: the nominal input is held, the auxiliary
/// feedback is re-evaluated at every RK4 stage, and `w` is held over the step.
pub fn integrate_closed_loop(
    dyn_: &SubsystemDynamics,
    aux: &AuxLaw,
    u_set: &SetDescriptor,
    x: &DVector<f64>,
    xhat: &DVector<f64>,
    uhat: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<ClosedLoopStep> {
    let n = dyn_.state_dim();
    check_dim("closed-loop state", n, x.len())?;
    let u_applied = uhat + aux.eval(x, xhat, uhat);
    let (ua, ub) = u_set.halfspaces().expect("polyhedral input set");
    let excess = |u: &DVector<f64>| (&ua * u - &ub).max();
    let mut max_excess = excess(&u_applied);
    if dyn_.is_discrete() {
        let x_next = dyn_.nominal_step(x, &u_applied) + w;
        return Ok(ClosedLoopStep {
            x_next,
            xhat_next: dyn_.nominal_step(xhat, uhat),
            u_applied,
            max_input_excess: max_excess,
        });
    }
    let zero = DVector::zeros(n);
    let h = dyn_.dt / dyn_.substeps as f64;
    let mut xs = x.clone();
    let mut xh = xhat.clone();
    let stage = |xs: &DVector<f64>, xh: &DVector<f64>, max_excess: &mut f64| -> Result<(DVector<f64>, DVector<f64>)> {
        let u = uhat + aux.eval(xs, xh, uhat);
        *max_excess = max_excess.max(excess(&u));
        Ok((dyn_.field(xs, &u, w)?, dyn_.field(xh, uhat, &zero)?))
    };
    for _ in 0..dyn_.substeps {
        let (k1, l1) = stage(&xs, &xh, &mut max_excess)?;
        let (k2, l2) = stage(&(&xs + &k1 * (0.5 * h)), &(&xh + &l1 * (0.5 * h)), &mut max_excess)?;
        let (k3, l3) = stage(&(&xs + &k2 * (0.5 * h)), &(&xh + &l2 * (0.5 * h)), &mut max_excess)?;
        let (k4, l4) = stage(&(&xs + &k3 * h), &(&xh + &l3 * h), &mut max_excess)?;
        xs += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        xh += (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (h / 6.0);
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("actual state became non-finite".into()));
    }
    Ok(ClosedLoopStep {
        x_next: xs,
        // The nominal component must match f̂ exactly.
        xhat_next: dyn_.nominal_step(xhat, uhat),
        u_applied,
        max_input_excess: max_excess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_geometric_series() {
        let lam = DMatrix::from_element(1, 1, 0.5);
        let w = SetDescriptor::symmetric_box(&[0.3]).unwrap();
        let p = compute_rpi(&lam, &w, 0.01).unwrap();
        let (_, hi) = p.bounding_box().unwrap();
        assert!(hi[0] >= 0.6 - 1e-12 && hi[0] <= 0.6 * 1.05);
    }

    #[test]
    fn truncated_series_on_rotation() {
        let t: f64 = 0.6;
        let lam = DMatrix::from_row_slice(2, 2, &[0.5 * t.cos(), -0.5 * t.sin(), 0.5 * t.sin(), 0.5 * t.cos()]);
        let w = SetDescriptor::symmetric_box(&[0.1, 0.2]).unwrap();
        let p = compute_rpi(&lam, &w, 0.01).unwrap();
        let r = check_rpi_montecarlo(&lam, &p, &w, 20, 5000, 1);
        assert_eq!(r.exits, 0);
    }

    #[test]
    fn zero_disturbance_gives_zero_set() {
        let lam = DMatrix::from_element(2, 2, 0.1);
        let p = compute_rpi(&lam, &SetDescriptor::zero(2), 0.01).unwrap();
        assert!(p.is_origin());
    }

    #[test]
    fn non_schur_rejected() {
        let lam = DMatrix::from_element(1, 1, 1.0);
        let w = SetDescriptor::symmetric_box(&[0.1]).unwrap();
        assert!(matches!(compute_rpi(&lam, &w, 0.01), Err(Error::Rpi(_))));
    }

    #[test]
    fn tighten_halfspace() {
        let x = SetDescriptor::hpoly(vec![vec![1.0, 0.0, 0.0]], vec![5.0]).unwrap();
        let p = SetDescriptor::symmetric_box(&[0.1157, 0.1157, 0.1169]).unwrap();
        let t = tighten_state(&x, &p).unwrap().unwrap();
        match t.shape {
            Shape::HPoly { b, .. } => assert!((b[0] - (5.0 - 0.1157)).abs() < 1e-12),
            _ => panic!("expected polytope"),
        }
        let small = SetDescriptor::symmetric_box(&[0.05, 0.05, 0.05]).unwrap();
        assert!(tighten_state(&small, &p).unwrap().is_none());
    }
}
