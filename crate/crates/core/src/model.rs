//! Subsystem dynamics: the omni-directional robot, continuous and discrete
//! LTI models, zero-order-hold RK4 discretization with sensitivities, and
//! disturbance set discretization.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::setgeom::{self, SetDescriptor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelKind {
    /// Three-wheeled omni-directional robot with body radius `l` and wheel radius `r`.
    OmniRobot { l: f64, r: f64 },
    /// Continuous-time `ẋ = A x + B u + w`, discretized with RK4.
    LinearLti { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
    /// Discrete-time `x⁺ = A x + B u + w`.
    DiscreteLti { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
}

/// Rotation about the heading axis.
pub fn rotation(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rotation_derivative(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Wheel geometry matrix of the omni robot.
pub fn omni_b(l: f64) -> Matrix3<f64> {
    let c = (std::f64::consts::PI / 6.0).cos();
    let s = (std::f64::consts::PI / 6.0).sin();
    Matrix3::new(0.0, c, -c, -1.0, s, s, l, l, l)
}

/// `r (Bᵀ)⁻¹`, the map from wheel speeds to body-frame velocity.
pub fn omni_input_map(l: f64, r: f64) -> Result<Matrix3<f64>> {
    if !(l > 0.0) || !(r > 0.0) {
        return Err(Error::Config(format!("omni robot needs l > 0 and r > 0 (l={l}, r={r})")));
    }
    let inv = omni_b(l)
        .transpose()
        .try_inverse()
        .ok_or_else(|| Error::Config("singular wheel matrix".into()))?;
    Ok(inv * r)
}

/// `R(ψ) (Bᵀ)⁻¹ r u + w`.
pub fn omni_robot_field(
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    l: f64,
    r: f64,
) -> Result<DVector<f64>> {
    check_dim("omni state", 3, x.len())?;
    check_dim("omni input", 3, u.len())?;
    check_dim("omni disturbance", 3, w.len())?;
    let g = omni_input_map(l, r)?;
    let f = rotation(x[2]) * g * Vector3::new(u[0], u[1], u[2]) + Vector3::new(w[0], w[1], w[2]);
    Ok(DVector::from_column_slice(f.as_slice()))
}

#[derive(Debug, Clone)]
enum Cache {
    Omni { g: Matrix3<f64> },
    Continuous { a: DMatrix<f64>, b: DMatrix<f64>, ad: DMatrix<f64>, bd: DMatrix<f64> },
    Discrete { a: DMatrix<f64>, b: DMatrix<f64> },
}

/// A subsystem model together with its sampling period and RK4 substep count.
#[derive(Debug, Clone)]
pub struct SubsystemDynamics {
    pub kind: ModelKind,
    pub dt: f64,
    pub substeps: usize,
    n: usize,
    m: usize,
    cache: Cache,
}

impl SubsystemDynamics {
    pub fn new(kind: ModelKind, dt: f64, substeps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config(format!("sampling period must be positive, got {dt}")));
        }
        if substeps == 0 {
            return Err(Error::Config("at least one integration substep is required".into()));
        }
        let (n, m, cache) = match &kind {
            ModelKind::OmniRobot { l, r } => (3, 3, Cache::Omni { g: omni_input_map(*l, *r)? }),
            ModelKind::LinearLti { a, b } | ModelKind::DiscreteLti { a, b } => {
                let a = linalg::from_rows(a)?;
                let b = linalg::from_rows(b)?;
                if a.nrows() != a.ncols() || a.nrows() == 0 {
                    return Err(Error::Config("state matrix must be square".into()));
                }
                check_dim("input matrix rows", a.nrows(), b.nrows())?;
                let (n, m) = (a.nrows(), b.ncols());
                if matches!(kind, ModelKind::DiscreteLti { .. }) {
                    (n, m, Cache::Discrete { a, b })
                } else {
                    let (ad, bd) = rk4_linear_map(&a, &b, dt, substeps);
                    (n, m, Cache::Continuous { a, b, ad, bd })
                }
            }
        };
        Ok(Self { kind, dt, substeps, n, m, cache })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn disturbance_dim(&self) -> usize {
        self.n
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.cache, Cache::Discrete { .. })
    }

    /// Continuous vector field `f(x, u, w)`. Discrete models have none.
    pub fn field(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", self.n, x.len())?;
        check_dim("input", self.m, u.len())?;
        check_dim("disturbance", self.n, w.len())?;
        match &self.cache {
            Cache::Omni { g } => {
                let f = rotation(x[2]) * g * Vector3::new(u[0], u[1], u[2])
                    + Vector3::new(w[0], w[1], w[2]);
                Ok(DVector::from_column_slice(f.as_slice()))
            }
            Cache::Continuous { a, b, .. } => Ok(a * x + b * u + w),
            Cache::Discrete { .. } => Err(Error::Unsupported(
                "discrete-time model has no continuous vector field".into(),
            )),
        }
    }

    /// Nominal discrete map `f̂(x, u)`.
    pub fn nominal_step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match &self.cache {
            Cache::Omni { g } => {
                let gu = g * Vector3::new(u[0], u[1], u[2]);
                let mut s = Vector3::new(x[0], x[1], x[2]);
                let h = self.dt / self.substeps as f64;
                for _ in 0..self.substeps {
                    s = omni_rk4(&s, &gu, h);
                }
                DVector::from_column_slice(s.as_slice())
            }
            Cache::Continuous { ad, bd, .. } => ad * x + bd * u,
            Cache::Discrete { a, b } => a * x + b * u,
        }
    }

    /// `f̂(x, u)` with its Jacobians `(∂f̂/∂x, ∂f̂/∂u)`.
    pub fn nominal_step_jac(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        match &self.cache {
            Cache::Omni { g } => {
                let gu = g * Vector3::new(u[0], u[1], u[2]);
                let h = self.dt / self.substeps as f64;
                let mut s = Vector3::new(x[0], x[1], x[2]);
                let mut sx = Matrix3::identity();
                let mut su = Matrix3::zeros();
                for _ in 0..self.substeps {
                    let (s1, jx, jgu) = omni_rk4_jac(&s, &gu, h);
                    s = s1;
                    sx = jx * sx;
                    su = jx * su + jgu * g;
                }
                (
                    DVector::from_column_slice(s.as_slice()),
                    DMatrix::from_column_slice(3, 3, sx.as_slice()),
                    DMatrix::from_column_slice(3, 3, su.as_slice()),
                )
            }
            Cache::Continuous { ad, bd, .. } => (ad * x + bd * u, ad.clone(), bd.clone()),
            Cache::Discrete { a, b } => (a * x + b * u, a.clone(), b.clone()),
        }
    }

    /// Steady-state input `u_ξ` holding `ξ` at rest under the nominal dynamics.
    pub fn steady_input(&self, xi: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("target state", self.n, xi.len())?;
        let (mat, rhs) = match &self.cache {
            Cache::Omni { .. } => return Ok(DVector::zeros(3)),
            Cache::Continuous { a, b, .. } => (b.clone(), -(a * xi)),
            Cache::Discrete { a, b } => (b.clone(), xi - a * xi),
        };
        let svd = mat.clone().svd(true, true);
        let u = svd
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::Config(format!("steady input: {e}")))?;
        if (&mat * &u - &rhs).amax() > 1e-8 {
            return Err(Error::Config("target is not an equilibrium of the nominal model".into()));
        }
        Ok(u)
    }
}

fn omni_rk4(s: &Vector3<f64>, gu: &Vector3<f64>, h: f64) -> Vector3<f64> {
    let f = |psi: f64| rotation(psi) * gu;
    let k1 = f(s[2]);
    let k2 = f(s[2] + 0.5 * h * k1[2]);
    let k3 = f(s[2] + 0.5 * h * k2[2]);
    let k4 = f(s[2] + h * k3[2]);
    s + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (h / 6.0)
}

/// One RK4 substep with Jacobians w.r.t. the state and the body velocity `gu`.
fn omni_rk4_jac(
    s: &Vector3<f64>,
    gu: &Vector3<f64>,
    h: f64,
) -> (Vector3<f64>, Matrix3<f64>, Matrix3<f64>) {
    // Field k(ψ) = R(ψ) v; ∂k/∂s = [0 0 R'(ψ) v], ∂k/∂v = R(ψ).
    let stage = |psi: f64, dpsi_ds: &nalgebra::RowVector3<f64>, dpsi_dv: &nalgebra::RowVector3<f64>| {
        let r = rotation(psi);
        let dr = rotation_derivative(psi) * gu;
        let k = r * gu;
        let ks = dr * dpsi_ds;
        let kv = r + dr * dpsi_dv;
        (k, ks, kv)
    };
    let e3 = nalgebra::RowVector3::new(0.0, 0.0, 1.0);
    let zero = nalgebra::RowVector3::zeros();
    let (k1, k1s, k1v) = stage(s[2], &e3, &zero);
    let p2 = e3 + 0.5 * h * k1s.row(2);
    let v2 = 0.5 * h * k1v.row(2);
    let (k2, k2s, k2v) = stage(s[2] + 0.5 * h * k1[2], &p2, &v2);
    let p3 = e3 + 0.5 * h * k2s.row(2);
    let v3 = 0.5 * h * k2v.row(2);
    let (k3, k3s, k3v) = stage(s[2] + 0.5 * h * k2[2], &p3, &v3);
    let p4 = e3 + h * k3s.row(2);
    let v4 = h * k3v.row(2);
    let (k4, k4s, k4v) = stage(s[2] + h * k3[2], &p4, &v4);
    let w = h / 6.0;
    let next = s + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * w;
    let jx = Matrix3::identity() + (k1s + 2.0 * k2s + 2.0 * k3s + k4s) * w;
    let jv = (k1v + 2.0 * k2v + 2.0 * k3v + k4v) * w;
    (next, jx, jv)
}

/// Exact substepped RK4 map of a linear field, returned as `(A_d, B_d)`.
fn rk4_linear_map(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64, substeps: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let h = dt / substeps as f64;
    let i = DMatrix::<f64>::identity(n, n);
    let ah = a * h;
    let a2 = &ah * &ah;
    let a3 = &a2 * &ah;
    let a4 = &a3 * &ah;
    let phi = &i + &ah + &a2 / 2.0 + &a3 / 6.0 + &a4 / 24.0;
    let gam = (&i + &ah / 2.0 + &a2 / 6.0 + &a3 / 24.0) * b * h;
    let mut ad = DMatrix::identity(n, n);
    let mut bd = DMatrix::zeros(n, b.ncols());
    for _ in 0..substeps {
        bd = &phi * &bd + &gam;
        ad = &phi * &ad;
    }
    (ad, bd)
}

/// Generic classical RK4 step of `ẋ = f(x)`.
pub fn rk4<F>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (0.5 * h)));
    let k3 = f(&(x + &k2 * (0.5 * h)));
    let k4 = f(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// One classical RK4 step of the continuous model with `u` and `w` held.
pub fn rk4_step(
    dyn_: &SubsystemDynamics,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {dt}")));
    }
    dyn_.field(x, u, w)?;
    let next = rk4(|s| dyn_.field(s, u, w).expect("dimensions checked"), x, dt);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite state after RK4 step".into()));
    }
    Ok(next)
}

/// `(e^{Λ dt}, ∫₀^dt e^{Λτ} dτ)` from the exponential of an augmented matrix.
pub fn exp_and_integral(lambda: &DMatrix<f64>, dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = lambda.nrows();
    check_dim("continuous gain", n, lambda.ncols())?;
    let mut aug = DMatrix::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(&(lambda * dt));
    aug.view_mut((0, n), (n, n)).fill_with_identity();
    aug.view_mut((0, n), (n, n)).scale_mut(dt);
    let e = linalg::expm(&aug)?;
    Ok((
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, n)).into_owned(),
    ))
}

/// `∫₀^dt e^{Λτ} dτ · 𝒲` as a tight outer set.
pub fn discretize_disturbance(lambda: &DMatrix<f64>, w: &SetDescriptor, dt: f64) -> Result<SetDescriptor> {
    let (_, integral) = exp_and_integral(lambda, dt)?;
    setgeom::linear_map(&integral, w)
}

/// Continuous and sampled-data disturbance sets of one subsystem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    pub continuous: SetDescriptor,
    pub discrete: SetDescriptor,
}

impl DisturbanceSpec {
    pub fn new(continuous: SetDescriptor, discrete: SetDescriptor) -> Result<Self> {
        let origin = vec![0.0; continuous.dim()];
        if !continuous.contains(&origin, 1e-12) || !discrete.contains(&origin, 1e-12) {
            return Err(Error::InvalidSet("disturbance sets must contain the origin".into()));
        }
        Ok(Self { continuous, discrete })
    }

    /// Uniform draw from the continuous-time set, held over one step.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_vec(self.continuous.sample(rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    #[test]
    fn b_matrix_is_invertible() {
        let b = omni_b(0.2);
        let prod = b * b.try_inverse().unwrap();
        assert!((prod - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn field_inverts_wheel_map() {
        let r = 0.02;
        let u = omni_b(0.2).transpose() * Vector3::new(1.0, 0.0, 0.0) / r;
        let f = omni_robot_field(&v(&[0.0; 3]), &v(u.as_slice()), &v(&[0.0; 3]), 0.2, r).unwrap();
        assert!((f - v(&[1.0, 0.0, 0.0])).amax() < 1e-12);
        let f = omni_robot_field(&v(&[0.0; 3]), &v(&[0.0; 3]), &v(&[0.1, 0.0, 0.0]), 0.2, r).unwrap();
        assert_eq!(f, v(&[0.1, 0.0, 0.0]));
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let d = SubsystemDynamics::new(ModelKind::OmniRobot { l: 0.2, r: 1.0 }, 1.0 / 3.0, 10).unwrap();
        let x = v(&[0.3, -0.2, 0.9]);
        let u = v(&[1.5, -2.0, 0.7]);
        let (f, a, b) = d.nominal_step_jac(&x, &u);
        assert!((&f - d.nominal_step(&x, &u)).amax() < 1e-14);
        let h = 1e-6;
        for j in 0..3 {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let col = (d.nominal_step(&xp, &u) - d.nominal_step(&xm, &u)) / (2.0 * h);
            assert!((col - a.column(j)).amax() < 1e-7);
            let mut up = u.clone();
            up[j] += h;
            let mut um = u.clone();
            um[j] -= h;
            let col = (d.nominal_step(&x, &up) - d.nominal_step(&x, &um)) / (2.0 * h);
            assert!((col - b.column(j)).amax() < 1e-7);
        }
    }

    #[test]
    fn integral_of_scalar_exponential() {
        let (e, g) = exp_and_integral(&DMatrix::from_element(1, 1, -1.0), 20.0).unwrap();
        assert!((g[(0, 0)] - (1.0 - (-20.0f64).exp())).abs() < 1e-8);
        assert!((e[(0, 0)] - (-20.0f64).exp()).abs() < 1e-12);
    }
}
