//! Convex set descriptors (boxes, H-polytopes, Euclidean balls) and the set
//! arithmetic used for tubes and constraint tightening.
//!
//! Every descriptor carries an `exact` flag. Operations that can only return
//! an outer approximation clear it, so callers can tell whether a tightened
//! set came out conservative.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::lp::{self, LpOutcome};

/// Absolute tolerance for membership and emptiness decisions.
pub const SET_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Shape {
    #[serde(rename = "box")]
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// `{x | a x <= b}`, rows of `a` listed individually.
    #[serde(rename = "hpoly")]
    HPoly { a: Vec<Vec<f64>>, b: Vec<f64> },
    #[serde(rename = "ball")]
    Ball { center: Vec<f64>, radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetDescriptor {
    #[serde(flatten)]
    pub shape: Shape,
    #[serde(default = "exact_default")]
    pub exact: bool,
}

fn exact_default() -> bool {
    true
}

impl SetDescriptor {
    pub fn new_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("box bounds", lower.len(), upper.len())?;
        if lower.is_empty() {
            return Err(Error::InvalidSet("zero-dimensional box".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::InvalidSet("box requires finite lower <= upper".into()));
        }
        Ok(Self {
            shape: Shape::Box { lower, upper },
            exact: true,
        })
    }

    /// Origin-centered box with the given half-widths.
    pub fn symmetric_box(half_widths: &[f64]) -> Result<Self> {
        Self::new_box(
            half_widths.iter().map(|h| -h).collect(),
            half_widths.to_vec(),
        )
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            shape: Shape::Box {
                lower: vec![0.0; dim],
                upper: vec![0.0; dim],
            },
            exact: true,
        }
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::InvalidSet("zero-dimensional ball".into()));
        }
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::InvalidSet("ball radius must be finite and nonnegative".into()));
        }
        Ok(Self {
            shape: Shape::Ball { center, radius },
            exact: true,
        })
    }

    /// H-polytope `{x | a x <= b}`. Rejects zero rows and empty sets.
    pub fn hpoly(a: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Self> {
        let set = Self {
            shape: Shape::HPoly { a, b },
            exact: true,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn with_exact(mut self, exact: bool) -> Self {
        self.exact = exact;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.shape {
            Shape::Box { lower, upper } => {
                check_dim("box bounds", lower.len(), upper.len())?;
                if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
                    return Err(Error::InvalidSet("box requires lower <= upper".into()));
                }
            }
            Shape::Ball { radius, center } => {
                if center.is_empty() || !(*radius >= 0.0) {
                    return Err(Error::InvalidSet("ball needs a center and radius >= 0".into()));
                }
            }
            Shape::HPoly { a, b } => {
                check_dim("hpoly rows", a.len(), b.len())?;
                let n = a.first().map_or(0, |r| r.len());
                if n == 0 {
                    return Err(Error::InvalidSet("hpoly without rows".into()));
                }
                for row in a {
                    check_dim("hpoly row", n, row.len())?;
                    if row.iter().all(|v| *v == 0.0) {
                        return Err(Error::InvalidSet("hpoly has a zero row".into()));
                    }
                }
                if lp::feasible_point(a, &relaxed(b), n).is_none() {
                    return Err(Error::InvalidSet("hpoly is empty".into()));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match &self.shape {
            Shape::Box { lower, .. } => lower.len(),
            Shape::Ball { center, .. } => center.len(),
            Shape::HPoly { a, .. } => a.first().map_or(0, |r| r.len()),
        }
    }

    pub fn is_box(&self) -> bool {
        matches!(self.shape, Shape::Box { .. })
    }

    /// True when the set is the single point at the origin.
    pub fn is_origin(&self) -> bool {
        match &self.shape {
            Shape::Box { lower, upper } => lower.iter().chain(upper).all(|v| *v == 0.0),
            Shape::Ball { center, radius } => *radius == 0.0 && center.iter().all(|v| *v == 0.0),
            Shape::HPoly { .. } => false,
        }
    }

    /// Support function `sup_{x in set} dᵀx`; `+inf` for unbounded directions.
    pub fn support(&self, d: &[f64]) -> f64 {
        match &self.shape {
            Shape::Box { lower, upper } => d
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(di, (l, u))| if *di >= 0.0 { di * u } else { di * l })
                .sum(),
            Shape::Ball { center, radius } => {
                let dot: f64 = d.iter().zip(center).map(|(a, b)| a * b).sum();
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                dot + radius * norm
            }
            Shape::HPoly { a, b } => match lp::maximize(d, a, b) {
                LpOutcome::Optimal { value, .. } => value,
                LpOutcome::Unbounded => f64::INFINITY,
                LpOutcome::Infeasible => f64::NEG_INFINITY,
            },
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        match &self.shape {
            Shape::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(xi, (l, u))| *xi >= l - tol && *xi <= u + tol),
            Shape::Ball { center, radius } => {
                let d2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() <= radius + tol
            }
            Shape::HPoly { a, b } => a
                .iter()
                .zip(b)
                .all(|(row, bi)| row.iter().zip(x).map(|(r, v)| r * v).sum::<f64>() <= bi + tol),
        }
    }

    /// Axis-aligned bounding box `(lower, upper)`.
    pub fn bounding_box(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        match &self.shape {
            Shape::Box { lower, upper } => Ok((lower.clone(), upper.clone())),
            Shape::Ball { center, radius } => Ok((
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            )),
            Shape::HPoly { .. } => {
                let n = self.dim();
                let mut lo = vec![0.0; n];
                let mut hi = vec![0.0; n];
                for i in 0..n {
                    let mut e = vec![0.0; n];
                    e[i] = 1.0;
                    hi[i] = self.support(&e);
                    e[i] = -1.0;
                    lo[i] = -self.support(&e);
                    if !hi[i].is_finite() || !lo[i].is_finite() {
                        return Err(Error::Unbounded(format!("coordinate {i} of polytope")));
                    }
                }
                Ok((lo, hi))
            }
        }
    }

    /// Vertices of a box or bounded polytope.
    pub fn vertices(&self) -> Result<Vec<Vec<f64>>> {
        match &self.shape {
            Shape::Box { lower, upper } => {
                let n = lower.len();
                Ok((0..1usize << n)
                    .map(|mask| {
                        (0..n)
                            .map(|i| if mask >> i & 1 == 1 { upper[i] } else { lower[i] })
                            .collect()
                    })
                    .collect())
            }
            Shape::Ball { .. } => Err(Error::Unsupported("vertices of a ball".into())),
            Shape::HPoly { a, b } => {
                self.bounding_box()?;
                Ok(polytope_vertices(a, b))
            }
        }
    }

    /// Linear constraint rows `(A, b)` describing the set, if it is polyhedral.
    pub fn halfspaces(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        match &self.shape {
            Shape::Box { lower, upper } => {
                let n = lower.len();
                let mut a = DMatrix::zeros(2 * n, n);
                let mut b = DVector::zeros(2 * n);
                for i in 0..n {
                    a[(2 * i, i)] = 1.0;
                    b[2 * i] = upper[i];
                    a[(2 * i + 1, i)] = -1.0;
                    b[2 * i + 1] = -lower[i];
                }
                Some((a, b))
            }
            Shape::HPoly { a, b } => {
                let n = self.dim();
                Some((
                    DMatrix::from_fn(a.len(), n, |i, j| a[i][j]),
                    DVector::from_row_slice(b),
                ))
            }
            Shape::Ball { .. } => None,
        }
    }

    /// Projection onto the listed coordinates (exact for boxes and balls).
    pub fn project(&self, coords: &[usize]) -> Result<Self> {
        for &c in coords {
            if c >= self.dim() {
                return Err(Error::Dimension {
                    context: "projection coordinate",
                    expected: self.dim(),
                    found: c,
                });
            }
        }
        match &self.shape {
            Shape::Box { lower, upper } => Ok(Self {
                shape: Shape::Box {
                    lower: coords.iter().map(|&c| lower[c]).collect(),
                    upper: coords.iter().map(|&c| upper[c]).collect(),
                },
                exact: self.exact,
            }),
            Shape::Ball { center, radius } => Ok(Self {
                shape: Shape::Ball {
                    center: coords.iter().map(|&c| center[c]).collect(),
                    radius: *radius,
                },
                exact: self.exact,
            }),
            Shape::HPoly { .. } => {
                let (lo, hi) = self.bounding_box()?;
                Ok(Self {
                    shape: Shape::Box {
                        lower: coords.iter().map(|&c| lo[c]).collect(),
                        upper: coords.iter().map(|&c| hi[c]).collect(),
                    },
                    exact: false,
                })
            }
        }
    }

    /// Uniform sample (rejection sampling for polytopes).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.shape {
            Shape::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| if u > l { rng.gen_range(*l..=*u) } else { *l })
                .collect(),
            Shape::Ball { center, radius } => {
                let n = center.len();
                let dir: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                let scale = radius * rng.gen::<f64>().powf(1.0 / n as f64) / norm;
                center.iter().zip(&dir).map(|(c, d)| c + scale * d).collect()
            }
            Shape::HPoly { .. } => {
                let (lo, hi) = self
                    .bounding_box()
                    .expect("sampling requires a bounded polytope");
                let bbox = SetDescriptor {
                    shape: Shape::Box { lower: lo, upper: hi },
                    exact: true,
                };
                for _ in 0..100_000 {
                    let x = bbox.sample(rng);
                    if self.contains(&x, 0.0) {
                        return x;
                    }
                }
                polytope_center(self).expect("nonempty polytope")
            }
        }
    }
}

fn relaxed(b: &[f64]) -> Vec<f64> {
    b.iter().map(|v| v + SET_TOL).collect()
}

fn polytope_center(set: &SetDescriptor) -> Option<Vec<f64>> {
    match &set.shape {
        Shape::HPoly { a, b } => lp::feasible_point(a, b, set.dim()),
        _ => None,
    }
}

/// Enumerates vertices of a bounded polytope by intersecting row subsets.
fn polytope_vertices(a: &[Vec<f64>], b: &[f64]) -> Vec<Vec<f64>> {
    let m = a.len();
    let n = a.first().map_or(0, |r| r.len());
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    if n == 0 || m < n {
        return out;
    }
    loop {
        let mat = DMatrix::from_fn(n, n, |i, j| a[idx[i]][j]);
        let rhs = DVector::from_fn(n, |i, _| b[idx[i]]);
        if let Some(x) = mat.lu().solve(&rhs) {
            let feasible = a.iter().zip(b).all(|(row, bi)| {
                row.iter().zip(x.iter()).map(|(r, v)| r * v).sum::<f64>() <= bi + 1e-9
            });
            if feasible && x.iter().all(|v| v.is_finite()) {
                let v: Vec<f64> = x.iter().copied().collect();
                if !out
                    .iter()
                    .any(|w| w.iter().zip(&v).all(|(p, q)| (p - q).abs() < 1e-9))
                {
                    out.push(v);
                }
            }
        }
        // Next combination in lexicographic order.
        let mut i = n;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + m - n {
                break;
            }
            if i == 0 && idx[0] == m - n {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..n {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn combine_exact(a: &SetDescriptor, b: &SetDescriptor) -> bool {
    a.exact && b.exact
}

/// Minkowski sum `a ⊕ b`; outer approximation when the exact result leaves the
/// descriptor family (flagged through `exact`).
pub fn minkowski_sum(a: &SetDescriptor, b: &SetDescriptor) -> Result<SetDescriptor> {
    check_dim("minkowski_sum", a.dim(), b.dim())?;
    let base_exact = combine_exact(a, b);
    match (&a.shape, &b.shape) {
        (Shape::Box { lower: l1, upper: u1 }, Shape::Box { lower: l2, upper: u2 }) => Ok(
            SetDescriptor {
                shape: Shape::Box {
                    lower: l1.iter().zip(l2).map(|(x, y)| x + y).collect(),
                    upper: u1.iter().zip(u2).map(|(x, y)| x + y).collect(),
                },
                exact: base_exact,
            },
        ),
        (Shape::Ball { center: c1, radius: r1 }, Shape::Ball { center: c2, radius: r2 }) => Ok(
            SetDescriptor {
                shape: Shape::Ball {
                    center: c1.iter().zip(c2).map(|(x, y)| x + y).collect(),
                    radius: r1 + r2,
                },
                exact: base_exact,
            },
        ),
        (Shape::Box { .. }, Shape::Ball { .. }) | (Shape::Ball { .. }, Shape::Box { .. }) => {
            let (lo_a, hi_a) = a.bounding_box()?;
            let (lo_b, hi_b) = b.bounding_box()?;
            let degenerate = a.is_origin() || b.is_origin();
            Ok(SetDescriptor {
                shape: Shape::Box {
                    lower: lo_a.iter().zip(&lo_b).map(|(x, y)| x + y).collect(),
                    upper: hi_a.iter().zip(&hi_b).map(|(x, y)| x + y).collect(),
                },
                exact: base_exact && degenerate,
            })
        }
        (Shape::HPoly { a: rows, b: rhs }, _) => hpoly_plus(rows, rhs, b, base_exact),
        (_, Shape::HPoly { a: rows, b: rhs }) => hpoly_plus(rows, rhs, a, base_exact),
    }
}

fn hpoly_plus(
    rows: &[Vec<f64>],
    rhs: &[f64],
    other: &SetDescriptor,
    base_exact: bool,
) -> Result<SetDescriptor> {
    let mut a_out = rows.to_vec();
    let mut b_out = Vec::with_capacity(rhs.len());
    for (row, bi) in rows.iter().zip(rhs) {
        let h = other.support(row);
        if !h.is_finite() {
            return Err(Error::Unbounded("minkowski summand".into()));
        }
        b_out.push(bi + h);
    }
    // Axis-aligned polytope plus a box keeps its facet normals exactly.
    let axis_rows = rows
        .iter()
        .all(|r| r.iter().filter(|v| **v != 0.0).count() == 1);
    let mut exact = base_exact && other.is_box() && axis_rows;
    if let Shape::HPoly { a: rows2, b: rhs2 } = &other.shape {
        let this = SetDescriptor {
            shape: Shape::HPoly {
                a: rows.to_vec(),
                b: rhs.to_vec(),
            },
            exact: true,
        };
        for (row, bi) in rows2.iter().zip(rhs2) {
            let h = this.support(row);
            if !h.is_finite() {
                return Err(Error::Unbounded("minkowski summand".into()));
            }
            a_out.push(row.clone());
            b_out.push(bi + h);
        }
        exact = false;
    }
    Ok(SetDescriptor {
        shape: Shape::HPoly { a: a_out, b: b_out },
        exact: exact || other.is_origin() && base_exact,
    })
}

/// Pontryagin difference `a ⊖ b = {x | x + y ∈ a ∀ y ∈ b}`.
///
/// Returns `Ok(None)` when the difference is empty.
pub fn pontryagin_diff(a: &SetDescriptor, b: &SetDescriptor) -> Result<Option<SetDescriptor>> {
    check_dim("pontryagin_diff", a.dim(), b.dim())?;
    let n = a.dim();
    let exact = combine_exact(a, b);
    match &a.shape {
        Shape::Box { lower, upper } => {
            let mut lo = Vec::with_capacity(n);
            let mut hi = Vec::with_capacity(n);
            for i in 0..n {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                let up = b.support(&e);
                e[i] = -1.0;
                let down = b.support(&e);
                if !up.is_finite() || !down.is_finite() {
                    return Ok(None);
                }
                lo.push(lower[i] + down);
                hi.push(upper[i] - up);
            }
            if lo.iter().zip(&hi).any(|(l, h)| *l > h + SET_TOL) {
                return Ok(None);
            }
            // Clamp collapsed coordinates produced within tolerance.
            for i in 0..n {
                if lo[i] > hi[i] {
                    let mid = 0.5 * (lo[i] + hi[i]);
                    lo[i] = mid;
                    hi[i] = mid;
                }
            }
            Ok(Some(SetDescriptor {
                shape: Shape::Box { lower: lo, upper: hi },
                exact,
            }))
        }
        Shape::HPoly { a: rows, b: rhs } => {
            let mut b_out = Vec::with_capacity(rhs.len());
            for (row, bi) in rows.iter().zip(rhs) {
                let h = b.support(row);
                if !h.is_finite() {
                    return Ok(None);
                }
                b_out.push(bi - h);
            }
            if lp::feasible_point(rows, &relaxed(&b_out), n).is_none() {
                return Ok(None);
            }
            Ok(Some(SetDescriptor {
                shape: Shape::HPoly {
                    a: rows.clone(),
                    b: b_out,
                },
                exact,
            }))
        }
        Shape::Ball { .. } => Err(Error::Unsupported(
            "pontryagin difference with a ball minuend".into(),
        )),
    }
}

fn is_monomial(m: &DMatrix<f64>) -> bool {
    let rows_ok = (0..m.nrows()).all(|i| m.row(i).iter().filter(|v| **v != 0.0).count() <= 1);
    let cols_ok = (0..m.ncols()).all(|j| m.column(j).iter().filter(|v| **v != 0.0).count() <= 1);
    rows_ok && cols_ok
}

/// Image of a set under `x ↦ m x` (tight outer box when not representable).
pub fn linear_map(m: &DMatrix<f64>, a: &SetDescriptor) -> Result<SetDescriptor> {
    check_dim("linear_map", a.dim(), m.ncols())?;
    let out = m.nrows();
    match &a.shape {
        Shape::Box { lower, upper } => {
            let c = DVector::from_fn(lower.len(), |i, _| 0.5 * (lower[i] + upper[i]));
            let h = DVector::from_fn(lower.len(), |i, _| 0.5 * (upper[i] - lower[i]));
            let mc = m * c;
            let mh = m.abs() * h;
            Ok(SetDescriptor {
                shape: Shape::Box {
                    lower: (0..out).map(|i| mc[i] - mh[i]).collect(),
                    upper: (0..out).map(|i| mc[i] + mh[i]).collect(),
                },
                exact: a.exact && (is_monomial(m) || a.is_origin()),
            })
        }
        Shape::Ball { center, radius } => {
            let c = m * DVector::from_row_slice(center);
            let square = m.nrows() == m.ncols();
            let scalar = square
                && (0..out).all(|i| {
                    (0..out).all(|j| if i == j { m[(i, j)] == m[(0, 0)] } else { m[(i, j)] == 0.0 })
                });
            if scalar {
                return Ok(SetDescriptor {
                    shape: Shape::Ball {
                        center: c.iter().copied().collect(),
                        radius: radius * m[(0, 0)].abs(),
                    },
                    exact: a.exact,
                });
            }
            Ok(SetDescriptor {
                shape: Shape::Box {
                    lower: (0..out).map(|i| c[i] - radius * m.row(i).norm()).collect(),
                    upper: (0..out).map(|i| c[i] + radius * m.row(i).norm()).collect(),
                },
                exact: a.exact && *radius == 0.0,
            })
        }
        Shape::HPoly { a: rows, b } => {
            if m.nrows() == m.ncols() {
                if let Some(inv) = m.clone().try_inverse() {
                    let amat = DMatrix::from_fn(rows.len(), m.ncols(), |i, j| rows[i][j]);
                    let mapped = amat * inv;
                    return Ok(SetDescriptor {
                        shape: Shape::HPoly {
                            a: crate::linalg::to_rows(&mapped),
                            b: b.clone(),
                        },
                        exact: a.exact,
                    });
                }
            }
            let verts = a.vertices()?;
            let mut lo = vec![f64::INFINITY; out];
            let mut hi = vec![f64::NEG_INFINITY; out];
            for v in verts {
                let y = m * DVector::from_vec(v);
                for i in 0..out {
                    lo[i] = lo[i].min(y[i]);
                    hi[i] = hi[i].max(y[i]);
                }
            }
            Ok(SetDescriptor {
                shape: Shape::Box { lower: lo, upper: hi },
                exact: false,
            })
        }
    }
}

/// Box containing `⋃_ψ R(−ψ)·a` where `R` rotates the first two coordinates.
pub fn rotation_union_outer_box(a: &SetDescriptor) -> Result<SetDescriptor> {
    if a.dim() != 3 {
        return Err(Error::Unsupported(format!(
            "rotation union needs dimension 3, got {}",
            a.dim()
        )));
    }
    let (planar, lo3, hi3) = match &a.shape {
        Shape::Ball { center, radius } => (
            (center[0].powi(2) + center[1].powi(2)).sqrt() + radius,
            center[2] - radius,
            center[2] + radius,
        ),
        _ => {
            let verts = a.vertices()?;
            let planar = verts
                .iter()
                .map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt())
                .fold(0.0, f64::max);
            let lo3 = verts.iter().map(|v| v[2]).fold(f64::INFINITY, f64::min);
            let hi3 = verts.iter().map(|v| v[2]).fold(f64::NEG_INFINITY, f64::max);
            (planar, lo3, hi3)
        }
    };
    Ok(SetDescriptor {
        shape: Shape::Box {
            lower: vec![-planar, -planar, lo3],
            upper: vec![planar, planar, hi3],
        },
        exact: a.exact && planar == 0.0,
    })
}

pub fn contains(a: &SetDescriptor, x: &[f64], tol: f64) -> bool {
    a.contains(x, tol)
}

/// `sup_{z ∈ a} ‖x − z‖`.
pub fn max_point_distance(x: &[f64], a: &SetDescriptor) -> Result<f64> {
    check_dim("max_point_distance", a.dim(), x.len())?;
    match &a.shape {
        Shape::Box { lower, upper } => Ok(x
            .iter()
            .zip(lower.iter().zip(upper))
            .map(|(xi, (l, u))| (xi - l).powi(2).max((xi - u).powi(2)))
            .sum::<f64>()
            .sqrt()),
        Shape::Ball { center, radius } => Ok(x
            .iter()
            .zip(center)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            .sqrt()
            + radius),
        Shape::HPoly { .. } => {
            let verts = a.vertices()?;
            Ok(verts
                .iter()
                .map(|v| {
                    v.iter()
                        .zip(x)
                        .map(|(p, q)| (p - q).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0, f64::max))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sym(h: &[f64]) -> SetDescriptor {
        SetDescriptor::symmetric_box(h).unwrap()
    }

    #[test]
    fn box_sum_and_identity() {
        let s = minkowski_sum(&sym(&[1.0, 1.0]), &sym(&[0.5, 0.5])).unwrap();
        assert_eq!(s, sym(&[1.5, 1.5]));
        let unit = sym(&[1.0, 1.0]);
        assert_eq!(minkowski_sum(&unit, &SetDescriptor::zero(2)).unwrap(), unit);
    }

    #[test]
    fn box_difference_with_box_and_ball() {
        let d = pontryagin_diff(&sym(&[1.0, 1.0]), &sym(&[0.5, 0.5])).unwrap().unwrap();
        assert_eq!(d, sym(&[0.5, 0.5]));
        let ball = SetDescriptor::ball(vec![0.0, 0.0], 0.5).unwrap();
        let d = pontryagin_diff(&sym(&[1.0, 1.0]), &ball).unwrap().unwrap();
        assert_eq!(d, sym(&[0.5, 0.5]));
        assert!(pontryagin_diff(&sym(&[0.1]), &sym(&[0.2])).unwrap().is_none());
    }

    #[test]
    fn linear_maps() {
        let m = crate::linalg::diag(&[2.0, 2.0]);
        let out = linear_map(&m, &sym(&[1.0, 1.0])).unwrap();
        assert_eq!(out, sym(&[2.0, 2.0]));
        assert!(out.exact);
        let s = std::f64::consts::FRAC_PI_4;
        let rot = DMatrix::from_row_slice(2, 2, &[s.cos(), -s.sin(), s.sin(), s.cos()]);
        let out = linear_map(&rot, &sym(&[1.0, 1.0])).unwrap();
        let (lo, hi) = out.bounding_box().unwrap();
        let r2 = 2f64.sqrt();
        for i in 0..2 {
            assert!((hi[i] - r2).abs() < 1e-12 && (lo[i] + r2).abs() < 1e-12);
        }
        assert!(!out.exact);
    }

    #[test]
    fn rotation_union_examples() {
        let out = rotation_union_outer_box(&sym(&[0.1, 0.1, 0.2])).unwrap();
        let (_, hi) = out.bounding_box().unwrap();
        assert!((hi[0] - 0.1 * 2f64.sqrt()).abs() < 1e-15);
        assert!((hi[2] - 0.2).abs() < 1e-15);
        let ball = SetDescriptor::ball(vec![0.0; 3], 0.3).unwrap();
        let (_, hi) = rotation_union_outer_box(&ball).unwrap().bounding_box().unwrap();
        assert!((hi[0] - 0.3).abs() < 1e-15);
        let z = rotation_union_outer_box(&SetDescriptor::zero(3)).unwrap();
        assert!(z.is_origin());
    }

    #[test]
    fn distances() {
        let d = max_point_distance(&[1.0, 0.0], &sym(&[1.0, 1.0])).unwrap();
        assert!((d - 5f64.sqrt()).abs() < 1e-15);
        let d = max_point_distance(&[0.0; 3], &sym(&[0.5; 3])).unwrap();
        assert!((d - 0.5 * 3f64.sqrt()).abs() < 1e-15);
        let ball = SetDescriptor::ball(vec![0.0, 0.0], 0.7).unwrap();
        assert!((max_point_distance(&[0.0, 0.0], &ball).unwrap() - 0.7).abs() < 1e-15);
        let halfplane = SetDescriptor::hpoly(vec![vec![1.0, 0.0]], vec![1.0]).unwrap();
        assert!(matches!(
            max_point_distance(&[0.0, 0.0], &halfplane),
            Err(Error::Unbounded(_))
        ));
    }

    #[test]
    fn hpoly_validation() {
        assert!(SetDescriptor::hpoly(vec![vec![0.0, 0.0]], vec![1.0]).is_err());
        assert!(SetDescriptor::hpoly(vec![vec![1.0], vec![-1.0]], vec![-1.0, -1.0]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = sym(&[0.1, 0.2]);
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"type\":\"box\""));
        let back: SetDescriptor = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let ball: SetDescriptor =
            serde_json::from_str(r#"{"type":"ball","center":[0,0],"radius":1.5}"#).unwrap();
        assert!(ball.exact);
        assert_eq!(ball.dim(), 2);
    }

    #[test]
    fn ball_samples_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ball = SetDescriptor::ball(vec![1.0, -1.0, 0.5], 0.4).unwrap();
        for _ in 0..500 {
            assert!(ball.contains(&ball.sample(&mut rng), 1e-12));
        }
    }
}
