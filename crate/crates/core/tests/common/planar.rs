//! Planar oracle: polygons as explicit vertex hulls, membership decided on a grid.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tube_dmpc::setgeom::{minkowski_sum, pontryagin_diff, SetDescriptor, Shape};

pub const TOL: f64 = 1e-9;
/// Grid points this close to an oracle boundary are skipped.
pub const BAND: f64 = 1e-6;
pub const GRID: usize = 61;
pub const EXTENT: f64 = 5.0;

pub type P2 = [f64; 2];

pub fn cross(o: P2, a: P2, b: P2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise hull (monotone chain).
pub fn hull(mut pts: Vec<P2>) -> Vec<P2> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<P2> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<P2> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Smallest signed distance to the hull's edge lines (positive inside).
pub fn hull_margin(h: &[P2], x: P2) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..h.len() {
        let (a, b) = (h[i], h[(i + 1) % h.len()]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        m = m.min(cross(a, b, x) / len);
    }
    m
}

/// A polygon given both as half-planes and as its vertex list.
#[derive(Debug, Clone)]
pub struct Poly {
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

impl Poly {
    pub fn vertices(&self) -> Vec<P2> {
        let mut out = Vec::new();
        for i in 0..self.rows.len() {
            for j in i + 1..self.rows.len() {
                let (a, b) = (&self.rows[i], &self.rows[j]);
                let det = a[0] * b[1] - a[1] * b[0];
                if det.abs() < 1e-12 {
                    continue;
                }
                let x = [(self.rhs[i] * b[1] - a[1] * self.rhs[j]) / det, (a[0] * self.rhs[j] - self.rhs[i] * b[0]) / det];
                let inside = self
                    .rows
                    .iter()
                    .zip(&self.rhs)
                    .all(|(r, bi)| r[0] * x[0] + r[1] * x[1] <= bi + 1e-9);
                if inside {
                    out.push(x);
                }
            }
        }
        hull(out)
    }

    pub fn descriptor(&self) -> SetDescriptor {
        SetDescriptor::hpoly(self.rows.clone(), self.rhs.clone()).unwrap()
    }
}

pub fn box_vertices(lo: P2, hi: P2) -> Vec<P2> {
    vec![[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]]
}

pub fn grid() -> impl Iterator<Item = P2> {
    (0..GRID).flat_map(|i| {
        (0..GRID).map(move |j| {
            let s = |t: usize| -EXTENT + 2.0 * EXTENT * t as f64 / (GRID - 1) as f64;
            [s(i), s(j)]
        })
    })
}

/// Compares `set` with an oracle margin on the grid. With `exact` the two must
/// agree; otherwise `set` only has to contain the oracle set.
pub fn check_against(set: &SetDescriptor, oracle: impl Fn(P2) -> f64, exact: bool) -> Result<(), TestCaseError> {
    for x in grid() {
        let m = oracle(x);
        if m.abs() < BAND {
            continue;
        }
        let got = set.contains(&x, TOL);
        if m > 0.0 {
            prop_assert!(got, "oracle point {:?} (margin {m:.3e}) missing from {:?}", x, set.shape);
        } else if exact {
            prop_assert!(!got, "point {:?} (margin {m:.3e}) wrongly in {:?}", x, set.shape);
        }
    }
    Ok(())
}

pub fn arb_box() -> impl Strategy<Value = (P2, P2)> {
    (-1.5..1.5f64, -1.5..1.5f64, 0.05..1.2f64, 0.05..1.2f64)
        .prop_map(|(cx, cy, hx, hy)| ([cx - hx, cy - hy], [cx + hx, cy + hy]))
}

/// Bounded polygon whose facet normals are spread around the circle.
pub fn arb_poly() -> impl Strategy<Value = Poly> {
    (3usize..8, 0.0..std::f64::consts::TAU, -1.0..1.0f64, -1.0..1.0f64)
        .prop_flat_map(|(k, base, cx, cy)| {
            (
                Just((k, base, cx, cy)),
                prop::collection::vec(-0.2..0.2f64, k),
                prop::collection::vec(0.3..1.5f64, k),
            )
        })
        .prop_map(|((k, base, cx, cy), jitter, offsets)| {
            let step = std::f64::consts::TAU / k as f64;
            let mut rows = Vec::new();
            let mut rhs = Vec::new();
            for j in 0..k {
                let ang = base + step * (j as f64 + jitter[j]);
                let a = vec![ang.cos(), ang.sin()];
                rhs.push(offsets[j] + a[0] * cx + a[1] * cy);
                rows.push(a);
            }
            Poly { rows, rhs }
        })
}

pub fn sum_oracle(a: &[P2], b: &[P2]) -> Vec<P2> {
    let mut pts = Vec::new();
    for p in a {
        for q in b {
            pts.push([p[0] + q[0], p[1] + q[1]]);
        }
    }
    hull(pts)
}

/// Margin of `x` in `a ⊖ b` for polygonal `b`: worst margin of the shifted copies.
pub fn diff_oracle(a: &[P2], b: &[P2], x: P2) -> f64 {
    b.iter()
        .map(|v| hull_margin(a, [x[0] + v[0], x[1] + v[1]]))
        .fold(f64::INFINITY, f64::min)
}

pub fn boundary_points(set: &SetDescriptor, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts: Vec<Vec<f64>> = (0..200).map(|_| set.sample(&mut rng)).collect();
    if !matches!(set.shape, Shape::Ball { .. }) {
        pts.extend(set.vertices().unwrap());
    }
    pts
}


pub fn check_box_sum((l1, h1): (P2, P2), (l2, h2): (P2, P2)) -> Result<(), TestCaseError> {
    let a = SetDescriptor::new_box(l1.to_vec(), h1.to_vec()).unwrap();
    let b = SetDescriptor::new_box(l2.to_vec(), h2.to_vec()).unwrap();
    let s = minkowski_sum(&a, &b).unwrap();
    prop_assert!(s.exact);
    let h = sum_oracle(&box_vertices(l1, h1), &box_vertices(l2, h2));
    check_against(&s, |x| hull_margin(&h, x), true)
}

/// Polygon minus a box, with the box shrunk so the difference is usually nonempty.
pub fn check_polygon_difference(p: &Poly, (l, h): (P2, P2)) -> Result<(), TestCaseError> {
    let l = [l[0] * 0.3, l[1] * 0.3];
    let h = [h[0] * 0.3, h[1] * 0.3];
    let b = SetDescriptor::new_box(l.to_vec(), h.to_vec()).unwrap();
    let av = p.vertices();
    let bv = box_vertices(l, h);
    match pontryagin_diff(&p.descriptor(), &b).unwrap() {
        Some(d) => check_against(&d, |x| diff_oracle(&av, &bv, x), true)?,
        None => {
            for x in grid() {
                prop_assert!(diff_oracle(&av, &bv, x) < BAND);
            }
        }
    }
    Ok(())
}

/// `(A ⊖ B) ⊕ B ⊆ A`, checked on samples and vertices of the round trip.
pub fn check_round_trip(p: &Poly, (l, h): (P2, P2), seed: u64) -> Result<(), TestCaseError> {
    let a = p.descriptor();
    let l = [l[0] * 0.3, l[1] * 0.3];
    let h = [h[0] * 0.3, h[1] * 0.3];
    let b = SetDescriptor::new_box(l.to_vec(), h.to_vec()).unwrap();
    if let Some(d) = pontryagin_diff(&a, &b).unwrap() {
        let back = minkowski_sum(&d, &b).unwrap();
        for x in boundary_points(&back, seed) {
            prop_assert!(a.contains(&x, 1e-7), "{x:?} escaped");
        }
    }
    Ok(())
}
