//! Set operations against an independent planar oracle: polygons are handled
//! as explicit vertex hulls and membership is decided on a grid.

mod common;

use common::planar::*;
use proptest::prelude::*;
use tube_dmpc::setgeom::{minkowski_sum, pontryagin_diff, SetDescriptor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn box_sum_matches_vertex_hull((l1, h1) in arb_box(), (l2, h2) in arb_box()) {
        check_box_sum((l1, h1), (l2, h2))?;
    }

    #[test]
    fn polygon_plus_box_contains_vertex_hull(p in arb_poly(), (l, h) in arb_box()) {
        let a = p.descriptor();
        let b = SetDescriptor::new_box(l.to_vec(), h.to_vec()).unwrap();
        let s = minkowski_sum(&a, &b).unwrap();
        let oracle = sum_oracle(&p.vertices(), &box_vertices(l, h));
        check_against(&s, |x| hull_margin(&oracle, x), s.exact)?;
        // Outer approximations stay tight along the summand's facet normals.
        for (row, rhs) in p.rows.iter().zip(&p.rhs) {
            if (a.support(row) - rhs).abs() > 1e-9 {
                continue;
            }
            prop_assert!((s.support(row) - a.support(row) - b.support(row)).abs() < 1e-7);
        }
    }

    #[test]
    fn polygon_sum_contains_vertex_hull(p in arb_poly(), q in arb_poly()) {
        let s = minkowski_sum(&p.descriptor(), &q.descriptor()).unwrap();
        let oracle = sum_oracle(&p.vertices(), &q.vertices());
        check_against(&s, |x| hull_margin(&oracle, x), s.exact)?;
    }

    #[test]
    fn ball_sum_matches_distance_oracle(c1 in prop::array::uniform2(-1.5..1.5f64), r1 in 0.05..1.5f64,
                                         c2 in prop::array::uniform2(-1.5..1.5f64), r2 in 0.05..1.5f64) {
        let a = SetDescriptor::ball(c1.to_vec(), r1).unwrap();
        let b = SetDescriptor::ball(c2.to_vec(), r2).unwrap();
        let s = minkowski_sum(&a, &b).unwrap();
        prop_assert!(s.exact);
        let c = [c1[0] + c2[0], c1[1] + c2[1]];
        check_against(&s, |x| r1 + r2 - ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt(), true)?;
    }

    #[test]
    fn box_plus_ball_contains_rounded_box((l, h) in arb_box(), r in 0.05..1.0f64) {
        let a = SetDescriptor::new_box(l.to_vec(), h.to_vec()).unwrap();
        let b = SetDescriptor::ball(vec![0.0, 0.0], r).unwrap();
        let s = minkowski_sum(&a, &b).unwrap();
        let dist = |x: P2| {
            let dx = (l[0] - x[0]).max(x[0] - h[0]).max(0.0);
            let dy = (l[1] - x[1]).max(x[1] - h[1]).max(0.0);
            r - (dx * dx + dy * dy).sqrt()
        };
        check_against(&s, dist, s.exact)?;
    }

    #[test]
    fn box_difference_matches_shifted_copies((l1, h1) in arb_box(), (l2, h2) in arb_box()) {
        let a = SetDescriptor::new_box(l1.to_vec(), h1.to_vec()).unwrap();
        let b = SetDescriptor::new_box(l2.to_vec(), h2.to_vec()).unwrap();
        let av = box_vertices(l1, h1);
        let bv = box_vertices(l2, h2);
        match pontryagin_diff(&a, &b).unwrap() {
            Some(d) => check_against(&d, |x| diff_oracle(&av, &bv, x), d.exact)?,
            None => {
                for x in grid() {
                    prop_assert!(diff_oracle(&av, &bv, x) < BAND);
                }
            }
        }
    }

    #[test]
    fn polygon_difference_matches_shifted_copies(p in arb_poly(), (l, h) in arb_box()) {
        check_polygon_difference(&p, (l, h))?;
    }

    #[test]
    fn polygon_minus_ball_keeps_clearance(p in arb_poly(), r in 0.02..0.5f64) {
        let b = SetDescriptor::ball(vec![0.0, 0.0], r).unwrap();
        let av = p.vertices();
        if let Some(d) = pontryagin_diff(&p.descriptor(), &b).unwrap() {
            check_against(&d, |x| hull_margin(&av, x) - r, true)?;
        }
    }

    #[test]
    fn difference_then_sum_stays_inside(p in arb_poly(), (l, h) in arb_box(), seed in any::<u64>()) {
        check_round_trip(&p, (l, h), seed)?;
    }

    #[test]
    fn difference_then_sum_stays_inside_3d(lo in prop::array::uniform3(-2.0..-0.5f64), hi in prop::array::uniform3(0.5..2.0f64),
                                           w in prop::array::uniform3(0.01..0.5f64), seed in any::<u64>()) {
        let a = SetDescriptor::new_box(lo.to_vec(), hi.to_vec()).unwrap();
        let b = SetDescriptor::symmetric_box(&w).unwrap();
        let d = pontryagin_diff(&a, &b).unwrap().expect("margin is smaller than the box");
        let back = minkowski_sum(&d, &b).unwrap();
        for x in boundary_points(&back, seed) {
            prop_assert!(a.contains(&x, 1e-9));
        }
        // For boxes the round trip is exact.
        let (blo, bhi) = back.bounding_box().unwrap();
        for i in 0..3 {
            prop_assert!((blo[i] - lo[i]).abs() < 1e-9 && (bhi[i] - hi[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn support_of_sum_is_additive(p in arb_poly(), (l, h) in arb_box(), ang in 0.0..std::f64::consts::TAU) {
        let a = p.descriptor();
        let b = SetDescriptor::new_box(l.to_vec(), h.to_vec()).unwrap();
        let s = minkowski_sum(&a, &b).unwrap();
        let d = [ang.cos(), ang.sin()];
        let exact = a.support(&d) + b.support(&d);
        // Never below the true support; equal when the result is exact.
        prop_assert!(s.support(&d) >= exact - 1e-7);
        if s.exact {
            prop_assert!((s.support(&d) - exact).abs() < 1e-7);
        }
    }
}
