//! Small dense linear programming routine for polytope queries.
//!
//! Solves `max cᵀx s.t. A x ≤ b` with `x` free using a two-phase tableau
//! simplex with Bland's rule. Intended for the low-dimensional polytopes in
//! this crate (a few dozen rows at most).

const EPS: f64 = 1e-11;
const MAX_PIVOTS: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    Unbounded,
    Infeasible,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    obj: Vec<f64>,
    basis: Vec<usize>,
    width: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i != r {
                let f = row[c];
                if f != 0.0 {
                    for (v, pv) in row.iter_mut().zip(&pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        let f = self.obj[c];
        if f != 0.0 {
            for (v, pv) in self.obj.iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
        }
        self.basis[r] = c;
    }

    /// Runs simplex iterations over columns `< allowed`. Returns false when unbounded.
    fn run(&mut self, allowed: usize) -> bool {
        let rhs = self.width;
        for _ in 0..MAX_PIVOTS {
            let Some(c) = (0..allowed).find(|&j| self.obj[j] < -EPS) else {
                return true;
            };
            let mut best: Option<(usize, f64)> = None;
            for (i, row) in self.rows.iter().enumerate() {
                if row[c] > EPS {
                    let ratio = row[rhs] / row[c];
                    match best {
                        None => best = Some((i, ratio)),
                        Some((bi, br)) => {
                            if ratio < br - EPS
                                || ((ratio - br).abs() <= EPS && self.basis[i] < self.basis[bi])
                            {
                                best = Some((i, ratio));
                            }
                        }
                    }
                }
            }
            match best {
                None => return false,
                Some((r, _)) => self.pivot(r, c),
            }
        }
        true
    }
}

/// Maximizes `cᵀx` subject to `a x ≤ b` over free `x`.
pub fn maximize(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> LpOutcome {
    let n = c.len();
    let m = a.len();
    // Columns: x+ (n), x- (n), slack (m), artificial (one per negative rhs row).
    let negative: Vec<usize> = (0..m).filter(|&i| b[i] < 0.0).collect();
    let n_art = negative.len();
    let width = 2 * n + m + n_art;
    let mut rows = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    let mut art_idx = 0;
    for i in 0..m {
        let mut row = vec![0.0; width + 1];
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            row[j] = sign * a[i][j];
            row[n + j] = -sign * a[i][j];
        }
        row[2 * n + i] = sign;
        row[width] = sign * b[i];
        if b[i] < 0.0 {
            let col = 2 * n + m + art_idx;
            row[col] = 1.0;
            basis.push(col);
            art_idx += 1;
        } else {
            basis.push(2 * n + i);
        }
        rows.push(row);
    }
    let mut t = Tableau {
        rows,
        obj: vec![0.0; width + 1],
        basis,
        width,
    };

    if n_art > 0 {
        // Phase 1: maximize -sum(artificial).
        for j in 2 * n + m..width {
            t.obj[j] = 1.0;
        }
        for i in 0..m {
            if t.basis[i] >= 2 * n + m {
                let row = t.rows[i].clone();
                for (v, rv) in t.obj.iter_mut().zip(&row) {
                    *v -= rv;
                }
            }
        }
        t.run(width);
        if t.obj[width] < -1e-9 {
            return LpOutcome::Infeasible;
        }
        // Drive remaining artificial variables out of the basis.
        for i in 0..m {
            if t.basis[i] >= 2 * n + m {
                if let Some(c) = (0..2 * n + m).find(|&j| t.rows[i][j].abs() > 1e-9) {
                    t.pivot(i, c);
                }
            }
        }
    }

    // Phase 2 objective over the original columns only.
    let mut cost = vec![0.0; width];
    for j in 0..n {
        cost[j] = c[j];
        cost[n + j] = -c[j];
    }
    t.obj = vec![0.0; width + 1];
    for j in 0..width {
        t.obj[j] = -cost[j];
    }
    for i in 0..m {
        let cb = cost[t.basis[i]];
        if cb != 0.0 {
            let row = t.rows[i].clone();
            for (v, rv) in t.obj.iter_mut().zip(&row) {
                *v += cb * rv;
            }
        }
    }
    if !t.run(2 * n + m) {
        return LpOutcome::Unbounded;
    }
    let mut x = vec![0.0; n];
    for (i, &bv) in t.basis.iter().enumerate() {
        let val = t.rows[i][width];
        if bv < n {
            x[bv] += val;
        } else if bv < 2 * n {
            x[bv - n] -= val;
        }
    }
    let value = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    LpOutcome::Optimal { x, value }
}

/// Returns a feasible point of `a x ≤ b`, or `None` when the system is infeasible.
pub fn feasible_point(a: &[Vec<f64>], b: &[f64], n: usize) -> Option<Vec<f64>> {
    match maximize(&vec![0.0; n], a, b) {
        LpOutcome::Optimal { x, .. } => Some(x),
        LpOutcome::Unbounded => Some(vec![0.0; n]),
        LpOutcome::Infeasible => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_square_support() {
        let a = vec![
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ];
        let b = vec![1.0, 1.0, 1.0, 1.0];
        match maximize(&[1.0, 2.0], &a, &b) {
            LpOutcome::Optimal { value, .. } => assert!((value - 3.0).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn detects_unbounded_and_infeasible() {
        let a = vec![vec![1.0, 0.0]];
        assert_eq!(maximize(&[0.0, 1.0], &a, &[1.0]), LpOutcome::Unbounded);
        let a = vec![vec![1.0], vec![-1.0]];
        assert_eq!(maximize(&[1.0], &a, &[-1.0, -1.0]), LpOutcome::Infeasible);
    }

    #[test]
    fn shifted_region_needs_phase_one() {
        // 2 <= x <= 3, 1 <= y <= 4, maximize x + y.
        let a = vec![
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ];
        let b = vec![3.0, -2.0, 4.0, -1.0];
        match maximize(&[1.0, 1.0], &a, &b) {
            LpOutcome::Optimal { x, value } => {
                assert!((value - 7.0).abs() < 1e-9);
                assert!((x[0] - 3.0).abs() < 1e-9 && (x[1] - 4.0).abs() < 1e-9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
