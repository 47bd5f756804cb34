//! Dense linear algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Builds a matrix from row vectors.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_row_slice(values))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Matrix exponential by scaling and squaring of a Taylor series.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Dimension {
            context: "expm",
            expected: n,
            found: a.ncols(),
        });
    }
    let norm = a.abs().row_sum().max();
    if !norm.is_finite() {
        return Err(Error::Divergence("non-finite matrix in expm".into()));
    }
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        squarings += 1;
    }
    let a_s = a * scale;
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=30 {
        term = &term * &a_s / k as f64;
        result += &term;
        if term.abs().max() < 1e-18 * result.abs().max() {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    if result.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite matrix exponential".into()));
    }
    Ok(result)
}

/// Spectral radius from the (possibly complex) eigenvalues.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Solves `m x = b` for symmetric positive definite `m`, falling back to LU.
pub fn spd_solve(m: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Some(ch.solve(b));
    }
    m.clone().lu().solve(b)
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    spd_solve(m, &DMatrix::identity(n, n))
}

/// Selection matrix picking the given coordinates.
pub fn selector(coords: &[usize], dim: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(coords.len(), dim);
    for (r, &c) in coords.iter().enumerate() {
        e[(r, c)] = 1.0;
    }
    e
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_of_diagonal_matches_scalar_exponential() {
        let a = diag(&[-6.0, -6.0, -5.5]) / 3.0;
        let e = expm(&a).unwrap();
        assert!((e[(0, 0)] - (-2.0f64).exp()).abs() < 1e-14);
        assert!((e[(2, 2)] - (-5.5f64 / 3.0).exp()).abs() < 1e-14);
        assert!(e[(0, 1)].abs() < 1e-16);
    }

    #[test]
    fn expm_of_rotation_generator() {
        let t = 0.7;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -t, t, 0.0]);
        let e = expm(&a).unwrap();
        assert!((e[(0, 0)] - t.cos()).abs() < 1e-14);
        assert!((e[(1, 0)] - t.sin()).abs() < 1e-14);
    }
}
