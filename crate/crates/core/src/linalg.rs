//! Small dense linear-algebra helpers shared by the Gaussian filters and the
//! MAP smoother.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Jitter added to the diagonal when a first Cholesky attempt fails.
pub const CHOLESKY_JITTER: f64 = 1e-9;

/// Most negative eigenvalue tolerated before a covariance is declared broken.
pub const PSD_TOLERANCE: f64 = -1e-8;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(m.clone())
}

/// Cholesky factorization, retried once with `CHOLESKY_JITTER * I` added.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    cholesky(m).or_else(|| {
        let n = m.nrows();
        cholesky(&(m + DMatrix::identity(n, n) * CHOLESKY_JITTER))
    })
}

pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// log N(r; 0, Σ) given the Cholesky factor of Σ.
pub fn gaussian_logpdf(residual: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let d = residual.len() as f64;
    let z = chol.l_dirty().solve_lower_triangular(residual).expect("triangular solve");
    -0.5 * (d * LN_2PI + log_det(chol) + z.norm_squared())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().min()
}

/// Symmetrizes `m` and checks it is positive semidefinite up to `PSD_TOLERANCE`.
pub(crate) fn ensure_psd(m: &mut DMatrix<f64>) -> bool {
    symmetrize(m);
    if m.nrows() == 1 {
        return m[(0, 0)] > PSD_TOLERANCE;
    }
    m.clone().symmetric_eigenvalues().min() > PSD_TOLERANCE
}

pub fn from_rows(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let nr = rows.len();
    if nr == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let nc = rows[0].len();
    if rows.iter().any(|r| r.len() != nc) {
        return None;
    }
    Some(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logpdf_matches_scalar_formula() {
        let s = DMatrix::from_element(1, 1, 2.0);
        let chol = cholesky(&s).unwrap();
        let r = DVector::from_element(1, 0.7);
        let expected = -0.5 * ((2.0 * std::f64::consts::PI * 2.0).ln() + 0.49 / 2.0);
        assert!((gaussian_logpdf(&r, &chol) - expected).abs() < 1e-14);
    }

    #[test]
    fn jitter_rescues_semidefinite_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky_with_jitter(&m).is_some());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky_with_jitter(&bad).is_none());
    }

    #[test]
    fn rows_round_trip() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let m = from_rows(&rows).unwrap();
        assert_eq!(m[(1, 0)], 3.0);
        assert_eq!(to_rows(&m), rows);
        assert!(from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_none());
    }
}
