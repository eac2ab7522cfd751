//! Thin helpers over nalgebra's dense Cholesky.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{RankError, Result};

pub type Chol = Cholesky<f64, Dyn>;

/// Factor a symmetric positive definite matrix; `block` names it in the error.
pub fn cholesky(m: DMatrix<f64>, block: &str) -> Result<Chol> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(RankError::NonFinite(format!("{block} matrix")));
    }
    Cholesky::new(m).ok_or_else(|| RankError::Singular { block: block.into() })
}

pub fn log_det(chol: &Chol) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Symmetric inverse from a factorization.
pub fn inverse(chol: &Chol) -> DMatrix<f64> {
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    inv
}

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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_det_and_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let c = cholesky(m.clone(), "test").unwrap();
        assert!((log_det(&c) - 11f64.ln()).abs() < 1e-14);
        let id = &m * inverse(&c);
        assert!((id - DMatrix::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn indefinite_is_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky(m, "eta"), Err(RankError::Singular { .. })));
    }
}
