//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative diagonal jitter used when a PSD matrix sits on the boundary.
pub const CHOLESKY_JITTER: f64 = 1e-14;

/// Replaces `m` by `(m + mᵀ)/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Lower Cholesky factor, retrying once with a diagonal jitter scaled by the
/// largest diagonal entry.
pub fn cholesky_lower(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c.l());
    }
    let scale = m.diagonal().iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let jitter = CHOLESKY_JITTER * scale.max(f64::MIN_POSITIVE);
    let mut shifted = m.clone();
    for i in 0..m.nrows() {
        shifted[(i, i)] += jitter;
    }
    shifted
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// Strict Cholesky for matrices that must be positive definite.
pub fn cholesky_strict(m: &DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    m.clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

pub fn log_det_cholesky(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn frobenius_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Block-diagonal matrix `diag(a, b)`.
pub fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(a);
    out.view_mut((n, n), (m, m)).copy_from(b);
    out
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// `1 - e^{-x}` without cancellation.
#[inline]
pub fn one_minus_exp_neg(x: f64) -> f64 {
    -(-x).exp_m1()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_boundary_psd() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = cholesky_lower(&m, "rank one").unwrap();
        let back = &l * l.transpose();
        assert!(frobenius_diff(&back, &m) < 1e-6);
    }

    #[test]
    fn indefinite_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(cholesky_lower(&m, "indefinite").is_err());
    }

    #[test]
    fn one_minus_exp_small() {
        assert_eq!(one_minus_exp_neg(0.0), 0.0);
        let x = 1e-13;
        assert!((one_minus_exp_neg(x) - x).abs() < 1e-26);
    }
}
