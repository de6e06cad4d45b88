//! Dense decompositions: pseudoinverse, eigenvalues, least squares.
//!
//! SVD and the real Schur form come from `nalgebra`; everything here is a
//! thin wrapper that fixes tolerances and conventions.

use nalgebra::DMatrix;
/// Complex scalar used for eigenvalues.
pub type Complex64 = nalgebra::Complex<f64>;

use super::Matrix;
use crate::error::{Error, Result};

/// Default relative rank tolerance for [`pinv`].
pub const PINV_RTOL: f64 = 1e-10;

/// Moore-Penrose pseudoinverse via SVD.
///
/// Singular values below `rtol * sigma_max` are treated as zero.
pub fn pinv(m: &Matrix, rtol: f64) -> Matrix {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Matrix::zeros(cols, rows);
    }
    let svd = m.to_nalgebra().svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = rtol * sigma_max;
    let mut out = DMatrix::<f64>::zeros(cols, rows);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        // out += v_k * inv * u_k^T
        for i in 0..cols {
            let vik = v_t[(k, i)] * inv;
            if vik == 0.0 {
                continue;
            }
            for j in 0..rows {
                out[(i, j)] += vik * u[(j, k)];
            }
        }
    }
    Matrix::from_nalgebra(&out)
}

/// All eigenvalues (with multiplicity) of a square matrix.
pub fn eigvals(m: &Matrix) -> Result<Vec<Complex64>> {
    if m.rows() != m.cols() {
        return Err(Error::shape(format!("eigvals of non-square {}x{}", m.rows(), m.cols())));
    }
    if m.rows() == 0 {
        return Ok(Vec::new());
    }
    if !m.is_finite() {
        return Err(Error::Domain("eigvals of non-finite matrix".into()));
    }
    let ev = m.to_nalgebra().complex_eigenvalues();
    let mut out: Vec<Complex64> = ev.iter().map(|c| Complex64::new(c.re, c.im)).collect();
    out.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(out)
}

pub fn spectral_radius(eigs: &[Complex64]) -> f64 {
    eigs.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Minimum-norm least-squares solution `X` of `A X ≈ B`, plus the Frobenius
/// norm of the residual `A X - B`.
pub fn lstsq(a: &Matrix, b: &Matrix) -> Result<(Matrix, f64)> {
    if a.rows() != b.rows() {
        return Err(Error::shape(format!(
            "lstsq: {} equations vs {} targets",
            a.rows(),
            b.rows()
        )));
    }
    let x = pinv(a, PINV_RTOL).matmul(b);
    let resid = a.matmul(&x).zip_map(b, |p, t| p - t).frobenius_norm();
    Ok((x, resid))
}

/// Number of singular values above `rtol * sigma_max`.
pub fn rank(m: &Matrix, rtol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.to_nalgebra().singular_values();
    let cutoff = rtol * sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|s| **s > cutoff && **s > 0.0).count()
}

pub fn determinant(m: &Matrix) -> Result<f64> {
    if m.rows() != m.cols() {
        return Err(Error::shape("determinant of non-square matrix"));
    }
    Ok(m.to_nalgebra().determinant())
}
