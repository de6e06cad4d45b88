//! Central finite differences for verifying reverse-mode gradients.
//!
//! Only forward evaluations of the function are used, so the result is
//! independent of the tape's backward pass.

use super::Matrix;

/// Step used throughout the test suites.
pub const FD_STEP: f64 = 1e-5;

/// Numerical gradient of `f` with respect to every entry of every matrix.
pub fn central_difference(f: impl Fn(&[Matrix]) -> f64, params: &[Matrix], eps: f64) -> Vec<Matrix> {
    let mut work: Vec<Matrix> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let (rows, cols) = params[k].shape();
        let mut g = Matrix::zeros(rows, cols);
        for i in 0..params[k].len() {
            let orig = work[k].as_slice()[i];
            work[k].as_mut_slice()[i] = orig + eps;
            let up = f(&work);
            work[k].as_mut_slice()[i] = orig - eps;
            let down = f(&work);
            work[k].as_mut_slice()[i] = orig;
            g.as_mut_slice()[i] = (up - down) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over all entries.
///
/// `floor` keeps entries whose true gradient is zero from dividing
/// round-off by round-off.
pub fn max_relative_error(analytic: &[Matrix], numeric: &[Matrix], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (x, y) in a.as_slice().iter().zip(n.as_slice()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
