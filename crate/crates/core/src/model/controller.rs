//! Reading a linear layer as a feedback controller, and recovering goals
//! from observed actions.

use crate::error::{check_len, Error, Result};
use crate::numcore::{pinv, Matrix};

/// A layer `u = W z + b` rewritten as `u = K (g - z) + r`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerForm {
    /// `-W`
    pub gain: Matrix,
    /// `-W⁺ b`
    pub goal: Vec<f64>,
    /// Part of `b` outside the column space of `W`; zero when the
    /// rewrite is exact.
    pub residual: Vec<f64>,
}

impl ControllerForm {
    pub fn is_exact(&self, tol: f64) -> bool {
        self.residual.iter().all(|r| r.abs() <= tol)
    }
}

/// Rewrites the `A x S` weight and length-`A` bias of a linear layer in
/// feedback form. `rtol` is the relative singular-value cutoff of the
/// pseudo-inverse.
pub fn layer_to_controller(weight: &Matrix, bias: &[f64], rtol: f64) -> Result<ControllerForm> {
    check_len("layer bias", bias.len(), weight.rows())?;
    if !weight.is_finite() || bias.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("layer parameters".into()));
    }
    let gain = weight.scale(-1.0);
    let w_pinv = pinv(weight, rtol);
    let goal: Vec<f64> = w_pinv.matvec(bias).iter().map(|x| -x).collect();
    // K (g - 0) should reproduce b.
    let recon = gain.matvec(&goal);
    let residual = bias.iter().zip(&recon).map(|(b, r)| b - r).collect();
    Ok(ControllerForm {
        gain,
        goal,
        residual,
    })
}

/// Goal consistent with action `u` at state `z` under gain `K`:
/// `K⁺ u + z`. Exact when `K` has full column rank.
pub fn estimate_goal(gain: &Matrix, u: &[f64], z: &[f64], rtol: f64) -> Result<Vec<f64>> {
    check_len("action", u.len(), gain.rows())?;
    check_len("latent state", z.len(), gain.cols())?;
    let k_pinv = pinv(gain, rtol);
    Ok(k_pinv.matvec(u).iter().zip(z).map(|(a, b)| a + b).collect())
}
