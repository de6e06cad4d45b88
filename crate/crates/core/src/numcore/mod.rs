//! Numerical foundation: dense matrices, log-space densities, closed-form
//! divergences, decompositions, and reverse-mode differentiation.

mod dist;
pub mod gradcheck;
mod linalg;
mod matrix;
pub mod tape;

pub use dist::{
    argmax, cross_entropy, kl_categorical, kl_diag_gaussians, log_softmax, logsumexp, mvn_logpdf_diag,
    CategoricalDist, DiagGaussian, LN_2PI,
};
pub use linalg::{determinant, eigvals, lstsq, pinv, rank, spectral_radius, Complex64, PINV_RTOL};
pub use matrix::Matrix;
pub(crate) use tape::softplus;
pub use tape::{Gradients, NodeId, Tape};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// `rows x cols` matrix of independent standard normal draws, filled in
/// row-major order.
pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}
