use crate::error::{check_len, Error, Result};
use crate::numcore::{eigvals, lstsq, rank, spectral_radius, Complex64, Matrix, PINV_RTOL};

/// One latent step `z -> z_next` under action `u` while `skill` (1-based)
/// was active.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub z_next: Vec<f64>,
    pub skill: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityFit {
    /// `S x S` state matrix of `z' = A z + B u`.
    pub a: Matrix,
    /// `S x A` input matrix.
    pub b: Matrix,
    /// Frobenius norm of the least-squares residual.
    pub residual: f64,
    /// Rank of the `[z u]` design; below `S + A` the fit is the
    /// minimum-norm solution.
    pub design_rank: usize,
    /// Spectrum of `A - B K`, the closed loop under `u = K (g - z)`.
    pub eigenvalues: Vec<Complex64>,
    pub spectral_radius: f64,
    /// Spectrum of `A + B K`, with the sign folded into the gain.
    pub eigenvalues_plus: Vec<Complex64>,
    pub spectral_radius_plus: f64,
}

impl StabilityFit {
    /// Discrete-time stability of `A - B K`.
    pub fn is_stable(&self) -> bool {
        self.spectral_radius < 1.0
    }

    /// Continuous-time reading: every eigenvalue of `A + B K` has negative
    /// real part.
    pub fn real_parts_negative(&self) -> bool {
        self.eigenvalues_plus.iter().all(|e| e.re < 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkillStability {
    /// 1-based.
    pub skill: usize,
    pub samples: usize,
    /// `None` when the group has fewer than `S + A` samples.
    pub fit: Option<StabilityFit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub skills: Vec<SkillStability>,
}

/// Fits latent dynamics per skill and reports the closed-loop spectrum
/// under that skill's gain. `gains[c]` is the `A x S` gain of skill `c + 1`.
pub fn stability_report(transitions: &[Transition], gains: &[Matrix]) -> Result<StabilityReport> {
    let Some(first) = gains.first() else {
        return Err(Error::contract("stability report needs at least one gain"));
    };
    let (a_dim, s_dim) = first.shape();
    if gains.iter().any(|k| k.shape() != (a_dim, s_dim)) {
        return Err(Error::shape("gains differ in shape"));
    }
    let mut groups: Vec<Vec<&Transition>> = vec![Vec::new(); gains.len()];
    for t in transitions {
        if t.skill == 0 || t.skill > gains.len() {
            return Err(Error::Index {
                index: t.skill,
                len: gains.len(),
            });
        }
        check_len("transition z", t.z.len(), s_dim)?;
        check_len("transition z_next", t.z_next.len(), s_dim)?;
        check_len("transition u", t.u.len(), a_dim)?;
        groups[t.skill - 1].push(t);
    }
    let skills = groups
        .iter()
        .zip(gains)
        .enumerate()
        .map(|(c, (group, k))| {
            let fit = if group.len() < s_dim + a_dim {
                None
            } else {
                Some(fit_group(group, k, s_dim, a_dim)?)
            };
            Ok(SkillStability {
                skill: c + 1,
                samples: group.len(),
                fit,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StabilityReport { skills })
}

fn fit_group(group: &[&Transition], k: &Matrix, s: usize, a: usize) -> Result<StabilityFit> {
    let n = group.len();
    let mut x = Matrix::zeros(n, s + a);
    let mut y = Matrix::zeros(n, s);
    for (r, t) in group.iter().enumerate() {
        x.row_mut(r)[..s].copy_from_slice(&t.z);
        x.row_mut(r)[s..].copy_from_slice(&t.u);
        y.row_mut(r).copy_from_slice(&t.z_next);
    }
    // Rows of X [A B]^T = Y.
    let (theta, residual) = lstsq(&x, &y)?;
    let a_mat = theta.row_block(0, s).transpose();
    let b_mat = theta.row_block(s, a).transpose();
    let bk = b_mat.matmul(k);
    let minus = a_mat.zip_map(&bk, |p, q| p - q);
    let plus = a_mat.zip_map(&bk, |p, q| p + q);
    let eigenvalues = eigvals(&minus)?;
    let eigenvalues_plus = eigvals(&plus)?;
    Ok(StabilityFit {
        spectral_radius: spectral_radius(&eigenvalues),
        spectral_radius_plus: spectral_radius(&eigenvalues_plus),
        design_rank: rank(&x, PINV_RTOL),
        a: a_mat,
        b: b_mat,
        residual,
        eigenvalues,
        eigenvalues_plus,
    })
}
