//! Diagonal Gaussians, categoricals, and their closed-form divergences.
//!
//! All densities are evaluated in log-space; mixtures are combined with
//! [`logsumexp`].

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{check_len, Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Normal distribution with independent coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        check_len("variance", var.len(), mean.len())?;
        if let Some(v) = var.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("variance must be positive and finite, got {v}")));
        }
        Ok(DiagGaussian { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        mvn_logpdf_diag(x, self)
    }
}

/// Log-density of `x` under a diagonal Gaussian.
pub fn mvn_logpdf_diag(x: &[f64], g: &DiagGaussian) -> Result<f64> {
    check_len("mvn_logpdf_diag input", x.len(), g.dim())?;
    if let Some(v) = g.var.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain(format!("nonpositive variance {v}")));
    }
    Ok(x.iter()
        .zip(&g.mean)
        .zip(&g.var)
        .map(|((xi, mi), vi)| {
            let d = xi - mi;
            -0.5 * (2.0 * PI * vi).ln() - 0.5 * d * d / vi
        })
        .sum())
}

/// KL(q || p) for diagonal Gaussians.
pub fn kl_diag_gaussians(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_len("kl_diag_gaussians", q.dim(), p.dim())?;
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (vq, vp) = (q.var[i], p.var[i]);
        if !(vq > 0.0 && vp > 0.0) {
            return Err(Error::Domain("nonpositive variance in KL".into()));
        }
        let d = q.mean[i] - p.mean[i];
        kl += 0.5 * ((vp / vq).ln() + (vq + d * d) / vp - 1.0);
    }
    // Rounding can leave a tiny negative residue when q == p.
    Ok(kl.max(0.0))
}

/// Stable `ln Σ exp(x_i)`. Returns `-inf` for an empty slice or all `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Categorical distribution stored as normalized log-probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDist {
    log_probs: Vec<f64>,
}

impl CategoricalDist {
    /// Wraps log-probabilities that already sum to one (within 1e-9).
    pub fn from_log_probs(log_probs: Vec<f64>) -> Result<Self> {
        if log_probs.is_empty() {
            return Err(Error::shape("categorical over zero outcomes"));
        }
        let z = logsumexp(&log_probs);
        if !(z.abs() <= 1e-9) {
            return Err(Error::Domain(format!("log-probabilities normalize to {z}, not 0")));
        }
        Ok(CategoricalDist { log_probs })
    }

    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::Domain("probabilities must be finite and nonnegative".into()));
        }
        Self::from_log_probs(probs.iter().map(|p| p.ln()).collect())
    }

    pub fn uniform(n: usize) -> Self {
        CategoricalDist {
            log_probs: vec![-(n as f64).ln(); n],
        }
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    /// Index of the most probable outcome; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.log_probs)
    }

    pub fn entropy(&self) -> f64 {
        -self
            .log_probs
            .iter()
            .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l })
            .sum::<f64>()
    }
}

/// Index of the largest element; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Normalizes logits by max-subtraction.
pub fn log_softmax(logits: &[f64]) -> Result<CategoricalDist> {
    if logits.is_empty() {
        return Err(Error::shape("log_softmax of empty logits"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("non-finite logit".into()));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    Ok(CategoricalDist {
        log_probs: logits.iter().map(|x| (x - m) - log_norm).collect(),
    })
}

/// KL(q || p) with `0 ln 0 = 0`.
///
/// Returns `+inf` when `p` assigns zero mass to an outcome that `q` supports;
/// callers check `is_infinite()` on the result.
pub fn kl_categorical(q: &CategoricalDist, p: &CategoricalDist) -> Result<f64> {
    check_len("kl_categorical", q.len(), p.len())?;
    let mut kl = 0.0;
    for (&lq, &lp) in q.log_probs.iter().zip(&p.log_probs) {
        if lq == f64::NEG_INFINITY {
            continue;
        }
        if lp == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        kl += lq.exp() * (lq - lp);
    }
    Ok(kl.max(0.0))
}

/// Cross-entropy `H(q, p) = -Σ q ln p`, `+inf` if `p` misses support of `q`.
pub fn cross_entropy(q: &CategoricalDist, p: &CategoricalDist) -> Result<f64> {
    check_len("cross_entropy", q.len(), p.len())?;
    let mut h = 0.0;
    for (&lq, &lp) in q.log_probs.iter().zip(&p.log_probs) {
        if lq == f64::NEG_INFINITY {
            continue;
        }
        if lp == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        h -= lq.exp() * lp;
    }
    Ok(h)
}
