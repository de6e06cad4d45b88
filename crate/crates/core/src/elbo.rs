//! Training objective: a per-pair evidence lower bound with every term
//! exposed.
//!
//! For one pair `(o, u)` and one reparameterized draw `z ~ q(z|o)`:
//!
//! ```text
//! recon_obs = ln p(o | z)
//! recon_act = Σ_c q(c | z, u) ln p(u | c, z)
//! kl_z      = KL(q(z | o) || p(z))
//! kl_switch = KL(q(δ | z, u) || p(δ | z))
//! total     = recon_obs + recon_act - kl_z - kl_switch
//! ```
//!
//! The skill is summed out analytically. Because `q(δ | z, u)` is the exact
//! Bayes posterior, `recon_act - kl_switch` equals the mixture log-density
//! `ln Σ_c π(c|z) p(u|c,z)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelNodes, ModelParams, ParamTree};
use crate::numcore::{
    cross_entropy, kl_categorical, kl_diag_gaussians, mvn_logpdf_diag, standard_normal, CategoricalDist,
    Matrix, NodeId, Tape,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon_obs: f64,
    pub recon_act: f64,
    pub kl_z: f64,
    pub kl_switch: f64,
    pub total: f64,
}

impl ElboBreakdown {
    /// Builds a breakdown whose `total` is the signed sum of the terms.
    pub fn new(recon_obs: f64, recon_act: f64, kl_z: f64, kl_switch: f64) -> Self {
        ElboBreakdown {
            recon_obs,
            recon_act,
            kl_z,
            kl_switch,
            total: recon_obs + recon_act - kl_z - kl_switch,
        }
    }

    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.w_obs * self.recon_obs + w.w_act * self.recon_act - w.w_klz * self.kl_z - w.w_klswitch * self.kl_switch
    }

    /// Term-wise mean; the total is rebuilt from the averaged terms.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a ElboBreakdown>) -> Self {
        let mut acc = [0.0; 4];
        let mut n = 0usize;
        for b in items {
            acc[0] += b.recon_obs;
            acc[1] += b.recon_act;
            acc[2] += b.kl_z;
            acc[3] += b.kl_switch;
            n += 1;
        }
        let n = n.max(1) as f64;
        Self::new(acc[0] / n, acc[1] / n, acc[2] / n, acc[3] / n)
    }
}

/// Multipliers on the four terms; all 1 for the unmodified bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_obs: f64,
    pub w_act: f64,
    pub w_klz: f64,
    pub w_klswitch: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_obs: 1.0,
            w_act: 1.0,
            w_klz: 1.0,
            w_klswitch: 1.0,
        }
    }
}

impl LossWeights {
    /// Unit weights, with the switching KL dropped when the model config
    /// disables it.
    pub fn for_model(params: &ModelParams) -> Self {
        LossWeights {
            w_klswitch: if params.config.switch_kl { 1.0 } else { 0.0 },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_obs", self.w_obs),
            ("w_act", self.w_act),
            ("w_klz", self.w_klz),
            ("w_klswitch", self.w_klswitch),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::config(format!("{name} must be finite and nonnegative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Bound for a single pair with caller-supplied reparameterization noise.
pub fn elbo_step(o: &[f64], u: &[f64], params: &ModelParams, noise: &[f64]) -> Result<ElboBreakdown> {
    let q = params.encode(o)?;
    let z = ModelParams::reparam_sample(&q, noise)?.z;
    let recon_obs = mvn_logpdf_diag(o, &params.decode(&z)?)?;
    let post = params.posterior_skill(&z, u)?;
    let lik = params.skill_log_likelihoods(&z, u)?;
    let recon_act = post.probs().iter().zip(&lik).map(|(p, l)| if *p == 0.0 { 0.0 } else { p * l }).sum();
    let kl_z = kl_diag_gaussians(&q, &params.prior())?;
    let kl_switch = kl_categorical(&post, &params.switch_prior(&z)?)?;
    Ok(ElboBreakdown::new(recon_obs, recon_act, kl_z, kl_switch))
}

/// `(H(q, p), H(q))`, whose difference is `KL(q || p)`.
pub fn switch_kl_decomposition(q: &CategoricalDist, p: &CategoricalDist) -> Result<(f64, f64)> {
    Ok((cross_entropy(q, p)?, q.entropy()))
}

/// Per-row terms of a batch evaluated on a tape.
struct BatchNodes {
    recon_obs: NodeId,
    recon_act: NodeId,
    kl_z: NodeId,
    kl_switch: NodeId,
    loss: NodeId,
}

fn check_batch(obs: &Matrix, act: &Matrix, noise: &Matrix, params: &ModelParams) -> Result<()> {
    let cfg = &params.config;
    if obs.rows() == 0 {
        return Err(Error::contract("empty batch"));
    }
    if obs.cols() != cfg.obs_dim || act.cols() != cfg.action_dim || noise.cols() != cfg.latent_dim {
        return Err(Error::shape(format!(
            "batch widths (obs {}, act {}, noise {}) do not match model (O={}, A={}, S={})",
            obs.cols(),
            act.cols(),
            noise.cols(),
            cfg.obs_dim,
            cfg.action_dim,
            cfg.latent_dim
        )));
    }
    if act.rows() != obs.rows() || noise.rows() != obs.rows() {
        return Err(Error::shape("obs, actions and noise must have the same number of rows"));
    }
    if !obs.is_finite() || !act.is_finite() {
        return Err(Error::NonFinite("batch data".into()));
    }
    Ok(())
}

fn build(
    tape: &mut Tape,
    nodes: &ModelNodes,
    obs: &Matrix,
    act: &Matrix,
    noise: &Matrix,
    w: &LossWeights,
) -> BatchNodes {
    let o = tape.constant(obs.clone());
    let e = tape.constant(noise.clone());
    let (mean, var) = nodes.encode(tape, o);
    let z = nodes.reparam(tape, mean, var, e);
    let recon_obs = nodes.recon_obs(tape, z, o);
    let kl_z = nodes.kl_z(tape, mean, var);
    let h = nodes.trunk(tape, z);
    let log_prior = nodes.log_prior(tape, h);
    let log_lik = nodes.skill_log_lik(tape, z, h, act);

    let joint = tape.add(log_lik, log_prior);
    let log_marg = tape.logsumexp_rows(joint);
    let log_post = tape.sub_col(joint, log_marg);
    let post = tape.exp(log_post);
    let weighted_lik = tape.mul(post, log_lik);
    let recon_act = tape.row_sum(weighted_lik);
    let log_ratio = tape.sub(log_post, log_prior);
    let weighted_ratio = tape.mul(post, log_ratio);
    let kl_switch = tape.row_sum(weighted_ratio);

    let a = tape.scale(recon_obs, w.w_obs);
    let b = tape.scale(recon_act, w.w_act);
    let c = tape.scale(kl_z, w.w_klz);
    let d = tape.scale(kl_switch, w.w_klswitch);
    let ab = tape.add(a, b);
    let cd = tape.add(c, d);
    let per_row = tape.sub(ab, cd);
    let mean_total = tape.mean(per_row);
    let loss = tape.neg(mean_total);
    BatchNodes {
        recon_obs,
        recon_act,
        kl_z,
        kl_switch,
        loss,
    }
}

fn summarize(tape: &Tape, b: &BatchNodes) -> Result<(f64, ElboBreakdown)> {
    let col_mean = |id: NodeId, clamp: bool| {
        let v = tape.value(id);
        let s: f64 = v.as_slice().iter().map(|x| if clamp { x.max(0.0) } else { *x }).sum();
        s / v.len() as f64
    };
    let loss = tape.scalar(b.loss);
    if !loss.is_finite() {
        if tape.value(b.recon_act).as_slice().iter().any(|x| x.is_nan()) {
            return Err(Error::Degenerate("skill posterior is undefined for some pair".into()));
        }
        return Err(Error::NonFinite("batch loss".into()));
    }
    let breakdown = ElboBreakdown::new(
        col_mean(b.recon_obs, false),
        col_mean(b.recon_act, false),
        col_mean(b.kl_z, true),
        col_mean(b.kl_switch, true),
    );
    Ok((loss, breakdown))
}

/// Negative weighted mean bound over the rows of a batch, with explicit
/// noise (one standard-normal row per pair).
pub fn batch_loss_with_noise(
    obs: &Matrix,
    act: &Matrix,
    noise: &Matrix,
    params: &ModelParams,
    weights: &LossWeights,
) -> Result<(f64, ElboBreakdown)> {
    check_batch(obs, act, noise, params)?;
    let mut tape = Tape::new();
    let nodes = ModelNodes::register(params, &mut tape, false);
    let b = build(&mut tape, &nodes, obs, act, noise, weights);
    summarize(&tape, &b)
}

/// Like [`batch_loss_with_noise`], also returning the gradient of the loss
/// for every tensor in [`ParamTree`] visit order.
pub fn loss_and_grad(
    obs: &Matrix,
    act: &Matrix,
    noise: &Matrix,
    params: &ModelParams,
    weights: &LossWeights,
) -> Result<(f64, ElboBreakdown, Vec<Matrix>)> {
    check_batch(obs, act, noise, params)?;
    let mut tape = Tape::new();
    let nodes = ModelNodes::register(params, &mut tape, true);
    let b = build(&mut tape, &nodes, obs, act, noise, weights);
    let (loss, breakdown) = summarize(&tape, &b)?;
    let grads = tape.backward(b.loss)?.into_map().into_values().collect::<Vec<_>>();
    debug_assert_eq!(grads.len(), params.num_tensors());
    Ok((loss, breakdown, grads))
}

/// Batch loss with the reparameterization noise drawn from `rng`, one row
/// per pair in batch order.
pub fn batch_loss<R: Rng + ?Sized>(
    obs: &Matrix,
    act: &Matrix,
    params: &ModelParams,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<(f64, ElboBreakdown)> {
    let noise = standard_normal(obs.rows(), params.config.latent_dim, rng);
    batch_loss_with_noise(obs, act, &noise, params, weights)
}
