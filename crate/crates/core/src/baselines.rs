//! Comparison policies trained directly on observations: behaviour cloning
//! by squared error and a mixture density network.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::elbo::ElboBreakdown;
use crate::error::{check_len, Error, Result};
use crate::model::checkpoint::{restore_tensors, Checkpoint};
use crate::model::graph::component_log_lik;
use crate::model::{Dense, Mlp, ParamTree, Registrar};
use crate::numcore::{log_softmax, logsumexp, mvn_logpdf_diag, softplus, DiagGaussian, Matrix, Tape};
use crate::simenv::{Policy, PolicyStep, RolloutMode};
use crate::train::Objective;

pub const KIND_BC: &str = "bc";
pub const KIND_MDN: &str = "mdn";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            obs_dim: 2,
            action_dim: 2,
            hidden: vec![256, 256],
        }
    }
}

/// Tanh MLP regressing actions on observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcParams {
    pub config: BcConfig,
    pub net: Mlp,
}

impl BcParams {
    pub fn init<R: Rng + ?Sized>(config: &BcConfig, rng: &mut R) -> Result<Self> {
        if config.obs_dim == 0 || config.action_dim == 0 || config.hidden.contains(&0) {
            return Err(Error::config("behaviour cloning dimensions must be at least 1"));
        }
        let mut sizes = vec![config.obs_dim];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(config.action_dim);
        Ok(BcParams {
            config: config.clone(),
            net: Mlp::new(&sizes, false, false, rng),
        })
    }

    pub fn act(&self, o: &[f64]) -> Result<Vec<f64>> {
        check_len("observation", o.len(), self.config.obs_dim)?;
        Ok(self.net.forward(o))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(KIND_BC, &self.config, self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(KIND_BC)?;
        let config: BcConfig = ck.config()?;
        let mut p = Self::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        restore_tensors(&mut p, &ck.params)?;
        Ok(p)
    }
}

impl ParamTree for BcParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.net.visit("net", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.net.visit_mut("net", f);
    }
}

fn check_pairs(obs: &Matrix, act: &Matrix, o: usize, a: usize) -> Result<()> {
    if obs.rows() == 0 {
        return Err(Error::contract("empty batch"));
    }
    if obs.rows() != act.rows() || obs.cols() != o || act.cols() != a {
        return Err(Error::shape(format!(
            "batch is {}x{} / {}x{}, expected O={o} A={a}",
            obs.rows(),
            obs.cols(),
            act.rows(),
            act.cols()
        )));
    }
    Ok(())
}

fn bc_graph(obs: &Matrix, act: &Matrix, params: &BcParams, differentiable: bool) -> Result<(f64, Option<Vec<Matrix>>)> {
    check_pairs(obs, act, params.config.obs_dim, params.config.action_dim)?;
    let mut tape = Tape::new();
    let net = Registrar {
        tape: &mut tape,
        next_key: 0,
        differentiable,
    }
    .mlp(&params.net);
    let o = tape.constant(obs.clone());
    let u = tape.constant(act.clone());
    let pred = net.apply(&mut tape, o);
    let diff = tape.sub(pred, u);
    let sq = tape.square(diff);
    let loss = tape.mean(sq);
    let value = tape.scalar(loss);
    let grads = differentiable
        .then(|| tape.backward(loss).map(|g| g.into_map().into_values().collect()))
        .transpose()?;
    Ok((value, grads))
}

/// Mean squared error over every action coordinate of the batch.
pub fn bc_loss(obs: &Matrix, act: &Matrix, params: &BcParams) -> Result<f64> {
    Ok(bc_graph(obs, act, params, false)?.0)
}

pub fn bc_loss_and_grad(obs: &Matrix, act: &Matrix, params: &BcParams) -> Result<(f64, Vec<Matrix>)> {
    let (l, g) = bc_graph(obs, act, params, true)?;
    Ok((l, g.expect("differentiable")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdnConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub num_components: usize,
    pub hidden: Vec<usize>,
    pub var_floor: f64,
}

impl Default for MdnConfig {
    fn default() -> Self {
        MdnConfig {
            obs_dim: 2,
            action_dim: 2,
            num_components: 5,
            hidden: vec![64, 64],
            var_floor: 1e-5,
        }
    }
}

/// Gaussian mixture over actions given observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdnParams {
    pub config: MdnConfig,
    /// Tanh on every layer.
    pub trunk: Mlp,
    /// trunk -> C*A component means.
    pub mean_head: Dense,
    /// trunk -> C*A raw variances.
    pub var_head: Dense,
    /// trunk -> C mixture logits.
    pub weight_head: Dense,
}

impl MdnParams {
    pub fn init<R: Rng + ?Sized>(config: &MdnConfig, rng: &mut R) -> Result<Self> {
        let c = config;
        if c.obs_dim == 0 || c.action_dim == 0 || c.num_components == 0 || c.hidden.is_empty() || c.hidden.contains(&0) {
            return Err(Error::config("mixture density dimensions must be at least 1"));
        }
        if !(c.var_floor > 0.0) {
            return Err(Error::config("var_floor must be positive"));
        }
        let mut sizes = vec![c.obs_dim];
        sizes.extend_from_slice(&c.hidden);
        let h = *c.hidden.last().expect("nonempty");
        Ok(MdnParams {
            config: c.clone(),
            trunk: Mlp::new(&sizes, true, false, rng),
            // Random means keep the components apart at the start.
            mean_head: Dense::uniform(h, c.num_components * c.action_dim, rng),
            var_head: Dense::zeros(h, c.num_components * c.action_dim),
            weight_head: Dense::zeros(h, c.num_components),
        })
    }

    /// Mixture weights and components at `o`.
    pub fn mixture(&self, o: &[f64]) -> Result<(Vec<f64>, Vec<DiagGaussian>)> {
        check_len("observation", o.len(), self.config.obs_dim)?;
        let (a, k) = (self.config.action_dim, self.config.num_components);
        let h = self.trunk.forward(o);
        let log_w = log_softmax(&self.weight_head.forward(&h))?;
        let means = self.mean_head.forward(&h);
        let raw = self.var_head.forward(&h);
        let comps = (0..k)
            .map(|c| {
                DiagGaussian::new(
                    means[c * a..(c + 1) * a].to_vec(),
                    raw[c * a..(c + 1) * a].iter().map(|r| softplus(*r) + self.config.var_floor).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((log_w.log_probs().to_vec(), comps))
    }

    /// `ln Σ_c π_c(o) N(u; μ_c(o), Σ_c(o))`.
    pub fn log_density(&self, o: &[f64], u: &[f64]) -> Result<f64> {
        let (log_w, comps) = self.mixture(o)?;
        let joint = log_w
            .iter()
            .zip(&comps)
            .map(|(w, g)| Ok(w + mvn_logpdf_diag(u, g)?))
            .collect::<Result<Vec<f64>>>()?;
        Ok(logsumexp(&joint))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(KIND_MDN, &self.config, self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(KIND_MDN)?;
        let config: MdnConfig = ck.config()?;
        let mut p = Self::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        restore_tensors(&mut p, &ck.params)?;
        Ok(p)
    }
}

impl ParamTree for MdnParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.trunk.visit("trunk", f);
        self.mean_head.visit("mean_head", f);
        self.var_head.visit("var_head", f);
        self.weight_head.visit("weight_head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.trunk.visit_mut("trunk", f);
        self.mean_head.visit_mut("mean_head", f);
        self.var_head.visit_mut("var_head", f);
        self.weight_head.visit_mut("weight_head", f);
    }
}

fn mdn_graph(obs: &Matrix, act: &Matrix, params: &MdnParams, differentiable: bool) -> Result<(f64, Option<Vec<Matrix>>)> {
    let cfg = &params.config;
    check_pairs(obs, act, cfg.obs_dim, cfg.action_dim)?;
    let mut tape = Tape::new();
    let mut r = Registrar {
        tape: &mut tape,
        next_key: 0,
        differentiable,
    };
    let trunk = r.mlp(&params.trunk);
    let mean_head = r.dense(&params.mean_head);
    let var_head = r.dense(&params.var_head);
    let weight_head = r.dense(&params.weight_head);
    let o = tape.constant(obs.clone());
    let h = trunk.apply(&mut tape, o);
    let mean = mean_head.apply(&mut tape, h);
    let raw = var_head.apply(&mut tape, h);
    let sp = tape.softplus(raw);
    let var = tape.add_scalar(sp, cfg.var_floor);
    let logits = weight_head.apply(&mut tape, h);
    let lse = tape.logsumexp_rows(logits);
    let log_w = tape.sub_col(logits, lse);
    let log_lik = component_log_lik(&mut tape, mean, var, act, cfg.num_components);
    let joint = tape.add(log_w, log_lik);
    let per_row = tape.logsumexp_rows(joint);
    let mean_ll = tape.mean(per_row);
    let loss = tape.neg(mean_ll);
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("mixture density loss".into()));
    }
    let grads = differentiable
        .then(|| tape.backward(loss).map(|g| g.into_map().into_values().collect()))
        .transpose()?;
    Ok((value, grads))
}

/// Mean negative log mixture density over the batch.
pub fn mdn_loss(obs: &Matrix, act: &Matrix, params: &MdnParams) -> Result<f64> {
    Ok(mdn_graph(obs, act, params, false)?.0)
}

pub fn mdn_loss_and_grad(obs: &Matrix, act: &Matrix, params: &MdnParams) -> Result<(f64, Vec<Matrix>)> {
    let (l, g) = mdn_graph(obs, act, params, true)?;
    Ok((l, g.expect("differentiable")))
}

/// An action and the 0-based component that produced it. `Mean` takes the
/// heaviest component's mean (lowest index on ties); `Sample` draws a
/// component and then a Gaussian action from it.
pub fn mdn_act<R: Rng + ?Sized>(o: &[f64], params: &MdnParams, mode: RolloutMode, rng: &mut R) -> Result<(Vec<f64>, usize)> {
    let (log_w, comps) = params.mixture(o)?;
    match mode {
        RolloutMode::Mean => {
            let c = crate::numcore::argmax(&log_w);
            Ok((comps[c].mean().to_vec(), c))
        }
        RolloutMode::Sample => {
            let r: f64 = rng.random();
            let mut acc = 0.0;
            let mut c = log_w.len() - 1;
            for (i, lw) in log_w.iter().enumerate() {
                acc += lw.exp();
                if r < acc {
                    c = i;
                    break;
                }
            }
            let g = &comps[c];
            let u = g
                .mean()
                .iter()
                .zip(g.var())
                .map(|(m, v)| {
                    let n: f64 = StandardNormal.sample(rng);
                    m + v.sqrt() * n
                })
                .collect();
            Ok((u, c))
        }
    }
}

impl Policy for BcParams {
    fn obs_dim(&self) -> usize {
        self.config.obs_dim
    }

    fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    /// Deterministic in both modes.
    fn step(&self, o: &[f64], _: RolloutMode, _: &mut dyn RngCore) -> Result<PolicyStep> {
        Ok(PolicyStep {
            action: self.act(o)?,
            skill: 0,
            latent: o.to_vec(),
        })
    }
}

impl Policy for MdnParams {
    fn obs_dim(&self) -> usize {
        self.config.obs_dim
    }

    fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    fn step(&self, o: &[f64], mode: RolloutMode, rng: &mut dyn RngCore) -> Result<PolicyStep> {
        let (action, skill) = mdn_act(o, self, mode, rng)?;
        Ok(PolicyStep {
            action,
            skill,
            latent: o.to_vec(),
        })
    }
}

/// Behaviour cloning as a training objective. The log's `total` column
/// holds the negated loss; the other terms are zero.
pub struct BcObjective;

impl Objective for BcObjective {
    type Params = BcParams;

    fn evaluate(&self, p: &BcParams, obs: &Matrix, act: &Matrix, _: &mut ChaCha8Rng) -> Result<(f64, ElboBreakdown, Vec<Matrix>)> {
        let (l, g) = bc_loss_and_grad(obs, act, p)?;
        Ok((l, ElboBreakdown::new(0.0, -l, 0.0, 0.0), g))
    }
}

/// Mixture density fitting as a training objective; the mean log-density
/// is logged as `recon_act`.
pub struct MdnObjective;

impl Objective for MdnObjective {
    type Params = MdnParams;

    fn evaluate(&self, p: &MdnParams, obs: &Matrix, act: &Matrix, _: &mut ChaCha8Rng) -> Result<(f64, ElboBreakdown, Vec<Matrix>)> {
        let (l, g) = mdn_loss_and_grad(obs, act, p)?;
        Ok((l, ElboBreakdown::new(0.0, -l, 0.0, 0.0), g))
    }
}
