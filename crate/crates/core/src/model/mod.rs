//! Switching latent feedback controller model.
//!
//! Observations are encoded into a latent state `z`. A switcher network
//! picks a skill `c`, and skill `c` acts through the feedback law
//! `u = K_c (g_c - z)` with its goal `g_c` (row `c` of the goal bank) and
//! gain `K_c` (an `A x S` slab of the gain bank). A decoder reconstructs the
//! observation from `z` so the latent stays a state of the environment.

pub mod checkpoint;
mod controller;
mod forward;
pub(crate) mod graph;
mod params;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use controller::{estimate_goal, layer_to_controller, ControllerForm};
pub use forward::{LatentState, SkillPrediction};
pub use graph::ModelNodes;
pub use params::{Dense, DenseNodes, Mlp, MlpNodes, ParamTree};
pub(crate) use params::Registrar;

use crate::error::{Error, Result};
use crate::numcore::{pinv, standard_normal, Matrix, PINV_RTOL};

/// Which parts of the model are active; mirrors the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Free per-skill means, no switching KL.
    Mdn,
    /// Feedback-structured means, no switching KL.
    MdnFb,
    /// Feedback-structured means with the switching KL term.
    MdnFbSw,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Mdn, Variant::MdnFb, Variant::MdnFbSw];

    pub fn feedback_structure(self) -> bool {
        !matches!(self, Variant::Mdn)
    }

    pub fn switch_kl(self) -> bool {
        matches!(self, Variant::MdnFbSw)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mdn => "mdn",
            Variant::MdnFb => "mdn_fb",
            Variant::MdnFbSw => "mdn_fb_sw",
        }
    }

    pub fn from_flags(feedback_structure: bool, switch_kl: bool) -> Option<Self> {
        match (feedback_structure, switch_kl) {
            (false, false) => Some(Variant::Mdn),
            (true, false) => Some(Variant::MdnFb),
            (true, true) => Some(Variant::MdnFbSw),
            (false, true) => None,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mdn" => Ok(Variant::Mdn),
            "mdn_fb" => Ok(Variant::MdnFb),
            "mdn_fb_sw" => Ok(Variant::MdnFbSw),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (expected mdn, mdn_fb or mdn_fb_sw)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub num_skills: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub switcher_hidden: Vec<usize>,
    pub var_floor: f64,
    pub feedback_structure: bool,
    pub switch_kl: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            obs_dim: 2,
            action_dim: 2,
            latent_dim: 2,
            num_skills: 5,
            encoder_hidden: vec![64, 64],
            decoder_hidden: vec![64, 64],
            switcher_hidden: vec![64],
            var_floor: 1e-5,
            feedback_structure: true,
            switch_kl: true,
        }
    }
}

impl ModelConfig {
    pub fn new(obs_dim: usize, action_dim: usize, latent_dim: usize, num_skills: usize) -> Self {
        ModelConfig {
            obs_dim,
            action_dim,
            latent_dim,
            num_skills,
            ..Default::default()
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.feedback_structure = v.feedback_structure();
        self.switch_kl = v.switch_kl();
        self
    }

    pub fn with_hidden(mut self, width: usize) -> Self {
        self.encoder_hidden = vec![width, width];
        self.decoder_hidden = vec![width, width];
        self.switcher_hidden = vec![width];
        self
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::from_flags(self.feedback_structure, self.switch_kl).ok_or_else(|| {
            Error::config("switch_kl without feedback_structure is not an ablation of this model")
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("obs_dim", self.obs_dim),
            ("action_dim", self.action_dim),
            ("latent_dim", self.latent_dim),
            ("num_skills", self.num_skills),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        let widths = self
            .encoder_hidden
            .iter()
            .chain(&self.decoder_hidden)
            .chain(&self.switcher_hidden);
        if widths.clone().any(|w| *w == 0) {
            return Err(Error::config("hidden widths must be at least 1"));
        }
        if !(self.var_floor > 0.0) {
            return Err(Error::config("var_floor must be positive"));
        }
        self.variant()?;
        Ok(())
    }

    /// Width of the switcher trunk output shared by the skill heads.
    pub fn trunk_dim(&self) -> usize {
        self.switcher_hidden.last().copied().unwrap_or(self.latent_dim)
    }
}

/// Every trainable quantity of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// o -> (mean, raw variance) of q(z|o), 2S outputs.
    pub encoder: Mlp,
    /// z -> mean of p(o|z).
    pub decoder: Mlp,
    /// 1 x O log-variance shared by all inputs.
    pub decoder_log_var: Matrix,
    /// z -> trunk features (tanh on every layer).
    pub switcher: Mlp,
    /// trunk -> C logits of the skill prior.
    pub switch_head: Dense,
    /// trunk -> C*A raw action variances, block c for skill c.
    pub noise_head: Dense,
    /// trunk -> C*A free action means; present only without feedback structure.
    pub free_mean_head: Option<Dense>,
    /// C x S, row c is the goal of skill c.
    pub goals: Matrix,
    /// (C*A) x S, rows cA..(c+1)A hold the gain of skill c.
    pub gains: Matrix,
    /// 1 x S
    pub prior_mean: Matrix,
    /// 1 x S
    pub prior_log_var: Matrix,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (o, a, s, c) = (
            config.obs_dim,
            config.action_dim,
            config.latent_dim,
            config.num_skills,
        );
        let sizes = |input: usize, hidden: &[usize], output: usize| {
            let mut v = vec![input];
            v.extend_from_slice(hidden);
            v.push(output);
            v
        };
        let encoder = Mlp::new(&sizes(o, &config.encoder_hidden, 2 * s), false, true, rng);
        let decoder = Mlp::new(&sizes(s, &config.decoder_hidden, o), false, true, rng);
        let switcher = if config.switcher_hidden.is_empty() {
            Mlp {
                layers: Vec::new(),
                activate_last: true,
            }
        } else {
            let mut v = vec![s];
            v.extend_from_slice(&config.switcher_hidden);
            Mlp::new(&v, true, false, rng)
        };
        let h = config.trunk_dim();
        let switch_head = Dense::zeros(h, c);
        let noise_head = Dense::zeros(h, c * a);
        // Distinct random means break the symmetry between skills.
        let free_mean_head = (!config.feedback_structure).then(|| Dense::uniform(h, c * a, rng));

        let goal_dist = Normal::new(0.0, 0.5).expect("valid normal");
        let goals = Matrix::from_vec(c, s, (0..c * s).map(|_| goal_dist.sample(rng)).collect())?;
        let mut gains = Matrix::zeros(c * a, s);
        for k in 0..c {
            let slab = orthonormalish(a, s, rng).scale(0.1);
            for r in 0..a {
                gains.row_mut(k * a + r).copy_from_slice(slab.row(r));
            }
        }
        // Matches the encoder's zero-init output so q(z|o) starts at the prior.
        let enc_var0 = crate::numcore::softplus(0.0) + config.var_floor;
        Ok(ModelParams {
            config: config.clone(),
            encoder,
            decoder,
            decoder_log_var: Matrix::zeros(1, o),
            switcher,
            switch_head,
            noise_head,
            free_mean_head,
            goals,
            gains,
            prior_mean: Matrix::zeros(1, s),
            prior_log_var: Matrix::filled(1, s, enc_var0.ln()),
        })
    }

    pub fn num_skills(&self) -> usize {
        self.config.num_skills
    }

    /// Gain of skill `c` (0-based) as an `A x S` matrix.
    pub fn gain(&self, c: usize) -> Result<Matrix> {
        self.check_skill(c)?;
        Ok(self.gains.row_block(c * self.config.action_dim, self.config.action_dim))
    }

    /// Goal of skill `c` (0-based).
    pub fn goal(&self, c: usize) -> Result<&[f64]> {
        self.check_skill(c)?;
        Ok(self.goals.row(c))
    }

    pub(crate) fn check_skill(&self, c: usize) -> Result<()> {
        if c >= self.config.num_skills {
            return Err(Error::Index {
                index: c + 1,
                len: self.config.num_skills,
            });
        }
        Ok(())
    }

    /// Clamps stored log-variances at the variance floor.
    pub fn project(&mut self) {
        let floor = self.config.var_floor.ln();
        for m in [&mut self.decoder_log_var, &mut self.prior_log_var] {
            for x in m.as_mut_slice() {
                if *x < floor {
                    *x = floor;
                }
            }
        }
    }

    /// Relabels skills: new skill `i` takes the banks of old skill `perm[i]`.
    pub fn permute_skills(&self, perm: &[usize]) -> Result<Self> {
        let c = self.config.num_skills;
        let a = self.config.action_dim;
        let mut seen = vec![false; c];
        if perm.len() != c || perm.iter().any(|&p| p >= c || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract("permute_skills needs a permutation of 0..C"));
        }
        let mut out = self.clone();
        let permute_cols = |d: &Dense, block: usize| -> Dense {
            let mut nd = d.clone();
            for (new, &old) in perm.iter().enumerate() {
                for j in 0..block {
                    for r in 0..d.weight.rows() {
                        nd.weight[(r, new * block + j)] = d.weight[(r, old * block + j)];
                    }
                    nd.bias[(0, new * block + j)] = d.bias[(0, old * block + j)];
                }
            }
            nd
        };
        out.switch_head = permute_cols(&self.switch_head, 1);
        out.noise_head = permute_cols(&self.noise_head, a);
        out.free_mean_head = self.free_mean_head.as_ref().map(|d| permute_cols(d, a));
        for (new, &old) in perm.iter().enumerate() {
            out.goals.row_mut(new).copy_from_slice(self.goals.row(old));
            for r in 0..a {
                out.gains
                    .row_mut(new * a + r)
                    .copy_from_slice(self.gains.row(old * a + r));
            }
        }
        Ok(out)
    }
}

/// `rows x cols` matrix with orthonormal rows or columns: the polar factor
/// `U V^T` of a Gaussian draw.
fn orthonormalish<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let g = standard_normal(rows, cols, rng);
    let svd = g.to_nalgebra().svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => Matrix::from_nalgebra(&(u * v_t)),
        _ => pinv(&g, PINV_RTOL).transpose(),
    }
}

impl ParamTree for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.encoder.visit("encoder", f);
        self.decoder.visit("decoder", f);
        f("decoder.log_var", &self.decoder_log_var);
        self.switcher.visit("switcher", f);
        self.switch_head.visit("switch_head", f);
        self.noise_head.visit("noise_head", f);
        if let Some(h) = &self.free_mean_head {
            h.visit("free_mean_head", f);
        }
        f("goals", &self.goals);
        f("gains", &self.gains);
        f("prior.mean", &self.prior_mean);
        f("prior.log_var", &self.prior_log_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.encoder.visit_mut("encoder", f);
        self.decoder.visit_mut("decoder", f);
        f("decoder.log_var", &mut self.decoder_log_var);
        self.switcher.visit_mut("switcher", f);
        self.switch_head.visit_mut("switch_head", f);
        self.noise_head.visit_mut("noise_head", f);
        if let Some(h) = &mut self.free_mean_head {
            h.visit_mut("free_mean_head", f);
        }
        f("goals", &mut self.goals);
        f("gains", &mut self.gains);
        f("prior.mean", &mut self.prior_mean);
        f("prior.log_var", &mut self.prior_log_var);
    }
}
