//! Single-sample evaluation of the model without a tape.

use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{check_len, Error, Result};
use crate::numcore::{
    log_softmax, logsumexp, mvn_logpdf_diag, softplus, CategoricalDist, DiagGaussian,
};

/// A point in the latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z: Vec<f64>,
}

/// Output of one skill-execution step: latent, chosen skill and action.
#[derive(Clone, Debug, PartialEq)]
pub struct SkillPrediction {
    pub z: Vec<f64>,
    /// 0-based skill index.
    pub skill: usize,
    pub action: Vec<f64>,
}

impl ModelParams {
    /// q(z | o): mean and variance `softplus(raw) + var_floor`.
    pub fn encode(&self, o: &[f64]) -> Result<DiagGaussian> {
        check_len("observation", o.len(), self.config.obs_dim)?;
        if o.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("observation".into()));
        }
        let s = self.config.latent_dim;
        let out = self.encoder.forward(o);
        let mean = out[..s].to_vec();
        let var = out[s..]
            .iter()
            .map(|r| softplus(*r) + self.config.var_floor)
            .collect();
        DiagGaussian::new(mean, var)
    }

    /// `z = mean + sqrt(var) * noise`.
    pub fn reparam_sample(g: &DiagGaussian, noise: &[f64]) -> Result<LatentState> {
        check_len("reparameterization noise", noise.len(), g.dim())?;
        Ok(LatentState {
            z: g.mean()
                .iter()
                .zip(g.var())
                .zip(noise)
                .map(|((m, v), n)| m + v.sqrt() * n)
                .collect(),
        })
    }

    /// p(o | z) with a variance that does not depend on `z`.
    pub fn decode(&self, z: &[f64]) -> Result<DiagGaussian> {
        self.check_latent(z)?;
        let mean = self.decoder.forward(z);
        let var = self.decoder_log_var.as_slice().iter().map(|l| l.exp()).collect();
        DiagGaussian::new(mean, var)
    }

    pub fn prior(&self) -> DiagGaussian {
        DiagGaussian::new(
            self.prior_mean.as_slice().to_vec(),
            self.prior_log_var.as_slice().iter().map(|l| l.exp()).collect(),
        )
        .expect("prior variance is exp of a finite value")
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        check_len("latent state", z.len(), self.config.latent_dim)?;
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent state".into()));
        }
        Ok(())
    }

    fn trunk(&self, z: &[f64]) -> Vec<f64> {
        self.switcher.forward(z)
    }

    /// p(δ | z) = Categorical(f_switcher(z)).
    pub fn switch_prior(&self, z: &[f64]) -> Result<CategoricalDist> {
        self.check_latent(z)?;
        log_softmax(&self.switch_head.forward(&self.trunk(z)))
    }

    fn action_mean(&self, z: &[f64], h: &[f64], c: usize) -> Vec<f64> {
        let a = self.config.action_dim;
        match &self.free_mean_head {
            Some(head) if !self.config.feedback_structure => {
                head.forward(h)[c * a..(c + 1) * a].to_vec()
            }
            _ => {
                let goal = self.goals.row(c);
                let err: Vec<f64> = goal.iter().zip(z).map(|(g, z)| g - z).collect();
                (0..a)
                    .map(|r| {
                        self.gains
                            .row(c * a + r)
                            .iter()
                            .zip(&err)
                            .map(|(k, e)| k * e)
                            .sum()
                    })
                    .collect()
            }
        }
    }

    fn action_var(&self, h: &[f64], c: usize) -> Vec<f64> {
        let a = self.config.action_dim;
        self.noise_head.forward(h)[c * a..(c + 1) * a]
            .iter()
            .map(|r| softplus(*r) + self.config.var_floor)
            .collect()
    }

    /// p(u | δ = c, z) for 0-based skill `c`.
    ///
    /// With feedback structure the mean is `K_c (g_c - z)`; otherwise it is
    /// the free per-skill head.
    pub fn policy(&self, z: &[f64], c: usize) -> Result<DiagGaussian> {
        self.check_latent(z)?;
        self.check_skill(c)?;
        let h = self.trunk(z);
        DiagGaussian::new(self.action_mean(z, &h, c), self.action_var(&h, c))
    }

    /// Per-skill `ln p(u | c, z)` and `ln π(c | z)`.
    fn joint_terms(&self, z: &[f64], u: &[f64]) -> Result<(Vec<f64>, CategoricalDist)> {
        self.check_latent(z)?;
        check_len("action", u.len(), self.config.action_dim)?;
        let h = self.trunk(z);
        let prior = log_softmax(&self.switch_head.forward(&h))?;
        let lik = (0..self.config.num_skills)
            .map(|c| {
                let g = DiagGaussian::new(self.action_mean(z, &h, c), self.action_var(&h, c))?;
                mvn_logpdf_diag(u, &g)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok((lik, prior))
    }

    /// Per-skill action log-likelihoods `ln p(u | c, z)`.
    pub fn skill_log_likelihoods(&self, z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.joint_terms(z, u)?.0)
    }

    /// q(δ | z, u) ∝ p(u | δ, z) π(δ | z), normalized in log-space.
    pub fn posterior_skill(&self, z: &[f64], u: &[f64]) -> Result<CategoricalDist> {
        let (lik, prior) = self.joint_terms(z, u)?;
        let joint: Vec<f64> = lik.iter().zip(prior.log_probs()).map(|(l, p)| l + p).collect();
        let norm = logsumexp(&joint);
        if !norm.is_finite() {
            return Err(Error::Degenerate(
                "every skill assigns zero likelihood to the action".into(),
            ));
        }
        // Renormalize after subtracting so the result passes the 1e-9 check.
        let shifted: Vec<f64> = joint.iter().map(|j| j - norm).collect();
        let fix = logsumexp(&shifted);
        CategoricalDist::from_log_probs(shifted.iter().map(|s| s - fix).collect())
    }

    /// ln Σ_c π(c | z) N(u; mean_c, var_c).
    pub fn mixture_action_density(&self, z: &[f64], u: &[f64]) -> Result<f64> {
        let (lik, prior) = self.joint_terms(z, u)?;
        let joint: Vec<f64> = lik.iter().zip(prior.log_probs()).map(|(l, p)| l + p).collect();
        Ok(logsumexp(&joint))
    }

    /// One execution step: encode, pick the argmax skill (lowest index on
    /// ties), and apply that skill's mean action.
    ///
    /// `noise = None` uses the encoder mean; otherwise `z` is the
    /// reparameterized sample with the given standard-normal draw.
    pub fn act(&self, o: &[f64], noise: Option<&[f64]>) -> Result<SkillPrediction> {
        let q = self.encode(o)?;
        let z = match noise {
            Some(n) => Self::reparam_sample(&q, n)?.z,
            None => q.mean().to_vec(),
        };
        let h = self.trunk(&z);
        let skill = log_softmax(&self.switch_head.forward(&h))?.argmax();
        let action = self.action_mean(&z, &h, skill);
        Ok(SkillPrediction { z, skill, action })
    }
}
