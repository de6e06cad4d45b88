use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::sample_start;
use super::{distance, env_step, stacked, HybridTaskSpec, Trajectory};
use crate::error::{check_len, Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Act on a reparameterized draw from q(z|o).
    Sample,
    /// Act on the mean of q(z|o).
    Mean,
}

impl std::str::FromStr for RolloutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(RolloutMode::Sample),
            "mean" => Ok(RolloutMode::Mean),
            other => Err(Error::config(format!("unknown rollout mode {other:?} (expected sample or mean)"))),
        }
    }
}

/// Perturbations applied during a closed-loop run.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutOptions {
    pub mode: RolloutMode,
    /// Observation noise `scale * obs_std ⊙ n` added to every model input.
    pub obs_noise_scale: f64,
    pub obs_std: Option<Vec<f64>>,
    /// Standard deviation of Gaussian noise added to every executed action.
    pub process_noise: f64,
    /// Fixed start state instead of a draw from the start box.
    pub start: Option<Vec<f64>>,
}

impl RolloutOptions {
    pub fn new(mode: RolloutMode) -> Self {
        RolloutOptions {
            mode,
            obs_noise_scale: 0.0,
            obs_std: None,
            process_noise: 0.0,
            start: None,
        }
    }
}

/// One decision of a closed-loop policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyStep {
    pub action: Vec<f64>,
    /// 0-based skill or mixture component behind the action.
    pub skill: usize,
    /// State the policy acted on; the raw observation for policies without
    /// a latent space.
    pub latent: Vec<f64>,
}

/// Anything that maps observations to actions.
pub trait Policy: Sync {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn step(&self, o: &[f64], mode: RolloutMode, rng: &mut dyn RngCore) -> Result<PolicyStep>;
}

impl Policy for ModelParams {
    fn obs_dim(&self) -> usize {
        self.config.obs_dim
    }

    fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    fn step(&self, o: &[f64], mode: RolloutMode, rng: &mut dyn RngCore) -> Result<PolicyStep> {
        let noise: Option<Vec<f64>> = match mode {
            RolloutMode::Sample => Some((0..self.config.latent_dim).map(|_| StandardNormal.sample(rng)).collect()),
            RolloutMode::Mean => None,
        };
        let p = self.act(o, noise.as_deref())?;
        Ok(PolicyStep {
            action: p.action,
            skill: p.skill,
            latent: p.z,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    /// Inputs the model saw (after any observation noise) and its actions.
    pub trajectory: Trajectory,
    /// True states, one per executed step plus the final state.
    pub states: Vec<Vec<f64>>,
    pub latents: Vec<Vec<f64>>,
    /// 1-based skill chosen at each step.
    pub skills: Vec<usize>,
    pub success: bool,
    pub steps_to_success: Option<usize>,
    /// Why the run stopped early, if it did.
    pub failure: Option<String>,
}

/// `o + scale * std ⊙ n` with `n ~ N(0, I)` per row.
pub fn add_observation_noise<R: Rng + ?Sized>(
    obs: &[Vec<f64>],
    scale: f64,
    train_std: &[f64],
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::contract(format!("noise scale must be nonnegative, got {scale}")));
    }
    obs.iter()
        .map(|o| {
            check_len("observation", o.len(), train_std.len())?;
            Ok(o.iter()
                .zip(train_std)
                .map(|(v, s)| {
                    let n: f64 = StandardNormal.sample(rng);
                    if scale == 0.0 {
                        *v
                    } else {
                        v + scale * s * n
                    }
                })
                .collect())
        })
        .collect()
}

/// Closed-loop execution from a random start: encode, pick the argmax
/// skill, apply that skill's feedback law, step, until the final goal is
/// within the success radius or the horizon runs out.
pub fn rollout<P: Policy + ?Sized>(params: &P, spec: &HybridTaskSpec, mode: RolloutMode, seed: u64) -> Result<RolloutResult> {
    rollout_with(params, spec, &RolloutOptions::new(mode), &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn rollout_with<P: Policy + ?Sized, R: Rng>(
    params: &P,
    spec: &HybridTaskSpec,
    opts: &RolloutOptions,
    rng: &mut R,
) -> Result<RolloutResult> {
    spec.validate()?;
    if params.obs_dim() != spec.obs_dim() || params.action_dim() != spec.action_dim() {
        return Err(Error::config(format!(
            "policy expects O={} A={}, task provides O={} A={}",
            params.obs_dim(),
            params.action_dim(),
            spec.obs_dim(),
            spec.action_dim()
        )));
    }
    let obs_std = match (&opts.obs_std, opts.obs_noise_scale > 0.0) {
        (Some(s), _) => {
            check_len("observation std", s.len(), spec.obs_dim())?;
            Some(s.clone())
        }
        (None, true) => return Err(Error::contract("observation noise needs the training std")),
        (None, false) => None,
    };
    let act_noise = Normal::new(0.0, opts.process_noise)
        .map_err(|_| Error::contract("process noise must be nonnegative"))?;

    let mut x = match &opts.start {
        Some(s) => {
            check_len("start state", s.len(), spec.state_dim)?;
            s.clone()
        }
        None => sample_start(spec, rng),
    };
    let mut frames = vec![spec.obs_map.apply(&x)];
    let mut out = RolloutResult {
        trajectory: Trajectory {
            task_id: format!("{}-rollout", spec.name),
            obs: Vec::new(),
            actions: Vec::new(),
            skills: None,
        },
        states: vec![x.clone()],
        latents: Vec::new(),
        skills: Vec::new(),
        success: false,
        steps_to_success: None,
        failure: None,
    };
    let goal = spec.final_goal().to_vec();
    for t in 0..spec.horizon {
        let clean = stacked(&frames, t, spec.history);
        let o = match &obs_std {
            Some(s) if opts.obs_noise_scale > 0.0 => {
                add_observation_noise(&[clean], opts.obs_noise_scale, s, rng)?.remove(0)
            }
            _ => clean,
        };
        let pred = match params.step(&o, opts.mode, rng) {
            Ok(p) => p,
            Err(e) => {
                out.failure = Some(format!("step {t}: {e}"));
                break;
            }
        };
        let mut u = pred.action;
        if opts.process_noise > 0.0 {
            u.iter_mut().for_each(|v| *v += act_noise.sample(rng));
        }
        if u.iter().any(|v| !v.is_finite()) {
            out.failure = Some(format!("step {t}: non-finite action"));
            break;
        }
        out.trajectory.obs.push(o);
        out.trajectory.actions.push(u.clone());
        out.latents.push(pred.latent);
        out.skills.push(pred.skill + 1);
        let (next, frame) = env_step(&x, &u, spec);
        x = next;
        frames.push(frame);
        out.states.push(x.clone());
        if distance(&x, &goal) < spec.success_radius {
            out.success = true;
            out.steps_to_success = Some(t + 1);
            break;
        }
    }
    Ok(out)
}
