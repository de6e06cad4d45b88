use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::frechet_distance;
use crate::error::{check_len, Error, Result};
use crate::model::ModelParams;
use crate::simenv::{rollout_with, HybridTaskSpec, Policy, RolloutMode, RolloutOptions, RolloutResult, Trajectory};

/// Observation noise scales of the robustness protocol, in units of the
/// training-set standard deviation.
pub const DEFAULT_NOISE_SCALES: [f64; 8] = [0.0, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0, 3.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub noise_scales: Vec<f64>,
    pub success_rates: Vec<f64>,
    /// Trapezoid area under the curve divided by the scale range, or the
    /// only rate when there is a single scale.
    pub auc: f64,
}

impl RobustnessCurve {
    pub fn new(noise_scales: Vec<f64>, success_rates: Vec<f64>) -> Result<Self> {
        check_scales(&noise_scales)?;
        check_len("success rates", success_rates.len(), noise_scales.len())?;
        if success_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::contract("success rates must lie in [0, 1]"));
        }
        let auc = match noise_scales.len() {
            1 => success_rates[0],
            n => {
                let area: f64 = (1..n)
                    .map(|i| 0.5 * (success_rates[i] + success_rates[i - 1]) * (noise_scales[i] - noise_scales[i - 1]))
                    .sum();
                area / (noise_scales[n - 1] - noise_scales[0])
            }
        };
        Ok(RobustnessCurve {
            noise_scales,
            success_rates,
            auc,
        })
    }
}

fn check_scales(scales: &[f64]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::contract("no noise scales"));
    }
    if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::contract("noise scales must be finite and nonnegative"));
    }
    if scales.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("noise scales must be strictly increasing"));
    }
    Ok(())
}

/// `episodes` independent rollouts; episode `i` draws from stream `i` of
/// `seed`, so every option set sees the same start states.
pub fn run_episodes<P: Policy + ?Sized>(
    params: &P,
    spec: &HybridTaskSpec,
    opts: &RolloutOptions,
    episodes: usize,
    seed: u64,
) -> Vec<Result<RolloutResult>> {
    (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            rollout_with(params, spec, opts, &mut rng)
        })
        .collect()
}

fn check_compatible<P: Policy + ?Sized>(params: &P, spec: &HybridTaskSpec) -> Result<()> {
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
    Ok(())
}

/// Mean-mode success rate at each observation noise scale. Rollouts that
/// error count as failures.
pub fn robustness_curve<P: Policy + ?Sized>(
    params: &P,
    spec: &HybridTaskSpec,
    scales: &[f64],
    episodes: usize,
    seed: u64,
    train_std: &[f64],
) -> Result<RobustnessCurve> {
    check_scales(scales)?;
    if episodes == 0 {
        return Err(Error::contract("episodes must be at least 1"));
    }
    check_compatible(params, spec)?;
    check_len("training std", train_std.len(), spec.obs_dim())?;
    let rates = scales
        .iter()
        .map(|&scale| {
            let mut opts = RolloutOptions::new(RolloutMode::Mean);
            opts.obs_noise_scale = scale;
            opts.obs_std = Some(train_std.to_vec());
            let ok = run_episodes(params, spec, &opts, episodes, seed)
                .iter()
                .filter(|r| matches!(r, Ok(r) if r.success))
                .count();
            ok as f64 / episodes as f64
        })
        .collect();
    RobustnessCurve::new(scales.to_vec(), rates)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Scale of the training std added to observations.
    Obs,
    /// Standard deviation of Gaussian noise added to executed actions.
    Process,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Obs => "obs",
            NoiseKind::Process => "process",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLevel {
    pub kind: NoiseKind,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrechetRow {
    pub variant: String,
    pub noise_kind: NoiseKind,
    pub scale: f64,
    /// Mean over episodes of the distance to the nearest training path.
    pub distance: f64,
}

/// Encoder-mean latent path of every trajectory.
pub fn latent_paths(params: &ModelParams, data: &[Trajectory]) -> Result<Vec<Vec<Vec<f64>>>> {
    data.iter()
        .map(|t| t.obs.iter().map(|o| Ok(params.encode(o)?.mean().to_vec())).collect())
        .collect()
}

/// Latent-path deviation of mean-mode rollouts under each noise level,
/// measured against the nearest training path in each variant's own latent
/// space.
pub fn frechet_noise_sweep(
    variants: &[(String, &ModelParams)],
    data: &[Trajectory],
    spec: &HybridTaskSpec,
    levels: &[NoiseLevel],
    episodes: usize,
    seed: u64,
) -> Result<Vec<FrechetRow>> {
    if episodes == 0 {
        return Err(Error::contract("episodes must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::contract("no reference trajectories"));
    }
    if let Some((_, first)) = variants.first() {
        if variants.iter().any(|(_, p)| p.config.latent_dim != first.config.latent_dim) {
            return Err(Error::config("variants must share the latent dimension"));
        }
    }
    if levels.iter().any(|l| !l.scale.is_finite() || l.scale < 0.0) {
        return Err(Error::contract("noise levels must be finite and nonnegative"));
    }
    let train_std = crate::simenv::observation_std(data)?;
    let mut rows = Vec::with_capacity(variants.len() * levels.len());
    for (name, params) in variants {
        check_compatible(*params, spec)?;
        let reference = latent_paths(params, data)?;
        for level in levels {
            let mut opts = RolloutOptions::new(RolloutMode::Mean);
            match level.kind {
                NoiseKind::Obs => {
                    opts.obs_noise_scale = level.scale;
                    opts.obs_std = Some(train_std.clone());
                }
                NoiseKind::Process => opts.process_noise = level.scale,
            }
            let distances = run_episodes(*params, spec, &opts, episodes, seed)
                .into_par_iter()
                .map(|r| {
                    let r = r?;
                    reference
                        .iter()
                        .map(|path| frechet_distance(&r.latents, path))
                        .try_fold(f64::INFINITY, |best, d| d.map(|d| best.min(d)))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(FrechetRow {
                variant: name.clone(),
                noise_kind: level.kind,
                scale: level.scale,
                distance: distances.iter().sum::<f64>() / episodes as f64,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dense, ModelConfig};
    use crate::numcore::Matrix;
    use crate::simenv::generate_dataset;
    use approx::assert_abs_diff_eq;

    /// Identity encoder and one skill steering straight to the final goal.
    fn direct_model(spec: &HybridTaskSpec) -> ModelParams {
        let cfg = ModelConfig::new(2, 2, 2, 1).with_hidden(4);
        let mut p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.encoder.layers = vec![Dense {
            weight: Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap(),
            bias: Matrix::zeros(1, 4),
        }];
        p.goals = Matrix::row_vector(spec.final_goal());
        p.gains = Matrix::identity(2).scale(0.5);
        p
    }

    #[test]
    fn auc_examples() {
        let c = RobustnessCurve::new(vec![0.0, 0.5, 1.0], vec![1.0, 0.8, 0.6]).unwrap();
        assert_abs_diff_eq!(c.auc, 0.8, epsilon = 1e-15);
        let c = RobustnessCurve::new(DEFAULT_NOISE_SCALES.to_vec(), vec![0.7; 8]).unwrap();
        assert_abs_diff_eq!(c.auc, 0.7, epsilon = 1e-15);
        assert_eq!(RobustnessCurve::new(vec![0.3], vec![0.4]).unwrap().auc, 0.4);
        assert!(RobustnessCurve::new(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(RobustnessCurve::new(vec![0.5, 0.1], vec![1.0, 1.0]).is_err());
        assert!(RobustnessCurve::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(RobustnessCurve::new(vec![0.0], vec![1.5]).is_err());
    }

    #[test]
    fn robustness_curve_degrades_with_noise() {
        let spec = HybridTaskSpec::smoke();
        let p = direct_model(&spec);
        let c = robustness_curve(&p, &spec, &[0.0, 3.0, 30.0], 20, 7, &[1.0, 1.0]).unwrap();
        assert_eq!(c.success_rates[0], 1.0);
        assert!(c.success_rates[2] < 0.5, "{:?}", c.success_rates);
        let again = robustness_curve(&p, &spec, &[0.0, 3.0, 30.0], 20, 7, &[1.0, 1.0]).unwrap();
        assert_eq!(c, again);
        assert!(robustness_curve(&p, &spec, &[0.0], 0, 7, &[1.0, 1.0]).is_err());
        assert!(robustness_curve(&p, &spec, &[0.0], 1, 7, &[1.0]).is_err());
    }

    #[test]
    fn frechet_sweep_grows_with_noise() {
        let spec = HybridTaskSpec::smoke();
        let data = generate_dataset(&spec, 20, 1).unwrap();
        let p = direct_model(&spec);
        let levels: Vec<NoiseLevel> = [0.0, 0.05, 1.0]
            .iter()
            .map(|&scale| NoiseLevel {
                kind: NoiseKind::Process,
                scale,
            })
            .collect();
        let rows = frechet_noise_sweep(&[("direct".into(), &p)], &data, &spec, &levels, 30, 3).unwrap();
        assert_eq!(rows.len(), levels.len());
        assert!(rows.iter().all(|r| r.distance >= 0.0));
        assert!(rows[0].distance <= rows[2].distance, "{rows:?}");
    }
}
