//! The full evaluation of one model and its CSV renderings.

use serde::{Deserialize, Serialize};

use super::sweep::run_episodes;
use super::{
    frechet_noise_sweep, robustness_curve, skill_stats, stability_report, FrechetRow, NoiseKind, NoiseLevel,
    RobustnessCurve, SkillStats, StabilityReport, Transition, DEFAULT_NOISE_SCALES,
};
use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::model::ModelParams;
use crate::simenv::{observation_std, HybridTaskSpec, RolloutMode, RolloutOptions, RolloutResult, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub noise_scales: Vec<f64>,
    pub episodes: usize,
    pub seed: u64,
    pub frechet_levels: Vec<NoiseLevel>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        let level = |kind, scale| NoiseLevel { kind, scale };
        EvalProtocol {
            noise_scales: DEFAULT_NOISE_SCALES.to_vec(),
            episodes: 100,
            seed: 0,
            frechet_levels: vec![
                level(NoiseKind::Obs, 0.0),
                level(NoiseKind::Obs, 0.5),
                level(NoiseKind::Obs, 1.0),
                level(NoiseKind::Process, 0.05),
                level(NoiseKind::Process, 0.1),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Noise-free mean-mode success rate.
    pub success_rate: f64,
    pub curve: RobustnessCurve,
    /// Skill usage of the noise-free rollouts.
    pub skills: SkillStats,
    pub stability: StabilityReport,
    pub frechet: Vec<FrechetRow>,
}

impl EvalReport {
    /// Runs every metric. `data` supplies the observation std and the
    /// reference latent paths.
    pub fn evaluate(
        params: &ModelParams,
        spec: &HybridTaskSpec,
        data: &[Trajectory],
        protocol: &EvalProtocol,
    ) -> Result<Self> {
        if protocol.episodes == 0 {
            return Err(Error::config("episodes must be at least 1"));
        }
        let train_std = observation_std(data)?;
        let curve = robustness_curve(
            params,
            spec,
            &protocol.noise_scales,
            protocol.episodes,
            protocol.seed,
            &train_std,
        )?;
        let clean: Vec<RolloutResult> = run_episodes(
            params,
            spec,
            &RolloutOptions::new(RolloutMode::Mean),
            protocol.episodes,
            protocol.seed,
        )
        .into_iter()
        .collect::<Result<_>>()?;
        let success_rate = super::success_rate(&clean)?;
        let sequences: Vec<Vec<usize>> = clean.iter().filter(|r| !r.skills.is_empty()).map(|r| r.skills.clone()).collect();
        let skills = if sequences.is_empty() {
            SkillStats {
                num_used_skills: 0,
                avg_skill_duration: f64::NAN,
                avg_transition_fraction: f64::NAN,
            }
        } else {
            skill_stats(&sequences, params.config.num_skills)?
        };
        let stability = stability_report(&transitions(&clean), &gain_bank(params))?;
        let frechet = frechet_noise_sweep(
            &[(params.config.variant()?.name().to_string(), params)],
            data,
            spec,
            &protocol.frechet_levels,
            protocol.episodes,
            protocol.seed,
        )?;
        Ok(EvalReport {
            success_rate,
            curve,
            skills,
            stability,
            frechet,
        })
    }
}

fn gain_bank(params: &ModelParams) -> Vec<crate::numcore::Matrix> {
    (0..params.config.num_skills).map(|c| params.gain(c).expect("skill in range")).collect()
}

/// Consecutive latent pairs of rollouts, labelled by the skill acting at
/// the first of the two steps.
fn transitions(runs: &[RolloutResult]) -> Vec<Transition> {
    runs.iter()
        .flat_map(|r| {
            (1..r.latents.len()).map(move |t| Transition {
                z: r.latents[t - 1].clone(),
                u: r.trajectory.actions[t - 1].clone(),
                z_next: r.latents[t].clone(),
                skill: r.skills[t - 1],
            })
        })
        .collect()
}

/// `scale,rate` per noise level.
pub fn curve_csv(curve: &RobustnessCurve) -> String {
    let mut s = String::from("scale,rate\n");
    for (x, r) in curve.noise_scales.iter().zip(&curve.success_rates) {
        s.push_str(&format!("{},{}\n", sig9(*x), sig9(*r)));
    }
    s
}

pub fn skills_csv(stats: &SkillStats) -> String {
    format!(
        "num_used_skills,avg_skill_duration,avg_transition_fraction\n{},{},{}\n",
        stats.num_used_skills,
        sig9(stats.avg_skill_duration),
        sig9(stats.avg_transition_fraction)
    )
}

/// One row per closed-loop eigenvalue of every fitted skill.
pub fn stability_csv(report: &StabilityReport) -> String {
    let mut s = String::from("skill,eig_re,eig_im,radius\n");
    for sk in &report.skills {
        if let Some(fit) = &sk.fit {
            for e in &fit.eigenvalues {
                s.push_str(&format!("{},{},{},{}\n", sk.skill, sig9(e.re), sig9(e.im), sig9(fit.spectral_radius)));
            }
        }
    }
    s
}

pub fn frechet_csv(rows: &[FrechetRow]) -> String {
    let mut s = String::from("variant,noise_kind,scale,distance\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.variant, r.noise_kind.name(), sig9(r.scale), sig9(r.distance)));
    }
    s
}

pub fn summary_csv(report: &EvalReport) -> String {
    format!(
        "metric,value\nsuccess_rate,{}\nauc,{}\n",
        sig9(report.success_rate),
        sig9(report.curve.auc)
    )
}
