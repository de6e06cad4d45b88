//! Evaluation metrics over rollouts, skill sequences and latent paths.

mod report;
mod stability;
mod sweep;

pub use report::{curve_csv, frechet_csv, skills_csv, stability_csv, summary_csv, EvalProtocol, EvalReport};
pub use stability::{stability_report, SkillStability, StabilityFit, StabilityReport, Transition};
pub use sweep::{
    frechet_noise_sweep, latent_paths, robustness_curve, run_episodes, FrechetRow, NoiseKind, NoiseLevel, RobustnessCurve,
    DEFAULT_NOISE_SCALES,
};

use pathfinding::kuhn_munkres::kuhn_munkres;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::simenv::{RolloutResult, Trajectory};

/// Fraction of successful runs.
pub fn success_rate(results: &[RolloutResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::contract("success rate of zero rollouts"));
    }
    Ok(results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillStats {
    pub num_used_skills: usize,
    /// Mean over sequences of the mean run length as a fraction of the
    /// sequence length.
    pub avg_skill_duration: f64,
    pub avg_transition_fraction: f64,
}

/// Run-length statistics of 1-based skill sequences drawn from `c` skills.
pub fn skill_stats(sequences: &[Vec<usize>], c: usize) -> Result<SkillStats> {
    if sequences.is_empty() {
        return Err(Error::contract("skill statistics of zero sequences"));
    }
    let mut used = vec![false; c];
    let mut total = 0.0;
    for seq in sequences {
        if seq.is_empty() {
            return Err(Error::contract("empty skill sequence"));
        }
        for &s in seq {
            if s == 0 || s > c {
                return Err(Error::contract(format!("skill {s} outside 1..={c}")));
            }
            used[s - 1] = true;
        }
        let runs = 1 + seq.windows(2).filter(|w| w[0] != w[1]).count();
        // Mean of run_length / T over runs is (T / runs) / T.
        total += 1.0 / runs as f64;
    }
    let duration = total / sequences.len() as f64;
    Ok(SkillStats {
        num_used_skills: used.iter().filter(|u| **u).count(),
        avg_skill_duration: duration,
        avg_transition_fraction: 1.0 - duration,
    })
}

/// `c x k` co-occurrence counts of 1-based predicted and true labels.
pub fn cooccurrence(predicted: &[usize], truth: &[usize], c: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predicted labels for {} true labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut m = vec![vec![0usize; k]; c];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p == 0 || p > c || t == 0 || t > k {
            return Err(Error::contract(format!("label pair ({p}, {t}) outside 1..={c} x 1..={k}")));
        }
        m[p - 1][t - 1] += 1;
    }
    Ok(m)
}

/// Agreement of two 1-based labelings under the best one-to-one matching
/// of predicted labels (`1..=c`) to true labels (`1..=k`).
pub fn segmentation_accuracy(predicted: &[usize], truth: &[usize], c: usize, k: usize) -> Result<f64> {
    let counts = cooccurrence(predicted, truth, c, k)?;
    if predicted.is_empty() {
        return Err(Error::contract("segmentation accuracy of an empty sequence"));
    }
    // The solver wants no more rows than columns.
    let rows: Vec<Vec<i64>> = if c <= k {
        counts.iter().map(|r| r.iter().map(|&x| x as i64).collect()).collect()
    } else {
        (0..k).map(|j| counts.iter().map(|r| r[j] as i64).collect()).collect()
    };
    let weights = pathfinding::matrix::Matrix::from_rows(rows).map_err(|e| Error::shape(e.to_string()))?;
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / predicted.len() as f64)
}

/// 1-based skill of every step: the posterior argmax at the encoder mean.
pub fn segment(params: &ModelParams, traj: &Trajectory) -> Result<Vec<usize>> {
    traj.obs
        .iter()
        .zip(&traj.actions)
        .map(|(o, u)| {
            let z = params.encode(o)?;
            Ok(params.posterior_skill(z.mean(), u)?.argmax() + 1)
        })
        .collect()
}

/// Matched accuracy over all steps of a labelled dataset, with one
/// matching shared by every trajectory. `None` if any label is missing.
pub fn dataset_segmentation_accuracy(params: &ModelParams, data: &[Trajectory]) -> Result<Option<f64>> {
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    for t in data {
        let Some(labels) = &t.skills else {
            return Ok(None);
        };
        predicted.extend(segment(params, t)?);
        truth.extend_from_slice(labels);
    }
    let k = truth.iter().copied().max().unwrap_or(1);
    segmentation_accuracy(&predicted, &truth, params.config.num_skills, k).map(Some)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Discrete Fréchet distance with the Euclidean ground metric.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("Fréchet distance of an empty path"));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != dim) {
        return Err(Error::shape("path points differ in dimension"));
    }
    let m = b.len();
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for (i, p) in a.iter().enumerate() {
        for j in 0..m {
            let d = euclid(p, &b[j]);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => cur[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                _ => prev[j].min(prev[j - 1]).min(cur[j - 1]).max(d),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}
