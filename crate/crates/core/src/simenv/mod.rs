//! Synthetic point-mass tasks with known skills.
//!
//! A demonstration visits a fixed sequence of goals. While skill `i` is
//! active the expert applies `u = G_i (goal_i - x) + noise` and the state
//! moves by `x' = x + u`. The expert switches to the next skill once the
//! state is within `switch_radius` of the current goal, which gives
//! ground-truth segment labels for every step.

mod dataset;
mod rollout;

pub use dataset::{generate_dataset, observation_std, read_jsonl, stack_pairs, write_jsonl, Trajectory};
pub use rollout::{
    add_observation_noise, rollout, rollout_with, Policy, PolicyStep, RolloutMode, RolloutOptions, RolloutResult,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{eigvals, spectral_radius, Matrix};

/// How the true state is shown to the learner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObsMap {
    Identity,
    /// `o_i = tanh(gain * x_i)`, strictly increasing in every coordinate.
    TanhWarp { gain: f64 },
}

impl ObsMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match *self {
            ObsMap::Identity => x.to_vec(),
            ObsMap::TanhWarp { gain } => x.iter().map(|v| (gain * v).tanh()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridTaskSpec {
    pub name: String,
    pub state_dim: usize,
    /// One goal per true skill, visited in order.
    pub goals: Vec<Vec<f64>>,
    /// One `state_dim x state_dim` gain per true skill, as rows.
    pub gains: Vec<Vec<Vec<f64>>>,
    pub switch_radius: f64,
    pub success_radius: f64,
    /// Standard deviation of the expert's action noise.
    pub process_noise: f64,
    pub obs_map: ObsMap,
    /// Number of most recent observations concatenated into one input.
    pub history: usize,
    pub horizon: usize,
    /// Starts are uniform in the box `start_center ± start_half_width`.
    pub start_center: Vec<f64>,
    pub start_half_width: f64,
}

impl HybridTaskSpec {
    /// Three skills in the plane with identity observations: up, right,
    /// then down and to the left.
    ///
    /// No two segments are parallel, so no single affine law fits two
    /// skills' data. Segments are short enough that the switch radius is a
    /// tenth of their length, which keeps the switch region resolvable.
    pub fn smoke() -> Self {
        HybridTaskSpec {
            name: "smoke".into(),
            state_dim: 2,
            goals: vec![vec![-0.25, 0.25], vec![0.25, 0.25], vec![0.0, -0.25]],
            gains: vec![
                vec![vec![0.5, 0.0], vec![0.0, 0.5]],
                vec![vec![0.5, 0.05], vec![-0.05, 0.5]],
                vec![vec![0.5, 0.0], vec![0.0, 0.5]],
            ],
            switch_radius: 0.05,
            success_radius: 0.1,
            process_noise: 0.01,
            obs_map: ObsMap::Identity,
            history: 1,
            horizon: 60,
            start_center: vec![-0.25, -0.25],
            start_half_width: 0.075,
        }
    }

    /// Four pen strokes tracing an "M", seen through a tanh warp with a
    /// short observation history.
    pub fn writing() -> Self {
        HybridTaskSpec {
            name: "writing".into(),
            state_dim: 2,
            goals: vec![
                vec![-0.6, 1.0],
                vec![0.0, 0.0],
                vec![0.6, 1.0],
                vec![1.0, -1.0],
            ],
            gains: vec![
                vec![vec![0.4, 0.0], vec![0.0, 0.4]],
                vec![vec![0.35, 0.0], vec![0.0, 0.35]],
                vec![vec![0.35, 0.0], vec![0.0, 0.35]],
                vec![vec![0.4, 0.0], vec![0.0, 0.4]],
            ],
            switch_radius: 0.05,
            success_radius: 0.1,
            process_noise: 0.01,
            obs_map: ObsMap::TanhWarp { gain: 0.8 },
            history: 4,
            horizon: 80,
            start_center: vec![-1.0, -1.0],
            start_half_width: 0.2,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "smoke" => Ok(Self::smoke()),
            "writing" => Ok(Self::writing()),
            other => Err(Error::config(format!("unknown task preset {other:?} (expected smoke or writing)"))),
        }
    }

    pub fn num_skills(&self) -> usize {
        self.goals.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.state_dim * self.history
    }

    pub fn action_dim(&self) -> usize {
        self.state_dim
    }

    pub fn gain(&self, i: usize) -> Matrix {
        Matrix::from_rows(&self.gains[i]).expect("validated gain")
    }

    pub fn final_goal(&self) -> &[f64] {
        self.goals.last().expect("validated goals")
    }

    /// Rejects specs whose expert would not converge to each goal.
    pub fn validate(&self) -> Result<()> {
        let d = self.state_dim;
        if d == 0 {
            return Err(Error::config("state_dim must be at least 1"));
        }
        if self.goals.is_empty() {
            return Err(Error::config("a task needs at least one goal"));
        }
        if self.gains.len() != self.goals.len() {
            return Err(Error::config("one gain per goal is required"));
        }
        if self.goals.iter().any(|g| g.len() != d) || self.start_center.len() != d {
            return Err(Error::config(format!("goals and start_center must have length {d}")));
        }
        if self.history == 0 {
            return Err(Error::config("history must be at least 1"));
        }
        for (name, v) in [
            ("switch_radius", self.switch_radius),
            ("success_radius", self.success_radius),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.process_noise >= 0.0) || !(self.start_half_width >= 0.0) {
            return Err(Error::config("process_noise and start_half_width must be nonnegative"));
        }
        if let ObsMap::TanhWarp { gain } = self.obs_map {
            if !(gain > 0.0) || !gain.is_finite() {
                return Err(Error::config("tanh warp gain must be positive"));
            }
        }
        for (i, g) in self.gains.iter().enumerate() {
            if g.len() != d || g.iter().any(|r| r.len() != d) {
                return Err(Error::config(format!("gain {} must be {d}x{d}", i + 1)));
            }
            let k = self.gain(i);
            if !k.is_finite() {
                return Err(Error::config(format!("gain {} is not finite", i + 1)));
            }
            let closed = Matrix::identity(d).zip_map(&k, |a, b| a - b);
            let rho = spectral_radius(&eigvals(&closed)?);
            if !(rho < 1.0) {
                return Err(Error::config(format!(
                    "skill {} does not converge: spectral radius of I - G is {rho}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Point-mass step `x' = x + u`, returning the new state and its
/// observation.
pub fn env_step(x: &[f64], u: &[f64], spec: &HybridTaskSpec) -> (Vec<f64>, Vec<f64>) {
    let next: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + b).collect();
    let obs = spec.obs_map.apply(&next);
    (next, obs)
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Concatenation of the last `history` frames, oldest first, padding the
/// start with copies of the first frame.
pub(crate) fn stacked(frames: &[Vec<f64>], t: usize, history: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames[0].len() * history);
    for back in (0..history).rev() {
        out.extend_from_slice(&frames[t.saturating_sub(back)]);
    }
    out
}
