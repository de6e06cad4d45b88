use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{distance, env_step, stacked, HybridTaskSpec};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// One demonstration. Skill labels are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    #[serde(default)]
    pub task_id: String,
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skills: Option<Vec<usize>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.actions.len() != self.obs.len() {
            return Err(Error::Parse(format!(
                "trajectory {:?}: {} observations but {} actions",
                self.task_id,
                self.obs.len(),
                self.actions.len()
            )));
        }
        if let Some(s) = &self.skills {
            if s.len() != self.obs.len() {
                return Err(Error::Parse(format!("trajectory {:?}: label count differs from length", self.task_id)));
            }
            if s.contains(&0) {
                return Err(Error::Parse(format!("trajectory {:?}: skill labels start at 1", self.task_id)));
            }
        }
        let finite = |rows: &[Vec<f64>]| rows.iter().flatten().all(|v| v.is_finite());
        if !finite(&self.obs) || !finite(&self.actions) {
            return Err(Error::NonFinite(format!("trajectory {:?}", self.task_id)));
        }
        Ok(())
    }
}

/// Runs the expert from `x0`. Returns the demonstration and the visited
/// states (one per recorded step, plus the final state).
pub fn demonstrate<R: Rng + ?Sized>(
    spec: &HybridTaskSpec,
    x0: &[f64],
    rng: &mut R,
    task_id: String,
) -> (Trajectory, Vec<Vec<f64>>) {
    let noise = Normal::new(0.0, spec.process_noise).expect("validated noise");
    let k = spec.num_skills();
    let mut x = x0.to_vec();
    let mut frames = vec![spec.obs_map.apply(&x)];
    let mut states = vec![x.clone()];
    let (mut obs, mut actions, mut skills) = (Vec::new(), Vec::new(), Vec::new());
    let mut skill = 0;
    for t in 0..spec.horizon {
        let err: Vec<f64> = spec.goals[skill].iter().zip(&x).map(|(g, v)| g - v).collect();
        let mut u = spec.gain(skill).matvec(&err);
        if spec.process_noise > 0.0 {
            u.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        obs.push(stacked(&frames, t, spec.history));
        actions.push(u.clone());
        skills.push(skill + 1);
        let (next, o) = env_step(&x, &u, spec);
        x = next;
        frames.push(o);
        states.push(x.clone());
        while skill < k && distance(&x, &spec.goals[skill]) < spec.switch_radius {
            skill += 1;
        }
        if skill == k {
            break;
        }
    }
    (
        Trajectory {
            task_id,
            obs,
            actions,
            skills: Some(skills),
        },
        states,
    )
}

pub(crate) fn sample_start<R: Rng + ?Sized>(spec: &HybridTaskSpec, rng: &mut R) -> Vec<f64> {
    let hw = spec.start_half_width;
    spec.start_center
        .iter()
        .map(|c| if hw > 0.0 { c + rng.random_range(-hw..hw) } else { *c })
        .collect()
}

/// `n_demos` demonstrations; demo `i` draws from stream `i` of the seed,
/// so the output does not depend on thread scheduling.
pub fn generate_dataset(spec: &HybridTaskSpec, n_demos: usize, seed: u64) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    if n_demos == 0 {
        return Err(Error::contract("n_demos must be at least 1"));
    }
    Ok((0..n_demos)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let x0 = sample_start(spec, &mut rng);
            demonstrate(spec, &x0, &mut rng, format!("{}-{i:05}", spec.name)).0
        })
        .collect())
}

/// All `(o, u)` pairs of a dataset as row-aligned matrices.
pub fn stack_pairs(data: &[Trajectory]) -> Result<(Matrix, Matrix)> {
    let first = data
        .iter()
        .find(|t| !t.is_empty())
        .ok_or_else(|| Error::contract("dataset has no steps"))?;
    let (o_dim, a_dim) = (first.obs[0].len(), first.actions[0].len());
    let mut obs = Vec::new();
    let mut act = Vec::new();
    for t in data {
        t.validate()?;
        for (o, a) in t.obs.iter().zip(&t.actions) {
            if o.len() != o_dim || a.len() != a_dim {
                return Err(Error::shape(format!(
                    "trajectory {:?} mixes widths ({}, {}) with ({o_dim}, {a_dim})",
                    t.task_id,
                    o.len(),
                    a.len()
                )));
            }
            obs.extend_from_slice(o);
            act.extend_from_slice(a);
        }
    }
    let n = obs.len() / o_dim;
    Ok((Matrix::from_vec(n, o_dim, obs)?, Matrix::from_vec(n, a_dim, act)?))
}

/// Per-coordinate standard deviation of observations pooled over all
/// trajectories and time steps.
pub fn observation_std(data: &[Trajectory]) -> Result<Vec<f64>> {
    let (obs, _) = stack_pairs(data)?;
    let n = obs.rows() as f64;
    Ok((0..obs.cols())
        .map(|j| {
            let mean = (0..obs.rows()).map(|r| obs[(r, j)]).sum::<f64>() / n;
            ((0..obs.rows()).map(|r| (obs[(r, j)] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect())
}

pub fn write_jsonl(path: impl AsRef<Path>, data: &[Trajectory]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in data {
        let line = serde_json::to_string(t).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn line_spec() -> HybridTaskSpec {
        HybridTaskSpec {
            name: "line".into(),
            state_dim: 2,
            goals: vec![vec![1.0, 0.0]],
            gains: vec![vec![vec![0.5, 0.0], vec![0.0, 0.5]]],
            switch_radius: 1e-3,
            success_radius: 0.01,
            process_noise: 0.0,
            obs_map: super::super::ObsMap::Identity,
            history: 1,
            horizon: 5,
            start_center: vec![0.0, 0.0],
            start_half_width: 0.0,
        }
    }

    #[test]
    fn geometric_approach() {
        let spec = line_spec();
        let (_, states) = demonstrate(&spec, &[0.0, 0.0], &mut ChaCha8Rng::seed_from_u64(0), "t".into());
        assert_eq!(states[1], vec![0.5, 0.0]);
        assert_eq!(states[2], vec![0.75, 0.0]);
    }

    #[test]
    fn immediate_switch_lasts_one_step() {
        let mut spec = HybridTaskSpec::smoke();
        spec.process_noise = 0.0;
        spec.switch_radius = 0.5;
        let x0 = [-1.0, 0.7];
        let (t, _) = demonstrate(&spec, &x0, &mut ChaCha8Rng::seed_from_u64(0), "t".into());
        let labels = t.skills.unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 1);
    }

    #[test]
    fn labels_nondecreasing_and_distances_shrink() {
        let mut spec = HybridTaskSpec::smoke();
        spec.process_noise = 0.0;
        let data = generate_dataset(&spec, 20, 3).unwrap();
        for t in &data {
            let labels = t.skills.as_ref().unwrap();
            assert!(labels.windows(2).all(|w| w[0] <= w[1]));
            assert!(labels.iter().all(|&l| (1..=3).contains(&l)));
            for (w, l) in t.obs.windows(2).zip(labels.windows(2)) {
                if l[0] == l[1] {
                    let g = &spec.goals[l[0] - 1];
                    assert!(super::super::distance(&w[1], g) <= super::super::distance(&w[0], g));
                }
            }
        }
    }

    #[test]
    fn smoke_demos_reach_final_goal() {
        let spec = HybridTaskSpec::smoke();
        let data = generate_dataset(&spec, 50, 1).unwrap();
        let mean_len = data.iter().map(|t| t.len()).sum::<usize>() as f64 / 50.0;
        assert!(mean_len > 8.0 && mean_len < spec.horizon as f64, "mean length {mean_len}");
        for t in &data {
            assert!(t.len() < spec.horizon, "demo hit the horizon");
            assert_eq!(*t.skills.as_ref().unwrap().last().unwrap(), 3);
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = HybridTaskSpec::writing();
        let a = generate_dataset(&spec, 8, 42).unwrap();
        let b = generate_dataset(&spec, 8, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].obs[0].len(), spec.obs_dim());
        assert_ne!(a, generate_dataset(&spec, 8, 43).unwrap());
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let data = generate_dataset(&HybridTaskSpec::smoke(), 5, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&path, &data).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), data);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn read_rejects_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"obs\": [[1.0]], \"actions\": []}\n").unwrap();
        assert!(read_jsonl(&path).is_err());
        std::fs::write(&path, "{\"obs\": [[1.0]], \"actions\": [[1.0]], \"extra\": 1}\n").unwrap();
        assert!(matches!(read_jsonl(&path), Err(Error::Parse(_))));
    }

    #[test]
    fn pooled_std() {
        let t = Trajectory {
            task_id: String::new(),
            obs: vec![vec![0.0, 1.0], vec![2.0, 1.0]],
            actions: vec![vec![0.0], vec![0.0]],
            skills: None,
        };
        let s = observation_std(&[t]).unwrap();
        assert_abs_diff_eq!(s[0], 1.0);
        assert_eq!(s[1], 0.0);
    }
}
