//! Minibatch Adam training with exact resume.
//!
//! Randomness is derived from the run seed only: parameter initialization
//! uses stream 0 of `ChaCha8Rng::seed_from_u64(seed)` and epoch `e`
//! (0-based) uses stream `e + 1`, for both the shuffle and the
//! reparameterization noise. Resuming therefore needs the parameters, the
//! Adam moments and the number of completed epochs, nothing else.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elbo::{loss_and_grad, ElboBreakdown, LossWeights};
use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::model::checkpoint::{restore_tensors, TensorMap, TensorRecord, TrainState};
use crate::model::{ModelConfig, ModelParams, ParamTree};
use crate::numcore::{standard_normal, Matrix};
use crate::simenv::{stack_pairs, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Save every this many epochs; 0 saves only at the end.
    pub checkpoint_interval: usize,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 256,
            epochs: 2000,
            seed: 0,
            checkpoint_interval: 0,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::config("adam_eps must be positive and clip_norm nonnegative"));
        }
        Ok(())
    }

    /// Generator for parameter initialization.
    pub fn init_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Generator for 0-based epoch `epoch`.
    pub fn epoch_rng(&self, epoch: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch + 1);
        rng
    }
}

/// First and second moment estimates, one per tensor in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new<P: ParamTree + ?Sized>(params: &P) -> Self {
        let zeros: Vec<Matrix> = params.flatten().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn to_maps<P: ParamTree + ?Sized>(&self, params: &P) -> (TensorMap, TensorMap) {
        let names = params.names();
        let map = |ts: &[Matrix]| {
            names
                .iter()
                .zip(ts)
                .map(|(n, t)| (n.clone(), TensorRecord::from_matrix(t)))
                .collect::<TensorMap>()
        };
        (map(&self.m), map(&self.v))
    }

    pub fn to_train_state<P: ParamTree + ?Sized>(&self, params: &P, seed: u64, epochs_done: u64) -> TrainState {
        let (adam_m, adam_v) = self.to_maps(params);
        TrainState {
            adam_step: self.step,
            adam_m,
            adam_v,
            seed,
            epoch: epochs_done,
        }
    }

    /// Rebuilds the moments for `params` from a saved state.
    pub fn from_train_state<P: ParamTree + Clone>(params: &P, state: &TrainState) -> Result<Self> {
        let mut holder = params.clone();
        restore_tensors(&mut holder, &state.adam_m)?;
        let m = holder.flatten();
        restore_tensors(&mut holder, &state.adam_v)?;
        let v = holder.flatten();
        Ok(AdamState {
            step: state.adam_step,
            m,
            v,
        })
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort before any
/// tensor is touched; the error names the offending tensor.
pub fn adam_step<P: ParamTree + ?Sized>(
    params: &mut P,
    grads: &[Matrix],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let names = params.names();
    if grads.len() != names.len() || state.m.len() != names.len() {
        return Err(Error::shape(format!(
            "{} gradients and {} moment tensors for {} parameters",
            grads.len(),
            state.m.len(),
            names.len()
        )));
    }
    for (name, g) in names.iter().zip(grads) {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let mut i = 0;
    let mut bad = None;
    params.visit_mut(&mut |name, p| {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for (((pk, mk), vk), gk) in p
            .as_mut_slice()
            .iter_mut()
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
            .zip(g.as_slice())
        {
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * gk;
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = *mk / bc1;
            let v_hat = *vk / bc2;
            *pk -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
        if bad.is_none() && !p.is_finite() {
            bad = Some(name.to_string());
        }
        i += 1;
    });
    match bad {
        Some(name) => Err(Error::NonFinite(format!("parameter {name} after update"))),
        None => Ok(()),
    }
}

/// Rescales `grads` in place so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.as_slice().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.as_mut_slice().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// A trainable loss over `(o, u)` minibatches.
pub trait Objective {
    type Params: ParamTree + Clone;

    /// Loss, term breakdown for logging, and gradients in visit order.
    fn evaluate(
        &self,
        params: &Self::Params,
        obs: &Matrix,
        act: &Matrix,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, ElboBreakdown, Vec<Matrix>)>;

    /// Applied after every update.
    fn project(&self, _params: &mut Self::Params) {}
}

/// The weighted bound of [`crate::elbo`] with one noise draw per pair.
pub struct ElboObjective {
    pub weights: LossWeights,
}

impl Objective for ElboObjective {
    type Params = ModelParams;

    fn evaluate(
        &self,
        params: &ModelParams,
        obs: &Matrix,
        act: &Matrix,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, ElboBreakdown, Vec<Matrix>)> {
        let noise = standard_normal(obs.rows(), params.config.latent_dim, rng);
        loss_and_grad(obs, act, &noise, params, &self.weights)
    }

    fn project(&self, params: &mut ModelParams) {
        params.project();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: u64,
    /// Pair-weighted mean of the terms over the epoch.
    pub breakdown: ElboBreakdown,
    pub loss: f64,
    pub wall_seconds: f64,
    pub param_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Columns `epoch,recon_obs,recon_act,kl_z,kl_switch,total`. Timing is
    /// left out so identical runs give identical files.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,recon_obs,recon_act,kl_z,kl_switch,total\n");
        for r in &self.epochs {
            let b = &r.breakdown;
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                sig9(b.recon_obs),
                sig9(b.recon_act),
                sig9(b.kl_z),
                sig9(b.kl_switch),
                sig9(b.total)
            ));
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.loss).collect()
    }
}

/// Where a run starts and what it reports along the way.
/// Receives the parameters, optimizer state and completed epoch count.
pub type CheckpointHook<'a, P> = &'a mut dyn FnMut(&P, &AdamState, u64) -> Result<()>;

pub struct FitSession<'a, P> {
    pub params: P,
    pub adam: AdamState,
    /// Completed epochs before this session.
    pub epochs_done: u64,
    /// Called with the state after every `checkpoint_interval` epochs and
    /// once at the end.
    pub on_checkpoint: Option<CheckpointHook<'a, P>>,
}

impl<P: ParamTree> FitSession<'_, P> {
    pub fn fresh(params: P) -> Self {
        let adam = AdamState::new(&params);
        FitSession {
            params,
            adam,
            epochs_done: 0,
            on_checkpoint: None,
        }
    }
}

/// Runs epochs `epochs_done..cfg.epochs` of shuffled minibatch training.
pub fn run<O: Objective>(
    objective: &O,
    mut session: FitSession<'_, O::Params>,
    obs: &Matrix,
    act: &Matrix,
    cfg: &TrainConfig,
) -> Result<(O::Params, AdamState, TrainLog)> {
    cfg.validate()?;
    if obs.rows() == 0 || obs.rows() != act.rows() {
        return Err(Error::contract("training needs a nonempty, row-aligned dataset"));
    }
    let n = obs.rows();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    let started = Instant::now();
    for epoch in session.epochs_done..cfg.epochs as u64 {
        let mut rng = cfg.epoch_rng(epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        for chunk in order.chunks(cfg.batch_size) {
            let ob = gather(obs, chunk);
            let ac = gather(act, chunk);
            let (loss, b, mut grads) = objective.evaluate(&session.params, &ob, &ac, &mut rng)?;
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam_step(&mut session.params, &grads, &mut session.adam, cfg)?;
            objective.project(&mut session.params);
            let w = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip([b.recon_obs, b.recon_act, b.kl_z, b.kl_switch, loss]) {
                *s += w * v;
            }
        }
        let nf = n as f64;
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            breakdown: ElboBreakdown::new(sums[0] / nf, sums[1] / nf, sums[2] / nf, sums[3] / nf),
            loss: sums[4] / nf,
            wall_seconds: started.elapsed().as_secs_f64(),
            param_norm: session.params.l2_norm(),
        });
        let done = epoch + 1;
        let due = cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval as u64 == 0;
        if due && done < cfg.epochs as u64 {
            if let Some(cb) = session.on_checkpoint.as_mut() {
                cb(&session.params, &session.adam, done)?;
            }
        }
    }
    let done = (cfg.epochs as u64).max(session.epochs_done);
    if let Some(cb) = session.on_checkpoint.as_mut() {
        cb(&session.params, &session.adam, done)?;
    }
    Ok((session.params, session.adam, log))
}

fn gather(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(rows.len() * m.cols());
    for &r in rows {
        data.extend_from_slice(m.row(r));
    }
    Matrix::from_vec(rows.len(), m.cols(), data).expect("gathered rows")
}

/// Checks that a dataset fits a model before any training starts.
pub fn check_dataset(data: &[Trajectory], cfg: &ModelConfig) -> Result<(Matrix, Matrix)> {
    if data.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    let (obs, act) = stack_pairs(data).map_err(|e| Error::config(format!("dataset: {e}")))?;
    if obs.cols() != cfg.obs_dim || act.cols() != cfg.action_dim {
        return Err(Error::config(format!(
            "dataset has O={} A={}, model expects O={} A={}",
            obs.cols(),
            act.cols(),
            cfg.obs_dim,
            cfg.action_dim
        )));
    }
    Ok((obs, act))
}

/// Initializes a model from `train_cfg.seed` and trains it on `data`.
pub fn fit(data: &[Trajectory], model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let (obs, act) = check_dataset(data, model_cfg)?;
    let params = ModelParams::init(model_cfg, &mut train_cfg.init_rng())?;
    let objective = ElboObjective {
        weights: LossWeights::for_model(&params),
    };
    let (params, _, log) = run(&objective, FitSession::fresh(params), &obs, &act, train_cfg)?;
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::checkpoint::Checkpoint;
    use crate::simenv::{generate_dataset, HybridTaskSpec};
    use approx::assert_abs_diff_eq;

    struct Quadratic;

    #[derive(Clone)]
    struct One(Matrix);

    impl ParamTree for One {
        fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
            f("w", &self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
            f("w", &mut self.0);
        }
    }

    impl Objective for Quadratic {
        type Params = One;
        fn evaluate(&self, p: &One, _: &Matrix, _: &Matrix, _: &mut ChaCha8Rng) -> Result<(f64, ElboBreakdown, Vec<Matrix>)> {
            let w = p.0[(0, 0)];
            Ok((w * w, ElboBreakdown::default(), vec![Matrix::filled(1, 1, 2.0 * w)]))
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = One(Matrix::filled(1, 2, 0.7));
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Matrix::zeros(1, 2)], &mut s, &TrainConfig::default()).unwrap();
        assert_eq!(p.0, Matrix::filled(1, 2, 0.7));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = One(Matrix::filled(1, 1, 0.0));
        let mut s = AdamState::new(&p);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        adam_step(&mut p, &[Matrix::filled(1, 1, 1.0)], &mut s, &cfg).unwrap();
        assert_abs_diff_eq!(p.0[(0, 0)], -0.01, epsilon = 1e-9);
    }

    #[test]
    fn nan_gradient_is_named() {
        let mut p = One(Matrix::filled(1, 1, 0.0));
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &[Matrix::filled(1, 1, f64::NAN)], &mut s, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("gradient of w"), "{err}");
        assert_eq!(s.step, 0);
        assert_eq!(p.0[(0, 0)], 0.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Matrix::filled(1, 1, 30.0), Matrix::filled(1, 1, 40.0)];
        assert_eq!(clip_global_norm(&mut g, 10.0), 50.0);
        assert_abs_diff_eq!(g[0][(0, 0)], 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1][(0, 0)], 8.0, epsilon = 1e-12);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 300,
            batch_size: 1,
            ..Default::default()
        };
        let x = Matrix::zeros(1, 1);
        let (p, _, _) = run(&Quadratic, FitSession::fresh(One(Matrix::filled(1, 1, 3.0))), &x, &x, &cfg).unwrap();
        assert!(p.0[(0, 0)].abs() < 0.05);
    }

    fn tiny_setup() -> (Vec<Trajectory>, ModelConfig, TrainConfig) {
        let data = generate_dataset(&HybridTaskSpec::smoke(), 6, 2).unwrap();
        let mcfg = ModelConfig::new(2, 2, 2, 3).with_hidden(8);
        let tcfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 6,
            seed: 5,
            ..Default::default()
        };
        (data, mcfg, tcfg)
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (data, mcfg, mut tcfg) = tiny_setup();
        tcfg.epochs = 0;
        let (p, log) = fit(&data, &mcfg, &tcfg).unwrap();
        assert_eq!(p, ModelParams::init(&mcfg, &mut tcfg.init_rng()).unwrap());
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn runs_are_reproducible() {
        let (data, mcfg, tcfg) = tiny_setup();
        let (a, la) = fit(&data, &mcfg, &tcfg).unwrap();
        let (b, lb) = fit(&data, &mcfg, &tcfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.to_csv(), lb.to_csv());
        assert_eq!(la.epochs.len(), 6);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let (data, _, tcfg) = tiny_setup();
        let bad = ModelConfig::new(3, 2, 2, 3);
        assert!(matches!(fit(&data, &bad, &tcfg), Err(Error::Config(_))));
    }

    #[test]
    fn resume_is_bit_identical() {
        let (data, mcfg, tcfg) = tiny_setup();
        let (obs, act) = check_dataset(&data, &mcfg).unwrap();
        let init = ModelParams::init(&mcfg, &mut tcfg.init_rng()).unwrap();
        let obj = ElboObjective {
            weights: LossWeights::for_model(&init),
        };
        let (straight, _, _) = run(&obj, FitSession::fresh(init.clone()), &obs, &act, &tcfg).unwrap();

        let half = TrainConfig {
            epochs: 3,
            ..tcfg.clone()
        };
        let (mid, adam, _) = run(&obj, FitSession::fresh(init), &obs, &act, &half).unwrap();
        let mut ck = mid.to_checkpoint().unwrap();
        ck.train_state = Some(adam.to_train_state(&mid, tcfg.seed, 3));
        let ck = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();

        let params = ModelParams::from_checkpoint(&ck).unwrap();
        let state = ck.train_state.as_ref().unwrap();
        let session = FitSession {
            adam: AdamState::from_train_state(&params, state).unwrap(),
            params,
            epochs_done: state.epoch,
            on_checkpoint: None,
        };
        let (resumed, _, log) = run(&obj, session, &obs, &act, &tcfg).unwrap();
        assert_eq!(resumed, straight);
        assert_eq!(log.epochs.first().unwrap().epoch, 4);
    }

    #[test]
    fn checkpoints_fire_on_interval_and_end() {
        let (data, mcfg, mut tcfg) = tiny_setup();
        tcfg.checkpoint_interval = 2;
        let (obs, act) = check_dataset(&data, &mcfg).unwrap();
        let init = ModelParams::init(&mcfg, &mut tcfg.init_rng()).unwrap();
        let obj = ElboObjective {
            weights: LossWeights::for_model(&init),
        };
        let mut seen = Vec::new();
        let mut cb = |_: &ModelParams, _: &AdamState, e: u64| {
            seen.push(e);
            Ok(())
        };
        let mut session = FitSession::fresh(init);
        session.on_checkpoint = Some(&mut cb);
        run(&obj, session, &obs, &act, &tcfg).unwrap();
        assert_eq!(seen, vec![2, 4, 6]);
    }

    #[test]
    fn csv_layout() {
        let (data, mcfg, mut tcfg) = tiny_setup();
        tcfg.epochs = 2;
        let (_, log) = fit(&data, &mcfg, &tcfg).unwrap();
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,recon_obs,recon_act,kl_z,kl_switch,total");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,"));
    }
}
