//! Batched model evaluation on a [`Tape`]. Each row of an input matrix is
//! one sample.

use super::{DenseNodes, MlpNodes, ModelParams, Registrar};
use crate::numcore::{Matrix, NodeId, Tape, LN_2PI};

/// Tape handles of every tensor in [`ModelParams`], keyed in visit order.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub encoder: MlpNodes,
    pub decoder: MlpNodes,
    pub decoder_log_var: NodeId,
    pub switcher: MlpNodes,
    pub switch_head: DenseNodes,
    pub noise_head: DenseNodes,
    pub free_mean_head: Option<DenseNodes>,
    pub goals: NodeId,
    pub gains: NodeId,
    pub prior_mean: NodeId,
    pub prior_log_var: NodeId,
    latent_dim: usize,
    action_dim: usize,
    num_skills: usize,
    var_floor: f64,
}

impl ModelNodes {
    /// Puts `params` on the tape. With `differentiable` unset the tensors
    /// are constants and no gradients are tracked.
    pub fn register(params: &ModelParams, tape: &mut Tape, differentiable: bool) -> Self {
        let mut r = Registrar {
            tape,
            next_key: 0,
            differentiable,
        };
        // Must follow the ParamTree visit order.
        let encoder = r.mlp(&params.encoder);
        let decoder = r.mlp(&params.decoder);
        let decoder_log_var = r.tensor(&params.decoder_log_var);
        let switcher = r.mlp(&params.switcher);
        let switch_head = r.dense(&params.switch_head);
        let noise_head = r.dense(&params.noise_head);
        let free_mean_head = params.free_mean_head.as_ref().map(|d| r.dense(d));
        let goals = r.tensor(&params.goals);
        let gains = r.tensor(&params.gains);
        let prior_mean = r.tensor(&params.prior_mean);
        let prior_log_var = r.tensor(&params.prior_log_var);
        let cfg = &params.config;
        ModelNodes {
            encoder,
            decoder,
            decoder_log_var,
            switcher,
            switch_head,
            noise_head,
            free_mean_head,
            goals,
            gains,
            prior_mean,
            prior_log_var,
            latent_dim: cfg.latent_dim,
            action_dim: cfg.action_dim,
            num_skills: cfg.num_skills,
            var_floor: cfg.var_floor,
        }
    }

    /// Mean and variance of q(z|o), both `B x S`.
    pub fn encode(&self, tape: &mut Tape, obs: NodeId) -> (NodeId, NodeId) {
        let s = self.latent_dim;
        let out = self.encoder.apply(tape, obs);
        let mean = tape.col_slice(out, 0, s);
        let raw = tape.col_slice(out, s, s);
        let sp = tape.softplus(raw);
        let var = tape.add_scalar(sp, self.var_floor);
        (mean, var)
    }

    /// `mean + sqrt(var) * noise`.
    pub fn reparam(&self, tape: &mut Tape, mean: NodeId, var: NodeId, noise: NodeId) -> NodeId {
        let sd = tape.sqrt(var);
        let scaled = tape.mul(sd, noise);
        tape.add(mean, scaled)
    }

    /// `ln p(o | z)` per row, `B x 1`.
    pub fn recon_obs(&self, tape: &mut Tape, z: NodeId, obs: NodeId) -> NodeId {
        let mean = self.decoder.apply(tape, z);
        let diff = tape.sub(obs, mean);
        let sq = tape.square(diff);
        let neg_lv = tape.neg(self.decoder_log_var);
        let inv_var = tape.exp(neg_lv);
        let maha = tape.mul_row(sq, inv_var);
        let maha = tape.row_sum(maha);
        let log_det = tape.sum(self.decoder_log_var);
        let o = tape.value(obs).cols() as f64;
        let quad = tape.add_row(maha, log_det);
        let half = tape.scale(quad, -0.5);
        tape.add_scalar(half, -0.5 * o * LN_2PI)
    }

    /// KL(q(z|o) || prior) per row, `B x 1`.
    pub fn kl_z(&self, tape: &mut Tape, mean: NodeId, var: NodeId) -> NodeId {
        let neg_pm = tape.neg(self.prior_mean);
        let d = tape.add_row(mean, neg_pm);
        let d2 = tape.square(d);
        let num = tape.add(var, d2);
        let neg_plv = tape.neg(self.prior_log_var);
        let inv_pv = tape.exp(neg_plv);
        let ratio = tape.mul_row(num, inv_pv);
        let log_q = tape.log(var);
        let inner = tape.sub(ratio, log_q);
        let inner = tape.row_sum(inner);
        let plv_sum = tape.sum(self.prior_log_var);
        let all = tape.add_row(inner, plv_sum);
        let all = tape.add_scalar(all, -(self.latent_dim as f64));
        tape.scale(all, 0.5)
    }

    /// Switcher trunk features, `B x H`.
    pub fn trunk(&self, tape: &mut Tape, z: NodeId) -> NodeId {
        self.switcher.apply(tape, z)
    }

    /// `ln π(c | z)`, `B x C`.
    pub fn log_prior(&self, tape: &mut Tape, trunk: NodeId) -> NodeId {
        let logits = self.switch_head.apply(tape, trunk);
        let lse = tape.logsumexp_rows(logits);
        tape.sub_col(logits, lse)
    }

    /// Action means of every skill, `B x (C*A)` with block `c` for skill `c`.
    pub fn action_means(&self, tape: &mut Tape, z: NodeId, trunk: NodeId) -> NodeId {
        if let Some(head) = &self.free_mean_head {
            return head.apply(tape, trunk);
        }
        let a = self.action_dim;
        // K_c (g_c - z) = g_c K_c^T - z K_c^T, all skills at once for the z part.
        let gains_t = tape.transpose(self.gains);
        let zk = tape.matmul(z, gains_t);
        let neg_zk = tape.neg(zk);
        let offsets: Vec<NodeId> = (0..self.num_skills)
            .map(|c| {
                let g = tape.row_slice(self.goals, c, 1);
                let k = tape.row_slice(self.gains, c * a, a);
                let kt = tape.transpose(k);
                tape.matmul(g, kt)
            })
            .collect();
        let offset = tape.concat_cols(&offsets);
        tape.add_row(neg_zk, offset)
    }

    /// Action variances of every skill, `B x (C*A)`.
    pub fn action_vars(&self, tape: &mut Tape, trunk: NodeId) -> NodeId {
        let raw = self.noise_head.apply(tape, trunk);
        let sp = tape.softplus(raw);
        tape.add_scalar(sp, self.var_floor)
    }

    /// `ln p(u | c, z)` for every skill, `B x C`.
    pub fn skill_log_lik(&self, tape: &mut Tape, z: NodeId, trunk: NodeId, actions: &Matrix) -> NodeId {
        let mean = self.action_means(tape, z, trunk);
        let var = self.action_vars(tape, trunk);
        component_log_lik(tape, mean, var, actions, self.num_skills)
    }
}

/// Diagonal Gaussian log-densities of `actions` (`B x A`) under `k`
/// components whose means and variances are `B x (k*A)` blocks. Returns
/// `B x k`.
pub(crate) fn component_log_lik(tape: &mut Tape, mean: NodeId, var: NodeId, actions: &Matrix, k: usize) -> NodeId {
    let a = actions.cols();
    let mut tiled = Matrix::zeros(actions.rows(), k * a);
    for r in 0..actions.rows() {
        for c in 0..k {
            tiled.row_mut(r)[c * a..(c + 1) * a].copy_from_slice(actions.row(r));
        }
    }
    let u = tape.constant(tiled);
    let diff = tape.sub(u, mean);
    let sq = tape.square(diff);
    let inv = tape.recip(var);
    let maha = tape.mul(sq, inv);
    let lv = tape.log(var);
    let terms = tape.add(maha, lv);
    let per_comp: Vec<NodeId> = (0..k)
        .map(|c| {
            let block = tape.col_slice(terms, c * a, a);
            tape.row_sum(block)
        })
        .collect();
    let joined = tape.concat_cols(&per_comp);
    let half = tape.scale(joined, -0.5);
    tape.add_scalar(half, -0.5 * a as f64 * LN_2PI)
}
