//! Actor-critic trained on imagined latent rollouts. Two independent heads
//! share the world model: one driven by an intrinsic exploration reward, one
//! by the learned reward predictor (later fine-tuned on environment reward).

use crate::error::{Error, Result};
use crate::tensor::{Act, Mlp, Tensor};
use crate::wm::loss::LN_2PI;
use crate::wm::{LatentState, SampleMode, WorldModel};
use ndarray::{Array2, ArrayD, Ix2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Tanh-squashed Gaussian policy over `action_dim` continuous actions.
///
/// The trunk outputs `(mean, pre_std)` pairs; the standard deviation is
/// `softplus(pre_std) + min_std`, so the distribution never collapses.
pub struct GaussianActor {
    net: Mlp,
    action_dim: usize,
    min_std: f64,
}

impl GaussianActor {
    pub fn new(
        rng: &mut ChaCha8Rng,
        state_dim: usize,
        hidden: &[usize],
        action_dim: usize,
        min_std: f64,
    ) -> GaussianActor {
        GaussianActor {
            net: Mlp::new(rng, state_dim, hidden, 2 * action_dim, Act::Elu),
            action_dim,
            min_std,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn dist(&self, feat: &Tensor) -> (Tensor, Tensor) {
        let out = self.net.forward(feat);
        let mean = out.slice_cols(0, self.action_dim);
        let std = out
            .slice_cols(self.action_dim, 2 * self.action_dim)
            .softplus()
            .add_scalar(self.min_std);
        (mean, std)
    }

    /// Draw actions with reparameterized noise. Returns the squashed action
    /// `(B, A)` and its log-density `(B,)`, both connected to the graph.
    pub fn sample(&self, feat: &Tensor, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
        let (mean, std) = self.dist(feat);
        let b = feat.shape()[0];
        let eps = Tensor::constant(ArrayD::from_shape_fn(vec![b, self.action_dim], |_| {
            rng.sample::<f64, _>(StandardNormal)
        }));
        let u = mean.add(&std.mul(&eps));
        let action = u.tanh();
        // log N(u; mean, std) with (u - mean)/std = eps, minus the tanh
        // change-of-variables term sum log(1 - a^2).
        let log_gauss = std
            .ln_eps(0.0)
            .neg()
            .sub(&eps.square().mul_scalar(0.5))
            .add_scalar(-0.5 * LN_2PI);
        let log_det = action.square().neg().add_scalar(1.0).ln_eps(1e-6);
        let log_prob = log_gauss.sub(&log_det).sum_rows();
        (action, log_prob)
    }

    /// Deterministic action (tanh of the mean); used for evaluation.
    pub fn mean_action(&self, feat: &Tensor) -> Tensor {
        self.dist(feat).0.tanh()
    }

    /// Environment-facing action: a policy sample plus exploration noise,
    /// clamped to the action box. No graph is retained.
    pub fn act(&self, feat: &Tensor, rng: &mut ChaCha8Rng, noise_std: f64) -> Array2<f64> {
        let (action, _) = self.sample(feat, rng);
        let mut a = action
            .data()
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("actions are 2-D");
        a.mapv_inplace(|v| v + noise_std * rng.sample::<f64, _>(StandardNormal));
        a.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        a
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.net.params(prefix, out);
    }
}

/// Open-loop rollout produced by [`imagine`]: features of states s_0..s_H,
/// the actions a_0..a_{H-1} that generated them, and their log-densities.
/// Rewards and values are bound later, per behavior head.
pub struct ImaginedTrajectory {
    /// H+1 feature tensors, each (B, state_dim), in-graph.
    pub feats: Vec<Tensor>,
    /// H action tensors, each (B, A), in-graph.
    pub actions: Vec<Tensor>,
    /// H log-density tensors, each (B,), in-graph.
    pub log_probs: Vec<Tensor>,
}

impl ImaginedTrajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn batch_size(&self) -> usize {
        self.feats[0].shape()[0]
    }
}

/// Roll the prior forward `horizon` steps from `start`, acting with `actor`.
/// Gradients flow from later features back into the actor through the
/// dynamics (straight-through samples in `Sample` mode).
pub fn imagine(
    wm: &WorldModel,
    actor: &GaussianActor,
    start: &LatentState,
    horizon: usize,
    rng: &mut ChaCha8Rng,
    mode: SampleMode,
) -> Result<ImaginedTrajectory> {
    if horizon == 0 {
        return Err(Error::contract("imagination horizon must be positive"));
    }
    let mut state = start.clone();
    let mut feats = vec![state.feature()];
    let mut actions = Vec::with_capacity(horizon);
    let mut log_probs = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let (action, log_prob) = actor.sample(feats.last().unwrap(), rng);
        state = wm.prior_step(&state, &action, rng, mode)?;
        let feat = state.feature();
        if feat.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("imagine", "imagined state is non-finite"));
        }
        feats.push(feat);
        actions.push(action);
        log_probs.push(log_prob);
    }
    Ok(ImaginedTrajectory {
        feats,
        actions,
        log_probs,
    })
}

fn check_discounting(gamma: f64, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract("gamma and lambda must lie in [0, 1]"));
    }
    Ok(())
}

/// TD(lambda) returns over one sequence: `rewards` holds r_{1..H}, `values`
/// holds v(s_0)..v(s_H). Returns R_0..R_{H-1} with
/// R_t = r_{t+1} + gamma * ((1 - lambda) * v_{t+1} + lambda * R_{t+1})
/// and tail R_H = v_H.
pub fn lambda_returns(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    check_discounting(gamma, lambda)?;
    let h = rewards.len();
    if values.len() != h + 1 {
        return Err(Error::contract(format!(
            "lambda_returns: {} rewards need {} values, got {}",
            h,
            h + 1,
            values.len()
        )));
    }
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        next = rewards[t] + gamma * ((1.0 - lambda) * values[t + 1] + lambda * next);
        out[t] = next;
    }
    Ok(out)
}

/// Batched, in-graph [`lambda_returns`]: each element of `rewards` and
/// `values` is a `(B,)` tensor.
pub fn lambda_returns_tensor(
    rewards: &[Tensor],
    values: &[Tensor],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<Tensor>> {
    check_discounting(gamma, lambda)?;
    let h = rewards.len();
    if values.len() != h + 1 {
        return Err(Error::contract("lambda_returns: values must be one longer than rewards"));
    }
    let mut out: Vec<Option<Tensor>> = vec![None; h];
    let mut next = values[h].clone();
    for t in (0..h).rev() {
        let boot = values[t + 1]
            .mul_scalar(1.0 - lambda)
            .add(&next.mul_scalar(lambda));
        next = rewards[t].add(&boot.mul_scalar(gamma));
        out[t] = Some(next.clone());
    }
    Ok(out.into_iter().map(|t| t.unwrap()).collect())
}

/// Scalar summaries of one behavior update.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BehaviorStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    /// Negative mean log-density of the sampled actions.
    pub entropy: f64,
    pub mean_return: f64,
}

/// Loss tensors from one behavior update, ready for separate backward passes.
pub struct BehaviorUpdate {
    pub actor_loss: Tensor,
    pub critic_loss: Tensor,
    pub stats: BehaviorStats,
}

/// One actor-critic pair with a slow target critic.
///
/// The critic's output layer starts at exactly zero, so every value estimate
/// and hence every return target is zero until the first updates propagate.
pub struct BehaviorHead {
    name: String,
    pub actor: GaussianActor,
    critic: Mlp,
    target_critic: Mlp,
    target_every: usize,
    updates: usize,
}

impl BehaviorHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        min_std: f64,
        target_every: usize,
    ) -> Result<BehaviorHead> {
        if target_every == 0 {
            return Err(Error::contract("target_every must be positive"));
        }
        let actor = GaussianActor::new(rng, state_dim, hidden, action_dim, min_std);
        let critic = Mlp::new_zero_output(rng, state_dim, hidden, 1, Act::Elu);
        let target_critic = critic.clone_detached();
        Ok(BehaviorHead {
            name: name.to_string(),
            actor,
            critic,
            target_critic,
            target_every,
            updates: 0,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Critic value estimates, `(B,)`, through the live critic.
    pub fn value(&self, feat: &Tensor) -> Tensor {
        let b = feat.shape()[0];
        self.critic.forward(feat).reshape(&[b])
    }

    /// Value estimates through the frozen target critic. The parameters take
    /// no gradient, but the graph through `feat` is kept so returns remain
    /// differentiable for the actor.
    pub fn target_value(&self, feat: &Tensor) -> Tensor {
        let b = feat.shape()[0];
        self.target_critic.forward(feat).reshape(&[b])
    }

    /// Compute actor and critic losses on an imagined trajectory with bound
    /// per-step rewards r_{1..H} (each `(B,)`, possibly in-graph).
    ///
    /// The actor maximizes mean lambda-returns through the dynamics with an
    /// entropy bonus; the critic regresses the same returns on detached
    /// features and stopped targets.
    pub fn update(
        &self,
        traj: &ImaginedTrajectory,
        rewards: &[Tensor],
        gamma: f64,
        lambda: f64,
        entropy_coef: f64,
    ) -> Result<BehaviorUpdate> {
        let h = traj.horizon();
        let b = traj.batch_size();
        if rewards.len() != h {
            return Err(Error::contract(format!(
                "behavior update: {h}-step trajectory with {} rewards",
                rewards.len()
            )));
        }
        let values: Vec<Tensor> = traj.feats.iter().map(|f| self.target_value(f)).collect();
        let returns = lambda_returns_tensor(rewards, &values, gamma, lambda)?;

        let norm = 1.0 / (h * b) as f64;
        let mut ret_sum: Option<Tensor> = None;
        let mut logp_sum: Option<Tensor> = None;
        for t in 0..h {
            let r = returns[t].sum_all();
            ret_sum = Some(match ret_sum {
                None => r,
                Some(acc) => acc.add(&r),
            });
            let lp = traj.log_probs[t].sum_all();
            logp_sum = Some(match logp_sum {
                None => lp,
                Some(acc) => acc.add(&lp),
            });
        }
        let mean_return = ret_sum.unwrap().mul_scalar(norm);
        let mean_logp = logp_sum.unwrap().mul_scalar(norm);
        let actor_loss = mean_return.neg().add(&mean_logp.mul_scalar(entropy_coef));

        let mut crit_sum: Option<Tensor> = None;
        for t in 0..h {
            let v = self.value(&traj.feats[t].detach());
            let diff = v.sub(&returns[t].detach());
            let sq = diff.square().sum_all();
            crit_sum = Some(match crit_sum {
                None => sq,
                Some(acc) => acc.add(&sq),
            });
        }
        let critic_loss = crit_sum.unwrap().mul_scalar(0.5 * norm);

        let stats = BehaviorStats {
            actor_loss: actor_loss.value(),
            critic_loss: critic_loss.value(),
            entropy: -mean_logp.value(),
            mean_return: mean_return.value(),
        };
        for (what, v) in [("actor", stats.actor_loss), ("critic", stats.critic_loss)] {
            if !v.is_finite() {
                return Err(Error::numerical(
                    format!("behavior.{}", self.name),
                    format!("{what} loss is non-finite"),
                ));
            }
        }
        Ok(BehaviorUpdate {
            actor_loss,
            critic_loss,
            stats,
        })
    }

    /// Count one optimizer step and hard-copy the critic into the target
    /// every `target_every` steps.
    pub fn after_step(&mut self) {
        self.updates += 1;
        if self.updates % self.target_every == 0 {
            self.target_critic.copy_data_from(&self.critic);
        }
    }

    pub fn actor_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.actor.params(&format!("{}.actor", self.name), &mut out);
        out
    }

    pub fn critic_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.critic.params(&format!("{}.critic", self.name), &mut out);
        out
    }

    /// Everything the checkpoint must carry, including the frozen target.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.actor_params();
        out.extend(self.critic_params());
        self.target_critic
            .params(&format!("{}.target", self.name), &mut out);
        out
    }

    /// Steps counted toward the target-critic schedule (checkpointed).
    pub fn update_count(&self) -> usize {
        self.updates
    }

    pub fn set_update_count(&mut self, updates: usize) {
        self.updates = updates;
    }
}

#[cfg(test)]
mod tests;
