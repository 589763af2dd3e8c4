//! Gaussian actor-critic over `[h, proprio]` trained with PPO.
//!
//! The policy never sees the depth scan: its input width is exactly
//! `hidden + proprio_dim`. The recurrent state enters as a constant, so
//! policy updates cannot reach world-model parameters.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::env::{ACTION_DIM, PROPRIO_DIM};
use crate::nn::{Adam, AdamConfig, Mlp, ParamGroup, ParamStore};
use crate::rssm::RunningNorm;
use crate::tensor::Mat;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
pub const ADV_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("policy produced non-finite {0}")]
    NonFinite(&'static str),
    #[error("policy update diverged: KL estimate {kl} exceeds {limit}")]
    Diverged { kl: f64, limit: f64 },
    #[error("input width {got}, expected {expected}")]
    Shape { expected: usize, got: usize },
    #[error("discount must lie in (0, 1), got {0}")]
    BadDiscount(f64),
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("rollout is empty")]
    EmptyRollout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub h_dim: usize,
    pub proprio_dim: usize,
    pub action_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub init_log_std: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub kl_limit: f64,
    /// Ablation: feed zeros in place of the recurrent state.
    pub zero_h: bool,
    pub adam: AdamConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            h_dim: 256,
            proprio_dim: PROPRIO_DIM,
            action_dim: ACTION_DIM,
            width: 256,
            layers: 2,
            init_log_std: -0.5,
            clip_eps: 0.2,
            epochs: 4,
            minibatches: 4,
            gamma: 0.99,
            gae_lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.01,
            kl_limit: 1.0,
            zero_h: false,
            adam: AdamConfig::default(),
        }
    }
}

impl PolicyConfig {
    pub fn input_dim(&self) -> usize {
        self.h_dim + self.proprio_dim
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let err = |m: &str| Err(PolicyError::Config(m.into()));
        if self.proprio_dim == 0 || self.action_dim == 0 || self.width == 0 {
            return err("dimensions must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(PolicyError::BadDiscount(self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return err("gae_lambda must lie in [0, 1]");
        }
        if self.epochs == 0 || self.minibatches == 0 {
            return err("epochs and minibatches must be at least 1");
        }
        if !(self.clip_eps > 0.0) {
            return err("clip_eps must be positive");
        }
        Ok(())
    }
}

/// Policy network input: world-model state and proprioception only.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyInput {
    pub h: Mat,
    pub proprio: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput {
    pub actions: Mat,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// The network input actually used, after normalization and ablation.
    pub features: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub params: ParamStore,
    pub actor: Mlp,
    pub critic: Mlp,
    pub log_std: usize,
    /// Proprio normalizer; frozen together with the policy.
    pub obs_norm: RunningNorm,
}

fn gaussian_log_prob(a: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    a.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

impl Policy {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut sizes = vec![config.input_dim()];
        sizes.extend(std::iter::repeat_n(config.width, config.layers));
        let mut actor_sizes = sizes.clone();
        actor_sizes.push(config.action_dim);
        let mut critic_sizes = sizes;
        critic_sizes.push(1);
        let actor = Mlp::new(&mut params, "policy.actor", ParamGroup::Actor, &actor_sizes, &mut rng);
        actor.scale_output(&mut params, 0.01);
        let critic = Mlp::new(&mut params, "policy.critic", ParamGroup::Critic, &critic_sizes, &mut rng);
        let log_std = params.add(
            "policy.log_std",
            ParamGroup::LogStd,
            Mat::filled(1, config.action_dim, config.init_log_std),
        );
        let obs_norm = RunningNorm::new(config.proprio_dim);
        Ok(Self {
            config,
            params,
            actor,
            critic,
            log_std,
            obs_norm,
        })
    }

    pub fn groups() -> BTreeSet<ParamGroup> {
        BTreeSet::from([ParamGroup::Actor, ParamGroup::Critic, ParamGroup::LogStd])
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    /// Normalized network input; zeros replace `h` under the ablation.
    pub fn features(&self, input: &PolicyInput) -> Result<Mat, PolicyError> {
        let c = &self.config;
        if input.proprio.cols != c.proprio_dim {
            return Err(PolicyError::Shape {
                expected: c.proprio_dim,
                got: input.proprio.cols,
            });
        }
        if input.h.cols != c.h_dim {
            return Err(PolicyError::Shape {
                expected: c.h_dim,
                got: input.h.cols,
            });
        }
        let h = if c.zero_h {
            Mat::zeros(input.h.rows, c.h_dim)
        } else {
            input.h.clone()
        };
        let p = self.obs_norm.normalize_mat(&input.proprio).map(|v| v.clamp(-10.0, 10.0));
        Ok(Mat::hcat(&[&h, &p]))
    }

    pub fn mean_action(&self, features: &Mat) -> Mat {
        self.actor.apply(&self.params, features)
    }

    pub fn value(&self, features: &Mat) -> Vec<f64> {
        self.critic.apply(&self.params, features).data
    }

    pub fn log_std(&self) -> &[f64] {
        &self.params.entries[self.log_std].value.data
    }

    /// Samples an action per row, or returns the mean with `deterministic`.
    pub fn act(&self, input: &PolicyInput, rng: &mut dyn RngCore, deterministic: bool) -> Result<ActOutput, PolicyError> {
        let features = self.features(input)?;
        let mean = self.mean_action(&features);
        if !mean.all_finite() {
            return Err(PolicyError::NonFinite("action mean"));
        }
        let values = self.value(&features);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite("value"));
        }
        let ls = self.log_std().to_vec();
        let mut actions = mean.clone();
        if !deterministic {
            for r in 0..actions.rows {
                for (a, l) in actions.row_mut(r).iter_mut().zip(&ls) {
                    let n: f64 = StandardNormal.sample(rng);
                    *a += l.exp() * n;
                }
            }
        }
        let log_probs = (0..actions.rows)
            .map(|r| gaussian_log_prob(actions.row(r), mean.row(r), &ls))
            .collect();
        Ok(ActOutput {
            actions,
            log_probs,
            values,
            features,
        })
    }

    /// Log-density of given actions under the current policy.
    pub fn log_prob(&self, features: &Mat, actions: &Mat) -> Vec<f64> {
        let mean = self.mean_action(features);
        let ls = self.log_std();
        (0..actions.rows)
            .map(|r| gaussian_log_prob(actions.row(r), mean.row(r), ls))
            .collect()
    }

    /// Mean clipped surrogate `min(ρA, clip(ρ, 1−ε, 1+ε)A)` at the current
    /// parameters.
    pub fn surrogate_objective(&self, features: &Mat, actions: &Mat, old_log_probs: &[f64], advantages: &[f64], clip: f64) -> f64 {
        let lp = self.log_prob(features, actions);
        let n = lp.len() as f64;
        lp.iter()
            .zip(old_log_probs)
            .zip(advantages)
            .map(|((l, o), a)| {
                let ratio = (l - o).exp();
                (ratio * a).min(ratio.clamp(1.0 - clip, 1.0 + clip) * a)
            })
            .sum::<f64>()
            / n
    }
}

/// `Σ_i γ^i r_i`, truncated at the end of `rewards`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> Result<f64, PolicyError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(PolicyError::BadDiscount(gamma));
    }
    Ok(rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc))
}

/// Reverse-recursive GAE over one stream. `dones[t]` cuts bootstrapping
/// after step t; `last_value` is the value of the state following the final
/// step. Returns `(advantages, returns)` with returns = advantages + values.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let mask = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * mask - values[t];
        next_adv = delta + gamma * lambda * mask * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Per-batch standardization to mean 0, std 1.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + ADV_EPS);
    }
}

/// Time-major rollout from `n_envs` parallel streams; entry `t * n_envs + e`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub features: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Features of the state after the last step of each stream.
    pub last_features: Vec<Vec<f64>>,
    pub last_dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(n_envs: usize) -> Self {
        Self {
            n_envs,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, out: &ActOutput, rewards: &[f64], dones: &[bool]) {
        for e in 0..self.n_envs {
            self.features.push(out.features.row(e).to_vec());
            self.actions.push(out.actions.row(e).to_vec());
            self.log_probs.push(out.log_probs[e]);
            self.values.push(out.values[e]);
            self.rewards.push(rewards[e]);
            self.dones.push(dones[e]);
        }
    }

    /// Recomputes values with the current critic, then GAE per stream and
    /// normalized advantages.
    pub fn recompute(&mut self, policy: &Policy) {
        let n = self.n_envs;
        let steps = self.len() / n;
        let values = policy.value(&Mat::from_rows(&self.features));
        let last = policy.value(&Mat::from_rows(&self.last_features));
        self.advantages = vec![0.0; self.len()];
        self.returns = vec![0.0; self.len()];
        for e in 0..n {
            let idx: Vec<usize> = (0..steps).map(|t| t * n + e).collect();
            let r: Vec<f64> = idx.iter().map(|&i| self.rewards[i]).collect();
            let v: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
            let d: Vec<bool> = idx.iter().map(|&i| self.dones[i]).collect();
            let lv = if self.last_dones[e] { 0.0 } else { last[e] };
            let (adv, ret) = compute_gae(&r, &v, &d, lv, policy.config.gamma, policy.config.gae_lambda);
            for (k, &i) in idx.iter().enumerate() {
                self.advantages[i] = adv[k];
                self.returns[i] = ret[k];
            }
        }
        normalize_advantages(&mut self.advantages);
    }
}

/// One minibatch of PPO samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoBatch {
    pub features: Mat,
    pub actions: Mat,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub advantage_mean: f64,
    pub advantage_std: f64,
}

pub struct PpoTrainer {
    pub opt: Adam,
}

impl PpoTrainer {
    pub fn new(policy: &Policy) -> Self {
        Self {
            opt: Adam::new(policy.config.adam.clone(), &policy.params),
        }
    }

    fn loss_graph(policy: &Policy, g: &mut Graph, vars: &[Var], b: &PpoBatch) -> (Var, Var, Var, Var, Var) {
        let c = &policy.config;
        let n = b.features.rows;
        let x = g.constant(b.features.clone());
        let mean = policy.actor.forward(g, vars, x);
        let ls_row = vars[policy.log_std];
        let ls = g.broadcast_rows(ls_row, n);
        let a = g.constant(b.actions.clone());
        let diff = g.sub(a, mean);
        let neg_ls = g.neg(ls);
        let inv_std = g.exp(neg_ls);
        let z = g.mul(diff, inv_std);
        let z2 = g.square(z);
        let half = g.scale(z2, -0.5);
        let t = g.sub(half, ls);
        let t = g.add_scalar(t, -HALF_LN_2PI);
        let logp = g.sum_cols(t);
        let old = g.constant(Mat::from_vec(n, 1, b.old_log_probs.clone()));
        let lr = g.sub(logp, old);
        let ratio = g.exp(lr);
        let adv = g.constant(Mat::from_vec(n, 1, b.advantages.clone()));
        let s1 = g.mul(ratio, adv);
        let clipped = g.clamp(ratio, 1.0 - c.clip_eps, 1.0 + c.clip_eps);
        let s2 = g.mul(clipped, adv);
        let surr = g.minimum(s1, s2);
        let surr = g.mean_all(surr);
        let policy_loss = g.neg(surr);

        let v = policy.critic.forward(g, vars, x);
        let ret = g.constant(Mat::from_vec(n, 1, b.returns.clone()));
        let vd = g.sub(v, ret);
        let vsq = g.square(vd);
        let value_loss = g.mean_all(vsq);

        // entropy of a diagonal Gaussian: Σ (log σ + ½(1 + ln 2π))
        let ent = g.sum_all(ls_row);
        let entropy = g.add_scalar(ent, c.action_dim as f64 * (0.5 + HALF_LN_2PI));

        let wv = g.scale(value_loss, c.value_coef);
        let we = g.scale(entropy, -c.entropy_coef);
        let total = g.add(policy_loss, wv);
        let total = g.add(total, we);
        (total, policy_loss, value_loss, entropy, ratio)
    }

    /// One optimizer step on a minibatch. Aborts before stepping when the KL
    /// estimate exceeds the configured limit.
    pub fn step(&mut self, policy: &mut Policy, b: &PpoBatch) -> Result<PpoStats, PolicyError> {
        let mut g = Graph::new();
        let vars = policy.params.bind(&mut g);
        let (total, pl, vl, ent, ratio) = Self::loss_graph(policy, &mut g, &vars, b);
        if !g.value(total).item().is_finite() {
            return Err(PolicyError::NonFinite("loss"));
        }
        let ratios = g.value(ratio).data.clone();
        let n = ratios.len() as f64;
        // k3 estimator of KL(old ‖ new)
        let approx_kl = ratios.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / n;
        if approx_kl > policy.config.kl_limit {
            return Err(PolicyError::Diverged {
                kl: approx_kl,
                limit: policy.config.kl_limit,
            });
        }
        let eps = policy.config.clip_eps;
        let clip_fraction = ratios.iter().filter(|r| (*r - 1.0).abs() > eps).count() as f64 / n;
        g.backward(total);
        let grads = ParamStore::grads(&g, &vars);
        self.opt.step(&mut policy.params, &grads, &BTreeSet::new());
        let am = b.advantages.iter().sum::<f64>() / n;
        let asd = (b.advantages.iter().map(|a| (a - am) * (a - am)).sum::<f64>() / n).sqrt();
        Ok(PpoStats {
            policy_loss: g.value(pl).item(),
            value_loss: g.value(vl).item(),
            entropy: g.value(ent).item(),
            approx_kl,
            clip_fraction,
            advantage_mean: am,
            advantage_std: asd,
        })
    }

    /// Full PPO update: per epoch, recompute advantages with the current
    /// critic, shuffle, and step over minibatches.
    pub fn update(&mut self, policy: &mut Policy, rollout: &mut RolloutBuffer, rng: &mut dyn RngCore) -> Result<PpoStats, PolicyError> {
        if rollout.is_empty() {
            return Err(PolicyError::EmptyRollout);
        }
        let n = rollout.len();
        let mb = policy.config.minibatches.min(n);
        let mut stats = PpoStats::default();
        let mut count = 0.0;
        for _ in 0..policy.config.epochs {
            rollout.recompute(policy);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            for chunk in idx.chunks(n.div_ceil(mb)) {
                let rows = |src: &Vec<Vec<f64>>| Mat::from_rows(&chunk.iter().map(|&i| src[i].clone()).collect::<Vec<_>>());
                let b = PpoBatch {
                    features: rows(&rollout.features),
                    actions: rows(&rollout.actions),
                    old_log_probs: chunk.iter().map(|&i| rollout.log_probs[i]).collect(),
                    advantages: chunk.iter().map(|&i| rollout.advantages[i]).collect(),
                    returns: chunk.iter().map(|&i| rollout.returns[i]).collect(),
                };
                let s = self.step(policy, &b)?;
                stats.policy_loss += s.policy_loss;
                stats.value_loss += s.value_loss;
                stats.entropy += s.entropy;
                stats.approx_kl = stats.approx_kl.max(s.approx_kl);
                stats.clip_fraction += s.clip_fraction;
                count += 1.0;
            }
        }
        stats.policy_loss /= count;
        stats.value_loss /= count;
        stats.entropy /= count;
        stats.clip_fraction /= count;
        let adv = &rollout.advantages;
        let m = adv.iter().sum::<f64>() / n as f64;
        stats.advantage_mean = m;
        stats.advantage_std = (adv.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n as f64).sqrt();
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PolicyConfig {
        PolicyConfig {
            h_dim: 4,
            width: 8,
            ..PolicyConfig::default()
        }
    }

    #[test]
    fn input_width_excludes_depth() {
        let p = Policy::new(small(), 0).unwrap();
        assert_eq!(p.actor.in_dim, 4 + PROPRIO_DIM);
        assert_eq!(p.critic.in_dim, 4 + PROPRIO_DIM);
        let bad = PolicyInput {
            h: Mat::zeros(1, 4),
            proprio: Mat::zeros(1, PROPRIO_DIM + 16),
        };
        assert!(matches!(p.features(&bad), Err(PolicyError::Shape { .. })));
    }

    #[test]
    fn deterministic_mode_is_pure() {
        let p = Policy::new(small(), 1).unwrap();
        let input = PolicyInput {
            h: Mat::filled(2, 4, 0.3),
            proprio: Mat::filled(2, PROPRIO_DIM, -0.2),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = p.act(&input, &mut rng, true).unwrap();
        let b = p.act(&input, &mut rng, true).unwrap();
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.actions.cols, ACTION_DIM);
    }

    #[test]
    fn discounted_return_examples() {
        assert_eq!(discounted_return(&[0.0; 5], 0.9).unwrap(), 0.0);
        assert_eq!(discounted_return(&[1.0, 1.0, 1.0], 0.5).unwrap(), 1.75);
        assert!(discounted_return(&[1.0], 1.0).is_err());
        assert!(discounted_return(&[1.0], 0.0).is_err());
    }

    #[test]
    fn zero_h_ablation_ignores_recurrent_state() {
        let mut cfg = small();
        cfg.zero_h = true;
        let p = Policy::new(cfg, 2).unwrap();
        let mk = |v| PolicyInput {
            h: Mat::filled(1, 4, v),
            proprio: Mat::filled(1, PROPRIO_DIM, 0.1),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            p.act(&mk(0.0), &mut rng, true).unwrap().actions,
            p.act(&mk(5.0), &mut rng, true).unwrap().actions
        );
    }
}
