//! Advantage estimation and clipped policy optimisation confined to the
//! low-rank policy adapter, the critic and the exploration scale.

use autodiff::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, CoreError, Result};
use crate::params::{AdamW, Bound, ParamGrads, ParamLabel, ParamStore};
use crate::scene::{DataConfig, Sample, ScenarioSet};
use crate::sim::{run_episode, summarize, Decision, EpisodeRollout, Policy, RolloutSummary, SimConfig};
use crate::student::{critic, Student, ACTION_DIM};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    /// Minimum transitions collected per iteration.
    pub rollout_len: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// Episodes simulated concurrently.
    pub envs: usize,
    /// Divide rewards by the running standard deviation of discounted returns.
    pub normalize_rewards: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gae_lambda: 0.95,
            gamma: 0.99,
            rollout_len: 256,
            minibatch: 64,
            epochs: 4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 3e-4,
            max_grad_norm: 1.0,
            envs: 32,
            normalize_rewards: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(CoreError::Config(format!("ppo.clip: need 0 < clip < 1, got {}", self.clip)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(CoreError::Config("ppo.gamma and ppo.gae_lambda must lie in [0, 1]".into()));
        }
        if self.rollout_len == 0 || self.minibatch == 0 || self.envs == 0 {
            return Err(CoreError::Config("ppo: rollout_len, minibatch and envs must be positive".into()));
        }
        Ok(())
    }
}

/// Advantages and returns. `values[t]` estimates the state before step `t`;
/// `last_value` bootstraps the state after the final step unless it ended the episode.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if n == 0 {
        return Err(contract("advantage estimation on an empty rollout"));
    }
    if values.len() != n || dones.len() != n {
        return Err(contract("rewards, values and done flags differ in length"));
    }
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next * live - values[t];
        acc = delta + gamma * lambda * live * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// GAE over one episode with rewards multiplied by `reward_scale`; values are
/// already on the scaled axis.
pub fn gae_episode(r: &EpisodeRollout, gamma: f64, lambda: f64, reward_scale: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let rewards: Vec<f64> = r.steps.iter().map(|s| s.reward * reward_scale).collect();
    let values: Vec<f64> = r.steps.iter().map(|s| s.value).collect();
    let dones: Vec<bool> = r.steps.iter().map(|s| s.done).collect();
    gae(&rewards, &values, &dones, r.last_value, gamma, lambda)
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate_plain(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    u.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), s)| {
            let z = (x - m) / s.exp();
            -0.5 * z * z - s - 0.5 * LN_2PI
        })
        .sum()
}

pub fn is_ppo_trainable(l: ParamLabel) -> bool {
    matches!(l, ParamLabel::Lora | ParamLabel::Critic | ParamLabel::PolicyStd)
}

/// Student-driven policy. Body features are computed without gradients.
pub struct StudentPolicy<'a> {
    pub student: &'a Student,
    pub store: &'a ParamStore,
    /// Act with the mean instead of sampling.
    pub deterministic: bool,
}

impl StudentPolicy<'_> {
    fn value_of(&self, feat: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::new(vec![1, feat.len()], feat.to_vec())?);
        let v = critic(&mut tape, &p, x)?;
        Ok(tape.value(v).data()[0])
    }
}

impl Policy for StudentPolicy<'_> {
    fn decide(&self, obs: &Sample, rng: &mut ChaCha8Rng) -> Result<Decision> {
        let (feat, mean) = self.student.policy_features(self.store, obs)?;
        let log_std = self.store.tensor("student.policy.log_std").data().to_vec();
        let action: [f64; 2] = if self.deterministic {
            mean
        } else {
            let mut a = [0.0; ACTION_DIM];
            for d in 0..ACTION_DIM {
                let z: f64 = StandardNormal.sample(rng);
                a[d] = mean[d] + log_std[d].exp() * z;
            }
            a
        };
        let log_prob = gaussian_log_prob(&action, &mean, &log_std);
        let value = self.value_of(&feat)?;
        Ok(Decision { action, log_prob, value, features: feat })
    }

    fn value(&self, obs: &Sample) -> Result<f64> {
        let (feat, _) = self.student.policy_features(self.store, obs)?;
        self.value_of(&feat)
    }
}

/// Flattened transitions ready for optimisation.
#[derive(Clone, Debug, Default)]
pub struct PpoBatch {
    pub features: Vec<Vec<f64>>,
    pub actions: Vec<[f64; 2]>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn from_rollouts(rollouts: &[EpisodeRollout], cfg: &PpoConfig, reward_scale: f64) -> Result<Self> {
        let mut b = PpoBatch::default();
        for r in rollouts.iter().filter(|r| !r.steps.is_empty()) {
            let (adv, ret) = gae_episode(r, cfg.gamma, cfg.gae_lambda, reward_scale)?;
            for (s, (a, g)) in r.steps.iter().zip(adv.into_iter().zip(ret)) {
                b.features.push(s.features.clone());
                b.actions.push(s.action);
                b.old_log_probs.push(s.log_prob);
                b.advantages.push(a);
                b.returns.push(g);
            }
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PpoDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Welford running variance.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunningStd {
    count: f64,
    mean: f64,
    m2: f64,
}

impl RunningStd {
    pub fn push(&mut self, x: f64) {
        self.count += 1.0;
        let d = x - self.mean;
        self.mean += d / self.count;
        self.m2 += d * (x - self.mean);
    }

    pub fn std(&self) -> f64 {
        if self.count < 2.0 {
            1.0
        } else {
            (self.m2 / self.count).sqrt()
        }
    }
}

/// Normalizes to zero mean and unit standard deviation.
pub fn normalize_advantages(a: &[f64]) -> Vec<f64> {
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    a.iter().map(|x| (x - mean) / (std + 1e-8)).collect()
}

/// Clipped surrogate plus value loss minus entropy bonus over the rows `idx`
/// of `batch`. Advantages are normalized over the minibatch.
pub fn ppo_loss(tape: &mut Tape, p: &Bound, student: &Student, batch: &PpoBatch, idx: &[usize], cfg: &PpoConfig) -> Result<(Var, PpoDiagnostics)> {
    let m = idx.len();
    if m == 0 {
        return Err(contract("empty minibatch"));
    }
    let h = batch.features[idx[0]].len();
    let feats: Vec<f64> = idx.iter().flat_map(|&i| batch.features[i].iter().copied()).collect();
    let x = tape.constant(Tensor::new(vec![m, h], feats)?);
    let mean = student.lora(tape, p, x)?;
    let log_std = p.var("student.policy.log_std");
    let std = tape.exp(log_std);
    let u = tape.constant(Tensor::new(vec![m, ACTION_DIM], idx.iter().flat_map(|&i| batch.actions[i]).collect())?);
    let diff = tape.sub(u, mean)?;
    let z = tape.div(diff, std)?;
    let z2 = tape.mul(z, z)?;
    let half = tape.scale(z2, -0.5);
    let lp = tape.sub(half, log_std)?;
    let lp = tape.sum(lp, 1, false)?;
    let lp = tape.add_scalar(lp, -0.5 * LN_2PI * ACTION_DIM as f64);
    let old = tape.constant(Tensor::new(vec![m], idx.iter().map(|&i| batch.old_log_probs[i]).collect())?);
    let log_ratio = tape.sub(lp, old)?;
    let ratio = tape.exp(log_ratio);
    let adv = normalize_advantages(&idx.iter().map(|&i| batch.advantages[i]).collect::<Vec<_>>());
    let a = tape.constant(Tensor::new(vec![m], adv)?);
    let s1 = tape.mul(ratio, a)?;
    let hi = tape.constant(Tensor::full(&[m], 1.0 + cfg.clip));
    let lo = tape.constant(Tensor::full(&[m], 1.0 - cfg.clip));
    let clipped = tape.minimum(ratio, hi)?;
    let clipped = tape.maximum(clipped, lo)?;
    let s2 = tape.mul(clipped, a)?;
    let surr = tape.minimum(s1, s2)?;
    let surr = tape.mean_all(surr);
    let policy_loss = tape.neg(surr);
    let v = critic(tape, p, x)?;
    let v = tape.reshape(v, &[m])?;
    let ret = tape.constant(Tensor::new(vec![m], idx.iter().map(|&i| batch.returns[i]).collect())?);
    let verr = tape.sub(v, ret)?;
    let verr = tape.mul(verr, verr)?;
    let value_loss = tape.mean_all(verr);
    let ent = tape.sum_all(log_std);
    let entropy = tape.add_scalar(ent, 0.5 * (LN_2PI + 1.0) * ACTION_DIM as f64);
    let vterm = tape.scale(value_loss, cfg.value_coef);
    let eterm = tape.scale(entropy, cfg.entropy_coef);
    let loss = tape.add(policy_loss, vterm)?;
    let loss = tape.sub(loss, eterm)?;
    let rv = tape.value(ratio).data();
    let clip_fraction = rv.iter().filter(|r| (*r - 1.0).abs() > cfg.clip).count() as f64 / m as f64;
    let approx_kl = tape.value(log_ratio).data().iter().map(|l| -l).sum::<f64>() / m as f64;
    let diag = PpoDiagnostics {
        policy_loss: tape.value(policy_loss).item(),
        value_loss: tape.value(value_loss).item(),
        entropy: tape.value(entropy).item(),
        clip_fraction,
        approx_kl,
    };
    Ok((loss, diag))
}

/// Applies only the gradients of adapter, critic and exploration-scale
/// tensors. Every gradient must name a registered parameter.
pub fn lora_masked_update(store: &mut ParamStore, grads: ParamGrads, opt: &mut AdamW, lr: f64) -> Result<()> {
    let mut kept = ParamGrads::default();
    for (name, g) in grads.0 {
        let label = store
            .get(&name)
            .ok_or_else(|| CoreError::Registry(format!("gradient for unregistered parameter `{name}`")))?
            .label;
        if is_ppo_trainable(label) {
            kept.0.insert(name, g);
        }
    }
    opt.step(store, &kept, lr)
}

/// Clips critic and policy gradients to `max_norm` separately; the value
/// loss is on the scale of episode returns and would otherwise swamp the
/// policy step.
pub fn clip_by_group(store: &ParamStore, grads: ParamGrads, max_norm: f64) -> ParamGrads {
    let (mut critic, mut policy) = (ParamGrads::default(), ParamGrads::default());
    for (name, g) in grads.0 {
        match store.get(&name).map(|p| p.label) {
            Some(ParamLabel::Critic) => critic.0.insert(name, g),
            _ => policy.0.insert(name, g),
        };
    }
    critic.clip_global_norm(max_norm);
    policy.clip_global_norm(max_norm);
    policy.accumulate(critic);
    policy
}

/// Several epochs of minibatch updates over `batch`.
pub fn ppo_update(
    student: &Student,
    store: &mut ParamStore,
    opt: &mut AdamW,
    batch: &PpoBatch,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PpoDiagnostics> {
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    let mut sum = PpoDiagnostics::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.minibatch) {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, is_ppo_trainable);
            let (loss, d) = ppo_loss(&mut tape, &p, student, batch, chunk, cfg)?;
            if !tape.value(loss).item().is_finite() {
                return Err(CoreError::Divergence("non-finite policy loss".into()));
            }
            let mut g = tape.backward(loss)?;
            let grads = p.collect(&tape, &mut g);
            let grads = clip_by_group(store, grads, cfg.max_grad_norm);
            lora_masked_update(store, grads, opt, cfg.lr)?;
            sum.policy_loss += d.policy_loss;
            sum.value_loss += d.value_loss;
            sum.entropy += d.entropy;
            sum.clip_fraction += d.clip_fraction;
            sum.approx_kl += d.approx_kl;
            count += 1.0;
        }
    }
    Ok(PpoDiagnostics {
        policy_loss: sum.policy_loss / count,
        value_loss: sum.value_loss / count,
        entropy: sum.entropy / count,
        clip_fraction: sum.clip_fraction / count,
        approx_kl: sum.approx_kl / count,
    })
}

/// Runs episodes `first..first + count` over the scenario set in parallel;
/// episode `e` uses scenario `e % len` and a seed derived from `seed` and `e`.
pub fn collect_episodes(
    policy: &(dyn Policy + Sync),
    set: &ScenarioSet,
    sim: &SimConfig,
    data: &DataConfig,
    first: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<EpisodeRollout>> {
    (first..first + count)
        .into_par_iter()
        .map(|e| {
            let sc = &set.scenarios[e % set.scenarios.len()];
            run_episode(policy, sc, sim, data, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(e as u64))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct PpoLogRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub collision_rate: f64,
    pub offroad_rate: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub transitions: usize,
}

impl PpoLogRow {
    pub const CSV_HEADER: &'static str = "iteration,mean_reward,collision_rate,offroad_rate,clip_fraction,approx_kl,transitions";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.iteration, self.mean_reward, self.collision_rate, self.offroad_rate, self.clip_fraction, self.approx_kl, self.transitions
        )
    }
}

/// Evaluates the deterministic policy once on every scenario.
pub fn evaluate_policy(student: &Student, store: &ParamStore, set: &ScenarioSet, sim: &SimConfig, data: &DataConfig) -> Result<RolloutSummary> {
    let policy = StudentPolicy { student, store, deterministic: true };
    let rollouts = collect_episodes(&policy, set, sim, data, 0, set.scenarios.len(), 0)?;
    summarize(&rollouts, data.dt)
}

/// PPO iterations on `set`, updating only the policy adapter, critic and
/// exploration scale in `store`.
#[allow(clippy::too_many_arguments)]
pub fn train_ppo(
    student: &Student,
    store: &mut ParamStore,
    set: &ScenarioSet,
    sim: &SimConfig,
    data: &DataConfig,
    cfg: &PpoConfig,
    iterations: usize,
    seed: u64,
) -> Result<Vec<PpoLogRow>> {
    cfg.validate()?;
    if set.scenarios.is_empty() {
        return Err(contract("PPO needs at least one scenario"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(Default::default());
    let mut episode = 0usize;
    let mut scaler = RunningStd::default();
    let mut log = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut rollouts = Vec::new();
        let mut transitions = 0;
        while transitions < cfg.rollout_len {
            let policy = StudentPolicy { student, store, deterministic: false };
            let batch = collect_episodes(&policy, set, sim, data, episode, cfg.envs, seed)?;
            episode += cfg.envs;
            transitions += batch.iter().map(|r| r.steps.len()).sum::<usize>();
            rollouts.extend(batch);
        }
        let summary = summarize(&rollouts, data.dt)?;
        let scale = if cfg.normalize_rewards {
            for r in &rollouts {
                let mut g = 0.0;
                for s in r.steps.iter().rev() {
                    g = s.reward + cfg.gamma * g;
                    scaler.push(g);
                }
            }
            1.0 / scaler.std().max(1e-8)
        } else {
            1.0
        };
        let batch = PpoBatch::from_rollouts(&rollouts, cfg, scale)?;
        let d = ppo_update(student, store, &mut opt, &batch, cfg, &mut rng)?;
        log.push(PpoLogRow {
            iteration: it,
            mean_reward: summary.mean_return,
            collision_rate: summary.collision_rate,
            offroad_rate: summary.offroad_rate,
            clip_fraction: d.clip_fraction,
            approx_kl: d.approx_kl,
            transitions,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_examples() {
        let (a, r) = gae(&[1.0], &[0.0], &[true], 0.0, 0.99, 0.95).unwrap();
        assert_eq!((a[0], r[0]), (1.0, 1.0));
        let rw = [0.5, -1.0, 2.0];
        let v = [0.1, 0.2, 0.3];
        let (a, _) = gae(&rw, &v, &[false; 3], 0.4, 0.9, 0.0).unwrap();
        assert!((a[0] - (0.5 + 0.9 * 0.2 - 0.1)).abs() < 1e-15);
        assert!(gae(&[], &[], &[], 0.0, 0.9, 0.9).is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clipped_surrogate_plain(1.0, 2.0, 0.2), 2.0);
        assert!((clipped_surrogate_plain(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate_plain(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
    }
}
