//! PPO with GAE advantages. In contrastive mode the stored crop of each
//! rollout observation is the query view and a fresh crop is the key view,
//! and `β·L_MM` is added to the combined PPO loss.

use std::collections::BTreeMap;
use std::sync::Arc;

use m2curl_numerics::{Adam, AdamConfig, Binding, Mlp, Module, Parameter, Tape, Tensor, Var};
use m2curl_sim::Observation;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::repr::{
    centre_views, combined_loss_from, embed_views, momentum_update, random_offsets, views_at, AugmentedPair,
    ContrastiveConfig, Offset, RepresentationModel,
};
use crate::rl::buffer::{RolloutBuffer, RolloutStep};
use crate::rl::features::{encode_views, image_feature_dim, join, state_matrix};
use crate::rl::mode::{AgentMode, Algorithm};
use crate::rl::policy::{GaussianPolicy, ACTION_DIM, LOG_STD_MAX, LOG_STD_MIN};
use crate::rl::sac::Input;
use crate::rl::Metrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub epochs_per_update: usize,
    pub rollout_horizon: usize,
    pub minibatch_size: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Starting value of the state-independent policy log-std.
    pub init_log_std: f64,
    pub hidden_sizes: Vec<usize>,
    pub optimizer: AdamConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            epochs_per_update: 4,
            rollout_horizon: 2048,
            minibatch_size: 64,
            value_coef: 0.5,
            entropy_coef: 0.0,
            init_log_std: 0.0,
            hidden_sizes: vec![64, 64],
            optimizer: AdamConfig {
                learning_rate: 3e-4,
                ..AdamConfig::default()
            },
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(format!("ppo.{m}")));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda must lie in [0, 1], got {}", self.gae_lambda));
        }
        if !(self.clip_epsilon > 0.0) || !self.clip_epsilon.is_finite() {
            return bad(format!("clip_epsilon must be positive, got {}", self.clip_epsilon));
        }
        if self.rollout_horizon < 2 || self.minibatch_size < 2 {
            return bad("rollout_horizon and minibatch_size must be at least 2".into());
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&self.init_log_std) {
            return bad(format!(
                "init_log_std must lie in [{LOG_STD_MIN}, {LOG_STD_MAX}], got {}",
                self.init_log_std
            ));
        }
        if !(self.value_coef >= 0.0) || !(self.entropy_coef >= 0.0) {
            return bad("value_coef and entropy_coef must be non-negative".into());
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden_sizes must be positive".into());
        }
        Ok(())
    }
}

/// Raw GAE(λ) advantages and returns `A + V` for one rollout.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if n == 0 {
        return Err(CoreError::Contract("GAE over an empty rollout".into()));
    }
    if values.len() != n || dones.len() != n {
        return Err(CoreError::Contract("rewards, values and dones differ in length".into()));
    }
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * next_value - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

pub fn gae_advantages(rollout: &RolloutBuffer, cfg: &PpoConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = &rollout.steps;
    let rewards: Vec<f64> = s.iter().map(|x| x.reward).collect();
    let values: Vec<f64> = s.iter().map(|x| x.value).collect();
    let dones: Vec<bool> = s.iter().map(|x| x.done).collect();
    gae(&rewards, &values, &dones, rollout.bootstrap_value, cfg.gamma, cfg.gae_lambda)
}

/// Zero-mean, unit-variance copy; a constant vector maps to zeros.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    xs.iter().map(|x| (x - mean) / std).collect()
}

/// `−mean(min(r·Â, clip(r, 1−ε, 1+ε)·Â))` with `r = exp(log π − log π_old)`.
/// Also returns the mean ratio.
pub fn clipped_surrogate(
    tape: &mut Tape,
    log_prob: Var,
    old_log_prob: &[f64],
    advantages: &[f64],
    clip_epsilon: f64,
) -> Result<(Var, f64)> {
    let old = tape.constant(Tensor::from_vec(old_log_prob.to_vec()))?;
    let adv = tape.constant(Tensor::from_vec(advantages.to_vec()))?;
    let d = tape.sub(log_prob, old)?;
    let ratio = tape.exp(d)?;
    let s1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)?;
    let s2 = tape.mul(clipped, adv)?;
    let m = tape.minimum(s1, s2)?;
    let mean = tape.mean(m)?;
    let r = tape.value(ratio);
    let ratio_mean = r.data().iter().sum::<f64>() / r.len() as f64;
    Ok((tape.neg(mean)?, ratio_mean))
}

/// Diagnostics of one update phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PpoStats {
    /// Mean ratio per minibatch, grouped by epoch.
    pub ratio_means: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    crop: Option<[Offset; 2]>,
    raw: [f64; 2],
    log_prob: f64,
    value: f64,
}

#[derive(Debug, Clone)]
pub struct PpoAgent {
    pub mode: AgentMode,
    pub cfg: PpoConfig,
    pub contrastive: ContrastiveConfig,
    pub repr: Option<RepresentationModel>,
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub rollout: RolloutBuffer,
    opt: Adam,
    rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
    pending: Option<(Arc<Observation>, Pending)>,
}

impl PpoAgent {
    pub fn new(
        mode: AgentMode,
        cfg: PpoConfig,
        contrastive: ContrastiveConfig,
        state_dim: usize,
        image_size: usize,
        seed: u64,
    ) -> Result<Self> {
        mode.validate()?;
        if mode.algorithm != Algorithm::Ppo {
            return Err(CoreError::Config(format!("{mode} is not a PPO mode")));
        }
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let (repr, feat) = if mode.uses_images() {
            contrastive.validate(image_size)?;
            let repr = RepresentationModel::new(&contrastive, &mut init)?;
            (Some(repr), image_feature_dim(mode.modalities, contrastive.embed_dim))
        } else {
            (None, state_dim)
        };
        let policy = GaussianPolicy::clipped("policy", feat, &cfg.hidden_sizes, cfg.init_log_std, &mut init);
        let sizes: Vec<usize> = std::iter::once(feat)
            .chain(cfg.hidden_sizes.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        let value = Mlp::new("value", &sizes, &mut init);
        Ok(Self {
            mode,
            opt: Adam::new(cfg.optimizer),
            cfg,
            contrastive,
            repr,
            policy,
            value,
            rollout: RolloutBuffer::default(),
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9900_0001)),
            aug_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9900_0002)),
            pending: None,
        })
    }

    fn crop(&self) -> usize {
        self.contrastive.crop_size
    }

    fn input(&self, obs: &[Arc<Observation>], crops: Option<&[[Offset; 2]]>) -> Result<Input> {
        if !self.mode.uses_images() {
            return Ok(Input::States(state_matrix(obs)?));
        }
        Ok(Input::Views(match crops {
            Some(c) => views_at(obs, c, self.crop())?,
            None => centre_views(obs, self.crop())?,
        }))
    }

    fn features(&self, tape: &mut Tape, input: &Input, binding: Binding) -> Result<Var> {
        match (input, &self.repr) {
            (Input::States(s), _) => Ok(tape.constant(s.clone())?),
            (Input::Views(v), Some(r)) => encode_views(tape, &r.online, v, self.mode.modalities, binding),
            (Input::Views(_), None) => Err(CoreError::Contract("image input for a state agent".into())),
        }
    }

    fn value_of(&self, tape: &mut Tape, feat: Var, binding: Binding) -> Result<Var> {
        let rows = tape.value(feat).shape()[0];
        let v = self.value.forward(tape, feat, binding)?;
        Ok(tape.reshape(v, &[rows])?)
    }

    /// Deterministic action (`μ`, clipped) on a centre crop.
    pub fn act_deterministic(&mut self, obs: &Arc<Observation>) -> Result<[f64; 2]> {
        let input = self.input(std::slice::from_ref(obs), None)?;
        let mut tape = Tape::new();
        let f = self.features(&mut tape, &input, Binding::Frozen)?;
        let feats = tape.value(f).clone();
        Ok(self.policy.act(&feats, true, &mut self.rng)?[0].env)
    }

    /// Samples a training action and remembers what the update will need.
    pub fn act_collect(&mut self, obs: &Arc<Observation>) -> Result<[f64; 2]> {
        let one = std::slice::from_ref(obs);
        let crop = if self.mode.uses_images() && self.mode.augments() {
            Some(random_offsets(one, self.crop(), &mut self.aug_rng)?[0])
        } else {
            None
        };
        let input = self.input(one, crop.as_ref().map(std::slice::from_ref))?;
        let mut tape = Tape::new();
        let f = self.features(&mut tape, &input, Binding::Frozen)?;
        let v = self.value_of(&mut tape, f, Binding::Frozen)?;
        let value = tape.value(v).data()[0];
        let feats = tape.value(f).clone();
        let a = self.policy.act(&feats, false, &mut self.rng)?[0];
        self.pending = Some((
            obs.clone(),
            Pending {
                crop,
                raw: a.raw,
                log_prob: a.log_prob,
                value,
            },
        ));
        Ok(a.env)
    }

    /// Records the outcome of the last [`PpoAgent::act_collect`]; runs an
    /// update phase once the rollout is full.
    pub fn observe(&mut self, reward: f64, done: bool, next: &Arc<Observation>) -> Result<Option<Metrics>> {
        let (obs, p) = self
            .pending
            .take()
            .ok_or_else(|| CoreError::Contract("observe without a preceding act_collect".into()))?;
        self.rollout.steps.push(RolloutStep {
            observation: obs,
            crop: p.crop,
            action: p.raw,
            log_prob: p.log_prob,
            value: p.value,
            reward,
            done,
        });
        if self.rollout.len() < self.cfg.rollout_horizon {
            return Ok(None);
        }
        self.rollout.bootstrap_value = if done {
            0.0
        } else {
            let input = self.input(std::slice::from_ref(next), None)?;
            let mut tape = Tape::new();
            let f = self.features(&mut tape, &input, Binding::Frozen)?;
            let v = self.value_of(&mut tape, f, Binding::Frozen)?;
            tape.value(v).data()[0]
        };
        Ok(Some(self.update()?.0))
    }

    /// GAE, then `epochs_per_update` passes of shuffled minibatch steps; the
    /// rollout is cleared afterwards.
    pub fn update(&mut self) -> Result<(Metrics, PpoStats)> {
        let (adv, returns) = gae_advantages(&self.rollout, &self.cfg)?;
        let adv = normalize(&adv);
        let steps = std::mem::take(&mut self.rollout.steps);
        self.rollout.clear();
        let mut stats = PpoStats::default();
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut order: Vec<usize> = (0..steps.len()).collect();
        for _ in 0..self.cfg.epochs_per_update {
            order.shuffle(&mut self.rng);
            let mut ratios = Vec::new();
            let mut chunks: Vec<&[usize]> = order.chunks(self.cfg.minibatch_size).collect();
            // A lone trailing sample has no in-batch negatives; fold it in.
            if chunks.len() > 1 && chunks[chunks.len() - 1].len() < 2 {
                chunks.pop();
                let n = chunks.len();
                chunks[n - 1] = &order[(n - 1) * self.cfg.minibatch_size..];
            }
            for chunk in chunks {
                let mb: Vec<&RolloutStep> = chunk.iter().map(|&i| &steps[i]).collect();
                let a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
                let r: Vec<f64> = chunk.iter().map(|&i| returns[i]).collect();
                let (m, ratio) = self.minibatch_step(&mb, &a, &r)?;
                ratios.push(ratio);
                for (k, v) in m {
                    let e = sums.entry(k).or_insert((0.0, 0));
                    e.0 += v;
                    e.1 += 1;
                }
            }
            stats.ratio_means.push(ratios);
        }
        let mut metrics: Metrics = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        if let Some(last) = stats.ratio_means.last() {
            metrics.insert("ratio_mean".into(), last.iter().sum::<f64>() / last.len() as f64);
        }
        Ok((metrics, stats))
    }

    fn minibatch_step(&mut self, mb: &[&RolloutStep], adv: &[f64], returns: &[f64]) -> Result<(Metrics, f64)> {
        let obs: Vec<Arc<Observation>> = mb.iter().map(|s| s.observation.clone()).collect();
        let crops: Option<Vec<[Offset; 2]>> = mb.iter().map(|s| s.crop).collect();
        let input = self.input(&obs, crops.as_deref())?;
        let raw = Tensor::new(&[mb.len(), ACTION_DIM], mb.iter().flat_map(|s| s.action).collect())?;
        let old: Vec<f64> = mb.iter().map(|s| s.log_prob).collect();
        let beta = self.contrastive.beta;

        let mut tape = Tape::new();
        let (feat, mm) = match (&self.repr, &input) {
            (Some(repr), Input::Views(query)) if self.mode.contrastive() && beta > 0.0 => {
                // Stored crops are the query view; draw a fresh key view.
                let key_offsets = random_offsets(&obs, self.crop(), &mut self.aug_rng)?;
                let key = views_at(&obs, &key_offsets, self.crop())?;
                let query_offsets = crops.as_deref().unwrap_or_default();
                let crop_offsets = query_offsets
                    .iter()
                    .zip(&key_offsets)
                    .map(|(q, k)| [q[0], q[1], k[0], k[1]])
                    .collect();
                let aug = AugmentedPair {
                    query: query.clone(),
                    key,
                    crop_offsets,
                };
                let e = embed_views(&mut tape, repr, &aug)?;
                let feat = join(&mut tape, &[e.query_visual, e.query_tactile])?;
                (feat, Some(combined_loss_from(&mut tape, repr, &e, &self.contrastive)?))
            }
            _ => (self.features(&mut tape, &input, Binding::Trainable)?, None),
        };
        let (lp, ent) = self.policy.evaluate(&mut tape, feat, &raw, Binding::Trainable)?;
        let (surrogate, ratio_mean) = clipped_surrogate(&mut tape, lp, &old, adv, self.cfg.clip_epsilon)?;
        let v = self.value_of(&mut tape, feat, Binding::Trainable)?;
        let ret = tape.constant(Tensor::from_vec(returns.to_vec()))?;
        let d = tape.sub(v, ret)?;
        let d2 = tape.square(d)?;
        let value_loss = tape.mean(d2)?;
        let weighted_v = tape.scale(value_loss, self.cfg.value_coef)?;
        let mut total = tape.add(surrogate, weighted_v)?;
        let entropy = tape.mean(ent)?;
        if self.cfg.entropy_coef > 0.0 {
            let bonus = tape.scale(entropy, self.cfg.entropy_coef)?;
            total = tape.sub(total, bonus)?;
        }
        if let Some((l_mm, _)) = mm {
            let w = tape.scale(l_mm, beta)?;
            total = tape.add(total, w)?;
        }

        self.policy.zero_grads();
        self.value.zero_grads();
        match &mut self.repr {
            Some(repr) => {
                repr.zero_grads();
                tape.grad_eval(total, &mut [&mut self.policy, &mut self.value, &mut repr.online, &mut repr.heads])?;
                self.opt.step(&mut self.policy);
                self.opt.step(&mut self.value);
                self.opt.step(&mut repr.online);
                self.opt.step(&mut repr.heads);
                repr.zero_grads();
                // Keys only feed the contrastive loss; with β = 0 they stay put.
                if self.mode.contrastive() && self.contrastive.beta > 0.0 {
                    momentum_update(repr, self.contrastive.alpha_ema)?;
                }
            }
            None => {
                tape.grad_eval(total, &mut [&mut self.policy, &mut self.value])?;
                self.opt.step(&mut self.policy);
                self.opt.step(&mut self.value);
            }
        }
        self.policy.zero_grads();
        self.value.zero_grads();

        let mut m = BTreeMap::from([
            ("loss_actor".to_string(), tape.item(surrogate)?),
            ("loss_critic".to_string(), tape.item(value_loss)?),
            ("entropy".to_string(), tape.item(entropy)?),
        ]);
        if let Some((_, c)) = mm {
            m.extend(c.metrics().into_iter().map(|(k, v)| (k.to_string(), v)));
        }
        Ok((m, ratio_mean))
    }
}

impl Module for PpoAgent {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.repr.visit(f);
        self.policy.visit(f);
        self.value.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.repr.visit_mut(f);
        self.policy.visit_mut(f);
        self.value.visit_mut(f);
    }
}
