//! Soft actor-critic with twin critics, a detached critic encoder that
//! periodically copies the actor's, and the contrastive loss folded into the
//! actor objective.

use std::collections::BTreeMap;
use std::sync::Arc;

use m2curl_numerics::{blend_params, copy_params, Adam, AdamConfig, Binding, Mlp, Module, Parameter, Tape, Tensor, Var};
use m2curl_sim::Observation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::repr::{
    augment_pair, centre_views, combined_loss_from, embed_views, momentum_update, random_offsets, views_at,
    AugmentedPair, ContrastiveConfig, EncoderPair, Offset, RepresentationModel, ViewBatch,
};
use crate::rl::buffer::{ReplayBuffer, Transition};
use crate::rl::features::{encode_views, image_feature_dim, join, state_matrix};
use crate::rl::mode::{AgentMode, Algorithm};
use crate::rl::policy::{standard_normal, GaussianPolicy, ACTION_DIM};
use crate::rl::Metrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub gamma: f64,
    /// Fixed entropy temperature.
    pub alpha_ent: f64,
    /// Target critics keep this fraction of their old value per update.
    pub polyak: f64,
    pub batch_size: usize,
    pub critic_encoder_sync_period: u64,
    pub replay_capacity: usize,
    /// Uniform-random actions before the first update.
    pub warmup_steps: usize,
    /// Environment steps per gradient update.
    pub update_every: usize,
    pub hidden_sizes: Vec<usize>,
    pub actor_optimizer: AdamConfig,
    pub critic_optimizer: AdamConfig,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha_ent: 0.1,
            polyak: 0.995,
            batch_size: 128,
            critic_encoder_sync_period: 2,
            replay_capacity: 100_000,
            warmup_steps: 1000,
            update_every: 1,
            hidden_sizes: vec![128, 128],
            actor_optimizer: AdamConfig::default(),
            critic_optimizer: AdamConfig::default(),
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(format!("sac.{m}")));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.alpha_ent > 0.0) || !self.alpha_ent.is_finite() {
            return bad(format!("alpha_ent must be positive, got {}", self.alpha_ent));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return bad(format!("polyak must lie in (0, 1], got {}", self.polyak));
        }
        if self.batch_size == 0 || self.critic_encoder_sync_period == 0 || self.update_every == 0 {
            return bad("batch_size, critic_encoder_sync_period and update_every must be positive".into());
        }
        if self.replay_capacity < self.batch_size {
            return bad("replay_capacity must hold at least one batch".into());
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden_sizes must be positive".into());
        }
        Ok(())
    }
}

/// Twin Q-networks over `[features ‖ action]`.
#[derive(Debug, Clone)]
pub struct TwinQ {
    pub q1: Mlp,
    pub q2: Mlp,
}

impl TwinQ {
    pub fn new(name: &str, input: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let sizes: Vec<usize> = std::iter::once(input + ACTION_DIM)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        Self {
            q1: Mlp::new(&format!("{name}.q1"), &sizes, rng),
            q2: Mlp::new(&format!("{name}.q2"), &sizes, rng),
        }
    }

    /// `[B]` values of both critics for state-action rows.
    pub fn forward(&self, tape: &mut Tape, state_action: Var, binding: Binding) -> Result<(Var, Var)> {
        let rows = tape.value(state_action).shape()[0];
        let a = self.q1.forward(tape, state_action, binding)?;
        let b = self.q2.forward(tape, state_action, binding)?;
        Ok((tape.reshape(a, &[rows])?, tape.reshape(b, &[rows])?))
    }
}

impl Module for TwinQ {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.q1.visit(f);
        self.q2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.q1.visit_mut(f);
        self.q2.visit_mut(f);
    }
}

/// `y = r + γ(1−d)·(min(Q'₁, Q'₂) − α·log π(a'|s'))`.
pub fn bellman_targets(
    rewards: &[f64],
    dones: &[bool],
    q1_next: &[f64],
    q2_next: &[f64],
    log_prob_next: &[f64],
    gamma: f64,
    alpha_ent: f64,
) -> Vec<f64> {
    (0..rewards.len())
        .map(|i| {
            let cont = if dones[i] { 0.0 } else { 1.0 };
            let soft = q1_next[i].min(q2_next[i]) - alpha_ent * log_prob_next[i];
            rewards[i] + gamma * cont * soft
        })
        .collect()
}

/// Sum of both critics' mean squared errors to `targets`.
pub fn critic_mse(tape: &mut Tape, q1: Var, q2: Var, targets: &[f64]) -> Result<Var> {
    let y = tape.constant(Tensor::from_vec(targets.to_vec()))?;
    let mut total = None;
    for q in [q1, q2] {
        let d = tape.sub(q, y)?;
        let d2 = tape.square(d)?;
        let m = tape.mean(d2)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("two critics"))
}

/// `mean(α·log π(a|s) − min(Q₁, Q₂)(s, a))`.
pub fn actor_objective(tape: &mut Tape, log_prob: Var, q1: Var, q2: Var, alpha_ent: f64) -> Result<Var> {
    let q = tape.minimum(q1, q2)?;
    let ent = tape.scale(log_prob, alpha_ent)?;
    let d = tape.sub(ent, q)?;
    Ok(tape.mean(d)?)
}

/// Copies the actor's encoders into the critic's when `step` is a multiple
/// of `period`. Returns whether a copy happened.
pub fn sync_critic_encoder(actor: &EncoderPair, critic: &mut EncoderPair, step: u64, period: u64) -> Result<bool> {
    if period == 0 {
        return Err(CoreError::Config("critic_encoder_sync_period must be positive".into()));
    }
    if step % period != 0 {
        return Ok(false);
    }
    copy_params(actor, critic)?;
    Ok(true)
}

/// Policy/critic input for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Views(ViewBatch),
    States(Tensor),
}

/// A sampled, augmented minibatch.
#[derive(Debug, Clone)]
pub struct SacBatch {
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub obs: Input,
    pub next: Input,
    /// Second view of `obs` for the contrastive loss, with the per-sample
    /// crop offsets of both views.
    pub key: Option<(ViewBatch, Vec<[Offset; 4]>)>,
}

/// Values produced by one actor step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorStep {
    pub loss_actor: f64,
    pub total: f64,
    pub entropy: f64,
    pub contrastive: Option<crate::repr::LossComponents>,
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    pub mode: AgentMode,
    pub cfg: SacConfig,
    pub contrastive: ContrastiveConfig,
    /// Actor-side encoders, momentum copies and heads (image modes).
    pub repr: Option<RepresentationModel>,
    /// Critic-side encoders, refreshed from the actor's.
    pub critic_encoder: Option<EncoderPair>,
    pub actor: GaussianPolicy,
    pub critic: TwinQ,
    pub target: TwinQ,
    pub replay: ReplayBuffer,
    actor_opt: Adam,
    critic_opt: Adam,
    rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
    updates: u64,
}

impl SacAgent {
    pub fn new(
        mode: AgentMode,
        cfg: SacConfig,
        contrastive: ContrastiveConfig,
        state_dim: usize,
        image_size: usize,
        seed: u64,
    ) -> Result<Self> {
        mode.validate()?;
        if mode.algorithm != Algorithm::Sac {
            return Err(CoreError::Config(format!("{mode} is not a SAC mode")));
        }
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let (repr, critic_encoder, feat) = if mode.uses_images() {
            contrastive.validate(image_size)?;
            let repr = RepresentationModel::new(&contrastive, &mut init)?;
            let mut critic_enc = repr.online.clone();
            copy_params(&repr.online, &mut critic_enc)?;
            let dim = image_feature_dim(mode.modalities, contrastive.embed_dim);
            (Some(repr), Some(critic_enc), dim)
        } else {
            (None, None, state_dim)
        };
        let actor = GaussianPolicy::squashed("actor", feat, &cfg.hidden_sizes, &mut init);
        let critic = TwinQ::new("critic", feat, &cfg.hidden_sizes, &mut init);
        let mut target = critic.clone();
        copy_params(&critic, &mut target)?;
        Ok(Self {
            mode,
            replay: ReplayBuffer::new(cfg.replay_capacity)?,
            actor_opt: Adam::new(cfg.actor_optimizer),
            critic_opt: Adam::new(cfg.critic_optimizer),
            cfg,
            contrastive,
            repr,
            critic_encoder,
            actor,
            critic,
            target,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5AC0_0001)),
            aug_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5AC0_0002)),
            updates: 0,
        })
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn crop(&self) -> usize {
        self.contrastive.crop_size
    }

    /// Centre-cropped (or state) input for acting.
    pub fn act_input(&self, obs: &[Arc<Observation>]) -> Result<Input> {
        if self.mode.uses_images() {
            Ok(Input::Views(centre_views(obs, self.crop())?))
        } else {
            Ok(Input::States(state_matrix(obs)?))
        }
    }

    fn encode(&self, tape: &mut Tape, enc: Option<&EncoderPair>, input: &Input, binding: Binding) -> Result<Var> {
        match (input, enc) {
            (Input::States(s), _) => Ok(tape.constant(s.clone())?),
            (Input::Views(v), Some(e)) => encode_views(tape, e, v, self.mode.modalities, binding),
            (Input::Views(_), None) => Err(CoreError::Contract("image input for a state agent".into())),
        }
    }

    fn actor_features(&self, tape: &mut Tape, input: &Input, binding: Binding) -> Result<Var> {
        self.encode(tape, self.repr.as_ref().map(|r| &r.online), input, binding)
    }

    fn critic_features(&self, tape: &mut Tape, input: &Input) -> Result<Var> {
        self.encode(tape, self.critic_encoder.as_ref(), input, Binding::Frozen)
    }

    /// Policy action for one observation.
    pub fn act(&mut self, obs: &Arc<Observation>, deterministic: bool) -> Result<[f64; 2]> {
        let input = self.act_input(std::slice::from_ref(obs))?;
        let mut tape = Tape::new();
        let f = self.actor_features(&mut tape, &input, Binding::Frozen)?;
        let feats = tape.value(f).clone();
        Ok(self.actor.act(&feats, deterministic, &mut self.rng)?[0].env)
    }

    /// Uniform action in `[−1, 1]²`, used before learning starts.
    pub fn explore(&mut self) -> [f64; 2] {
        [self.rng.gen_range(-1.0..=1.0), self.rng.gen_range(-1.0..=1.0)]
    }

    pub fn store(&mut self, t: Transition) {
        self.replay.push(t);
    }

    /// Samples and augments a minibatch from the replay buffer.
    pub fn prepare_batch(&mut self) -> Result<SacBatch> {
        let idx = self.replay.sample_indices(self.cfg.batch_size, &mut self.rng)?;
        let batch: Vec<&Transition> = idx.iter().map(|&i| self.replay.get(i).expect("sampled index")).collect();
        let obs: Vec<&Arc<Observation>> = batch.iter().map(|t| &t.observation).collect();
        let next: Vec<&Arc<Observation>> = batch.iter().map(|t| &t.next_observation).collect();
        let actions = Tensor::new(
            &[batch.len(), ACTION_DIM],
            batch.iter().flat_map(|t| t.action).collect(),
        )?;
        let rewards = batch.iter().map(|t| t.reward).collect();
        let dones = batch.iter().map(|t| t.done).collect();
        let crop = self.crop();
        let (obs_in, next_in, key) = if !self.mode.uses_images() {
            (Input::States(state_matrix(&obs)?), Input::States(state_matrix(&next)?), None)
        } else if self.mode.augments() {
            let aug = augment_pair(&obs, crop, &mut self.aug_rng)?;
            let next_offsets = random_offsets(&next, crop, &mut self.aug_rng)?;
            let next_views = views_at(&next, &next_offsets, crop)?;
            (Input::Views(aug.query), Input::Views(next_views), Some((aug.key, aug.crop_offsets)))
        } else {
            (Input::Views(centre_views(&obs, crop)?), Input::Views(centre_views(&next, crop)?), None)
        };
        Ok(SacBatch {
            actions,
            rewards,
            dones,
            obs: obs_in,
            next: next_in,
            key,
        })
    }

    /// One critic gradient step. Returns the loss and the critic features of
    /// the batch observations for reuse by the actor step.
    pub fn critic_step(&mut self, b: &SacBatch) -> Result<(f64, Tensor)> {
        let rows = b.rewards.len();
        let noise = standard_normal(&[rows, ACTION_DIM], &mut self.rng);
        let mut tape = Tape::new();
        let cf = self.critic_features(&mut tape, &b.obs)?;
        let cf_next = self.critic_features(&mut tape, &b.next)?;
        let af_next = self.actor_features(&mut tape, &b.next, Binding::Frozen)?;
        let next = self.actor.sample(&mut tape, af_next, &noise, Binding::Frozen)?;
        let sa_next = tape.concat_cols(&[cf_next, next.action])?;
        let (t1, t2) = self.target.forward(&mut tape, sa_next, Binding::Frozen)?;
        let y = bellman_targets(
            &b.rewards,
            &b.dones,
            tape.value(t1).data(),
            tape.value(t2).data(),
            tape.value(next.log_prob).data(),
            self.cfg.gamma,
            self.cfg.alpha_ent,
        );
        let act = tape.constant(b.actions.clone())?;
        let sa = tape.concat_cols(&[cf, act])?;
        let (q1, q2) = self.critic.forward(&mut tape, sa, Binding::Trainable)?;
        let loss = critic_mse(&mut tape, q1, q2, &y)?;
        self.critic.zero_grads();
        tape.grad_eval(loss, &mut [&mut self.critic])?;
        self.critic_opt.step(&mut self.critic);
        self.critic.zero_grads();
        Ok((tape.item(loss)?, tape.value(cf).clone()))
    }

    /// Builds `L_actor + β·L_MM` on `tape` without stepping any optimiser.
    pub fn actor_loss(&self, tape: &mut Tape, b: &SacBatch, critic_features: &Tensor, noise: &Tensor) -> Result<(Var, ActorStep)> {
        let beta = self.contrastive.beta;
        let (feat, mm) = match (&self.repr, &b.key, &b.obs) {
            (Some(repr), Some((key, offsets)), Input::Views(query)) if self.mode.contrastive() && beta > 0.0 => {
                let aug = AugmentedPair {
                    query: query.clone(),
                    key: key.clone(),
                    crop_offsets: offsets.clone(),
                };
                let e = embed_views(tape, repr, &aug)?;
                let feat = join(tape, &[e.query_visual, e.query_tactile])?;
                (feat, Some(combined_loss_from(tape, repr, &e, &self.contrastive)?))
            }
            _ => (self.actor_features(tape, &b.obs, Binding::Trainable)?, None),
        };
        let s = self.actor.sample(tape, feat, noise, Binding::Trainable)?;
        let cf = tape.constant(critic_features.clone())?;
        let sa = tape.concat_cols(&[cf, s.action])?;
        let (q1, q2) = self.critic.forward(tape, sa, Binding::Frozen)?;
        let l_actor = actor_objective(tape, s.log_prob, q1, q2, self.cfg.alpha_ent)?;
        let total = match mm {
            Some((l_mm, _)) => {
                let w = tape.scale(l_mm, beta)?;
                tape.add(l_actor, w)?
            }
            None => l_actor,
        };
        let lp = tape.value(s.log_prob);
        let entropy = -lp.data().iter().sum::<f64>() / lp.len() as f64;
        Ok((
            total,
            ActorStep {
                loss_actor: tape.item(l_actor)?,
                total: tape.item(total)?,
                entropy,
                contrastive: mm.map(|(_, c)| c),
            },
        ))
    }

    /// One actor (and encoder) gradient step.
    pub fn actor_step(&mut self, b: &SacBatch, critic_features: &Tensor) -> Result<ActorStep> {
        let noise = standard_normal(&[b.rewards.len(), ACTION_DIM], &mut self.rng);
        let mut tape = Tape::new();
        let (loss, stats) = self.actor_loss(&mut tape, b, critic_features, &noise)?;
        self.actor.zero_grads();
        match &mut self.repr {
            Some(repr) => {
                repr.zero_grads();
                tape.grad_eval(loss, &mut [&mut self.actor, &mut repr.online, &mut repr.heads])?;
                self.actor_opt.step(&mut self.actor);
                self.actor_opt.step(&mut repr.online);
                self.actor_opt.step(&mut repr.heads);
                repr.zero_grads();
            }
            None => {
                tape.grad_eval(loss, &mut [&mut self.actor])?;
                self.actor_opt.step(&mut self.actor);
            }
        }
        self.actor.zero_grads();
        Ok(stats)
    }

    /// Critic step, actor step, momentum update, polyak averaging and the
    /// periodic critic-encoder sync, in that order.
    pub fn update(&mut self) -> Result<Metrics> {
        let batch = self.prepare_batch()?;
        let (loss_critic, cf) = self.critic_step(&batch)?;
        let actor = self.actor_step(&batch, &cf)?;
        if let (Some(repr), true) = (&mut self.repr, self.mode.contrastive() && self.contrastive.beta > 0.0) {
            momentum_update(repr, self.contrastive.alpha_ema)?;
        }
        blend_params(&self.critic, &mut self.target, self.cfg.polyak)?;
        self.updates += 1;
        if let (Some(repr), Some(ce)) = (&self.repr, &mut self.critic_encoder) {
            sync_critic_encoder(&repr.online, ce, self.updates, self.cfg.critic_encoder_sync_period)?;
        }
        let mut m = BTreeMap::from([
            ("loss_critic".to_string(), loss_critic),
            ("loss_actor".to_string(), actor.loss_actor),
            ("entropy".to_string(), actor.entropy),
        ]);
        if let Some(c) = actor.contrastive {
            m.extend(c.metrics().into_iter().map(|(k, v)| (k.to_string(), v)));
        }
        Ok(m)
    }
}

impl Module for SacAgent {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.repr.visit(f);
        self.critic_encoder.visit(f);
        self.actor.visit(f);
        self.critic.visit(f);
        self.target.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.repr.visit_mut(f);
        self.critic_encoder.visit_mut(f);
        self.actor.visit_mut(f);
        self.critic.visit_mut(f);
        self.target.visit_mut(f);
    }
}
