use std::sync::Arc;

use m2curl_numerics::{Module, Parameter};
use m2curl_sim::Observation;

use crate::error::{CoreError, Result};
use crate::repr::ContrastiveConfig;
use crate::rl::buffer::Transition;
use crate::rl::mode::{AgentMode, Algorithm};
use crate::rl::ppo::{PpoAgent, PpoConfig};
use crate::rl::sac::{SacAgent, SacConfig};
use crate::rl::Metrics;

/// Either agent behind one interface for the training loop.
#[derive(Debug, Clone)]
pub enum Agent {
    Sac(Box<SacAgent>),
    Ppo(Box<PpoAgent>),
}

impl Agent {
    pub fn new(
        mode: AgentMode,
        sac: Option<&SacConfig>,
        ppo: Option<&PpoConfig>,
        contrastive: ContrastiveConfig,
        state_dim: usize,
        image_size: usize,
        seed: u64,
    ) -> Result<Self> {
        match (mode.algorithm, sac, ppo) {
            (Algorithm::Sac, Some(c), None) => Ok(Agent::Sac(Box::new(SacAgent::new(
                mode,
                c.clone(),
                contrastive,
                state_dim,
                image_size,
                seed,
            )?))),
            (Algorithm::Ppo, None, Some(c)) => Ok(Agent::Ppo(Box::new(PpoAgent::new(
                mode,
                c.clone(),
                contrastive,
                state_dim,
                image_size,
                seed,
            )?))),
            _ => Err(CoreError::Config(format!(
                "{mode} needs exactly the matching algorithm config"
            ))),
        }
    }

    pub fn mode(&self) -> AgentMode {
        match self {
            Agent::Sac(a) => a.mode,
            Agent::Ppo(a) => a.mode,
        }
    }

    /// Training-time action; `env_steps` counts steps taken so far.
    pub fn act_train(&mut self, obs: &Arc<Observation>, env_steps: usize) -> Result<[f64; 2]> {
        match self {
            Agent::Sac(a) if env_steps < a.cfg.warmup_steps => Ok(a.explore()),
            Agent::Sac(a) => a.act(obs, false),
            Agent::Ppo(a) => a.act_collect(obs),
        }
    }

    /// Deterministic action for evaluation.
    pub fn act_eval(&mut self, obs: &Arc<Observation>) -> Result<[f64; 2]> {
        match self {
            Agent::Sac(a) => a.act(obs, true),
            Agent::Ppo(a) => a.act_deterministic(obs),
        }
    }

    /// Feeds back one environment step and runs any due updates.
    ///
    /// `terminal` marks a true termination; `episode_end` also covers time
    /// limits. SAC bootstraps through time limits, PPO cuts its advantage
    /// recursion at every episode boundary.
    #[allow(clippy::too_many_arguments)]
    pub fn observe(
        &mut self,
        obs: Arc<Observation>,
        action: [f64; 2],
        reward: f64,
        next: Arc<Observation>,
        terminal: bool,
        episode_end: bool,
        env_steps: usize,
    ) -> Result<Option<Metrics>> {
        match self {
            Agent::Sac(a) => {
                a.store(Transition {
                    observation: obs,
                    action,
                    reward,
                    next_observation: next,
                    done: terminal,
                });
                let due = env_steps >= a.cfg.warmup_steps
                    && a.replay.len() >= a.cfg.batch_size
                    && env_steps % a.cfg.update_every == 0;
                if due {
                    Ok(Some(a.update()?))
                } else {
                    Ok(None)
                }
            }
            Agent::Ppo(a) => a.observe(reward, episode_end, &next),
        }
    }
}

impl Module for Agent {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        match self {
            Agent::Sac(a) => a.visit(f),
            Agent::Ppo(a) => a.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        match self {
            Agent::Sac(a) => a.visit_mut(f),
            Agent::Ppo(a) => a.visit_mut(f),
        }
    }
}
