//! SAC and PPO agents over learned visuotactile embeddings or ground-truth
//! state, with the contrastive loss folded into the policy objective.

mod agent;
mod buffer;
mod features;
mod mode;
mod policy;
mod ppo;
mod sac;

use std::collections::BTreeMap;

pub use agent::Agent;
pub use buffer::{ReplayBuffer, RolloutBuffer, RolloutStep, Transition};
pub use features::{encode_views, image_feature_dim};
pub use mode::{AgentMode, Algorithm, Modalities, Representation};
pub use policy::{standard_normal, Action, GaussianPolicy, PolicySample, Squash, ACTION_DIM, LOG_STD_MAX, LOG_STD_MIN};
pub use ppo::{clipped_surrogate, gae, gae_advantages, normalize, PpoAgent, PpoConfig, PpoStats};
pub use sac::{
    actor_objective, bellman_targets, critic_mse, sync_critic_encoder, ActorStep, Input, SacAgent, SacBatch,
    SacConfig, TwinQ,
};

/// Scalar metrics of one update, keyed by metric name.
pub type Metrics = BTreeMap<String, f64>;
