//! Multimodal contrastive representation learning fused into SAC and PPO.
//!
//! [`repr`] holds the visual/tactile encoders, projection heads and the
//! intra-/inter-modality InfoNCE losses; [`rl`] holds the agents that consume
//! the learned embeddings and fold the contrastive loss into their updates.

mod error;
pub mod repr;
pub mod rl;

pub use error::{CoreError, Result};
