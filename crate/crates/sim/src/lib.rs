//! Desk-scale visuotactile environments.
//!
//! [`PushWorld`] pushes a block along a random waypoint path; [`EdgeFollow`]
//! tracks a randomly oriented edge. Both emit a top-down visual image, a
//! tactile imprint in the sensor frame and the ground-truth state vector,
//! with dense non-positive rewards.

mod dataset;
mod edge;
mod env;
mod error;
pub mod image;
mod push;
pub mod tactile;

pub use dataset::{
    load_pairs, make_latent_pair_dataset, read_pairs, LatentPairDataset, LatentPose, PairSample,
    StoredPairs,
};
pub use edge::{EdgeConfig, EdgeFollow, EdgeState};
pub use env::{env_reset, AnyEnv, EnvConfig, EnvKind, Environment, Observation, StepResult};
pub use error::{Result, SimError};
pub use image::Image;
pub use push::{PushConfig, PushState, PushWorld};
pub use tactile::{Contact, SensorConfig};
