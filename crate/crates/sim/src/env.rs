use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::edge::{EdgeConfig, EdgeFollow};
use crate::error::{Result, SimError};
use crate::image::Image;
use crate::push::{PushConfig, PushWorld};

/// One paired visuotactile observation plus ground-truth state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub visual: Image,
    pub tactile: Image,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    /// Always `<= 0`.
    pub reward: f64,
    pub done: bool,
    pub info: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    PushWorld,
    EdgeFollow,
}

impl EnvKind {
    pub const ALL: [EnvKind; 2] = [EnvKind::PushWorld, EnvKind::EdgeFollow];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PushWorld => "push_world",
            EnvKind::EdgeFollow => "edge_follow",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SimError::Config(format!("unknown env kind {s:?}; expected push_world or edge_follow")))
    }
}

/// Physics and rendering constants for every environment.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub push_world: PushConfig,
    pub edge_follow: EdgeConfig,
}

/// Common episode protocol.
pub trait Environment {
    fn reset(&mut self, seed: u64) -> Observation;
    fn step(&mut self, action: [f64; 2]) -> Result<StepResult>;
    fn state_dim(&self) -> usize;
    fn image_size(&self) -> usize;
    fn horizon(&self) -> usize;
}

/// Either environment behind one concrete type.
#[derive(Debug, Clone)]
pub enum AnyEnv {
    Push(PushWorld),
    Edge(EdgeFollow),
}

impl AnyEnv {
    pub fn new(kind: EnvKind, cfg: &EnvConfig) -> Result<Self> {
        Ok(match kind {
            EnvKind::PushWorld => AnyEnv::Push(PushWorld::new(cfg.push_world)?),
            EnvKind::EdgeFollow => AnyEnv::Edge(EdgeFollow::new(cfg.edge_follow)?),
        })
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            AnyEnv::Push(_) => EnvKind::PushWorld,
            AnyEnv::Edge(_) => EnvKind::EdgeFollow,
        }
    }

    fn inner(&self) -> &dyn Environment {
        match self {
            AnyEnv::Push(e) => e,
            AnyEnv::Edge(e) => e,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Environment {
        match self {
            AnyEnv::Push(e) => e,
            AnyEnv::Edge(e) => e,
        }
    }
}

impl Environment for AnyEnv {
    fn reset(&mut self, seed: u64) -> Observation {
        self.inner_mut().reset(seed)
    }
    fn step(&mut self, action: [f64; 2]) -> Result<StepResult> {
        self.inner_mut().step(action)
    }
    fn state_dim(&self) -> usize {
        self.inner().state_dim()
    }
    fn image_size(&self) -> usize {
        self.inner().image_size()
    }
    fn horizon(&self) -> usize {
        self.inner().horizon()
    }
}

/// Creates the environment named by `kind` and resets it with `seed`.
pub fn env_reset(kind: &str, cfg: &EnvConfig, seed: u64) -> Result<(AnyEnv, Observation)> {
    let mut env = AnyEnv::new(kind.parse()?, cfg)?;
    let obs = env.reset(seed);
    Ok((env, obs))
}

pub(crate) fn clip_action(action: [f64; 2]) -> [f64; 2] {
    action.map(|a| if a.is_nan() { 0.0 } else { a.clamp(-1.0, 1.0) })
}
