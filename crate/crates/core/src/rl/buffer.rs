//! Replay storage for SAC and on-policy rollouts for PPO.

use std::collections::VecDeque;
use std::sync::Arc;

use m2curl_sim::Observation;
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::repr::Offset;

/// One environment step. Observations are raw images, shared between
/// consecutive transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Arc<Observation>,
    pub action: [f64; 2],
    pub reward: f64,
    pub next_observation: Arc<Observation>,
    pub done: bool,
}

/// FIFO ring of transitions with uniform sampling with replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(CoreError::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            storage: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.storage.get(i)
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
        }
        self.storage.push_back(t);
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if batch_size == 0 || self.storage.len() < batch_size {
            return Err(CoreError::Contract(format!(
                "cannot sample {batch_size} from a buffer holding {}",
                self.storage.len()
            )));
        }
        Ok((0..batch_size).map(|_| rng.gen_range(0..self.storage.len())).collect())
    }

    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<&Transition>> {
        Ok(self
            .sample_indices(batch_size, rng)?
            .into_iter()
            .map(|i| &self.storage[i])
            .collect())
    }
}

/// One on-policy step. `action` is the unclipped Gaussian sample; `crop`
/// holds the `[visual, tactile]` crop offsets the policy saw, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub observation: Arc<Observation>,
    pub crop: Option<[Offset; 2]>,
    pub action: [f64; 2],
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub steps: Vec<RolloutStep>,
    /// Value estimate of the state following the last step.
    pub bootstrap_value: f64,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn clear(&mut self) {
        self.steps.clear();
        self.bootstrap_value = 0.0;
    }
}
