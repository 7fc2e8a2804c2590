use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Weights and sizes for the combined contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub lambda_vv: f64,
    pub lambda_tt: f64,
    pub lambda_vt: f64,
    pub lambda_tv: f64,
    /// Weight of the contrastive loss inside the RL objective.
    pub beta: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Momentum-encoder EMA coefficient; 1 freezes the momentum copy.
    pub alpha_ema: f64,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub crop_size: usize,
}

impl ContrastiveConfig {
    pub fn sac_default() -> Self {
        Self {
            lambda_vv: 1.0,
            lambda_tt: 1.0,
            lambda_vt: 1.0,
            lambda_tv: 1.0,
            beta: 0.1,
            tau: 0.1,
            alpha_ema: 0.99,
            embed_dim: 50,
            head_hidden: 128,
            crop_size: 56,
        }
    }

    pub fn ppo_default() -> Self {
        Self {
            beta: 1.0,
            tau: 0.05,
            ..Self::sac_default()
        }
    }

    pub fn lambdas(&self) -> [f64; 4] {
        [self.lambda_vv, self.lambda_tt, self.lambda_vt, self.lambda_tv]
    }

    /// Checks field invariants; `render_size` is the raw image side.
    pub fn validate(&self, render_size: usize) -> Result<()> {
        let names = ["lambda_vv", "lambda_tt", "lambda_vt", "lambda_tv"];
        for (name, l) in names.iter().zip(self.lambdas()) {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(CoreError::Config(format!("{name} must be a finite non-negative number, got {l}")));
            }
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(CoreError::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(CoreError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha_ema) {
            return Err(CoreError::Config(format!("alpha_ema must lie in [0, 1], got {}", self.alpha_ema)));
        }
        if self.embed_dim == 0 || self.head_hidden == 0 {
            return Err(CoreError::Config("embed_dim and head_hidden must be positive".into()));
        }
        if self.crop_size > render_size {
            return Err(CoreError::Config(format!(
                "crop_size {} exceeds render size {render_size}",
                self.crop_size
            )));
        }
        if crate::repr::model::conv_stack_side(self.crop_size).is_none() {
            return Err(CoreError::Config(format!("crop_size {} is too small for the encoder", self.crop_size)));
        }
        Ok(())
    }
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self::sac_default()
    }
}
