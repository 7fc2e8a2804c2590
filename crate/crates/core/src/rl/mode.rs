use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sac,
    Ppo,
}

/// How observations reach the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Random crops plus the combined contrastive loss.
    M2curl,
    /// Random crops only.
    Rad,
    /// Centre crops, no auxiliary loss.
    Vanilla,
    /// Ground-truth state vector; no encoders.
    State,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modalities {
    Both,
    VisualOnly,
    TactileOnly,
}

impl Modalities {
    pub fn uses_visual(self) -> bool {
        self != Modalities::TactileOnly
    }

    pub fn uses_tactile(self) -> bool {
        self != Modalities::VisualOnly
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentMode {
    pub algorithm: Algorithm,
    pub representation: Representation,
    pub modalities: Modalities,
}

impl AgentMode {
    pub fn validate(&self) -> Result<()> {
        if self.representation == Representation::M2curl && self.modalities != Modalities::Both {
            return Err(CoreError::Config(
                "m2curl needs both modalities; use rad for single-modality runs".into(),
            ));
        }
        Ok(())
    }

    pub fn uses_images(&self) -> bool {
        self.representation != Representation::State
    }

    /// Whether training batches are randomly cropped.
    pub fn augments(&self) -> bool {
        matches!(self.representation, Representation::M2curl | Representation::Rad)
    }

    pub fn contrastive(&self) -> bool {
        self.representation == Representation::M2curl
    }
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sac => "sac",
            Algorithm::Ppo => "ppo",
        }
    }
}

impl Representation {
    pub fn name(self) -> &'static str {
        match self {
            Representation::M2curl => "m2curl",
            Representation::Rad => "rad",
            Representation::Vanilla => "vanilla",
            Representation::State => "state",
        }
    }
}

impl Modalities {
    pub fn name(self) -> &'static str {
        match self {
            Modalities::Both => "both",
            Modalities::VisualOnly => "visual_only",
            Modalities::TactileOnly => "tactile_only",
        }
    }
}

impl fmt::Display for AgentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.representation.name(), self.algorithm.name())?;
        if self.uses_images() && self.modalities != Modalities::Both {
            write!(f, "-{}", self.modalities.name())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn m2curl_requires_both_modalities() {
        let mut m = AgentMode {
            algorithm: Algorithm::Sac,
            representation: Representation::M2curl,
            modalities: Modalities::VisualOnly,
        };
        assert!(m.validate().is_err());
        m.representation = Representation::Rad;
        assert!(m.validate().is_ok());
        assert_eq!(m.to_string(), "rad-sac-visual_only");
        m.representation = Representation::State;
        assert_eq!(m.to_string(), "state-sac");
    }
}
