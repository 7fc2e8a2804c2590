//! Run configuration: JSON with per-algorithm defaults and strict key checks.

use std::fs;
use std::path::{Path, PathBuf};

use m2curl_core::repr::ContrastiveConfig;
use m2curl_core::rl::{AgentMode, Algorithm, Modalities, PpoConfig, Representation, SacConfig};
use m2curl_sim::{EnvConfig, EnvKind};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{io_err, HarnessError, Result};

/// Everything one training run needs. Serialises with every default filled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    pub algorithm: Algorithm,
    pub representation: Representation,
    pub modalities: Modalities,
    pub seed: u64,
    pub contrastive: ContrastiveConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sac: Option<SacConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppo: Option<PpoConfig>,
    pub env_config: EnvConfig,
    pub total_env_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Environment steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Stores real elapsed milliseconds in metrics; off keeps files
    /// byte-reproducible.
    pub record_wall_clock: bool,
    pub output_dir: PathBuf,
}

pub const DEFAULT_TOTAL_STEPS: usize = 100_000;
pub const DEFAULT_EVAL_EVERY: usize = 5_000;
pub const DEFAULT_EVAL_EPISODES: usize = 10;

const TOP_LEVEL_KEYS: [&str; 16] = [
    "env",
    "algorithm",
    "representation",
    "modalities",
    "seed",
    "contrastive",
    "sac",
    "ppo",
    "env_config",
    "total_env_steps",
    "eval_every",
    "eval_episodes",
    "checkpoint_every",
    "record_wall_clock",
    "output_dir",
    "$schema",
];

impl RunConfig {
    pub fn mode(&self) -> AgentMode {
        AgentMode {
            algorithm: self.algorithm,
            representation: self.representation,
            modalities: self.modalities,
        }
    }

    /// Render size of the configured environment.
    pub fn image_size(&self) -> usize {
        match self.env {
            EnvKind::PushWorld => self.env_config.push_world.image_size,
            EnvKind::EdgeFollow => self.env_config.edge_follow.image_size,
        }
    }

    /// Experiment cell shared by runs that differ only in seed.
    pub fn cell_id(&self) -> String {
        let mut id = format!("{}/{}", self.env, self.mode());
        let l = self.contrastive.lambdas();
        if self.representation == Representation::M2curl && l != [1.0; 4] {
            id.push_str(&format!("/lambda={},{},{},{}", l[0], l[1], l[2], l[3]));
        }
        id
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(HarnessError::Config(m));
        self.mode().validate()?;
        match (self.algorithm, &self.sac, &self.ppo) {
            (Algorithm::Sac, Some(c), None) => c.validate()?,
            (Algorithm::Ppo, None, Some(c)) => c.validate()?,
            _ => return cfg_err("exactly one of `sac`/`ppo` must be present, matching `algorithm`".into()),
        }
        if self.representation != Representation::State {
            self.contrastive.validate(self.image_size())?;
        }
        match self.env {
            EnvKind::PushWorld => self.env_config.push_world.validate()?,
            EnvKind::EdgeFollow => self.env_config.edge_follow.validate()?,
        }
        if self.eval_every == 0 {
            return cfg_err("eval_every must be positive".into());
        }
        if self.eval_episodes == 0 {
            return cfg_err("eval_episodes must be positive".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            return cfg_err("output_dir must not be empty".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| HarnessError::Config(format!("missing field `{key}`")))
}

fn typed<T: for<'de> Deserialize<'de>>(key: &str, v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| HarnessError::Config(format!("field `{key}`: {e}")))
}

/// Overlays the keys of `given` on `defaults`; unknown keys surface when the
/// merged object is deserialised with `deny_unknown_fields`.
fn overlay(defaults: Value, given: Option<&Value>, key: &str) -> Result<Value> {
    let mut base = defaults;
    match given {
        None => Ok(base),
        Some(Value::Object(g)) => {
            let b = base.as_object_mut().expect("defaults serialise to objects");
            for (k, v) in g {
                b.insert(k.clone(), v.clone());
            }
            Ok(base)
        }
        Some(other) => Err(HarnessError::Config(format!("field `{key}` must be an object, got {other}"))),
    }
}

/// Parses a config JSON document: fills defaults (contrastive β/τ and the
/// algorithm section depend on `algorithm`), rejects unknown keys and
/// validates every field.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let root: Value = serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("invalid JSON: {e}")))?;
    let obj = root
        .as_object()
        .ok_or_else(|| HarnessError::Config("config must be a JSON object".into()))?;
    if let Some(k) = obj.keys().find(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
        return Err(HarnessError::Config(format!(
            "unknown field `{k}`; expected one of {}",
            TOP_LEVEL_KEYS[..15].join(", ")
        )));
    }
    let env: EnvKind = typed("env", field(obj, "env")?.clone())?;
    let algorithm: Algorithm = typed("algorithm", field(obj, "algorithm")?.clone())?;
    let seed: u64 = typed("seed", field(obj, "seed")?.clone())?;
    let opt = |k: &str| obj.get(k).cloned();
    let representation = opt("representation").map_or(Ok(Representation::M2curl), |v| typed("representation", v))?;
    let modalities = opt("modalities").map_or(Ok(Modalities::Both), |v| typed("modalities", v))?;

    let contrastive_default = match algorithm {
        Algorithm::Sac => ContrastiveConfig::sac_default(),
        Algorithm::Ppo => ContrastiveConfig::ppo_default(),
    };
    let contrastive = typed(
        "contrastive",
        overlay(serde_json::to_value(contrastive_default)?, obj.get("contrastive"), "contrastive")?,
    )?;
    let (sac, ppo) = match algorithm {
        Algorithm::Sac => {
            if obj.contains_key("ppo") {
                return Err(HarnessError::Config("field `ppo` given for a sac run".into()));
            }
            let v = overlay(serde_json::to_value(SacConfig::default())?, obj.get("sac"), "sac")?;
            (Some(typed("sac", v)?), None)
        }
        Algorithm::Ppo => {
            if obj.contains_key("sac") {
                return Err(HarnessError::Config("field `sac` given for a ppo run".into()));
            }
            let v = overlay(serde_json::to_value(PpoConfig::default())?, obj.get("ppo"), "ppo")?;
            (None, Some(typed("ppo", v)?))
        }
    };
    let env_config = opt("env_config").map_or(Ok(EnvConfig::default()), |v| typed("env_config", v))?;
    let count = |k: &str, d: usize| opt(k).map_or(Ok(d), |v| typed::<usize>(k, v));
    let mode = AgentMode {
        algorithm,
        representation,
        modalities,
    };
    let cfg = RunConfig {
        env,
        algorithm,
        representation,
        modalities,
        seed,
        contrastive,
        sac,
        ppo,
        env_config,
        total_env_steps: count("total_env_steps", DEFAULT_TOTAL_STEPS)?,
        eval_every: count("eval_every", DEFAULT_EVAL_EVERY)?,
        eval_episodes: count("eval_episodes", DEFAULT_EVAL_EPISODES)?,
        checkpoint_every: count("checkpoint_every", 0)?,
        record_wall_clock: opt("record_wall_clock").map_or(Ok(false), |v| typed("record_wall_clock", v))?,
        output_dir: opt("output_dir").map_or_else(
            || Ok(PathBuf::from(format!("runs/{env}/{mode}/seed{seed}"))),
            |v| typed("output_dir", v),
        )?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config_str(&text).map_err(|e| HarnessError::Parse {
        path: path.to_path_buf(),
        message: match e {
            HarnessError::Config(m) => m,
            other => other.to_string(),
        },
    })
}
