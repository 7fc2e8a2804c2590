//! Named experiment grids.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::{json, Value};

use crate::config::{parse_config_str, RunConfig};
use crate::error::{HarnessError, Result};
use crate::run::{run_experiment, RunOutput};

pub const PRESETS: [&str; 3] = ["table1-grid", "ablation-intra-inter", "unimodal"];
pub const PRESET_SEEDS: [u64; 3] = [0, 1, 2];

fn config(out: &Path, sub: &str, mut v: Value) -> Result<RunConfig> {
    let seed = v["seed"].as_u64().unwrap_or_default();
    v["env"] = json!("push_world");
    v["output_dir"] = json!(out.join(sub).join(format!("seed{seed}")));
    parse_config_str(&v.to_string())
}

/// Expands a preset into its run configs, writing under `out`.
pub fn preset(name: &str, out: &Path) -> Result<Vec<RunConfig>> {
    let mut cfgs = Vec::new();
    match name {
        "table1-grid" => {
            for rep in ["m2curl", "rad", "vanilla", "state"] {
                for alg in ["sac", "ppo"] {
                    for seed in PRESET_SEEDS {
                        let v = json!({"algorithm": alg, "representation": rep, "seed": seed});
                        cfgs.push(config(out, &format!("{rep}-{alg}"), v)?);
                    }
                }
            }
        }
        "ablation-intra-inter" => {
            let cells = [("full", [1.0, 1.0, 1.0, 1.0]), ("intra", [1.0, 1.0, 0.0, 0.0]), ("inter", [0.0, 0.0, 1.0, 1.0])];
            for (label, l) in cells {
                for seed in PRESET_SEEDS {
                    let v = json!({
                        "algorithm": "sac",
                        "seed": seed,
                        "contrastive": {"lambda_vv": l[0], "lambda_tt": l[1], "lambda_vt": l[2], "lambda_tv": l[3]},
                    });
                    cfgs.push(config(out, &format!("m2curl-sac-{label}"), v)?);
                }
            }
        }
        "unimodal" => {
            for (rep, modalities) in [("m2curl", "both"), ("rad", "visual_only"), ("rad", "tactile_only")] {
                for alg in ["sac", "ppo"] {
                    for seed in PRESET_SEEDS {
                        let v = json!({"algorithm": alg, "representation": rep, "modalities": modalities, "seed": seed});
                        cfgs.push(config(out, &format!("{rep}-{alg}-{modalities}"), v)?);
                    }
                }
            }
        }
        _ => {
            return Err(HarnessError::Config(format!(
                "unknown preset {name:?}; valid presets: {}",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(cfgs)
}

/// Runs configs on up to `parallel` threads; results keep input order.
pub fn run_all(cfgs: &[RunConfig], parallel: usize) -> Vec<Result<RunOutput>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunOutput>>>> = Mutex::new((0..cfgs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..parallel.max(1).min(cfgs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = cfgs.get(i) else { break };
                let r = run_experiment(cfg);
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every index was claimed"))
        .collect()
}
