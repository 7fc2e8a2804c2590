//! One training run: random baseline, periodic deterministic evals on a
//! separately seeded environment, JSONL metrics and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use m2curl_core::rl::{Agent, Metrics};
use m2curl_numerics::checkpoint;
use m2curl_sim::{AnyEnv, Environment, Observation};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{io_err, Result};
use crate::metrics::{MetricsRecord, MetricsWriter, RecordKind, CONFIG_FILE, METRICS_FILE};

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const RANDOM_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_return: f64,
    pub random_return: f64,
}

/// Mean and population std of the returns of one episode per seed.
fn run_episodes(
    env: &mut AnyEnv,
    seeds: &[u64],
    mut policy: impl FnMut(&Arc<Observation>) -> Result<[f64; 2]>,
) -> Result<(f64, f64)> {
    let mut returns = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let mut obs = Arc::new(env.reset(s));
        let mut total = 0.0;
        loop {
            let r = env.step(policy(&obs)?)?;
            total += r.reward;
            if r.done {
                break;
            }
            obs = Arc::new(r.observation);
        }
        returns.push(total);
    }
    Ok(mean_std(&returns))
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Default)]
struct Interval {
    returns: Vec<f64>,
    sums: BTreeMap<String, (f64, usize)>,
}

impl Interval {
    fn add(&mut self, m: &Metrics) {
        for (k, &v) in m {
            let e = self.sums.entry(k.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }

    fn take(&mut self, updates: usize) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = self.sums.iter().map(|(k, &(s, n))| (k.clone(), s / n as f64)).collect();
        if !self.returns.is_empty() {
            out.insert("train_episode_return".into(), mean_std(&self.returns).0);
        }
        out.insert("train_episodes".into(), self.returns.len() as f64);
        out.insert("updates".into(), updates as f64);
        *self = Interval::default();
        out
    }
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    writer: MetricsWriter,
    start: Instant,
}

impl Runner<'_> {
    fn record(&mut self, kind: RecordKind, env_steps: usize, scalars: BTreeMap<String, f64>, status: Option<String>) -> Result<()> {
        let wall_ms = if self.cfg.record_wall_clock {
            self.start.elapsed().as_millis() as u64
        } else {
            0
        };
        self.writer.write(&MetricsRecord {
            kind,
            env_steps,
            wall_ms,
            scalars,
            status,
        })
    }
}

fn checkpoint_at(agent: &Agent, dir: &Path, steps: usize) -> Result<PathBuf> {
    let stem = dir.join(format!("step_{steps:08}"));
    let (json, _) = checkpoint::save(agent, &stem)?;
    Ok(json)
}

/// Trains as configured and writes `config.json`, `metrics.jsonl` and
/// `checkpoints/` under `cfg.output_dir`.
///
/// On failure after the metrics file exists, a final `status` record with
/// the error is written before the error is returned.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_json()?).map_err(io_err(dir.join(CONFIG_FILE)))?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut runner = Runner {
        cfg,
        writer: MetricsWriter::create(&metrics_path)?,
        start: Instant::now(),
    };
    match train(cfg, &mut runner, &ckpt_dir) {
        Ok((final_return, random_return, checkpoints)) => Ok(RunOutput {
            metrics_path,
            checkpoints,
            final_return,
            random_return,
        }),
        Err(e) => {
            let steps = runner.writer.last_steps();
            // Best effort: the original error matters more than this one.
            let _ = runner.record(RecordKind::Status, steps, BTreeMap::new(), Some(format!("error: {e}")));
            Err(e)
        }
    }
}

fn train(cfg: &RunConfig, runner: &mut Runner, ckpt_dir: &Path) -> Result<(f64, f64, Vec<PathBuf>)> {
    let mut env = AnyEnv::new(cfg.env, &cfg.env_config)?;
    let mut eval_env = AnyEnv::new(cfg.env, &cfg.env_config)?;
    let mut agent = Agent::new(
        cfg.mode(),
        cfg.sac.as_ref(),
        cfg.ppo.as_ref(),
        cfg.contrastive,
        env.state_dim(),
        env.image_size(),
        cfg.seed,
    )?;
    let mut train_seeds = stream(cfg.seed, TRAIN_STREAM);
    let mut eval_rng = stream(cfg.seed, EVAL_STREAM);
    let eval_seeds: Vec<u64> = (0..cfg.eval_episodes).map(|_| eval_rng.next_u64()).collect();

    let mut random = stream(cfg.seed, RANDOM_STREAM);
    let (random_return, _) = run_episodes(&mut eval_env, &eval_seeds, |_| {
        Ok([random.gen_range(-1.0..=1.0), random.gen_range(-1.0..=1.0)])
    })?;
    let (mut last_return, std) = run_episodes(&mut eval_env, &eval_seeds, |o| Ok(agent.act_eval(o)?))?;
    runner.record(
        RecordKind::Eval,
        0,
        BTreeMap::from([
            ("episode_return".into(), last_return),
            ("episode_return_std".into(), std),
            ("random_return".into(), random_return),
        ]),
        None,
    )?;

    let mut checkpoints = Vec::new();
    let mut interval = Interval::default();
    let mut updates = 0;
    let mut obs = Arc::new(env.reset(train_seeds.next_u64()));
    let mut episode_return = 0.0;
    for t in 1..=cfg.total_env_steps {
        let action = agent.act_train(&obs, t - 1)?;
        let r = env.step(action)?;
        episode_return += r.reward;
        let next = Arc::new(r.observation);
        // Every episode here ends on the horizon, a time limit.
        if let Some(m) = agent.observe(obs, action, r.reward, Arc::clone(&next), false, r.done, t)? {
            updates += 1;
            interval.add(&m);
        }
        obs = if r.done {
            interval.returns.push(episode_return);
            episode_return = 0.0;
            Arc::new(env.reset(train_seeds.next_u64()))
        } else {
            next
        };

        if t % cfg.eval_every == 0 || t == cfg.total_env_steps {
            runner.record(RecordKind::Train, t, interval.take(updates), None)?;
            let (mean, std) = run_episodes(&mut eval_env, &eval_seeds, |o| Ok(agent.act_eval(o)?))?;
            last_return = mean;
            runner.record(
                RecordKind::Eval,
                t,
                BTreeMap::from([("episode_return".into(), mean), ("episode_return_std".into(), std)]),
                None,
            )?;
        }
        if cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0 && t != cfg.total_env_steps {
            checkpoints.push(checkpoint_at(&agent, ckpt_dir, t)?);
        }
    }
    checkpoints.push(checkpoint_at(&agent, ckpt_dir, cfg.total_env_steps)?);
    Ok((last_return, random_return, checkpoints))
}
