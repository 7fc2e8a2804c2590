//! Append-only JSONL metrics, one [`MetricsRecord`] per line.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

/// Scalar keys a run may emit.
///
/// Eval records: `episode_return`, `episode_return_std`, plus
/// `random_return` on the first one. Train records: `train_episode_return`,
/// `train_episodes`, `updates` and the update metrics averaged over the
/// interval.
pub const DOCUMENTED_KEYS: [&str; 15] = [
    "episode_return",
    "episode_return_std",
    "random_return",
    "train_episode_return",
    "train_episodes",
    "updates",
    "loss_critic",
    "loss_actor",
    "entropy",
    "ratio_mean",
    "loss_vv",
    "loss_tt",
    "loss_vt",
    "loss_tv",
    "loss_mm",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Eval,
    Train,
    Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub kind: RecordKind,
    pub env_steps: usize,
    pub wall_ms: u64,
    pub scalars: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
}

/// Single writer for one run's metrics file; flushes after every record.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last_steps: usize,
}

impl MetricsWriter {
    /// Truncates any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            last_steps: 0,
        })
    }

    /// Reopens for appending, continuing the step ordering check.
    pub fn append(path: &Path) -> Result<Self> {
        let last_steps = read_metrics(path)?.last().map_or(0, |r| r.env_steps);
        let file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            last_steps,
        })
    }

    pub fn last_steps(&self) -> usize {
        self.last_steps
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        if record.env_steps < self.last_steps {
            return Err(HarnessError::Contract(format!(
                "{}: env_steps went backwards ({} after {})",
                self.path.display(),
                record.env_steps,
                self.last_steps
            )));
        }
        self.last_steps = record.env_steps;
        let line = serde_json::to_string(record)?;
        writeln!(self.out, "{line}").map_err(io_err(&self.path))?;
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| HarnessError::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// `(env_steps, value)` for every record carrying `key`, in file order.
/// Eval records are preferred; other kinds are used only when no eval
/// record has the key.
pub fn series(records: &[MetricsRecord], key: &str) -> Vec<(usize, f64)> {
    let pick = |kind: Option<RecordKind>| -> Vec<(usize, f64)> {
        records
            .iter()
            .filter(|r| kind.map_or(true, |k| r.kind == k))
            .filter_map(|r| r.scalars.get(key).map(|&v| (r.env_steps, v)))
            .collect()
    };
    let evals = pick(Some(RecordKind::Eval));
    if evals.is_empty() {
        pick(None)
    } else {
        evals
    }
}

/// Directories under `roots` (inclusive) that contain a metrics file,
/// sorted.
pub fn find_run_dirs(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        if dir.join(METRICS_FILE).is_file() {
            out.push(dir.to_path_buf());
        }
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.is_dir() {
                walk(&path, out)?;
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    for root in roots {
        if !root.is_dir() {
            return Err(HarnessError::Config(format!("{} is not a directory", root.display())));
        }
        walk(root, &mut out)?;
    }
    out.sort();
    out.dedup();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(kind: RecordKind, steps: usize, key: &str, v: f64) -> MetricsRecord {
        MetricsRecord {
            kind,
            env_steps: steps,
            wall_ms: 0,
            scalars: BTreeMap::from([(key.to_string(), v)]),
            status: None,
        }
    }

    #[test]
    fn series_prefers_eval_records() {
        let rs = vec![
            rec(RecordKind::Train, 0, "episode_return", 9.0),
            rec(RecordKind::Eval, 10, "episode_return", 1.0),
            rec(RecordKind::Train, 20, "loss_mm", 2.0),
        ];
        assert_eq!(series(&rs, "episode_return"), vec![(10, 1.0)]);
        assert_eq!(series(&rs, "loss_mm"), vec![(20, 2.0)]);
        assert!(series(&rs, "nope").is_empty());
    }
}
