//! Milestone scores, sample efficiency and cross-seed summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{parse_config, RunConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::{read_metrics, series, CONFIG_FILE, METRICS_FILE};
use crate::run::mean_std;

/// Eval points `(env_steps, mean episode return)`, ascending in steps.
pub type Curve = [(usize, f64)];

/// Value of the last point at or before `milestone`.
pub fn value_at(curve: &Curve, milestone: usize) -> Option<f64> {
    curve.iter().take_while(|p| p.0 <= milestone).last().map(|p| p.1)
}

/// Steps the baseline needs to reach the reference's score at `milestone`:
/// the first baseline eval whose return is at least that score, or `None`
/// when it never does.
///
/// The reference score is its last eval at or before `milestone`. Errors
/// when `milestone` lies outside the reference's eval range.
pub fn sample_efficiency(reference: &Curve, baseline: &Curve, milestone: usize) -> Result<Option<usize>> {
    let horizon = reference.last().map(|p| p.0);
    if horizon.map_or(true, |h| milestone > h) {
        return Err(HarnessError::Contract(format!(
            "milestone {milestone} beyond the reference horizon {horizon:?}"
        )));
    }
    let target = value_at(reference, milestone).ok_or_else(|| {
        HarnessError::Contract(format!("milestone {milestone} precedes the reference's first eval"))
    })?;
    Ok(baseline.iter().find(|p| p.1 >= target).map(|p| p.0))
}

/// One loaded run directory.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub returns: Vec<(usize, f64)>,
}

pub fn load_run(dir: &Path) -> Result<RunLog> {
    let config = parse_config(&dir.join(CONFIG_FILE))?;
    let records = read_metrics(&dir.join(METRICS_FILE))?;
    Ok(RunLog {
        dir: dir.to_path_buf(),
        config,
        returns: series(&records, "episode_return"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilestoneStat {
    pub milestone: usize,
    /// Runs that had an eval at or before the milestone.
    pub runs: usize,
    pub mean: Option<f64>,
    /// Population std; absent with fewer than two runs.
    pub std: Option<f64>,
}

/// Per-cell statistics; cells group runs that differ only in seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSummary {
    pub cell: String,
    pub seeds: Vec<u64>,
    pub milestones: Vec<MilestoneStat>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SummaryTable {
    pub rows: Vec<CurveSummary>,
    pub warnings: Vec<String>,
}

pub fn milestone_stat(values: &[f64], milestone: usize) -> MilestoneStat {
    // Sorted so the result does not depend on run order.
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (mean, std) = if v.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&v);
        (Some(m), (v.len() >= 2).then_some(s))
    };
    MilestoneStat {
        milestone,
        runs: v.len(),
        mean,
        std,
    }
}

/// Groups runs by cell and reports, per milestone, mean ± population std of
/// each run's eval return at or before the milestone.
pub fn summarize(runs: &[RunLog], milestones: &[usize]) -> SummaryTable {
    let mut cells: BTreeMap<String, Vec<&RunLog>> = BTreeMap::new();
    for r in runs {
        cells.entry(r.config.cell_id()).or_default().push(r);
    }
    let mut table = SummaryTable::default();
    for (cell, members) in cells {
        let usable: Vec<&RunLog> = members.iter().copied().filter(|r| !r.returns.is_empty()).collect();
        if usable.is_empty() {
            table.warnings.push(format!("{cell}: no eval records, omitted"));
            continue;
        }
        let mut seeds: Vec<u64> = usable.iter().map(|r| r.config.seed).collect();
        seeds.sort_unstable();
        let milestones = milestones
            .iter()
            .map(|&m| {
                let values: Vec<f64> = usable.iter().filter_map(|r| value_at(&r.returns, m)).collect();
                milestone_stat(&values, m)
            })
            .collect();
        table.rows.push(CurveSummary { cell, seeds, milestones });
    }
    table
}

pub fn summarize_runs(run_dirs: &[PathBuf], milestones: &[usize]) -> Result<SummaryTable> {
    let runs = run_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    Ok(summarize(&runs, milestones))
}

fn fmt_stat(s: &MilestoneStat) -> String {
    match (s.mean, s.std) {
        (None, _) => "-".into(),
        (Some(m), None) => format!("{m:.2}"),
        (Some(m), Some(sd)) => format!("{m:.2} ± {sd:.2}"),
    }
}

impl SummaryTable {
    /// Aligned plain-text table, one row per cell.
    pub fn to_text(&self) -> String {
        let mut header = vec!["cell".to_string(), "seeds".to_string()];
        if let Some(first) = self.rows.first() {
            header.extend(first.milestones.iter().map(|m| format!("@{}", m.milestone)));
        }
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.cell.clone(), r.seeds.len().to_string()];
                row.extend(r.milestones.iter().map(fmt_stat));
                row
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                std::iter::once(&header)
                    .chain(&body)
                    .map(|row| row.get(i).map_or(0, |c| c.chars().count()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for row in std::iter::once(&header).chain(&body) {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| {
                    let pad = w - c.chars().count();
                    if i == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }

    /// `cell,milestone,runs,mean,std`; absent values are empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,milestone,runs,mean,std\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            for m in &r.milestones {
                let _ = writeln!(out, "{},{},{},{},{}", r.cell, m.milestone, m.runs, opt(m.mean), opt(m.std));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_at_picks_last_point_not_after() {
        let c = [(0, -5.0), (10, -3.0), (20, -1.0)];
        assert_eq!(value_at(&c, 15), Some(-3.0));
        assert_eq!(value_at(&c, 20), Some(-1.0));
        assert_eq!(value_at(&c[1..], 5), None);
    }

    #[test]
    fn milestone_past_horizon_is_an_error() {
        let c = [(0, -5.0), (10, -3.0)];
        assert!(matches!(sample_efficiency(&c, &c, 11), Err(HarnessError::Contract(_))));
        assert!(matches!(sample_efficiency(&[], &c, 0), Err(HarnessError::Contract(_))));
    }

    #[test]
    fn text_and_csv_mark_absent_values() {
        let t = SummaryTable {
            rows: vec![CurveSummary {
                cell: "x".into(),
                seeds: vec![0],
                milestones: vec![milestone_stat(&[-1.0], 10), milestone_stat(&[], 5)],
            }],
            warnings: vec![],
        };
        assert!(t.to_text().contains("-1.00"));
        assert!(t.to_csv().contains("x,10,1,-1,\nx,5,0,,\n"));
    }
}
