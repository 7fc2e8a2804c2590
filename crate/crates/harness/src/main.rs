use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use m2curl_harness::checks::{gradcheck_suite, selfcheck_suite, Check};
use m2curl_harness::metrics::find_run_dirs;
use m2curl_harness::preset::{preset, run_all};
use m2curl_harness::{parse_config, plot_curves, run_experiment, summarize_runs};

#[derive(Parser)]
#[command(name = "m2curl", about = "Visuotactile contrastive RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        outdir: Option<PathBuf>,
    },
    /// Run a named experiment grid: table1-grid, ablation-intra-inter or unimodal.
    Preset {
        name: String,
        #[arg(long)]
        outdir: PathBuf,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Only write the expanded configs.
        #[arg(long)]
        dry_run: bool,
    },
    /// Mean ± std of eval return per cell at each milestone.
    Summarize {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "20000,100000")]
        milestones: Vec<usize>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Learning curves as SVG.
    Plot {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "episode_return")]
        metric: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of layers and the contrastive pipeline.
    Gradcheck,
    /// Loss-oracle, algebra, RL-identity and determinism checks.
    Selfcheck,
}

fn report(checks: &[Check]) -> anyhow::Result<()> {
    for c in checks {
        println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    Ok(())
}

fn write_configs(cfgs: &[m2curl_harness::RunConfig]) -> anyhow::Result<()> {
    for c in cfgs {
        fs::create_dir_all(&c.output_dir).with_context(|| format!("creating {}", c.output_dir.display()))?;
        fs::write(c.output_dir.join("config.json"), c.to_json()?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, seed, outdir } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = outdir {
                cfg.output_dir = d;
            }
            let out = run_experiment(&cfg)?;
            println!(
                "{} seed {}: final return {:.3} (random policy {:.3}); metrics in {}",
                cfg.cell_id(),
                cfg.seed,
                out.final_return,
                out.random_return,
                out.metrics_path.display()
            );
        }
        Command::Preset { name, outdir, parallel, dry_run } => {
            let cfgs = preset(&name, &outdir)?;
            if dry_run {
                write_configs(&cfgs)?;
                println!("wrote {} configs under {}", cfgs.len(), outdir.display());
                return Ok(());
            }
            let results = run_all(&cfgs, parallel);
            let mut failures = 0;
            for (cfg, r) in cfgs.iter().zip(results) {
                match r {
                    Ok(o) => println!("{} seed {}: final return {:.3}", cfg.cell_id(), cfg.seed, o.final_return),
                    Err(e) => {
                        failures += 1;
                        eprintln!("{} seed {}: {e}", cfg.cell_id(), cfg.seed);
                    }
                }
            }
            if failures > 0 {
                bail!("{failures} of {} runs failed", cfgs.len());
            }
        }
        Command::Summarize { dirs, milestones, csv } => {
            let runs = find_run_dirs(&dirs)?;
            if runs.is_empty() {
                bail!("no runs (metrics.jsonl) found under the given directories");
            }
            let table = summarize_runs(&runs, &milestones)?;
            for w in &table.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", table.to_text());
            if let Some(path) = csv {
                fs::write(&path, table.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Plot { dirs, metric, out } => {
            let runs = find_run_dirs(&dirs)?;
            if runs.is_empty() {
                bail!("no runs (metrics.jsonl) found under the given directories");
            }
            plot_curves(&runs, &metric, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Gradcheck => report(&gradcheck_suite())?,
        Command::Selfcheck => {
            let scratch = std::env::temp_dir().join(format!("m2curl-selfcheck-{}", std::process::id()));
            let checks = selfcheck_suite(&scratch);
            let _ = fs::remove_dir_all(&scratch);
            report(&checks)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

