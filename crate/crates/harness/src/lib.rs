//! Experiment configuration, orchestration, metrics, summaries and plots.

pub mod analysis;
pub mod checks;
pub mod config;
mod error;
pub mod metrics;
pub mod plot;
pub mod preset;
pub mod run;

pub use config::{parse_config, parse_config_str, RunConfig};
pub use error::{HarnessError, Result};
pub use metrics::{read_metrics, MetricsRecord, RecordKind};
pub use analysis::{sample_efficiency, summarize_runs, CurveSummary, SummaryTable};
pub use plot::plot_curves;
pub use preset::preset;
pub use run::{run_experiment, RunOutput};
