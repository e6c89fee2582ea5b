//! Experiment harness: configuration, run directories, grid search and the
//! command line.

pub mod cli;
pub mod config;
pub mod grid;
pub mod rundir;

pub use cli::cli_main;
pub use config::{HarnessConfig, ENV_OUT_DIR, ENV_PARALLELISM};
pub use grid::{expand_grid, ranking_file, run_grid, GridOutcome, GridRun, GridSpec, RunMetrics, RunSummary};
pub use rundir::{ManifestEntry, RunDir, RunStatus, MANIFEST_FILE};
