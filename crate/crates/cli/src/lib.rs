//! Config parsing, experiment runs and result files for the `lpr` binary.

pub mod config;
pub mod output;
pub mod run;

pub use config::{parse_config, ConfigError, ExperimentConfig};
pub use output::{emit_heatmap, heatmap, write_grid_csv, write_results_csv, RESULT_COLUMNS};
pub use run::{
    parse_metric, run_experiment, run_experiment_with, run_grid, GridAxis, GridCell, GridRow,
    ResultRow, RunError, RunOutput, RunSummary,
};
