use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use lpr_cli::{
    emit_heatmap, parse_config, run_experiment_with, run_grid, write_grid_csv, write_results_csv,
    ExperimentConfig, GridAxis, RunError,
};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

/// Train a toy MoE with a latent prototype router or a baseline router and
/// write load-balance results.
#[derive(Debug, Parser)]
#[command(name = "lpr", version)]
struct Args {
    /// JSON config file; omitted keys take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Directory for results.csv, summary.json and heatmap.tsv.
    #[arg(short, long, default_value = "lpr-out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config eval cadence.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Sweep one setting: latent_dim, reg_strength, nk_setting, diversity_kind or metric_kind.
    #[arg(long, requires = "values")]
    grid: Option<String>,
    /// Comma-separated values for the swept setting.
    #[arg(long, value_delimiter = ',', requires = "grid")]
    values: Vec<String>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

enum Failure {
    Config(String),
    Other(String),
}

fn load_config(args: &Args) -> Result<ExperimentConfig, Failure> {
    let text = match &args.config {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut config = parse_config(&text).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(every) = args.eval_every {
        config.eval_every = every;
    }
    config
        .validate()
        .map_err(|e| Failure::Config(e.to_string()))?;
    Ok(config)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

fn io<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Other(e.to_string())
}

fn from_run(e: RunError) -> Failure {
    match e {
        RunError::Config(c) => Failure::Config(c.to_string()),
        RunError::Core(c) => Failure::Other(c.to_string()),
    }
}

fn run(args: &Args) -> Result<bool, Failure> {
    let config = load_config(args)?;
    if args.print_config {
        println!("{}", config.to_json());
        return Ok(false);
    }
    fs::create_dir_all(&args.out).map_err(io)?;
    fs::write(args.out.join("config.json"), config.to_json()).map_err(io)?;

    if let Some(axis) = &args.grid {
        let axis = GridAxis::parse(axis).map_err(|e| Failure::Config(e.to_string()))?;
        let cells = run_grid(&config, axis, &args.values).map_err(from_run)?;
        let rows: Vec<_> = cells.iter().map(|c| c.row.clone()).collect();
        write_grid_csv(create(&args.out, "grid.csv")?, &rows).map_err(io)?;
        let summaries: Vec<_> = cells.iter().map(|c| &c.output.summary).collect();
        serde_json::to_writer_pretty(create(&args.out, "summary.json")?, &summaries).map_err(io)?;
        for r in &rows {
            println!(
                "{}={}\ttest_loss {:.4}\tgini {:.4}\tmin_max {:.4}{}",
                r.axis,
                r.value,
                r.test_loss,
                r.gini_hard,
                r.min_max_hard,
                r.divergence
                    .as_deref()
                    .map(|d| format!("\tdiverged: {d}"))
                    .unwrap_or_default()
            );
        }
        return Ok(rows.iter().any(|r| r.divergence.is_some()));
    }

    let output = run_experiment_with(&config, |r| {
        eprintln!(
            "step {:>6}  test_loss {:.5}  gini {:.4}  min_max {:.4}",
            r.step, r.test_loss, r.gini_hard, r.min_max_hard
        );
    })
    .map_err(from_run)?;
    write_results_csv(create(&args.out, "results.csv")?, &output).map_err(io)?;
    serde_json::to_writer_pretty(create(&args.out, "summary.json")?, &output.summary)
        .map_err(io)?;
    emit_heatmap(create(&args.out, "heatmap.tsv")?, &output).map_err(io)?;
    if let Some(reason) = &output.summary.divergence {
        eprintln!("training diverged: {reason}");
    }
    Ok(output.diverged())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(EXIT_DIVERGED),
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
