//! `wjdot run <config.toml>` and `wjdot summarize <metrics.csv>`.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 solver or
//! training failure (the failing trace is written to `failed_trace.csv`).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wjdot::experiment::{exit_code, run_experiment, summarize, ExperimentConfig, RunOptions};
use wjdot::Error;

/// Overrides `output_dir` from the config when set.
const OUTPUT_DIR_ENV: &str = "WJDOT_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "wjdot", version, about = "Multi-source domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write metrics.csv, alpha_trace.csv and scores.csv.
    Run {
        config: PathBuf,
        /// Worker threads across seeds; output is identical for any value.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Fail on any increase of the adaptation objective.
        #[arg(long)]
        strict: bool,
    },
    /// Per-method mean ± std over seeds; writes summary.csv next to the input.
    Summarize { metrics: PathBuf },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            threads,
            strict,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let opts = RunOptions {
                threads: Some(threads.max(1)),
                strict,
                output_dir: std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from),
            };
            let out_dir = opts.output_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
            let out = run_experiment(&cfg, &opts).inspect_err(|e| {
                if matches!(e, Error::Solver { .. }) {
                    eprintln!("trace: {}", out_dir.join("failed_trace.csv").display());
                }
            })?;
            println!(
                "{} rows written to {}",
                out.metrics().count(),
                out.output_dir.join("metrics.csv").display()
            );
        }
        Command::Summarize { metrics } => print!("{}", summarize(&metrics)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
