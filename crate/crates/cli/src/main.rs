mod fetch;
mod heatmap;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tbe_core::experiment::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "tbe", version, about = "Relevance-guided unit freezing for continual learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (seed, method) pair of an experiment config.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set train.epochs=2`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write an LRP heatmap (PPM and CSV) for one input.
    Heatmap(heatmap::Args),
    /// Re-aggregate the run CSVs of an output directory.
    Report { run_dir: PathBuf },
    /// Download or import a dataset and verify its checksums.
    FetchData(fetch::Args),
}

/// Exit code 2 marks bad input (config, missing data, unreadable files);
/// 1 marks failures while computing.
fn classify(err: &anyhow::Error) -> u8 {
    use tbe_core::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Config(_) | E::DatasetMissing(_) | E::Format { .. } | E::Io(_) | E::HeadNotFound(_) | E::Validation(_)) => 2,
        Some(_) => 1,
        None if err.downcast_ref::<Usage>().is_some() => 2,
        None => 1,
    }
}

/// An error in what the user asked for rather than in the computation.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn run(config: PathBuf, overrides: Vec<String>) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(&config, &overrides)?;
    let data = experiment::load_data(&cfg)?;
    let summary = experiment::run_experiment(&cfg, &data)?;
    print!("{}", summary.to_text());
    println!("\noutputs in {}", cfg.experiment.output_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, overrides } => run(config, overrides),
        Command::Heatmap(args) => heatmap::run(args),
        Command::Report { run_dir } => experiment::report(&run_dir).map(|s| print!("{}", s.to_text())).map_err(Into::into),
        Command::FetchData(args) => fetch::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}
