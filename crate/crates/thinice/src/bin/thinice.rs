//! Thin CLI over the library: each verb drives the experiment runner up to
//! one stage of the pipeline. Exit codes: 0 success, 2 config error,
//! 3 stage failure, 4 numeric error.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use thinice::config::{config_parse, ExperimentConfig};
use thinice::experiment::{report_render, run_experiment, UpTo};

#[derive(Parser)]
#[command(name = "thinice", version, about = "Adversarially robust pruning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Path to the experiment JSON config.
    #[arg(long)]
    config: PathBuf,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Pretrain the dense model.
    Train(Common),
    /// Run the pruning grid (prune + fine-tune each cell).
    Prune(Common),
    /// Run the worst-case attack ensemble on the evaluation subset.
    Attack(Common),
    /// Run the PGD-only self-evaluation.
    Evaluate(Common),
    /// Measure boundary distances, partition populations, compute stats.
    Analyze(Common),
    /// Render the tables and the text report.
    Report(Common),
    /// Run the full pipeline end to end.
    Run(Common),
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Generate (or load) the dataset splits and persist them as TNSR.
    Gen(Common),
}

fn load(common: &Common) -> thinice::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&common.config)?;
    let mut cfg = config_parse(&text)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn drive(common: &Common, up_to: UpTo) -> thinice::Result<()> {
    let cfg = load(common)?;
    let manifest = run_experiment(&cfg, up_to)?;
    for (cell, status) in &manifest.cells {
        if let Some(err) = &status.failed {
            eprintln!("cell {cell} failed: {err}");
        }
    }
    if up_to == UpTo::Report {
        print!("{}", report_render(&cfg)?);
    } else {
        println!(
            "ok: {} (stages recorded in {})",
            cfg.experiment,
            cfg.output_dir.join("manifest.json").display()
        );
    }
    if manifest.cells.values().any(|c| c.failed.is_some()) {
        return Err(thinice::Error::stage(
            "grid",
            thinice::Error::Checkpoint("one or more cells failed".into()),
        ));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Dataset {
            action: DatasetAction::Gen(c),
        } => drive(c, UpTo::Dataset),
        Command::Train(c) => drive(c, UpTo::Train),
        Command::Prune(c) => drive(c, UpTo::Prune),
        Command::Attack(c) => drive(c, UpTo::Attack),
        Command::Evaluate(c) => drive(c, UpTo::Evaluate),
        Command::Analyze(c) => drive(c, UpTo::Analyze),
        Command::Report(c) | Command::Run(c) => drive(c, UpTo::Report),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
