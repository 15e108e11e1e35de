//! `oolab` command line: experiment orchestration over a run directory.
//!
//! Subcommands map onto pipeline stages; `reproduce` chains all of them.
//! Logging verbosity comes from the `OODLAB_LOG` environment variable
//! (`error`, `info`, or `debug`).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use oolab::config::RunConfig;
use oolab::par;
use oolab::pipeline::Pipeline;

#[derive(Parser)]
#[command(name = "oolab", version, about = "Single-source adversarial robustness lab")]
struct Cli {
    /// Run configuration (TOML). Defaults to the built-in reference setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory for datasets, checkpoints, payloads, and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Comma-separated model selection override.
    #[arg(long, global = true, value_delimiter = ',')]
    models: Option<Vec<String>>,

    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the synthetic datasets for every seed.
    GenerateData,
    /// Train the selected model zoo.
    Train,
    /// Generate and persist the attack payloads.
    Attack,
    /// Score checkpoints against payloads; write report.json / tables.csv.
    Evaluate,
    /// Full pipeline: generate-data, train, attack, evaluate.
    Reproduce,
    /// Print a summary of an existing report.
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OODLAB_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> oolab::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::reference(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(models) = &cli.models {
        cfg.models = models.clone();
    }
    cfg.validate()?;

    let out = cli
        .out
        .clone()
        .ok_or_else(|| oolab::Error::Config("--out DIR is required".to_string()))?;
    let pipeline = Pipeline::new(cfg, &out)?;

    par::with_jobs(cli.jobs, || match cli.command {
        Command::GenerateData => pipeline.cmd_generate(),
        Command::Train => {
            pipeline.cmd_generate()?;
            pipeline.cmd_train()
        }
        Command::Attack => {
            pipeline.cmd_generate()?;
            pipeline.cmd_train()?;
            pipeline.cmd_attack()
        }
        Command::Evaluate => {
            pipeline.cmd_evaluate()?;
            log::info!("report written to {}", out.join("report.json").display());
            Ok(())
        }
        Command::Reproduce => {
            let report = pipeline.cmd_reproduce()?;
            log::info!(
                "report hash {}",
                oolab::report::report_hash(&report)?
            );
            print!("{}", pipeline.report_summary()?);
            Ok(())
        }
        Command::Report => {
            print!("{}", pipeline.report_summary()?);
            Ok(())
        }
    })
}
