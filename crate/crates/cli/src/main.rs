use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use micropatch::experiment::{Command, ExperimentConfig, Runner};
use micropatch::{Error, Result};

/// Experiments on small RGB patch classifiers.
#[derive(Parser)]
#[command(name = "micropatch", version)]
struct Cli {
    /// Experiment config file (`key = value` lines); defaults apply otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sweep cells run concurrently (capped by MICROPATCH_THREADS).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Replaces the configured seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Write the synthetic dataset as PNGs plus manifest.csv.
    Generate,
    /// Sample, split and augment for every flag limit.
    Prepare,
    /// Train every (arch, flag limit, seed) cell and save checkpoints.
    Train,
    /// Evaluate checkpoints on their validation split.
    Eval,
    /// Fit linear heads on frozen features.
    Linprobe,
    /// Blur sweeps over trained checkpoints.
    Robustness,
    /// Train and evaluate across flag limits.
    Scaling,
    /// Per-sample inference latency for each architecture.
    Timing,
    /// Collect existing results into report.md.
    Report,
    /// Print the resolved configuration as JSON.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            ExperimentConfig::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<i32> {
    let cfg = load_config(cli)?;
    let command = match cli.command {
        Cmd::Generate => Command::Generate,
        Cmd::Prepare => Command::Prepare,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Linprobe => Command::Linprobe,
        Cmd::Robustness => Command::Robustness,
        Cmd::Scaling => Command::Scaling,
        Cmd::Timing => Command::Timing,
        Cmd::Report => Command::Report,
        Cmd::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            return Ok(0);
        }
    };
    let runner = Runner::new(cfg, cli.jobs)?;
    let outcome = runner.run(command)?;
    for c in outcome.manifest.cells.iter().filter(|c| c.detail.is_some()) {
        eprintln!("{} {}: {}", c.status.name(), c.name, c.detail.as_deref().unwrap_or(""));
    }
    log::info!(
        "{}: {} cell(s), {} failed, outputs in {}",
        command.name(),
        outcome.manifest.cells.len(),
        outcome.failed,
        runner.out().display()
    );
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
