//! Command-line front end for the experiment harness.
//!
//! Exit codes: 0 on success, 2 on configuration/validation errors, 3 on
//! numeric failures during training, attacks, or estimation.

use clap::{Parser, Subcommand};
use liprl::harness::{self, ExperimentConfig, HarnessError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "liprl", about = "Lipschitz-bounded policy training, certification, and robustness evaluation", version)]
struct Cli {
    /// experiment config JSON; defaults are used when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// artifact directory
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// replace the config's seed list with this single seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train all configured (architecture, gamma, seed) cells
    Train,
    /// Run trajectory attacks against trained cells (training any missing)
    Attack,
    /// Estimate empirical Lipschitz lower bounds (training any missing)
    Lipschitz,
    /// Full pipeline: train, evaluate, attack, estimate, summarize, report
    Sweep,
    /// Regenerate summary tables and plots from existing artifacts
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg: ExperimentConfig = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
                path: path.clone(),
                source,
            })?;
            serde_json::from_str(&text).map_err(|e| {
                HarnessError::BadConfig(format!("{}: {e}", path.display()))
            })?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Train => {
            let touched = harness::run_stages(&cfg, out, &["train"])?;
            eprintln!("trained {} cell(s), {} already complete", touched.len(), cfg.runs().len() - touched.len());
        }
        Command::Attack => {
            harness::run_stages(&cfg, out, &["train", "attack"])?;
        }
        Command::Lipschitz => {
            harness::run_stages(&cfg, out, &["train", "lipschitz"])?;
        }
        Command::Sweep => {
            harness::run_experiment(&cfg, out)?;
            let rows = harness::summarize(&cfg, out)?;
            harness::make_reports(&cfg, out)?;
            for row in &rows {
                eprintln!(
                    "{} gamma={} reward={:.1}+/-{:.1} lower={:.2} eps*={}",
                    row.architecture,
                    row.gamma.map(|g| g.to_string()).unwrap_or_else(|| "-".into()),
                    row.reward_mean,
                    row.reward_std,
                    row.mean_lower,
                    row.smallest_failing_epsilon
                        .map(|e| format!("{e:.3}"))
                        .unwrap_or_else(|| "none".into()),
                );
            }
        }
        Command::Report => {
            harness::summarize(&cfg, out)?;
            harness::make_reports(&cfg, out)?;
        }
    }
    Ok(())
}

fn exit_code_for(err: &HarnessError) -> u8 {
    match err {
        HarnessError::BadConfig(_) | HarnessError::Io { .. } | HarnessError::Corrupt { .. } => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
