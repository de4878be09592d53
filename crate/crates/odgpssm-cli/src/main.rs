//! Command-line front end for the experiment harness.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use odgpssm_cli::config::{ExperimentConfig, Task};
use odgpssm_cli::experiments;
use odgpssm_cli::CliError;

#[derive(Parser)]
#[command(
    name = "odgpssm",
    about = "Output-dependent GPSSM experiments: synthetic car tracking, system-identification forecasting, Q sweeps, complexity probes, and exact linear-Gaussian oracles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration (defaults are used when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Car-tracking study: output-dependent model vs independent baseline.
    Synthetic(Common),
    /// Train and forecast on a system-identification dataset.
    Sid(Common),
    /// Sweep the number of latent GPs on one dataset.
    Qsweep(Common),
    /// Wall-clock scaling of one ELBO+gradient evaluation.
    Probe(Common),
    /// Export exact Kalman/RTS posteriors for the synthetic system.
    Oracle(Common),
}

fn load_config(common: &Common, task: Task) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::for_task(task),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synthetic(common) => {
            let cfg = load_config(common, Task::SyntheticCar)?;
            let record = experiments::run_synthetic(&cfg)?;
            println!(
                "synthetic-car: state RMSE {:.4} +/- {:.4} over {} seed(s); outputs in {}",
                record.rmse_mean,
                record.rmse_std,
                record.seeds.len(),
                cfg.out_dir.display()
            );
        }
        Command::Sid(common) => {
            let cfg = load_config(common, Task::SidDataset)?;
            let record = experiments::run_sid(&cfg)?;
            println!(
                "{} [{}]: {}-step RMSE {:.4} +/- {:.4} over {} seed(s); outputs in {}",
                record.dataset.as_deref().unwrap_or("dataset"),
                record.model,
                cfg.horizon,
                record.rmse_mean,
                record.rmse_std,
                record.seeds.len(),
                cfg.out_dir.display()
            );
        }
        Command::Qsweep(common) => {
            let cfg = load_config(common, Task::QSweep)?;
            let records = experiments::run_q_sweep(&cfg)?;
            println!("q,rmse_mean,rmse_std,identifiable");
            for r in &records {
                println!(
                    "{},{:.4},{:.4},{}",
                    r.q, r.rmse_mean, r.rmse_std, r.identifiability.identifiable
                );
            }
        }
        Command::Probe(common) => {
            let cfg = load_config(common, Task::SyntheticCar)?;
            let rows = experiments::complexity_probe(&cfg)?;
            println!("t,q,median_ms");
            for r in &rows {
                println!("{},{},{:.2}", r.t_len, r.q, r.median_ms);
            }
        }
        Command::Oracle(common) => {
            let cfg = load_config(common, Task::SyntheticCar)?;
            let summary = experiments::run_oracle(&cfg)?;
            println!("oracle outputs written; summary at {}", summary.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
