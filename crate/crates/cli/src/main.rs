use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lgc_core::harness::figure::{figure_data, write_figure, FigureKind};
use lgc_core::harness::sweep::{sweep, SweepGrid};
use lgc_core::harness::verify::{verify, VerifyConfig};
use lgc_core::harness::{run_experiment, ExperimentConfig, RunStatus};

/// Federated learning experiments with layered gradient compression.
#[derive(Debug, Parser)]
#[command(name = "lgc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every combination of a grid of overrides.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the convergence bounds over a matrix of cells.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract a tidy figure CSV from finished runs.
    Figure {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(config: &Path, seed: u64, out: &Path) -> lgc_core::Result<u8> {
    let config = ExperimentConfig::load(config)?;
    let summary = run_experiment(&config, seed, out)?;
    println!(
        "{}: {} steps, loss {}, energy {} J, money {}",
        match summary.status {
            RunStatus::Completed => "completed",
            RunStatus::BudgetExhausted => "budget exhausted",
        },
        summary.steps,
        summary.final_loss,
        summary.energy,
        summary.money
    );
    Ok(summary.status.exit_code() as u8)
}

fn dispatch(cli: Cli) -> lgc_core::Result<u8> {
    match cli.command {
        Command::Run { config, seed, out } => run(&config, seed, &out),
        Command::Sweep { config, grid, out } => {
            let template = std::fs::read_to_string(&config)?;
            let rows = sweep(&template, &SweepGrid::load(&grid)?, &out)?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            println!("{} runs, {failed} failed; summary in {}", rows.len(), out.join("summary.csv").display());
            Ok(0)
        }
        Command::Verify { config, out } => {
            let lines = verify(&VerifyConfig::load(&config)?, &out)?;
            let failed = lines.iter().filter(|l| !l.pass).count();
            println!("{} checks, {failed} failed; report in {}", lines.len(), out.join("verify.jsonl").display());
            Ok(u8::from(failed > 0))
        }
        Command::Figure { runs, kind, out } => {
            let points = figure_data(&runs, kind.parse::<FigureKind>()?)?;
            write_figure(&out, &points)?;
            println!("{} points written to {}", points.len(), out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
