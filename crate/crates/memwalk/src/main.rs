use clap::{Parser, Subcommand};
use memwalk::commands::{self, Overrides};
use memwalk::config::OutputFormat;
use memwalk::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "memwalk", version, about = "Reinforced memory walks on Z^d")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override the config's master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report format where a command prints one
    #[arg(long, global = true, value_enum)]
    format: Option<OutputFormat>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the ensemble described by a config file
    Run {
        config: PathBuf,
        /// Output directory (overrides the config's `outputs`)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print exact renewal quantities for a memory law
    Exact {
        /// degenerate | bernoulli | geometric | uniform | pareto
        #[arg(long)]
        family: String,
        /// Comma-separated key=value parameters, e.g. alpha=2.5
        #[arg(long)]
        params: Option<String>,
    },
    /// Recompute pooled statistics from a run's artifacts
    Analyze { dir: PathBuf },
    /// Run a grid of experiments with a resumable manifest
    Sweep { grid: PathBuf },
}

fn exit_for(e: &Error) -> ExitCode {
    match e {
        Error::Config(_) => ExitCode::from(2),
        Error::Io(_) => ExitCode::from(3),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ov = Overrides { workers: cli.workers, seed: cli.seed, format: cli.format };
    let outcome = match cli.command {
        Command::Run { config, out } => commands::cmd_run(&config, out.as_deref(), &ov),
        Command::Exact { family, params } => commands::cmd_exact(&family, params.as_deref()),
        Command::Analyze { dir } => commands::cmd_analyze(&dir, ov.format),
        Command::Sweep { grid } => match commands::cmd_sweep(&grid, &ov) {
            Ok(0) => Ok(()),
            Ok(n) => {
                eprintln!("error: {n} sweep cell(s) failed; see the manifest");
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}
