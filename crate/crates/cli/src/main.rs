use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use optperf_sim::{cmd_gns_check, cmd_run, cmd_solve, exit_code};

#[derive(Parser)]
#[command(
    name = "optperf-sim",
    about = "Optimal batch allocation for heterogeneous data-parallel training: solver, training-run simulator, and estimator checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the optimal local batch allocation for one total batch size
    Solve {
        /// JSON run configuration
        #[arg(long)]
        config: PathBuf,
        /// total batch size to allocate
        #[arg(long)]
        batch: u64,
        /// emit the solution as JSON instead of the table
        #[arg(long)]
        json: bool,
    },
    /// Simulate a full adaptive training run and write epoch reports
    Run {
        #[arg(long)]
        config: PathBuf,
        /// output directory for epochs.csv and epochs.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo validation of the noise-scale estimator moments
    GnsCheck {
        #[arg(long)]
        config: PathBuf,
        /// number of Monte-Carlo trials
        #[arg(long)]
        trials: u64,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            std::process::exit(0);
        }
        Err(e) => {
            let _ = e.print();
            std::process::exit(1);
        }
    };
    let result = match cli.command {
        Command::Solve {
            config,
            batch,
            json,
        } => cmd_solve(&config, batch, json),
        Command::Run { config, out } => cmd_run(&config, &out),
        Command::GnsCheck { config, trials } => cmd_gns_check(&config, trials),
    };
    match result {
        Ok(output) => print!("{output}"),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code(&err));
        }
    }
}
