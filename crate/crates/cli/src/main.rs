//! `pessim-share`: dataset generation, solving, verification and sweeps.
//!
//! Stdout carries human-readable log lines, then a `---` line, then one JSON
//! document for machines. Exit codes: 0 success, 1 failed verification or
//! solver error, 2 configuration error, 3 I/O error, 4 missing dataset,
//! 5 sweep finished with failed cells.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("missing dataset: {0}")]
    MissingDataset(String),
    #[error("{0} sweep cells failed")]
    CellFailures(usize),
    #[error("verification failed: {0}")]
    VerifyFailed(String),
    #[error(transparent)]
    Library(#[from] pessim_share::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::MissingDataset(_) => 4,
            CliError::CellFailures(_) => 5,
            CliError::VerifyFailed(_) => 1,
            CliError::Library(pessim_share::Error::Io(_)) => 3,
            CliError::Library(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "pessim-share", version, about = "Uncertainty-based multi-task data sharing for offline RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the task family and one dataset file per (task, flavor, seed).
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Relabel, merge, solve and evaluate one cell from generated datasets.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// single, direct, select or utds.
        #[arg(long)]
        method: String,
        /// Task index or name.
        #[arg(long)]
        main_task: String,
        /// `none`, `all`, or a comma-separated list of task indices or names.
        #[arg(long, default_value = "none")]
        share: String,
        /// Main-data flavor; the first configured flavor by default.
        #[arg(long)]
        flavor: Option<String>,
        /// The first configured seed by default.
        #[arg(long)]
        seed: Option<u64>,
        /// Selection quantile for `--method select`.
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        reselect_rounds: Option<usize>,
        /// Fit every timestep on its own slice.
        #[arg(long)]
        per_timestep: bool,
    },
    /// Run theory checks: lemma1, thm1, thm2, corollary1, contraction, fixedpoint or all.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Run the sharing grid; write a CSV and a JSON summary.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; overrides `sweep.threads`.
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData { config } => commands::gen_data(&config),
        Command::Solve {
            config,
            method,
            main_task,
            share,
            flavor,
            seed,
            k,
            reselect_rounds,
            per_timestep,
        } => commands::solve(&commands::SolveArgs {
            config,
            method,
            main_task,
            share,
            flavor,
            seed,
            k,
            reselect_rounds,
            per_timestep,
        }),
        Command::Verify { suite } => commands::verify(&suite),
        Command::Sweep { config, threads } => commands::sweep(&config, threads),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_class() {
        let io = pessim_share::Error::Io(std::io::Error::other("disk"));
        let cases = [
            (CliError::VerifyFailed("x".into()), 1),
            (CliError::Library(pessim_share::Error::InvalidArgument("x".into())), 1),
            (CliError::Config("x".into()), 2),
            (CliError::Io("x".into()), 3),
            (CliError::Library(io), 3),
            (CliError::MissingDataset("x".into()), 4),
            (CliError::CellFailures(2), 5),
        ];
        for (e, code) in cases {
            assert_eq!(e.exit_code(), code, "{e}");
        }
    }
}
