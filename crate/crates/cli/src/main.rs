//! `kmpc`: data generation, training, EDMD fitting, closed-loop MPC and the VVC
//! comparison, each as a separate subcommand writing fixed file names under `--out`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use koopman_mpc::Error;

#[derive(Debug, Parser)]
#[command(name = "kmpc", version, about = "Koopman-embedding MPC pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the faulted plant under zero, full and random control.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the deep embedding and export its linear model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit an EDMD model on the training split.
    FitEdmd {
        #[arg(long)]
        data: PathBuf,
        /// identity, polynomial:<degree> or rbf:<count>:<width>
        #[arg(long, default_value = "identity")]
        dict: String,
        #[arg(long, default_value_t = 1e-8)]
        ridge: f64,
        /// Train fraction of the train/test split.
        #[arg(long, default_value_t = 0.7)]
        split: f64,
        /// Seeds rbf center sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shrinking-horizon MPC on the default fault, plus a fixed-load sweep.
    RunMpc {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MPC against volt-var control over seeded load cases.
    Compare {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, seed } => commands::gen_data(&config, out, seed),
        Command::Train { data, config, out } => commands::train(&data, &config, out),
        Command::FitEdmd { data, dict, ridge, split, seed, out } => {
            commands::fit_edmd(&data, &dict, ridge, split, seed, &out)
        }
        Command::RunMpc { model, config, out } => commands::run_mpc(&model, &config, out),
        Command::Compare { model, config, cases, seed, out } => commands::compare(&model, &config, cases, seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn error_line(e: &Error) -> String {
    let violations = match e {
        Error::Config(v) => v.clone(),
        _ => vec![],
    };
    serde_json::json!({ "error": e.kind(), "message": e.to_string(), "violations": violations }).to_string()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Usage(_) => 2,
        _ => 1,
    }
}
