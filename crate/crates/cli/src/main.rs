//! `cdrop`: rate solving, renewal checks, training, evaluation, calibration
//! and Monte-Carlo sweeps for continuum dropout experiments.
//!
//! Exit codes: 0 success, 1 runtime or gate failure, 2 invalid flags or
//! config, 3 no rate solution, 4 checkpoint mismatch.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use continuum_dropout::Error;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(e: impl std::fmt::Display) -> Self {
        Self {
            code: 2,
            message: e.to_string(),
        }
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_)
            | Error::InvalidParameter(_)
            | Error::MissingColumn(_)
            | Error::Parse { .. }
            | Error::EmptySplit(_) => 2,
            Error::NoSolution { .. } => 3,
            Error::CheckpointMismatch(_) => 4,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e)
    }
}

#[derive(Parser)]
#[command(name = "cdrop", version, about = "Continuum dropout for neural ODEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve (lambda1, lambda2) from the dropout rate p and renewal count m.
    SolveLambdas {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        m: f64,
        #[arg(long = "T", visible_alias = "horizon")]
        horizon: f64,
        /// Report the large-horizon approximation instead of the exact root.
        #[arg(long)]
        approx: bool,
    },
    /// Check the renewal closed forms against simulation.
    VerifyRenewal {
        #[arg(long, default_value_t = 0.3)]
        p: f64,
        #[arg(long, default_value_t = 10.0)]
        m: f64,
        #[arg(long = "T", visible_alias = "horizon", default_value_t = 1.0)]
        horizon: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write checkpoint, history and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Test-split accuracy and loss of a checkpoint.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint stem (defaults to `<output_dir>/checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Reliability bins and ECE on the test split.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Test accuracy against the number of Monte-Carlo samples.
    McSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10,20")]
        nmc: Vec<usize>,
    },
    /// Write a synthetic dataset as CSV.
    GenData {
        #[arg(long, value_parser = ["two_spirals", "gaussian_blobs"])]
        generator: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_per_class: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of blobs.
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Blob feature dimension.
        #[arg(long, default_value_t = 2)]
        d_x: usize,
        /// Blob centre distance in units of noise_std.
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
    },
    /// Train none / naive-drift / continuum variants over several seeds and
    /// tabulate test accuracy.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Continuum dropout rate (defaults to the config's, else 0.3).
        #[arg(long)]
        p: Option<f64>,
        /// Continuum renewal count (defaults to the config's, else 10).
        #[arg(long)]
        m: Option<f64>,
        /// Naive drift-dropout rate (defaults to the continuum p).
        #[arg(long)]
        naive_p: Option<f64>,
        /// Also run every continuum (p, m) of the default grid.
        #[arg(long)]
        grid: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SolveLambdas { p, m, horizon, approx } => commands::solve_lambdas(p, m, horizon, approx),
        Command::VerifyRenewal {
            p,
            m,
            horizon,
            samples,
            seed,
        } => commands::verify_renewal(p, m, horizon, samples, seed),
        Command::Train { config } => commands::train(&config),
        Command::Evaluate { config, checkpoint } => commands::evaluate(&config, checkpoint.as_deref()),
        Command::Calibrate { config, checkpoint } => commands::calibrate(&config, checkpoint.as_deref()),
        Command::McSweep { config, checkpoint, nmc } => commands::mc_sweep(&config, checkpoint.as_deref(), &nmc),
        Command::GenData {
            generator,
            out,
            n_per_class,
            noise_std,
            seed,
            k,
            d_x,
            separation,
        } => commands::gen_data(&generator, &out, n_per_class, noise_std, seed, k, d_x, separation),
        Command::Compare {
            config,
            seeds,
            p,
            m,
            naive_p,
            grid,
        } => commands::compare(&config, seeds, p, m, naive_p, grid),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
