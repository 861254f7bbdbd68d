//! `quadenhance`: enhance images, train and evaluate coefficient networks.
//!
//! Progress goes to stderr; data and reports go to files or stdout. Failures
//! print a single `error[category]: message` line and exit nonzero.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "quadenhance", version, about = "Learned global quadratic color enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Predict θ with a trained model and apply it at native resolution.
    Enhance {
        #[arg(long)]
        model: PathBuf,
        /// An image, or a directory of .png/.ppm files.
        #[arg(long)]
        input: PathBuf,
        /// Output image, or output directory in directory mode.
        #[arg(long)]
        output: PathBuf,
        /// Write the predicted θ (a directory in directory mode).
        #[arg(long)]
        theta_out: Option<PathBuf>,
        /// Worker threads for directory mode (default: logical CPUs).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Apply a saved θ file directly.
    ApplyTheta {
        #[arg(long)]
        theta: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Least-squares θ mapping one image onto another.
    FitTheta {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        theta_out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        ridge: f64,
    },
    /// Supervised training from a manifest of `input<TAB>target` lines.
    TrainPaired {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Two-way adversarial training from two one-path-per-line manifests.
    TrainUnpaired {
        #[arg(long)]
        manifest_x: PathBuf,
        #[arg(long)]
        manifest_y: PathBuf,
        #[arg(long, value_enum, default_value_t = Phase::Both)]
        phase: Phase,
        /// Ablation arm: complete, no-shared-weights, first-phase-only,
        /// first-phase-only-with-dropout, complete-without-dropout, raw.
        #[arg(long)]
        ablation: Option<String>,
        /// Directory receiving all four networks after training
        /// (default: `<out-model>.state`).
        #[arg(long)]
        state_dir: Option<PathBuf>,
        /// State directory to continue from; required for `--phase 2`.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Enhance every manifest input and score it against its target.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// CSV report path.
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Layer kind, network, transform, lab_loss or all.
        #[arg(long, default_value = "all")]
        layer: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Write a synthetic corpus under one planted θ.
    MakeSynthetic {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// θ file to plant (default: drawn from the seed).
        #[arg(long)]
        theta: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        seed: u64,
    },
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Square training resolution.
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    #[arg(long)]
    out_model: PathBuf,
    /// Loss history CSV (default: `<out-model>.csv`).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Phase {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
