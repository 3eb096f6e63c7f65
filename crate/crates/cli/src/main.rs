//! Command-line surface wiring the library into reproducible experiments.
//!
//! Exit codes: 0 success, 1 verification failure (failed gradient check or
//! diverged optimization), 2 input error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "depthpose",
    about = "Joint depth refinement and ego-motion estimation experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene and write it with corrupted sparse depth as
    /// a TUM-layout dataset directory.
    Simulate {
        /// Scene preset name (`two_planes`) or path to a scene JSON file.
        #[arg(long, default_value = "two_planes")]
        scene: String,
        /// Number of frames for preset scenes.
        #[arg(long, default_value_t = 4)]
        frames: usize,
        /// Noise level: sigma = depth * f.
        #[arg(long = "noise-f", default_value_t = 0.5)]
        noise_f: f64,
        /// Fraction of pixels retained.
        #[arg(long = "sample-rate", default_value_t = 0.07)]
        sample_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// JSON config overriding the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Jointly refine depth and pose over a dataset directory.
    Refine {
        #[arg(long)]
        data: PathBuf,
        /// Predictor family: `direct` or `toycnn`.
        #[arg(long, default_value = "direct")]
        predictor: String,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        /// Loss weights as `alpha,beta,gamma,theta`.
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pyramid levels (overrides config).
        #[arg(long)]
        levels: Option<usize>,
        /// Adam learning rate (overrides config).
        #[arg(long)]
        lr: Option<f64>,
        /// Constant initial depth for the direct field, meters.
        #[arg(long, default_value_t = 1.0)]
        init_depth: f64,
        /// Aggregate supervision from up to N neighbor frames on each side
        /// (needs ground-truth poses in the dataset; 0 = use the input
        /// sparse depth as-is).
        #[arg(long, default_value_t = 0)]
        aggregate: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare refined output against ground truth and write metrics JSON.
    Evaluate {
        /// Refine output directory (or any dataset directory with ground
        /// truth, for baselines).
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory carrying ground truth.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Verify every analytic gradient against central finite differences.
    Gradcheck {
        /// Instance size as WIDTHxHEIGHT.
        #[arg(long, default_value = "16x16")]
        size: String,
        #[arg(long, default_value_t = 2)]
        levels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale every analytic gradient by 1.01 to prove the check fails.
        #[arg(long, hide = true)]
        planted_bug: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate {
            scene,
            frames,
            noise_f,
            sample_rate,
            seed,
            out,
            config,
        } => commands::simulate(&scene, frames, noise_f, sample_rate, seed, &out, config.as_deref()),
        Command::Refine {
            data,
            predictor,
            iters,
            weights,
            out,
            seed,
            levels,
            lr,
            init_depth,
            aggregate,
            config,
        } => commands::refine(commands::RefineArgs {
            data,
            predictor,
            iters,
            weights,
            out,
            seed,
            levels,
            lr,
            init_depth,
            aggregate,
            config,
        }),
        Command::Evaluate {
            pred,
            gt,
            out,
            config,
        } => commands::evaluate(&pred, &gt, &out, config.as_deref()),
        Command::Gradcheck {
            size,
            levels,
            seed,
            planted_bug,
        } => commands::gradcheck(&size, levels, seed, planted_bug),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
