//! `priorseg`: phantom synthesis, mix-up previews, training, evaluation,
//! prediction and the ablation study from one binary.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "priorseg", version, about = "Anatomy-prior cardiac pathology segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic phantom cases in EMIDEC layout plus a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cases: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Slices per case.
        #[arg(long, default_value_t = 8)]
        slices: usize,
    },
    /// Write moving | fixed | mixed triptych PNGs.
    PreviewMixup {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `data.root`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `train.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dice report of a checkpoint on its validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate every slice instead of the recorded validation split.
        #[arg(long)]
        all: bool,
        /// Also write contour overlay PNGs.
        #[arg(long)]
        overlays: bool,
    },
    /// Per-slice label maps (NIfTI) and overlay PNGs.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the ablation variants with one seed and split.
    Ablation {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base run configuration (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated variant names (default: all four).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a configuration template with every key and its default.
    DefaultConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = commands::check_device().and_then(|()| match cli.command {
        Command::Synth {
            out,
            cases,
            size,
            seed,
            slices,
        } => commands::synth(&out, cases, size, seed, slices),
        Command::PreviewMixup { data, n, out, seed } => commands::preview_mixup(&data, n, &out, seed),
        Command::Train {
            config,
            resume,
            seed,
            data,
            out,
        } => commands::train(&config, resume.as_deref(), seed, data, out),
        Command::Eval {
            ckpt,
            data,
            out,
            all,
            overlays,
        } => commands::eval(&ckpt, &data, &out, all, overlays),
        Command::Predict { ckpt, data, out } => commands::predict(&ckpt, &data, &out),
        Command::Ablation {
            data,
            out,
            config,
            variants,
            epochs,
            seed,
        } => commands::ablation(&data, &out, config.as_deref(), variants, epochs, seed),
        Command::DefaultConfig => {
            print!("{}", config::template());
            Ok(())
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
