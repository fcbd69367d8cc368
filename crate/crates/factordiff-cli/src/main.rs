//! `factordiff`: dataset generation, training, sampling-based composition,
//! evaluation, and closed-form oracle checks behind one binary.
//!
//! Every failure exits nonzero after printing a single
//! `error[category]: message` line on stderr.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use factordiff::{Error, Result};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "factordiff",
    version,
    about = "Unsupervised image decomposition into composable latent factors"
)]
struct Cli {
    /// TOML run configuration; defaults apply for anything omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Base seed; overrides the config file and FACTORDIFF_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for this run's artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Write into a nonempty output directory.
    #[arg(long, global = true)]
    force: bool,

    /// Compute device; this build supports "cpu" only.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural dataset into OUT/dataset.
    MakeDataset,
    /// Train a model on a generated dataset.
    Train {
        /// Dataset directory from `make-dataset`.
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
    },
    /// Sample one image per latent component of an input image.
    Decompose {
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        #[arg(long, value_name = "PNG")]
        image: PathBuf,
    },
    /// Sample an image from all latent components of an input image.
    Reconstruct {
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        #[arg(long, value_name = "PNG")]
        image: PathBuf,
    },
    /// Compose components picked from several images of one model.
    Recombine {
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        /// Source images; plan `source` indices refer to their order here.
        #[arg(long, value_name = "PNG", required = true)]
        image: Vec<PathBuf>,
        /// TOML plan: `mode = "select"|"additive"` plus [[pick]] entries.
        #[arg(long, value_name = "FILE")]
        plan: PathBuf,
    },
    /// Compose components across models; one --model per --image.
    Cross {
        #[arg(long, value_name = "CKPT", required = true)]
        model: Vec<PathBuf>,
        #[arg(long, value_name = "PNG", required = true)]
        image: Vec<PathBuf>,
        #[arg(long, value_name = "FILE")]
        plan: PathBuf,
        /// "mean" (training-scale) or "sum" (literal added predictions).
        #[arg(long, default_value = "mean")]
        reduction: String,
    },
    /// Reconstruction and disentanglement metrics on a dataset's test split.
    Evaluate {
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
    },
    /// Closed-form Gaussian checks of the composed samplers (no training).
    Oracle,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let category = e.category();
            let text = e.to_string();
            let message = text
                .strip_prefix(&format!("{category}: "))
                .unwrap_or(&text);
            eprintln!("error[{category}]: {message}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    if cli.device != "cpu" {
        return Err(Error::Config(format!(
            "device {:?} is not available; this build supports \"cpu\" only",
            cli.device
        )));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.as_deref();
    let need_out = || {
        out.ok_or_else(|| Error::Argument("--out <DIR> is required for this command".into()))
    };

    match cli.command {
        Command::MakeDataset => {
            commands::cmd_make_dataset(&cfg, need_out()?, cli.force)?;
        }
        Command::Train { dataset } => {
            commands::cmd_train(&cfg, &dataset, need_out()?, cli.force)?;
        }
        Command::Decompose { model, image } => {
            commands::cmd_decompose(&cfg, &model, &image, need_out()?, cli.force)?;
        }
        Command::Reconstruct { model, image } => {
            commands::cmd_reconstruct(&cfg, &model, &image, need_out()?, cli.force)?;
        }
        Command::Recombine { model, image, plan } => {
            commands::cmd_recombine(&cfg, &model, &image, &plan, need_out()?, cli.force)?;
        }
        Command::Cross { model, image, plan, reduction } => {
            commands::cmd_cross(&cfg, &model, &image, &plan, &reduction, need_out()?, cli.force)?;
        }
        Command::Evaluate { model, dataset } => {
            commands::cmd_evaluate(&cfg, &model, &dataset, need_out()?, cli.force)?;
        }
        Command::Oracle => {
            return commands::cmd_oracle(&cfg, out, cli.force).map(|c| c as u8);
        }
    }
    Ok(0)
}
