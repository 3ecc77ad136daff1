//! `gca-resunet` command line.
//!
//! Exit codes: 0 ok, 2 config or usage, 3 I/O or dataset, 4 numeric
//! failure during training, 5 checkpoint integrity, 1 anything else.

mod commands;
mod config;
mod plot;
mod rundir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gca_resunet::Error;

use config::ConfigArgs;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError {
            code: 3,
            message: format!("i/o error on {}: {e}", path.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Input(_) => 2,
            Error::Io { .. } | Error::Data(_) => 3,
            Error::Numeric(_) => 4,
            Error::Checkpoint(_) => 5,
            Error::Shape(_) | Error::State(_) => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "gca-resunet", version, about = "GCA-ResUNet segmentation: data, training, evaluation and profiling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic image/mask dataset
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of samples
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Image side length
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Number of classes including background
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, history, config and plots to --out
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class DSC of a checkpoint on one dataset split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        /// Also write eval.csv here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one image; writes a label-index mask and a colour overlay
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per attention variant and tabulate the results
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated variants, e.g. none,se,gca
        #[arg(long)]
        variants: String,
        /// Reduced epoch budget; flagged in the table
        #[arg(long)]
        reduced_epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and MAC counts per layer
    Profile {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Square input side
        #[arg(long, default_value_t = 224)]
        input: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Comma-separated variants to compare instead of the per-layer table
        #[arg(long)]
        compare: Option<String>,
        /// Write CSV tables here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective run config as JSON
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            seed,
            n,
            size,
            classes,
            val_fraction,
            test_fraction,
            out,
        } => commands::gen_data(seed, n, size, classes, val_fraction, test_fraction, &out),
        Command::Train { cfg, data, out } => commands::train(&cfg, &data, &out),
        Command::Eval {
            ckpt,
            data,
            split,
            batch_size,
            out,
        } => commands::eval(&ckpt, &data, &split, batch_size, out.as_deref()),
        Command::Predict { ckpt, image, out } => commands::predict(&ckpt, &image, &out),
        Command::Ablate {
            cfg,
            data,
            variants,
            reduced_epochs,
            out,
        } => commands::ablate(&cfg, &data, &variants, reduced_epochs, &out),
        Command::Profile {
            cfg,
            input,
            batch,
            compare,
            out,
        } => commands::profile(&cfg, input, batch, compare.as_deref(), out.as_deref()),
        Command::Config { cfg } => commands::show_config(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
