//! `glimpse`: ingest image data, fit and learn glimpse models, search
//! fixation designs and evaluate them.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};

use crate::config::{DesignMode, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "glimpse", version, about = "Foveated glimpse models and fixation design")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read IDX or GLIM images, optionally filter, normalize and split.
    #[command(group(ArgGroup::new("input").required(true).args(["idx", "glim"])))]
    Ingest {
        #[arg(long)]
        idx: Option<PathBuf>,
        /// IDX labels matching --idx.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Separate IDX test images.
        #[arg(long, requires = "idx")]
        test_idx: Option<PathBuf>,
        #[arg(long, requires = "test_idx")]
        test_labels: Option<PathBuf>,
        #[arg(long)]
        glim: Option<PathBuf>,
        /// Keep only images with this label.
        #[arg(long)]
        digit: Option<u8>,
        /// Rescale intensities to [-1, 1].
        #[arg(long)]
        normalize: bool,
        /// Training fraction of a random split.
        #[arg(long)]
        split: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit an image-space FA, PPCA or MoFA model.
    Fit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Learn a model from glimpses.
    Learn {
        #[arg(long)]
        config: PathBuf,
        /// Optimize only the glimpse noise variances.
        #[arg(long)]
        fix_w: bool,
    },
    /// Rank fixation designs by expected information gain.
    Design {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 2)]
        j: usize,
        #[arg(long, value_enum, default_value_t = DesignMode::Exhaustive)]
        mode: DesignMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of ranked designs to report.
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        allow_duplicates: bool,
        /// Write JSON here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct test images from designed and random fixations.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed for the random-design baseline.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Component-entropy threshold in bits.
        #[arg(long, default_value_t = glimpse_core::eval::ENTROPY_THRESHOLD_BITS)]
        threshold: f64,
        /// Test images to render as PGM panels.
        #[arg(long, value_delimiter = ',')]
        panels: Vec<usize>,
    },
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("GLIMPSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("GLIMPSE_THREADS must be a positive integer, got \"{v}\"")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Ingest {
            idx,
            labels,
            test_idx,
            test_labels,
            glim,
            digit,
            normalize,
            split,
            seed,
            out,
        } => commands::ingest(&commands::IngestArgs {
            idx,
            labels,
            test_idx,
            test_labels,
            glim,
            digit,
            normalize,
            split,
            seed,
            out,
        }),
        Command::Fit { config } => commands::fit(&RunConfig::load(&config)?),
        Command::Learn { config, fix_w } => {
            let cfg = RunConfig::load(&config)?;
            let fix = fix_w || cfg.learning.fix_w;
            commands::learn(&cfg, fix)
        }
        Command::Design {
            model,
            j,
            mode,
            seed,
            top,
            allow_duplicates,
            out,
        } => commands::design(&commands::DesignArgs {
            model,
            j,
            mode,
            seed,
            top,
            allow_duplicates,
            out,
        }),
        Command::Evaluate {
            model,
            design,
            test,
            out,
            seed,
            threshold,
            panels,
        } => commands::evaluate(&commands::EvaluateArgs {
            model,
            design,
            test,
            out,
            seed,
            threshold_bits: threshold,
            panels,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `glimpse --help` for usage");
            }
            e.exit_code()
        }
    }
}
