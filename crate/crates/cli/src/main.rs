//! `hyvic` — command-line frontend for the hyperspectral codec.
//!
//! Subcommands: `train`, `compress`, `decompress`, `eval`, `bdpsnr`,
//! `synth`. Machine-readable reports go to stdout as JSON; notices and
//! errors go to stderr. Every command that writes files also writes a run
//! manifest next to them (atomically, before the outputs appear, and
//! finalized afterwards).

mod config;
mod manifest;
mod run;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Process outcome classes. Scripts branch on the exit code, so this
/// mapping is part of the tool's contract:
///
/// | code | meaning                                              |
/// |------|------------------------------------------------------|
/// | 0    | success                                              |
/// | 1    | generic failure (I/O, malformed files, partial eval) |
/// | 2    | unusable request (bad config key/value, missing data)|
/// | 3    | training aborted on a non-finite value               |
/// | 4    | bitstream was coded with different weights           |
/// | 5    | RD curves share no compression-ratio range           |
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numeric(String),
    WrongWeights(String),
    NoOverlap(String),
    Other(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::WrongWeights(_) => 4,
            Failure::NoOverlap(_) => 5,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m)
            | Failure::Numeric(m)
            | Failure::WrongWeights(m)
            | Failure::NoOverlap(m)
            | Failure::Other(m) => f.write_str(m),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

impl From<hyvic_core::data::DataError> for Failure {
    fn from(e: hyvic_core::data::DataError) -> Self {
        Failure::Other(e.to_string())
    }
}

impl From<hyvic_core::model::ModelError> for Failure {
    fn from(e: hyvic_core::model::ModelError) -> Self {
        use hyvic_core::model::ModelError::*;
        match e {
            // Bad geometry and indivisible extents both mean the request
            // can never succeed as stated.
            Config { .. } | Divisibility { .. } => Failure::Config(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<hyvic_core::model::CheckpointError> for Failure {
    fn from(e: hyvic_core::model::CheckpointError) -> Self {
        Failure::Other(e.to_string())
    }
}

impl From<hyvic_core::train::TrainError> for Failure {
    fn from(e: hyvic_core::train::TrainError) -> Self {
        use hyvic_core::train::TrainError::*;
        match e {
            // Both variants mean the optimizer drove the model into a
            // numerically dead state; the run is unrecoverable.
            NonFinite { .. } | NonPositiveLikelihood { .. } => Failure::Numeric(e.to_string()),
            Config(_) => Failure::Config(e.to_string()),
            Model(m) => Failure::from(m),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<hyvic_core::codec::CodecError> for Failure {
    fn from(e: hyvic_core::codec::CodecError) -> Self {
        use hyvic_core::codec::CodecError::*;
        match e {
            // Either way the supplied checkpoint is not the one that
            // produced the stream.
            HashMismatch | ConfigMismatch { .. } => Failure::WrongWeights(e.to_string()),
            Model(m) => Failure::from(m),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<hyvic_core::metrics::MetricsError> for Failure {
    fn from(e: hyvic_core::metrics::MetricsError) -> Self {
        match e {
            hyvic_core::metrics::MetricsError::NoOverlap { .. } => Failure::NoOverlap(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "hyvic", version, about = "Learned lossy compression for hyperspectral cubes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a declarative config file (key=value or JSON)
    Train {
        /// Config file; see README for the key list
        config: PathBuf,
    },
    /// Compress one .hsic cube into a .hvic bitstream
    Compress {
        /// Checkpoint written by `hyvic train`
        checkpoint: PathBuf,
        /// Input cube (.hsic)
        input: PathBuf,
        /// Output bitstream (.hvic)
        output: PathBuf,
    },
    /// Decompress a .hvic bitstream into a reflectance .hsic cube
    Decompress {
        /// The checkpoint the stream was compressed with
        checkpoint: PathBuf,
        /// Input bitstream (.hvic)
        input: PathBuf,
        /// Output cube (.hsic, reflectance payload)
        output: PathBuf,
    },
    /// Compress-decompress every cube in a directory and score it
    Eval {
        checkpoint: PathBuf,
        /// Directory of .hsic cubes, scored in filename order
        test_dir: PathBuf,
        /// Where eval.csv, summary.json, and the run manifest land
        #[arg(long, default_value = "hyvic_eval")]
        out: PathBuf,
    },
    /// Average PSNR gap between two rate-distortion curves
    Bdpsnr {
        /// CSV with header "cr,psnr_db" (≥ 3 points)
        curve_a: PathBuf,
        curve_b: PathBuf,
        /// Integrate over log10(CR) instead of linear CR
        #[arg(long)]
        log_cr: bool,
        /// Also write the JSON report (and a run manifest) to this path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a deterministic synthetic dataset with a split manifest
    Synth {
        /// Output directory (created if missing)
        dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        bands: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn dispatch(cli: Cli) -> Result<u8, Failure> {
    match cli.cmd {
        Cmd::Train { config } => run::cmd_train(&config),
        Cmd::Compress { checkpoint, input, output } => run::cmd_compress(&checkpoint, &input, &output),
        Cmd::Decompress { checkpoint, input, output } => {
            run::cmd_decompress(&checkpoint, &input, &output)
        }
        Cmd::Eval { checkpoint, test_dir, out } => run::cmd_eval(&checkpoint, &test_dir, &out),
        Cmd::Bdpsnr { curve_a, curve_b, log_cr, out } => {
            run::cmd_bdpsnr(&curve_a, &curve_b, log_cr, out.as_deref())
        }
        Cmd::Synth { dir, count, bands, height, width, seed } => {
            run::cmd_synth(&dir, count, bands, height, width, seed)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
