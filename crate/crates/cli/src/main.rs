//! Command-line driver for the instruction model, GEMM kernels, overflow
//! harness and systolic array simulator.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use asymmac::systolic::PeMode;
use asymmac::AccMode;

#[derive(Debug, Parser)]
#[command(
    name = "asymmac",
    version,
    about = "int8 x int4 -> int16 matrix MAC reference model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[default]
    Wrap,
    Sticky,
    Track,
}

impl From<ModeArg> for AccMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Wrap => AccMode::Wrapping,
            ModeArg::Sticky => AccMode::SaturatingSticky,
            ModeArg::Track => AccMode::ExactTracking,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum PeModeArg {
    #[default]
    Sym,
    Asym,
}

impl From<PeModeArg> for PeMode {
    fn from(m: PeModeArg) -> Self {
        match m {
            PeModeArg::Sym => PeMode::Symmetric,
            PeModeArg::Asym => PeMode::AsymmetricDual,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DTypeArg {
    Int8,
    Int4,
    Int16,
    Int32,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-check smmla/ammla against a scalar 64-bit model.
    IsaCheck {
        #[arg(long, default_value_t = 10_000)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Instruction counts of both GEMM paths and cycle counts of both array modes.
    Throughput {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 4)]
        cols: usize,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accumulator overflow sweep over ResNet18-shaped conv layers.
    Overflow {
        /// `all` or a comma-separated list such as `layer2,layer17`.
        #[arg(long, default_value = "all")]
        layers: String,
        /// Comma-separated accumulator widths, ascending.
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<u32>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Override the input spatial size of every layer.
        #[arg(long)]
        spatial: Option<usize>,
        /// Override the number of output channels of every layer.
        #[arg(long)]
        c_out: Option<usize>,
        #[arg(long, default_value_t = 80.0)]
        act_std: f64,
        #[arg(long, default_value_t = 3.0)]
        weight_std: f64,
        /// Draw signed activations instead of post-ReLU ones.
        #[arg(long)]
        signed_activations: bool,
        /// Lowered activations (2-D int8 tensor file); requires --weights.
        #[arg(long, requires = "weights")]
        activations: Option<PathBuf>,
        /// Weights (2-D int4 or int8 tensor file); requires --activations.
        #[arg(long, requires = "activations")]
        weights: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the systolic array on a random problem and compare with the GEMM kernel.
    SaSim {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 4)]
        cols: usize,
        #[arg(long, value_enum, default_value_t = PeModeArg::Sym)]
        pe_mode: PeModeArg,
        #[arg(long, value_enum, default_value_t = ModeArg::Wrap)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-cycle active-PE dump.
        #[arg(long)]
        activity_csv: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pack integer text into a tensor file, or unpack one back to text.
    Pack {
        #[arg(long)]
        unpack: bool,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        dtype: Option<DTypeArg>,
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<u32>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A failed run and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Verification(String),
}

impl From<asymmac::Error> for Failure {
    fn from(e: asymmac::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
