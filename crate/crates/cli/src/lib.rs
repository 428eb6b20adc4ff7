//! The `nucleidiff` command-line pipeline.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric failure (non-finite loss or sample, failed matrix root).

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nucleidiff_core::Magnification;
use nucleidiff_nn::{Phase, Preset};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "nucleidiff", version, about = "Nuclei-mask conditioned diffusion for H&E histology patches")]
#[command(
    after_help = "Environment:\n  NUCLEIDIFF_INCEPTION_WEIGHTS  default Inception-V3 safetensors file for evaluate / ablate-guidance\n  RUST_LOG                      log filter (default: info)\n\nExit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Default bundle of model, schedule and training settings.
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Flat `key = value` config file (`model.*`, `schedule.*`, `train.*`, `preset`).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic annotated regions into a region container directory.
    SynthRegions(commands::synth::SynthArgs),
    /// Stain-normalize regions, hold out a test area and extract patches.
    Preprocess(commands::preprocess::PreprocessArgs),
    /// Train the denoiser (main phase or guidance finetuning).
    Train(commands::train::TrainArgs),
    /// Sample images from the masks listed in a manifest.
    Sample(commands::sample::SampleArgs),
    /// FID and Inception Score between two image directories.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Render the conditioning channels of one patch.
    MaskView(commands::mask_view::MaskViewArgs),
    /// Sample and score at several guidance scales.
    AblateGuidance(commands::ablate::AblateArgs),
}

pub fn parse_magnification(s: &str) -> Result<Magnification, String> {
    s.parse().map_err(|e: nucleidiff_core::Error| e.to_string())
}

pub fn parse_phase(s: &str) -> Result<Phase, String> {
    s.parse().map_err(|e: nucleidiff_nn::Error| e.to_string())
}

/// Parses `argv` and runs the selected command; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::SynthRegions(a) => commands::synth::run(a),
        Command::Preprocess(a) => commands::preprocess::run(a),
        Command::Train(a) => commands::train::run(a),
        Command::Sample(a) => commands::sample::run(a),
        Command::Evaluate(a) => commands::evaluate::run(a),
        Command::MaskView(a) => commands::mask_view::run(a),
        Command::AblateGuidance(a) => commands::ablate::run(a),
    }
}
