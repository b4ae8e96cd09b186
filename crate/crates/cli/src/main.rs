//! `catoptric`: simulate a mirror-array capture, calibrate, restore rays,
//! train a field, render views and score them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use catoptric::calibration::CalibrationError;
use catoptric::evalkit::EvalError;
use catoptric::neuralfield::FieldError;
use catoptric::trainer::TrainError;

#[derive(Parser, Debug)]
#[command(
    name = "catoptric",
    version,
    about = "Radiance-field reconstruction from one image of a sphere-mirror array"
)]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log detail (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Project configuration (JSON). Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output location. Falls back to the config's output_dir, then $CATOPTRIC_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ray-trace a capture: image, depth/normal/index maps, masks, calibration and markers.
    Simulate(commands::SimulateArgs),
    /// Estimate the camera pose from marker correspondences.
    Calibrate(commands::CalibrateArgs),
    /// Restore one reflected ray per mirror pixel into a ray bank.
    Restore(commands::RestoreArgs),
    /// Train a field on a ray bank, writing checkpoints and a loss log.
    Train(commands::TrainArgs),
    /// Render views of a trained field.
    Render(commands::RenderArgs),
    /// Score renders against references (PSNR, SSIM).
    Eval(commands::EvalArgs),
}

/// A failure with its exit code: 2 usage, 3 data, 4 numerical.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    pub fn usage(m: impl Into<String>) -> Self {
        Failure::Usage(m.into())
    }

    pub fn data(m: impl Into<String>) -> Self {
        Failure::Data(m.into())
    }

    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<FieldError> for Failure {
    fn from(e: FieldError) -> Self {
        match e {
            FieldError::NonFinite { .. } => Failure::Numerical(e.to_string()),
            FieldError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Field(f) => f.into(),
            TrainError::Diverged { .. } => Failure::Numerical(e.to_string()),
            TrainError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<CalibrationError> for Failure {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::TooFewPoints(_) => Failure::Usage(e.to_string()),
            CalibrationError::NonPlanar { .. } | CalibrationError::Geometry(_) => Failure::Data(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Field(f) => f.into(),
            EvalError::Train(t) => t.into(),
            EvalError::Calibration(c) => c.into(),
            EvalError::Config(m) => Failure::Usage(m),
            other => Failure::Data(other.to_string()),
        }
    }
}

fn set_threads(n: Option<usize>) -> Result<(), Failure> {
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        return Err(Failure::usage("--threads must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    log::warn!("built without the parallel feature; --threads {n} ignored");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    set_threads(cli.threads)?;
    match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Restore(a) => commands::restore(a),
        Command::Train(a) => commands::train(a),
        Command::Render(a) => commands::render(a),
        Command::Eval(a) => commands::eval(a),
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
        Err(f) => {
            eprintln!("catoptric: {f}");
            ExitCode::from(f.code())
        }
    }
}
