//! `lsat`: synthesize data, train, evaluate, predict, profile and
//! gradient-check the change detector.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lsat_core::data::Split;
use lsat_core::gradsuite::Scope;

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION};

#[derive(Debug, Parser)]
#[command(
    name = "lsat",
    version,
    about = "Change detection for bi-temporal image pairs with the LSAT network"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (A/, B/, label/, manifest.json).
    Synth(SynthArgs),
    /// Train on a dataset directory; logs per-epoch JSON lines.
    Train(TrainArgs),
    /// Pixel metrics of a checkpoint on one split.
    Eval(EvalArgs),
    /// Predict a change mask for one image pair.
    Predict(PredictArgs),
    /// Parameter and MAC/FLOP report, or attention scaling fits.
    Profile(ProfileArgs),
    /// Finite-difference gradient sweep.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $LSAT_OUT_DIR).
    #[arg(long, env = "LSAT_OUT_DIR")]
    pub out: PathBuf,
    /// Number of pairs.
    #[arg(long)]
    pub n: usize,
    /// Overrides `synth.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory (default: $LSAT_OUT_DIR).
    #[arg(long, env = "LSAT_OUT_DIR")]
    pub out: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Mask PNG to write (0 / 255).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the change probability as an 8-bit PNG.
    #[arg(long)]
    pub probabilities: Option<PathBuf>,
    /// Dump per-level features of the first tile as PNGs into this directory.
    #[arg(long)]
    pub dump_features: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input side for the whole-model report (default: model.tile).
    #[arg(long)]
    pub tile: Option<usize>,
    /// Report attention-module scaling instead of the whole model.
    #[arg(long)]
    pub attention_only: bool,
    /// Token counts N = H * W (perfect squares) for --attention-only.
    #[arg(long, value_delimiter = ',', default_value = "64,256,1024,4096")]
    pub sizes: Vec<usize>,
    /// Channels for --attention-only.
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    /// Write the CSV or JSON report here as well as printing it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// op, module or model; every scope when omitted.
    #[arg(long, value_parser = parse_scope)]
    pub scope: Option<Scope>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Add a primitive with a deliberately wrong adjoint.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: lsat_core::Error| e.to_string())
}

fn parse_scope(s: &str) -> Result<Scope, String> {
    s.parse().map_err(|e: lsat_core::Error| e.to_string())
}

/// Runs one parsed command, writing its report to `out` and progress to `log`.
pub fn execute(cli: Cli, out: &mut dyn Write, log: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => commands::synth::run(&a, out),
        Command::Train(a) => commands::train::run(&a, out, log),
        Command::Eval(a) => commands::eval::run(&a, out),
        Command::Predict(a) => commands::predict::run(&a, out),
        Command::Profile(a) => commands::profile::run(&a, out),
        Command::Gradcheck(a) => commands::gradcheck::run(&a, out),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    match execute(cli, &mut stdout.lock(), &mut stderr.lock()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
