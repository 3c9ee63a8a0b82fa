use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spectrafuse::MatchingStrategy;

mod commands;
mod report;

#[derive(Parser)]
#[command(
    name = "spectrafuse",
    version,
    about = "Spectral attention fusion for open-vocabulary segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment a bundle and write labels.pgm, labels.json and report.json.
    Segment(SegmentArgs),
    /// Print one head's eigenvalue spectrum as CSV.
    InspectSpectrum(InspectArgs),
    /// Print the head matching for one window as JSON.
    MatchHeads(MatchArgs),
    /// Score a predicted label map against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON run configuration; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub cluster_threshold: Option<f64>,
    #[arg(long)]
    pub matching: Option<MatchingStrategy>,
    /// Skip the VFM graph entirely (plain CLIP attention).
    #[arg(long)]
    pub no_vfm: bool,
    /// Distill the raw VFM graph instead of its low-rank rescaled version.
    #[arg(long)]
    pub no_tailoring: bool,
    /// Disable the presence-prior blend of patch scores.
    #[arg(long)]
    pub no_ops: bool,
    /// Disable the text embedding adjustment.
    #[arg(long)]
    pub no_ota: bool,
    /// Worker threads for the window loop; 0 uses all logical cores.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Also write wall-clock timings to this file.
    #[arg(long)]
    pub timing: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Side {
    Vfm,
    Clip,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long, value_enum)]
    pub side: Side,
    #[arg(long)]
    pub head: usize,
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    #[arg(long, default_value_t = spectrafuse::spectral::DEFAULT_ETA)]
    pub eta: f64,
}

#[derive(Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    /// Signature length; defaults to the number of heads.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, default_value = "complementary")]
    pub matching: MatchingStrategy,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// JSON list of class names, or an object with a `class_names` list.
    #[arg(long)]
    pub classes: PathBuf,
    #[arg(long)]
    pub ignore_index: Option<u32>,
}

/// Failure with the process exit status it maps to.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<spectrafuse::Error> for Failure {
    fn from(e: spectrafuse::Error) -> Self {
        let code = if e.is_numerical() { 3 } else { 2 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPECTRAFUSE_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Segment(a) => commands::segment(&a),
        Command::InspectSpectrum(a) => commands::inspect_spectrum(&a),
        Command::MatchHeads(a) => commands::match_heads(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
