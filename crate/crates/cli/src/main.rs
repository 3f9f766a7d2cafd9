mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

/// Blind hyperspectral fusion by self-regression.
#[derive(Parser)]
#[command(name = "hsfusion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and its two observations.
    Simulate(SimulateArgs),
    /// Fuse an LR-HSI / HR-MSI pair, learning the observation model.
    Train(TrainArgs),
    /// Score a fused cube against ground truth.
    Eval(EvalArgs),
    /// Summarize a training checkpoint.
    Inspect(InspectArgs),
    /// Check analytic gradients against finite differences on a tiny scene.
    Gradcheck(GradcheckArgs),
    /// Bilinear upsampling, the reference baseline.
    Upsample(UpsampleArgs),
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateArgs {
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub bands: Option<usize>,
    #[arg(long)]
    pub msi_bands: Option<usize>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub psf_size: Option<usize>,
    #[arg(long)]
    pub psf_sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sample type of the written cubes: f32 or f64.
    #[arg(long)]
    pub dtype: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with any of the flags above.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TrainArgs {
    /// LR hyperspectral cube.
    #[arg(long)]
    pub y: Option<PathBuf>,
    /// HR multispectral cube.
    #[arg(long)]
    pub z: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Architecture preset: paper or desk.
    #[arg(long)]
    pub preset: Option<String>,
    /// Ablation rung: baseline, s, sn, snl or snla.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_sn: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    /// Print losses to stderr every this many iterations; 0 disables.
    #[arg(long)]
    pub log_every: Option<usize>,
    /// JSON file with any of the flags above plus any training-config field.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(skip)]
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub scale: Option<usize>,
    /// Structured report destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Full per-parameter report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct UpsampleArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub dtype: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e.render().to_string();
            let first = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).one_line());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Upsample(a) => commands::upsample(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.one_line());
            if matches!(e, CliError::Usage(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
