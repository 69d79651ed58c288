//! `swinforge` command line: prepare, train, eval, tsne and roc.

mod commands;
mod echo;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swinforge::colorframe::ColorFrame;
use swinforge::swin::Preset;
use swinforge::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "swinforge", version, about = "Swin Transformer CGI detector: prepare, train, eval, tsne, roc")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan a dataset root, split it by seed and optionally cache preprocessed planes.
    Prepare(PrepareArgs),
    /// Train a classifier on a prepared manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split: metrics, ROC curve and predictions.
    Eval(EvalArgs),
    /// Embed pooled features of a balanced sample with t-SNE.
    Tsne(TsneArgs),
    /// Overlay the ROC curves of several eval runs.
    Roc(RocArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Dataset root with FAKE/ and REAL/ (optionally under train/ and test/).
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, default_value = "rgb")]
    pub color_frame: ColorFrame,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-class train:val:test proportions.
    #[arg(long, default_value = "9:1:2")]
    pub split_ratios: String,
    /// Also write decoded, color-converted planes for every image.
    #[arg(long)]
    pub cache: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "rgb")]
    pub color_frame: ColorFrame,
    #[arg(long, default_value = "tiny")]
    pub preset: Preset,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Arithmetic precision of training.
    #[arg(long, default_value = "f32", value_parser = ["f32", "f64"])]
    pub precision: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: swinforge::dataset::Split,
    /// Defaults to the manifest recorded in the checkpoint.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Require the checkpoint to match this preset.
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Defaults to the color frame recorded in the checkpoint.
    #[arg(long)]
    pub color_frame: Option<ColorFrame>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Legend name of the ROC curve.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TsneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: swinforge::dataset::Split,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub color_frame: Option<ColorFrame>,
    /// Number of samples, split evenly between the classes.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 200.0)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 12.0)]
    pub exaggeration: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RocArgs {
    /// `NAME=EVAL_DIR`, repeated once per curve.
    #[arg(long = "run", required = true)]
    pub runs: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Contract(_) | Error::Mismatch(_) => 2,
        Error::Data { .. } | Error::Format(_) | Error::Io(_) => 3,
        Error::Numeric { .. } | Error::Dimension { .. } => 4,
    }
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SWINFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("SWINFORGE_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Prepare(a) => commands::prepare(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Tsne(a) => commands::tsne(&a),
        Command::Roc(a) => commands::roc(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
