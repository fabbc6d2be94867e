//! `qcfs`: train, convert and evaluate QCFS detectors from the command line.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 for bad flags or config.

mod commands;
mod config;

use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use qcfs_core::convert::Selection;
use qcfs_core::graph::{ActivationKind, SnnMode};
use serde::{Serialize, Serializer};

#[derive(Parser)]
#[command(name = "qcfs", version, about = "QCFS activations, ANN to SNN conversion and a toy detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy detector and write a checkpoint plus per-epoch curves.
    Train(TrainArgs),
    /// Evaluate a checkpoint as an ANN, or as an SNN with --T.
    Eval(EvalArgs),
    /// Replace QCFS layers with integrate-and-fire neurons.
    Convert(ConvertArgs),
    /// Run a converted network for one or more timestep counts.
    Simulate(SimulateArgs),
    /// Monte Carlo conversion error over a (T, L, phi) grid.
    AnalyzeError(AnalyzeErrorArgs),
    /// Write synthetic scenes as a YOLO-format dataset.
    GenData(GenDataArgs),
}

fn display<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn display_opt<T: Display, S: Serializer>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(v) => s.collect_str(v),
        None => s.serialize_none(),
    }
}

#[derive(Args, Serialize, Debug, Clone)]
pub struct Common {
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 1 selects the bit-reproducible sequential path, 0
    /// lets the pool size itself.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// key = value file of flag defaults.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Serialize, Debug, Clone)]
pub struct DataArgs {
    /// YOLO-format dataset root; synthetic scenes when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic training scenes.
    #[arg(long, default_value_t = 1000)]
    pub train_scenes: usize,
    /// Synthetic validation scenes.
    #[arg(long, default_value_t = 200)]
    pub val_scenes: usize,
    #[arg(long, default_value_t = 7)]
    pub data_seed: u64,
    /// Images are resized to this square size.
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
}

#[derive(Args, Serialize, Debug, Clone)]
pub struct EvalOpts {
    /// Dataset split to evaluate (YOLO data only).
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long, default_value_t = 0.001)]
    pub conf: f64,
    #[arg(long, default_value_t = 0.5)]
    pub nms_iou: f64,
    /// Images per inference batch.
    #[arg(long, default_value_t = 50)]
    pub eval_batch: usize,
}

#[derive(Args, Serialize, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value = "qcfs")]
    pub activation: ActivationKind,
    /// Quantization levels of QCFS layers.
    #[arg(long = "L", default_value_t = 4)]
    #[serde(rename = "L")]
    pub levels: u32,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.2)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    /// Keep the learning rate constant.
    #[arg(long)]
    pub no_cosine: bool,
    /// Initial λ of every QCFS layer.
    #[arg(long, default_value_t = qcfs_core::qcfs::DEFAULT_LAMBDA)]
    pub lambda_init: f64,
    /// Number of object classes.
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Seeds weight init and batch shuffling.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub eval: EvalOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Serialize, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Timesteps; runs the network as an SNN when given.
    #[arg(long = "T")]
    #[serde(rename = "T")]
    pub timesteps: Option<usize>,
    #[arg(long, default_value = "per-step")]
    pub mode: SnnMode,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub eval: EvalOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Serialize, Debug, Clone)]
pub struct ConvertArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// first-only, last-only, all, or 0-based activation indices such as 1,3.
    #[arg(long, default_value = "all")]
    #[serde(serialize_with = "display")]
    pub plan: Selection,
    /// Timesteps recorded with the converted network.
    #[arg(long = "T", default_value_t = 4)]
    #[serde(rename = "T")]
    pub timesteps: usize,
    #[arg(long, default_value = "per-step")]
    pub mode: SnnMode,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Serialize, Debug, Clone)]
pub struct SimulateArgs {
    /// A converted checkpoint, or a QCFS one together with --plan.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated timestep counts.
    #[arg(long = "T", value_delimiter = ',', default_value = "4")]
    #[serde(rename = "T")]
    pub timesteps: Vec<usize>,
    #[arg(long, default_value = "per-step")]
    pub mode: SnnMode,
    /// Convert a QCFS checkpoint with this plan before running.
    #[arg(long)]
    #[serde(serialize_with = "display_opt")]
    pub plan: Option<Selection>,
    /// Also write the first-only/last-only surgery table (QCFS checkpoints).
    #[arg(long)]
    pub surgery: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub eval: EvalOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Serialize, Debug, Clone)]
pub struct AnalyzeErrorArgs {
    #[arg(long = "T", value_delimiter = ',', default_value = "4,8,16")]
    #[serde(rename = "T")]
    pub timesteps: Vec<usize>,
    #[arg(long = "L", value_delimiter = ',', default_value = "4,8,16")]
    #[serde(rename = "L")]
    pub levels: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub phi: Vec<f64>,
    /// λ, which is also the IF threshold.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Samples per cell.
    #[arg(long, default_value_t = 1_000_000)]
    pub n: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Integrate on an evenly spaced grid of n points instead of sampling.
    #[arg(long)]
    pub grid: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Serialize, Debug, Clone)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 1000)]
    pub train_scenes: usize,
    #[arg(long, default_value_t = 200)]
    pub val_scenes: usize,
    #[arg(long, default_value_t = 7)]
    pub data_seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

fn parse() -> Result<Cli, ExitCode> {
    let cmd = Cli::command()
        .args_override_self(true)
        .mut_subcommands(|s| s.args_override_self(true));
    let argv = match config::expand(&cmd, std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return Err(ExitCode::from(2));
        }
    };
    let matches = cmd.try_get_matches_from(argv).map_err(|e| {
        let _ = e.print();
        ExitCode::from(if e.use_stderr() { 2 } else { 0 })
    })?;
    Cli::from_arg_matches(&matches).map_err(|e| {
        let _ = e.print();
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match parse() {
        Ok(c) => c,
        Err(code) => return code,
    };
    let outcome = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Convert(a) => commands::convert(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::AnalyzeError(a) => commands::analyze_error(a),
        Command::GenData(a) => commands::gen_data(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
