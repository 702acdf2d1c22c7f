//! `mlkit`: synthetic data, training, evaluation, multi-label CAM and unit
//! dissection from the command line.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or validation error,
//! 3 numeric failure (non-finite loss or parameters).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "mlkit", version, about = "Multi-label ranking losses, evaluation and interpretation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a long-tail synthetic multi-label dataset.
    GenData(GenDataArgs),
    /// Train a scorer with one of the ranking losses.
    Train(TrainArgs),
    /// Evaluate a model: top-1/top-5 accuracy, micro and macro mAP.
    Eval(EvalArgs),
    /// Multi-label class activation maps from a feature stack and a head.
    Cam(CamArgs),
    /// Match unit activations against concept masks.
    Dissect(DissectArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub features: usize,
    #[arg(long, default_value_t = 1000)]
    pub examples: usize,
    #[arg(long, default_value_t = 1.2)]
    pub zipf: f64,
    #[arg(long, default_value_t = 0.3)]
    pub co_label_prob: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also draw a held-out set from the same class directions.
    #[arg(long, requires = "eval_out")]
    pub eval_examples: Option<usize>,
    #[arg(long, requires = "eval_examples")]
    pub eval_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum LossArg {
    Bce,
    Warp,
    Lsep,
    Wlsep,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum WeightsArg {
    Uniform,
    Invfreq,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "wlsep")]
    pub loss: LossArg,
    #[arg(long, value_enum, default_value = "uniform")]
    pub weights: WeightsArg,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Width of an optional logistic hidden branch.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Start from this model instead of the seeded initialisation.
    #[arg(long)]
    pub init_model: Option<PathBuf>,
    /// Write the starting parameters here before training.
    #[arg(long)]
    pub init_out: Option<PathBuf>,
    #[arg(long)]
    pub out_model: PathBuf,
    /// Per-epoch mean loss as CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    pub report: ReportFormat,
    /// Defaults to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CamArgs {
    /// Tensor file, D×H×W.
    #[arg(long)]
    pub features: PathBuf,
    /// Tensor file, D×C.
    #[arg(long)]
    pub head: PathBuf,
    /// Comma-separated class indices.
    #[arg(long, value_delimiter = ',', required = true)]
    pub classes: Vec<usize>,
    #[arg(long, default_value_t = 1e-4)]
    pub cosine_threshold: f64,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.2)]
    pub floor: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 5)]
    pub kernel_size: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct DissectArgs {
    /// One units×images×h×w tensor, or repeat with one images×h×w tensor
    /// per unit.
    #[arg(long, required = true)]
    pub activations: Vec<PathBuf>,
    /// JSON file listing images and rectangle / PGM concept masks.
    #[arg(long)]
    pub masks: PathBuf,
    /// CSV with concept_id,name,category.
    #[arg(long)]
    pub concepts: PathBuf,
    #[arg(long, default_value_t = 0.005)]
    pub quantile: f64,
    #[arg(long, default_value_t = 0.04)]
    pub iou_threshold: f64,
    /// Output directory for report.json and units.csv.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Cam(args) => commands::cam(args),
        Command::Dissect(args) => commands::dissect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mlkit: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
