//! `qdnn-lab`: command-line runner for the quantization lab.

mod commands;
mod config;
mod workers;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{DatasetSection, TrainSection};

#[derive(Debug, Parser)]
#[command(name = "qdnn-lab", version, about = "Quantization-aware training lab on a synthetic ring dataset")]
struct Cli {
    /// Directory that every relative input and output path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// JSON config file (flags override its values).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the training set (CSV plus JSON metadata).
    GenData(GenDataArgs),
    /// Pretrain a float model.
    Train(TrainArgs),
    /// Retrain a float checkpoint with quantized weights and/or activations.
    Retrain(RetrainArgs),
    /// Fine-tune a quantized checkpoint with a cyclic learning rate.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on the oracle-labelled eval set.
    Eval(EvalArgs),
    /// Render a checkpoint's prediction map as a PPM image.
    Map(MapArgs),
    /// Run a figure's full pipeline from seeds.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Clone, Default, Args)]
struct DatasetFlags {
    /// Ring spacing r.
    #[arg(long)]
    r: Option<f64>,
    /// Rings per label and half-plane.
    #[arg(long)]
    rings: Option<usize>,
    /// Core points per semicircle.
    #[arg(long)]
    points: Option<usize>,
    /// Noisy copies per core point.
    #[arg(long)]
    subsamples: Option<usize>,
    /// Subsample noise standard deviation (default r/3).
    #[arg(long)]
    sigma: Option<f64>,
    /// Dataset seed.
    #[arg(long = "data-seed")]
    data_seed: Option<u64>,
}

impl DatasetFlags {
    fn section(&self) -> DatasetSection {
        DatasetSection {
            r: self.r,
            rings: self.rings,
            points: self.points,
            subsamples: self.subsamples,
            sigma: self.sigma,
            seed: self.data_seed,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// `sgd-momentum` or `adam`.
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<qdnn_core::train::Optimizer>,
    /// Weight of the orthogonality regularizer.
    #[arg(long)]
    lip: Option<f64>,
    /// Seed for initialisation and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Score the eval set every N epochs (0: final epoch only).
    #[arg(long)]
    eval_every: Option<usize>,
}

impl TrainFlags {
    fn section(&self) -> TrainSection {
        TrainSection {
            optimizer: self.optimizer,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            milestones: None,
            decay: None,
            lip: self.lip,
            seed: self.seed,
            eval_every: self.eval_every,
        }
    }
}

fn parse_optimizer(s: &str) -> Result<qdnn_core::train::Optimizer, String> {
    match s {
        "sgd" | "sgd-momentum" => Ok(qdnn_core::train::Optimizer::SgdMomentum),
        "adam" => Ok(qdnn_core::train::Optimizer::Adam),
        _ => Err(format!("unknown optimizer {s:?}")),
    }
}

#[derive(Debug, Clone, Args)]
struct GenDataArgs {
    #[command(flatten)]
    dataset: DatasetFlags,
    /// Output CSV; the metadata sidecar is written next to it.
    #[arg(long, default_value = "data/train.csv")]
    output: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct DataSource {
    /// Training CSV written by gen-data. Without it the set is generated
    /// in memory from the dataset settings.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    dataset: DatasetFlags,
    /// Eval lattice density (points per unit length).
    #[arg(long)]
    density: Option<f64>,
}

#[derive(Debug, Clone, Args)]
struct TrainArgs {
    #[command(flatten)]
    source: DataSource,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    /// Add scaled residual connections between hidden layers.
    #[arg(long)]
    residual: bool,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value = "checkpoints/float.json")]
    output: PathBuf,
    #[arg(long, default_value = "logs/train.csv")]
    metrics: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct QuantFlags {
    /// Weight bit-width (2..=8).
    #[arg(long)]
    wbits: Option<u32>,
    /// Activation bit-width (2..=8).
    #[arg(long)]
    abits: Option<u32>,
    /// Also quantize residual sums feeding the next layer.
    #[arg(long)]
    quantize_shortcut: bool,
}

#[derive(Debug, Clone, Args)]
struct RetrainArgs {
    #[command(flatten)]
    source: DataSource,
    /// Float checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    quant: QuantFlags,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value = "checkpoints/quant.json")]
    output: PathBuf,
    #[arg(long, default_value = "logs/retrain.csv")]
    metrics: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    source: DataSource,
    /// Quantized checkpoint to fine-tune.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Cycle length: `N-epochs` or an iteration count.
    #[arg(long)]
    clr_cycle: Option<String>,
    #[arg(long)]
    cycles: Option<usize>,
    /// Base rate (default: 10x the last retraining rate).
    #[arg(long)]
    base_lr: Option<f64>,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value = "checkpoints/finetuned.json")]
    output: PathBuf,
    #[arg(long, default_value = "logs/finetune.csv")]
    metrics: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct EvalArgs {
    #[command(flatten)]
    source: DataSource,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate the float shadow weights of a quantized checkpoint.
    #[arg(long)]
    float: bool,
    /// Report CSV to append to.
    #[arg(long, default_value = "reports/accuracy.csv")]
    report: PathBuf,
    /// Seed recorded in the report row.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Args)]
struct MapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// xmin xmax ymin ymax
    #[arg(long, num_args = 4, value_names = ["XMIN", "XMAX", "YMIN", "YMAX"], allow_negative_numbers = true)]
    window: Option<Vec<f64>>,
    /// Bottom-right quarter (x > 0, y < 0).
    #[arg(long, conflicts_with = "window")]
    quarter: bool,
    /// Pixels per side.
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    float: bool,
    /// `label` or `probability`.
    #[arg(long, value_parser = parse_shading)]
    shading: Option<qdnn_core::eval::Shading>,
    #[arg(long, default_value = "maps/map.ppm")]
    output: PathBuf,
}

fn parse_shading(s: &str) -> Result<qdnn_core::eval::Shading, String> {
    match s {
        "label" => Ok(qdnn_core::eval::Shading::Label),
        "probability" | "prob" => Ok(qdnn_core::eval::Shading::Probability),
        _ => Err(format!("unknown shading {s:?}")),
    }
}

#[derive(Debug, Clone, Args)]
struct ReproduceArgs {
    /// fig1, fig2 or fig3.
    figure: String,
    /// First seed; further seeds are seed+1, seed+2, ...
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of seeds.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    retrain_epochs: Option<usize>,
    /// Map pixels per side.
    #[arg(long)]
    res: Option<usize>,
    #[command(flatten)]
    dataset: DatasetFlags,
    #[arg(long)]
    density: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qdnn-lab: {e}");
            ExitCode::FAILURE
        }
    }
}
