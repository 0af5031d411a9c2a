//! `dcam` command-line tool: generate synthetic data, train classifiers,
//! explain single instances and evaluate explanation quality.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "dcam",
    version,
    about = "Dimension-wise class activation maps for multivariate series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Type 1 or Type 2 dataset.
    GenData(GenDataArgs),
    /// Train a classifier on a dataset directory.
    Train(TrainArgs),
    /// Compute the dCAM of one series.
    Explain(ExplainArgs),
    /// Score explanations against the ground-truth masks of a test split.
    Eval(EvalArgs),
    /// Time dCAM while doubling D, n and k.
    Bench(BenchArgs),
}

/// Flags shared by every command.
#[derive(Args, Clone)]
pub struct Common {
    /// JSON file with the command's settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory. It must not exist or be empty.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// type1 or type2
    #[arg(long = "type")]
    pub dataset_type: Option<String>,
    #[arg(long)]
    pub dims: Option<usize>,
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long)]
    pub instances_per_class: Option<usize>,
    #[arg(long)]
    pub test_instances_per_class: Option<usize>,
    #[arg(long)]
    pub pattern_length: Option<usize>,
    #[arg(long)]
    pub pattern_scale: Option<f64>,
    #[arg(long)]
    pub injected_dims: Option<usize>,
    #[arg(long)]
    pub class0_injected: Option<usize>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// cnn, ccnn, dcnn or dresnet
    #[arg(long)]
    pub arch: Option<String>,
    /// Filters per layer (per block for dresnet), e.g. 16,32,32
    #[arg(long, value_delimiter = ',')]
    pub filters: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub kernel_widths: Option<Vec<usize>>,
    #[arg(long)]
    pub no_batchnorm: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the weights of a saved model.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Series CSV, one dimension per line.
    #[arg(long, conflicts_with = "dataset")]
    pub series: Option<PathBuf>,
    /// Dataset directory; use with --index.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<usize>,
    /// Class to explain. Defaults to the predicted class.
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Average only permutations classified as the explained class.
    #[arg(long)]
    pub only_correct: bool,
    /// Min-max scale the CSV output to [0, 1].
    #[arg(long)]
    pub normalize: bool,
    /// Pixel rows per dimension in the PPM heatmap.
    #[arg(long)]
    pub cell_height: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// cam, ccam or dcam
    #[arg(long)]
    pub method: Option<String>,
    /// Class whose instances are explained.
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Explain at most this many test instances.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dims: Option<usize>,
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub doublings: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub filters: Option<Vec<usize>>,
    #[arg(long)]
    pub kernel_width: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Explain(a) => commands::explain(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
