//! `ins-mil`: generate synthetic MIL data, train, evaluate and gradient-check.
//!
//! Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or config error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ins-mil", version, about = "Instance-level weakly supervised MIL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian MIL dataset (JSONL).
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Score a dataset with a checkpoint.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of the total loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
pub struct GenArgs {
    /// Dataset file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fraction of positive instances in each positive bag.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Bags per class.
    #[arg(long)]
    pub bags: Option<usize>,
    #[arg(long)]
    pub per_bag: Option<usize>,
    #[arg(long)]
    pub d_raw: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Lay each bag out on a side × side grid with a contiguous positive block.
    #[arg(long)]
    pub grid_side: Option<usize>,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
pub struct TrainArgs {
    /// Training dataset (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the resolved config, checkpoint and metrics.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint; only --epochs may change.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Validate and echo the config without training.
    #[arg(long)]
    pub dry_run: bool,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub queue_capacity: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable the contrastive term.
    #[arg(long)]
    pub no_iwscl: bool,
    /// Put family terms in the contrastive denominator too.
    #[arg(long)]
    pub infonce: bool,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset to score (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the report.
    #[arg(long)]
    pub out: PathBuf,
    /// Write per-bag score maps (grid datasets only).
    #[arg(long)]
    pub export_maps: bool,
    /// Compute instance AUC over positive-bag instances only.
    #[arg(long)]
    pub restrict_positive_bags: bool,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
pub struct GradcheckArgs {
    /// Directory for the resolved config and report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Perturb the analytic gradient of this block, e.g. `classifier.1.b`.
    #[arg(long, num_args = 0..=1, default_missing_value = "classifier.1.b")]
    pub corrupt: Option<String>,
    /// Size of the perturbation applied by --corrupt.
    #[arg(long, default_value_t = 1e-2)]
    pub corrupt_by: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
