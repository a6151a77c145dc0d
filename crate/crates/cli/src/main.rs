//! `cevae`: train, encode, enhance, evaluate and compare loss settings from
//! the command line.
//!
//! Exit codes: 0 on success, 1 when the work itself failed, 2 when the
//! invocation was wrong.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use cevae_core::CoreError;
use clap::{Args, Parser, Subcommand};

use settings::UsageError;

#[derive(Parser, Debug)]
#[command(
    name = "cevae",
    version,
    about = "Underwater image enhancement from compact latent codes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Enhance images, or decode latent files, with a trained model.
    Enhance(EnhanceArgs),
    /// Write one latent file per image.
    Encode(EncodeArgs),
    /// Turn latent files back into enhanced images.
    Decode(DecodeArgs),
    /// Score a model (or the identity) on a paired dataset.
    Evaluate(EvaluateArgs),
    /// Compare raw image and latent code storage.
    StorageReport(StorageArgs),
    /// Train once per loss setting and tabulate per-image PSNR.
    Ablate(AblateArgs),
}

/// Options that pick the model architecture.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Plain `key=value` file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// desk (32 px) or reference (256 px).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// full, no_spatial or no_capsule.
    #[arg(long)]
    pub ablation: Option<String>,
}

/// Where training pairs come from.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset root.
    #[arg(long, conflicts_with = "synthetic")]
    pub dataset: Option<PathBuf>,
    /// paired_dirs (degraded/ and reference/) or identity.
    #[arg(long)]
    pub layout: Option<String>,
    /// Train on this many generated pairs instead of a dataset.
    #[arg(long)]
    pub synthetic: Option<usize>,
}

/// Optimiser settings shared by `train` and `ablate`.
#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// First step at which the discriminator trains.
    #[arg(long)]
    pub disc_start_step: Option<u64>,
    /// Random crops and flips.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub augment: Option<bool>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Comma-separated loss terms: rec, lpips, gan, ssim, or all.
    #[arg(long)]
    pub toggles: Option<String>,
    /// pretrain (reference in, reference out) or finetune.
    #[arg(long)]
    pub mode: Option<String>,
    /// Continue from this checkpoint; its architecture is kept.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Paired dataset scored every --eval-every steps.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Per-step loss log; standard output when omitted.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    /// Image file or directory.
    #[arg(long, required_unless_present = "latent", conflicts_with = "latent")]
    pub input: Option<PathBuf>,
    /// Latent file or directory.
    #[arg(long)]
    pub latent: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for PNG files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Image file or directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for latent files.
    #[arg(long)]
    pub out: PathBuf,
    /// f16, f32 or f64.
    #[arg(long)]
    pub dtype: Option<String>,
    /// Use a trained encoder; otherwise a freshly seeded one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    /// Latent file or directory.
    #[arg(long)]
    pub latent: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub layout: Option<String>,
    #[arg(
        long,
        required_unless_present = "identity",
        conflicts_with = "identity"
    )]
    pub checkpoint: Option<PathBuf>,
    /// Score the degraded images themselves.
    #[arg(long)]
    pub identity: bool,
    /// Also report the perceptual distance.
    #[arg(long)]
    pub lpips: bool,
    /// Metrics file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StorageArgs {
    /// Per-image raw shape, e.g. 3x256x256.
    #[arg(long)]
    pub raw_shape: Option<String>,
    /// Per-image latent shape, e.g. 256x16x16.
    #[arg(long)]
    pub latent_shape: Option<String>,
    #[arg(long)]
    pub bytes_per_value: Option<usize>,
    /// Link bandwidth in bits per second.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Device capacity in bytes.
    #[arg(long)]
    pub capacity: Option<f64>,
    /// Images recorded per second.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Images in one transmitted batch.
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Loss sets to compare, separated by ';' or given repeatedly, e.g.
    /// "rec;rec,ssim".
    #[arg(long = "toggle-sets", required = true)]
    pub toggle_sets: Vec<String>,
    /// Paired evaluation dataset; the training pairs when omitted.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Per-set, per-image PSNR table.
    #[arg(long)]
    pub out: PathBuf,
    /// Quartiles per set; standard output when omitted.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.downcast_ref::<UsageError>().is_some()
        || matches!(err.downcast_ref::<CoreError>(), Some(CoreError::Config(_)))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Enhance(a) => commands::enhance(a),
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::StorageReport(a) => commands::storage_report(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_usage(&e) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
