mod commands;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lids::attacks::AttackKind;
use lids::training::Knockout;
use lids::Error;

/// Low-frequency deep image steganography: training, hiding, retrieval and evaluation.
#[derive(Debug, Parser)]
#[command(name = "lids", version)]
pub struct Cli {
    /// Training configuration (JSON). Commands that read a checkpoint fall
    /// back to the configuration stored inside it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory; must not exist or be empty. Defaults to a fresh
    /// directory under $LIDS_OUT (or ./runs).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic corpus of natural-looking PNG images.
    GenData {
        #[arg(long, default_value_t = 300)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
    },
    /// Trains the embedding and retrieval networks.
    Train(TrainArgs),
    /// Hides a secret in a cover.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cover: PathBuf,
        #[arg(long)]
        secret: PathBuf,
    },
    /// Runs the retrieval network on one image.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Secret to compare the output against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Applies one attack with the exact implementation.
    Attack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "type")]
        kind: AttackKind,
        /// Attack parameter override, `key=value`; repeatable.
        #[arg(long = "param", value_name = "KEY=VALUE")]
        params: Vec<String>,
        /// Working resolution; defaults to the input's shorter side.
        #[arg(long)]
        side: Option<usize>,
    },
    /// Runs an evaluation protocol over a directory of images.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        eval_dir: PathBuf,
        #[arg(long, value_enum)]
        protocol: Protocol,
        #[command(flatten)]
        attacks: EvalAttackArgs,
    },
    /// Averaged azimuthal spectrum of a directory, optionally against a second one.
    FreqAnalysis {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        side: usize,
    },
    /// Retrieval quality under ideal low- and high-pass filters.
    SweepFilters {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        eval_dir: PathBuf,
        /// Cutoff radii in pixels; defaults to the reference set rescaled to the model side.
        #[arg(long, value_delimiter = ',')]
        d: Vec<f64>,
    },
    /// Amplified absolute difference of two images.
    Residue {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        gain: f64,
        #[arg(long, default_value_t = 64)]
        side: usize,
    },
    /// Trains the full model and one model per knocked-out component.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        eval_dir: PathBuf,
        /// attack_layer, freq_loss or clean_loss; repeatable.
        #[arg(long)]
        knockout: Vec<Knockout>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of training images.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Fidelity,
    Robustness,
    Specificity,
}

/// Evaluation attack parameters; unset flags keep the defaults.
#[derive(Debug, Args)]
pub struct EvalAttackArgs {
    #[arg(long)]
    pub jpeg_quality: Option<u8>,
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    #[arg(long)]
    pub blur_kernel: Option<usize>,
    /// Low-pass cutoff as a fraction of the largest radius.
    #[arg(long)]
    pub lowpass_fraction: Option<f64>,
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub jitter_hue: Option<f64>,
    #[arg(long)]
    pub crop_scale: Option<f64>,
}

/// Process exit status for an error class.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Shape(_) | Error::Json(_) => 2,
        Error::Io(_) | Error::Decode { .. } | Error::Format(_) | Error::Checkpoint(_) => 3,
        Error::NonFinite(_) | Error::Undefined(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(dir) => {
            println!("output: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
