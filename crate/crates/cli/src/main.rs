mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Low-light enhancement: training, inference, evaluation and ablations.
#[derive(Debug, Parser)]
#[command(name = "hep", version)]
pub struct Cli {
    /// TOML configuration; flags given on the command line take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// VGG-19 weights file. Defaults to the config value, then `$HEP_WEIGHTS_DIR`.
    #[arg(long, global = true)]
    pub backbone: Option<PathBuf>,
    /// Use a randomly initialized backbone with this seed (smoke runs only).
    #[arg(long, global = true, value_name = "SEED")]
    pub random_backbone: Option<u64>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enhance an image or a directory of images.
    Enhance {
        #[arg(long)]
        input: PathBuf,
        /// LUM checkpoint directory.
        #[arg(long)]
        lum: PathBuf,
        /// NDM checkpoint directory.
        #[arg(long, required_unless_present = "skip_ndm")]
        ndm: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write the LUM reflectance without denoising.
        #[arg(long)]
        skip_ndm: bool,
    },
    /// Score predictions: PSNR / SSIM against ground truth and NIQE.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, required_unless_present = "no_reference", conflicts_with = "no_reference")]
        gt: Option<PathBuf>,
        /// NIQE only.
        #[arg(long)]
        no_reference: bool,
        /// NIQE model; the bundled pristine model when absent.
        #[arg(long)]
        niqe_model: Option<PathBuf>,
        /// Output CSV.
        #[arg(long, default_value = "eval.csv")]
        out: PathBuf,
    },
    /// Cosine similarity of backbone features: equalized and raw low-light
    /// inputs against their ground truth.
    HepValidate {
        /// Manifest with ground-truth pairs.
        #[arg(long)]
        pairs: PathBuf,
        /// Restrict to one split; every paired file when absent.
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value = hep_core::backbone::HEP_LAYER)]
        layer: String,
        /// Report path; the histogram is written next to it as PNG.
        #[arg(long, default_value = "hep_report.json")]
        out: PathBuf,
    },
    /// Train and evaluate one ablation grid.
    Ablate {
        /// prior, lum-loss, ndm-loss or denoiser.
        #[arg(long)]
        study: String,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        lum_steps: Option<usize>,
        #[arg(long)]
        ndm_steps: Option<usize>,
        #[arg(long)]
        test_limit: Option<usize>,
        #[arg(long)]
        niqe_model: Option<PathBuf>,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
    /// Train the decomposition network.
    TrainLum {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Train the denoiser on reflectances of a trained LUM.
    TrainNdm {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        lum: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        resume: bool,
    },
    /// Fit a NIQE model to a directory of pristine images.
    FitNiqe {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = hep_core::metrics::niqe::PATCH_SIZE)]
        patch_size: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
