//! `camtrap`: batch entry points for the active-learning engine.
//!
//! Exit status is 0 on success, 2 for validation errors (bad flags, files,
//! labels or state) and 1 for runtime failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "camtrap",
    version,
    about = "Active-learning pipeline for camera-trap image classification"
)]
pub struct Cli {
    /// Project directory.
    #[arg(long, global = true, default_value = ".")]
    pub project: PathBuf,

    /// Base seed. Used when creating a project; on an existing project it
    /// replaces the stored seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Engine settings (TOML). Used when creating a project; on an existing
    /// project it replaces the stored settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Only print errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create an empty project.
    Init {
        /// Comma-separated class names; must include `empty`.
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<String>,
    },
    /// Load an image manifest, optional labels and detector output.
    Ingest {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        detections: PathBuf,
    },
    /// Create a project from a generated synthetic dataset with simulated
    /// embeddings. Ground truth goes to `synth/truth.csv`.
    Synth(SynthArgs),
    /// Add embeddings: compute them from image files or import a store.
    Embed {
        /// Compute features with the built-in toy embedder.
        #[arg(long, conflicts_with = "import", required_unless_present = "import")]
        toy: bool,
        /// Import a `.wlemb` embedding store.
        #[arg(long)]
        import: Option<PathBuf>,
    },
    /// Split labeled images into train/validation/test, or partition
    /// stations into in-sample and out-of-sample groups.
    Split {
        /// Train, validation and test fractions.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        fractions: Option<Vec<f64>>,
        #[arg(long, conflicts_with = "no_stratify")]
        stratify: bool,
        #[arg(long)]
        no_stratify: bool,
        /// Fraction of stations to put in-sample; writes
        /// `exports/station_partition.csv` instead of a split.
        #[arg(long)]
        stations: Option<f64>,
    },
    /// Grid search over detector thresholds and embedders.
    Tune {
        /// Restrict the grid to these embedders.
        #[arg(long, value_delimiter = ',')]
        embedders: Option<Vec<String>>,
    },
    /// Train one head at fixed hyperparameters.
    Train(LambdaArgs),
    /// Evaluate the current model on a split part.
    Eval {
        #[arg(long, default_value = "test")]
        part: String,
        /// Also print the empty versus non-empty table.
        #[arg(long)]
        collapse_empty: bool,
    },
    /// Queue the next batch of images for labeling.
    AlSelect {
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, conflicts_with = "unstratified")]
        stratified: bool,
        #[arg(long)]
        unstratified: bool,
    },
    /// Submit labels from a CSV with `image_id,label` columns.
    AlLabel {
        file: PathBuf,
        /// Also accept labels for images outside the queued batch.
        #[arg(long)]
        any: bool,
    },
    /// Retrain on all loop labels and evaluate on the frozen test set.
    AlIterate {
        #[arg(long, conflicts_with = "tune")]
        skip_tuning: bool,
        #[arg(long)]
        tune: bool,
        /// `cold` or `warm`.
        #[arg(long)]
        start_mode: Option<String>,
    },
    /// Predict the remaining unlabeled images with the latest loop model.
    AlFinalize,
    /// Serve the labeling API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
    },
    /// Export model predictions for every image.
    Predict {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator settings (TOML); flags below override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub stations: Option<usize>,
    #[arg(long)]
    pub labeled_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LambdaArgs {
    #[arg(long)]
    pub embedder: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
