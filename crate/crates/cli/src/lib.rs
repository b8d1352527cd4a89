//! The `terraseg` command line: one binary, one subcommand per pipeline
//! stage, all state on disk between stages.
//!
//! Every stage reads and writes under the `--out` workspace directory using
//! the locations in [`config::Paths`], so a bare sequence of subcommands with
//! the same `--out` runs the whole pipeline. Explicit flags override the
//! workspace defaults.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;

pub use config::PipelineConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "terraseg", version, about = "Multimodal satellite segmentation pipeline")]
pub struct Cli {
    /// Pipeline config (JSON); flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "JSON")]
    pub config: Option<PathBuf>,
    /// Master seed for synthesis, splitting, initialization and training.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Workspace directory. `catalog` also accepts a `.jsonl` file and
    /// `blend` a `.tsrf` file here.
    #[arg(short, long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic scene corpus with ground-truth masks.
    Synth(SynthArgs),
    /// Index a directory of TSRF scenes into a JSON-lines catalog.
    Catalog(CatalogArgs),
    /// Stack catalog scenes into model-ready tiles.
    Tiles(TilesArgs),
    /// Assign tiles to spatial folds or to a temporal train/validation split.
    Split(SplitArgs),
    /// Train a U-Net, writing a checkpoint and a log line per epoch.
    Train(TrainArgs),
    /// Write per-tile probability maps from a checkpoint.
    Predict(PredictArgs),
    /// Average probability maps from several models.
    Blend(BlendArgs),
    /// Score probability maps against ground truth.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of every op and a small U-Net.
    Gradcheck,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of tiles in the corpus.
    #[arg(long)]
    pub n_tiles: Option<usize>,
    /// Tile edge in pixels.
    #[arg(long)]
    pub tile_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CatalogArgs {
    /// Scene directory [default: the workspace corpus].
    pub root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TilesArgs {
    /// Catalog file [default: the workspace catalog].
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Stack spec (JSON) replacing the config's stack.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Drop tiles that are mostly water according to the land mask (always on for fire).
    #[arg(long)]
    pub land_mask: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Tile store [default: the workspace tiles].
    #[arg(long)]
    pub tiles: Option<PathBuf>,
    /// Number of spatial folds.
    #[arg(long)]
    pub k: Option<usize>,
    /// Grid cell edge in degrees [default: two tiles].
    #[arg(long)]
    pub cell_size: Option<f64>,
    /// Validate on tiles of this year (fold 1) and train on earlier ones (fold 0).
    #[arg(long, value_name = "YEAR", conflicts_with_all = ["k", "cell_size"])]
    pub temporal: Option<i32>,
    /// CSV `tile_id,fold` whose rows replace computed folds.
    #[arg(long = "override", value_name = "CSV")]
    pub override_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Tile store [default: the workspace tiles].
    #[arg(long)]
    pub tiles: Option<PathBuf>,
    /// Fold CSV [default: the workspace folds if present, else train on every tile].
    #[arg(long)]
    pub folds: Option<PathBuf>,
    /// Fold held out for validation.
    #[arg(long, default_value_t = 0)]
    pub val_fold: usize,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Tiles per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate of the cosine schedule.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Probability of keeping a training tile without positive pixels.
    #[arg(long)]
    pub keep_prob: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint [default: the workspace's last checkpoint].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Tile store [default: the workspace tiles].
    #[arg(long)]
    pub tiles: Option<PathBuf>,
    /// Fold CSV used with `--fold` to restrict the tiles.
    #[arg(long, requires = "fold")]
    pub folds: Option<PathBuf>,
    /// Only predict tiles of this fold [default: every tile].
    #[arg(long)]
    pub fold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BlendArgs {
    /// Probability maps, or directories of `<id>.prob.tsrf` maps.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Probability map or directory of maps [default: the workspace predictions].
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Tile store, or a target raster when `--pred` is a single map [default: the workspace tiles].
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Binarization threshold [default: 0.5].
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Also report ROC AUC.
    #[arg(long)]
    pub auc: bool,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { error::EXIT_INPUT } else { 0 };
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", CliError::input(e.kind().to_string()).to_json());
            }
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let threads = match cli.threads {
        Some(0) => return Err(CliError::input("--threads must be at least 1")),
        Some(n) => n,
        None => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::runtime(format!("thread pool: {e}")))?;
    let ctx = commands::Context {
        cfg,
        out: cli.out.unwrap_or_else(|| PathBuf::from(".")),
    };
    pool.install(|| commands::dispatch(&ctx, &cli.command))
}
