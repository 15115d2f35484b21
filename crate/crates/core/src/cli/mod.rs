//! Argument parsing and dispatch for the `glioma` executable.
//!
//! Every flag can also be set through a `GLIOMA_<FLAG>` environment variable
//! (upper-cased, dashes as underscores). Failures print one line of the form
//! `error[<class>]: <message>` to stderr and exit 1; usage errors exit 2.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{DcnOverrides, EnsembleConfig, HistoConfig, PathsConfig, PipelineConfig, RadioConfig, TrainOverrides};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "glioma",
    version,
    about = "Glioma sub-typing pipeline",
    propagate_version = true
)]
pub struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true, env = "GLIOMA_CONFIG")]
    pub config: Option<PathBuf>,
    /// Root seed; every random stage derives its stream from it [default: 0].
    #[arg(long, global = true, env = "GLIOMA_SEED")]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true, env = "GLIOMA_THREADS")]
    pub threads: Option<usize>,
    /// off, error, warn, info, debug or trace.
    #[arg(long, global = true, env = "GLIOMA_LOG", default_value = "warn")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tile slides, run QC and write a tile manifest.
    ExtractTiles(ExtractTilesArgs),
    /// Slice volumes against the positivity table and write a slice manifest.
    ExtractSlices(ExtractSlicesArgs),
    /// Train a DCN on a manifest.
    Train(TrainArgs),
    /// Per-case predictions for every case in a manifest.
    Predict(PredictArgs),
    /// Fuse per-case modality predictions.
    Fuse(FuseArgs),
    /// Score prediction CSVs against ground truth.
    Evaluate(EvaluateArgs),
    /// Render a curves CSV as SVG.
    PlotCurves(PlotCurvesArgs),
    /// Randomized finite-difference gradient battery.
    Gradcheck(GradcheckArgs),
    /// Fast invariant suite.
    Selftest,
    /// Generate a small synthetic cohort of slides and volumes.
    SynthCohort(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ExtractTilesArgs {
    #[arg(long, env = "GLIOMA_SLIDE_DIR")]
    pub slide_dir: Option<PathBuf>,
    #[arg(long, env = "GLIOMA_LABELS_CSV")]
    pub labels_csv: Option<PathBuf>,
    /// Microns per pixel for slides without a `.mpp` sidecar [default: 0.5].
    #[arg(long, env = "GLIOMA_RESOLUTION")]
    pub resolution: Option<f64>,
    /// Tiles are written next to the manifest, under `tiles/`.
    #[arg(long, env = "GLIOMA_OUT_MANIFEST")]
    pub out_manifest: PathBuf,
    /// CSV with columns resolution,label,quota; built-in table if omitted.
    #[arg(long, env = "GLIOMA_QUOTA_TABLE")]
    pub quota_table: Option<PathBuf>,
    #[arg(long, env = "GLIOMA_TILE_SIZE")]
    pub tile_size: Option<u32>,
    /// Disable the pen-mark heuristic.
    #[arg(long, env = "GLIOMA_NO_PEN_MARKS")]
    pub no_pen_marks: bool,
    #[arg(long, env = "GLIOMA_PEN_MARK_SPREAD")]
    pub pen_mark_spread: Option<f64>,
    /// Enable the hemorrhage heuristic with this mean red-excess limit.
    #[arg(long, env = "GLIOMA_HEMORRHAGE_RED_EXCESS")]
    pub hemorrhage_red_excess: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExtractSlicesArgs {
    #[arg(long, env = "GLIOMA_VOLUME_DIR")]
    pub volume_dir: Option<PathBuf>,
    #[arg(long, env = "GLIOMA_LABELS_CSV")]
    pub labels_csv: Option<PathBuf>,
    #[arg(long, env = "GLIOMA_POSITIVITY_CSV")]
    pub positivity_csv: Option<PathBuf>,
    #[arg(long, env = "GLIOMA_MODALITY")]
    pub modality: crate::class::Modality,
    /// Slices are written next to the manifest, under `slices/`.
    #[arg(long, env = "GLIOMA_OUT_MANIFEST")]
    pub out_manifest: PathBuf,
    /// Side length of the written slices [default: 224].
    #[arg(long, env = "GLIOMA_INPUT_SIZE")]
    pub input_size: Option<usize>,
    /// x, y or z [default: z].
    #[arg(long, env = "GLIOMA_AXIS")]
    pub axis: Option<crate::radio::Axis>,
    /// Balance to this many slices per class.
    #[arg(long, env = "GLIOMA_BALANCE")]
    pub balance: Option<usize>,
    /// Cut classes above the balance target instead of failing on short ones.
    #[arg(long, env = "GLIOMA_DOWNSAMPLE")]
    pub downsample: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "GLIOMA_MANIFEST")]
    pub manifest: PathBuf,
    /// DCN1 or DCN2 [default: DCN1 for tiles, DCN2 for slices].
    #[arg(long, env = "GLIOMA_PRESET")]
    pub preset: Option<crate::dcn::Preset>,
    #[arg(long, env = "GLIOMA_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "GLIOMA_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "GLIOMA_LR")]
    pub lr: Option<f32>,
    #[arg(long, env = "GLIOMA_VAL_FRACTION")]
    pub val_fraction: Option<f64>,
    #[arg(long, env = "GLIOMA_INPUT_SIZE")]
    pub input_size: Option<usize>,
    #[arg(long, env = "GLIOMA_NO_AUGMENT")]
    pub no_augment: bool,
    #[arg(long, env = "GLIOMA_OUT_DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, env = "GLIOMA_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "GLIOMA_MANIFEST")]
    pub manifest: PathBuf,
    /// Restrict a slice manifest to one modality.
    #[arg(long, env = "GLIOMA_MODALITY")]
    pub modality: Option<crate::class::Modality>,
    #[arg(long, env = "GLIOMA_OUT_DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Per-case prediction JSON files, or directories holding them.
    #[arg(long, num_args = 1.., required = true, value_delimiter = ',', env = "GLIOMA_CASE_PREDS")]
    pub case_preds: Vec<PathBuf>,
    /// Comma-separated subset, e.g. hist,T2w,GdT1w [default: all present].
    #[arg(long, value_delimiter = ',', env = "GLIOMA_MODALITIES")]
    pub modalities: Option<Vec<crate::class::Modality>>,
    /// Comma-separated modality=weight pairs; unlisted modalities weigh 1.
    #[arg(long, env = "GLIOMA_WEIGHTS")]
    pub weights: Option<String>,
    #[arg(long, env = "GLIOMA_OUT_DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// `name=path` or `path` (named by file stem); repeatable. The first
    /// entry supplies the top-level report fields.
    #[arg(long, required = true, env = "GLIOMA_PRED_CSV", value_delimiter = ';')]
    pub pred_csv: Vec<String>,
    #[arg(long, env = "GLIOMA_TRUTH_CSV")]
    pub truth_csv: Option<PathBuf>,
    /// report.json path; a Markdown table is written beside it.
    #[arg(long, env = "GLIOMA_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotCurvesArgs {
    pub curves: PathBuf,
    /// [default: the CSV path with an .svg extension]
    #[arg(long, env = "GLIOMA_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100, env = "GLIOMA_CASES")]
    pub cases: usize,
    /// Also write every case result as JSON.
    #[arg(long, env = "GLIOMA_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, env = "GLIOMA_OUT_DIR")]
    pub out_dir: PathBuf,
    #[arg(long, env = "GLIOMA_CASES_PER_CLASS")]
    pub cases_per_class: Option<usize>,
    #[arg(long, env = "GLIOMA_HELD_OUT_PER_CLASS")]
    pub held_out_per_class: Option<usize>,
    #[arg(long, env = "GLIOMA_TILE_SIZE")]
    pub tile_size: Option<u32>,
    #[arg(long, value_delimiter = ',', env = "GLIOMA_MODALITIES")]
    pub modalities: Option<Vec<crate::class::Modality>>,
}

/// Settings shared by every subcommand after merging config and flags.
#[derive(Clone, Debug)]
pub struct Context {
    pub seed: u64,
    pub config: PipelineConfig,
}

fn init_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs a parsed command line.
pub fn execute(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(n) = cli.threads.or(config.threads) {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        init_threads(n)?;
    }
    let ctx = Context {
        seed: cli.seed.or(config.seed).unwrap_or(0),
        config,
    };
    log::debug!("seed {}", ctx.seed);
    commands::dispatch(cli.command, &ctx)
}

/// Parses `argv`, runs it, and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            1
        }
    }
}
