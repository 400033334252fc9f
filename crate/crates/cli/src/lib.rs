//! Command-line front end: argument parsing, output files and exit codes.

pub mod commands;
pub mod provenance;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use markertrack::motion::AnalysisParams;
use markertrack::tracker::BaselineParams;
use markertrack::volume::{self, VolumeParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_PIPELINE: i32 = 3;
pub const EXIT_ADAPTER: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "markertrack",
    version,
    about = "Fiducial marker localisation and residual-motion analysis on CBCT projections"
)]
pub struct Cli {
    /// More log output on stderr (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic phantom scan with ground truth.
    Simulate(SimulateArgs),
    /// Refine planned marker positions from the projections, per breath-hold.
    Refine(RefineArgs),
    /// Track refined markers through every frame.
    Track(TrackArgs),
    /// Screen detections and summarise residual motion.
    Analyze(AnalyzeArgs),
    /// Refine, track and analyse in one run.
    Pipeline(PipelineArgs),
    /// Serve the segmentation bridge protocol on stdin/stdout using the
    /// baseline segmenter.
    #[command(hide = true)]
    AdapterStub(BaselineArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Preset scene name.
    #[arg(long, conflicts_with = "scene_file", required_unless_present = "scene_file")]
    pub scene: Option<String>,
    /// Scene description in JSON.
    #[arg(long)]
    pub scene_file: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct VolumeArgs {
    /// Gradient suppression threshold, raw counts.
    #[arg(long, default_value_t = markertrack::gradient::DEFAULT_MU)]
    pub mu: f64,
    /// Volume threshold as a fraction of the maximum.
    #[arg(long = "lambda", default_value_t = volume::DEFAULT_LAMBDA)]
    pub lambda_frac: f64,
    /// Voxels per cube edge.
    #[arg(long = "voxels", default_value_t = volume::DEFAULT_VOXELS)]
    pub n_voxels: usize,
    /// Smallest cube edge, mm.
    #[arg(long, default_value_t = volume::DEFAULT_MIN_SIDE_MM)]
    pub min_side: f64,
    /// Padding added around the planned markers on each side, mm.
    #[arg(long, default_value_t = volume::DEFAULT_MARGIN_MM)]
    pub margin: f64,
}

impl VolumeArgs {
    pub fn params(&self) -> VolumeParams {
        VolumeParams {
            mu: self.mu,
            lambda_frac: self.lambda_frac,
            n_voxels: self.n_voxels,
            min_side_mm: self.min_side,
            margin_mm: self.margin,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BaselineArgs {
    /// Search window side, pixels.
    #[arg(long, default_value_t = 31)]
    pub window: usize,
    /// Region growth ratio relative to the seed.
    #[arg(long, default_value_t = 0.3)]
    pub growth: f64,
    /// Largest accepted mask, pixels.
    #[arg(long, default_value_t = 200)]
    pub max_area: usize,
}

impl BaselineArgs {
    pub fn params(&self) -> BaselineParams {
        BaselineParams {
            window: self.window,
            growth_ratio: self.growth,
            max_area: self.max_area,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SegmenterArgs {
    #[command(flatten)]
    pub baseline: BaselineArgs,
    /// External segmentation adapter command line, e.g. "python3 -m sam2_adapter".
    /// The baseline segmenter is used when absent.
    #[arg(long)]
    pub adapter: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalysisArgs {
    /// Lateral outlier tolerance at isocentre scale, mm.
    #[arg(long, default_value_t = markertrack::motion::DEFAULT_LATERAL_TOL_MM)]
    pub lateral_tol: f64,
    /// Tolerance around the cubic SI fit, mm.
    #[arg(long, default_value_t = markertrack::motion::DEFAULT_SI_TOL_MM)]
    pub si_tol: f64,
}

impl AnalysisArgs {
    pub fn params(&self) -> AnalysisParams {
        AnalysisParams {
            lateral_tol_mm: self.lateral_tol,
            si_tol_mm: self.si_tol,
        }
    }
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Scan manifest (JSON).
    #[arg(long)]
    pub scan: PathBuf,
    /// Marker plan (JSON).
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub volume: VolumeArgs,
    /// Also write each breath-hold's probability volume.
    #[arg(long)]
    pub dump_volume: bool,
    /// Write gradient and probability images of this frame as PGM; repeatable.
    #[arg(long = "dump-frame")]
    pub dump_frames: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub scan: PathBuf,
    /// Refined positions written by `refine`.
    #[arg(long)]
    pub refined: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub segmenter: SegmenterArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub scan: PathBuf,
    /// Detections CSV written by `track`.
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub scan: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub volume: VolumeArgs,
    #[command(flatten)]
    pub segmenter: SegmenterArgs,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    #[arg(long)]
    pub dump_volume: bool,
}

/// Effective configuration, hashed into every provenance block. Paths are
/// not part of it; inputs are identified by content digest.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub volume: Option<VolumeParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmenter: Option<SegmenterConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisParams>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterConfig {
    Baseline(BaselineParams),
    External { command: Vec<String> },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] markertrack::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use markertrack::Error as E;
        match self {
            CliError::Usage(_) => EXIT_INPUT,
            CliError::Core(e) => match e {
                E::Adapter { .. } => EXIT_ADAPTER,
                E::Io { .. }
                | E::Parse { .. }
                | E::InvalidGeometry(_)
                | E::DimensionMismatch(_)
                | E::InvalidScan(_)
                | E::InvalidPlan(_)
                | E::EmptyScan
                | E::UnknownScene(_)
                | E::InvalidParameter(_) => EXIT_INPUT,
                _ => EXIT_PIPELINE,
            },
        }
    }
}

fn init_logging(verbose: u8) {
    use tracing_subscriber::EnvFilter;
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .without_time()
        .try_init();
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    match commands::run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
