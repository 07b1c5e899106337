//! `csvit` command-line pipeline: mesh → atlas → partition → tokenize →
//! train, plus validation, gradient checks and reports.
//!
//! Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.
//! Logs go to stderr as `key=value` lines; results go to files.

mod commands;
mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Failure of a subcommand, mapped onto the exit-code contract.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

impl From<csvit_core::Error> for CliError {
    fn from(e: csvit_core::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

impl From<csvit_nn::NnError> for CliError {
    fn from(e: csvit_nn::NnError) -> Self {
        CliError::Failure(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "csvit",
    version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CARGO_PKG_NAME"), ")"),
    about = "ROI-preserving supervertex partitioning and a toy mask-aware transformer"
)]
struct Cli {
    /// Cap the number of worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print the effective configuration (defaults merged with --config) and exit.
    #[arg(long)]
    print_config: bool,

    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Icosphere meshes.
    #[command(subcommand)]
    Mesh(MeshCmd),
    /// Atlas labelings.
    #[command(subcommand)]
    Atlas(AtlasCmd),
    /// Plan per-ROI supervertex counts.
    Plan(PlanArgs),
    /// Partition one hemisphere into supervertices.
    Partition(PartitionArgs),
    /// Check a partition against every invariant.
    Validate(ValidateArgs),
    /// Build the index table (and optionally a padded batch) for two hemispheres.
    Tokenize(TokenizeArgs),
    /// Write a synthetic planted-signal dataset.
    SynthData(SynthDataArgs),
    /// Cross-validated training.
    Train(TrainArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print a saved training report.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
enum MeshCmd {
    Build {
        #[arg(long)]
        level: u32,
        /// Output path; `.json` selects the text format.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum AtlasCmd {
    Synth {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        rois: usize,
        #[arg(long, default_value_t = 0.1)]
        wall_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relabel small disconnected ROI fragments.
    Clean {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        atlas: PathBuf,
        /// Fraction of the ROI size below which a fragment moves (default from config).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long)]
    atlas: PathBuf,
    #[arg(long)]
    k_total: usize,
    /// Use the mesh to make ranges respect ROI connected components.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Print the plan as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct PartitionArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    atlas: PathBuf,
    #[arg(long)]
    k_total: usize,
    /// Recorded only; the partition is fully determined by its inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Refine FPS seeds with a balanced growth before the main pass.
    #[arg(long)]
    refine: bool,
    /// Also derive the face-based ablation and log its duplication count.
    #[arg(long)]
    face_based: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    csvmap: PathBuf,
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    atlas: PathBuf,
    /// Validate the face-based derivation instead; reports duplication, never fails.
    #[arg(long)]
    face_based: bool,
    /// Write the full report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TokenizeArgs {
    #[arg(long)]
    csvmap_left: PathBuf,
    #[arg(long)]
    csvmap_right: PathBuf,
    /// Index table output.
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory to gather into a padded batch.
    #[arg(long, requires = "batch_out")]
    features: Option<PathBuf>,
    #[arg(long, requires = "features")]
    batch_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthDataArgs {
    #[arg(long)]
    index: PathBuf,
    /// Hemisphere mesh; subjects carry features for both hemispheres.
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    signal_csvs: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    effect: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Permute labels after generation (a no-signal control).
    #[arg(long)]
    shuffle_labels: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    report: PathBuf,
    /// Directory for one checkpoint per completed fold.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long)]
    step: Option<f64>,
    /// Exit 1 when the max relative error reaches this value.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Write the result as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
}

fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(buf, "level={} target={} {}", record.level(), record.target(), record.args())
        })
        .try_init();
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    init_logging();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            log::error!("error={:?}", e.to_string());
            eprintln!("csvit: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<i32> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // Fails only if the pool already exists (repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(EXIT_OK);
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("no subcommand given (see --help)".into()));
    };
    commands::execute(command, &cfg, cli.config.is_some())
}
