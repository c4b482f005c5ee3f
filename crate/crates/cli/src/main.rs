//! `mvfn`: prepare data, build graphs, train, evaluate and benchmark.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime error. Failures print one
//! line to stderr starting with `error[validation]:` or `error[runtime]:`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvfn_core::model::AblationFlags;

use crate::config::FileConfig;

#[derive(Debug)]
pub enum FailureKind {
    Validation,
    Runtime,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: FailureKind,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: FailureKind::Validation,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            kind: FailureKind::Runtime,
            message: message.into(),
        }
    }
}

impl From<mvfn_core::Error> for Failure {
    fn from(e: mvfn_core::Error) -> Self {
        if e.is_validation() {
            Self::validation(e.to_string())
        } else {
            Self::runtime(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(name = "mvfn", version, about = "Multi-view fusion network demand forecasting")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed. Falls back to the config file, then MVFN_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bin trips (or generate synthetic demand) and write a chronological split.
    Prepare(PrepareArgs),
    /// Build a correlation-kNN adjacency from the training split.
    Graph(GraphArgs),
    /// Train a model and write a checkpoint plus an epoch log.
    Train(TrainArgs),
    /// Report RMSE/MAE/PCC for a checkpoint and the historical average.
    Eval(EvalArgs),
    /// Write per-window predictions as CSV.
    Predict(PredictArgs),
    /// Compare analytic and finite-difference gradients on a tiny random model.
    Gradcheck(GradcheckArgs),
    /// Time quadratic vs. linear attention over increasing token counts.
    BenchAttn(BenchArgs),
}

#[derive(Args, Default, Clone)]
pub struct ModelFlags {
    /// Number of ST-Layers.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=5))]
    pub st_layers: Option<u64>,
    #[arg(long)]
    pub no_gcn: bool,
    #[arg(long)]
    pub no_cla: bool,
    /// Disable both spatial branches.
    #[arg(long)]
    pub no_gcm: bool,
    #[arg(long)]
    pub no_mtcn: bool,
    #[arg(long)]
    pub no_stcn: bool,
    /// Disable both temporal branches.
    #[arg(long)]
    pub no_mstcn: bool,
}

impl ModelFlags {
    pub fn any(&self) -> bool {
        self.st_layers.is_some()
            || self.no_gcn
            || self.no_cla
            || self.no_gcm
            || self.no_mtcn
            || self.no_stcn
            || self.no_mstcn
    }

    /// Flags from the file, with command-line switches applied on top.
    pub fn resolve(&self, file: &config::ModelSection) -> AblationFlags {
        let d = AblationFlags::default();
        AblationFlags {
            use_gcn: file.gcn.unwrap_or(d.use_gcn) && !self.no_gcn && !self.no_gcm,
            use_cla: file.cla.unwrap_or(d.use_cla) && !self.no_cla && !self.no_gcm,
            use_mtcn: file.mtcn.unwrap_or(d.use_mtcn) && !self.no_mtcn && !self.no_mstcn,
            use_stcn: file.stcn.unwrap_or(d.use_stcn) && !self.no_stcn && !self.no_mstcn,
        }
    }
}

#[derive(Args)]
pub struct PrepareArgs {
    /// Generate the built-in synthetic dataset instead of reading trips.
    #[arg(long)]
    pub synthetic: bool,
    /// Days of synthetic data.
    #[arg(long, default_value_t = 30)]
    pub days: usize,
    /// Synthetic node count.
    #[arg(long, default_value_t = 8)]
    pub nodes: usize,
    /// Trip CSV.
    #[arg(long)]
    pub trips: Option<PathBuf>,
    /// Node assignment CSV.
    #[arg(long)]
    pub node_map: Option<PathBuf>,
    #[arg(long)]
    pub interval_secs: Option<i64>,
    #[arg(long)]
    pub val_weeks: Option<usize>,
    #[arg(long)]
    pub test_weeks: Option<usize>,
    /// Output directory for the prepared tensors.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GraphArgs {
    /// Prepared data directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Neighbours per node.
    #[arg(long)]
    pub k: Option<usize>,
    /// Edge-list output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Adjacency file; defaults to the data directory's adjacency, then correlation kNN.
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Window stride in bins.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Validation,
    Test,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Json,
    Table,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Trained checkpoint; without it only HA is reported.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    #[arg(long, value_enum, default_value = "json")]
    pub format: ReportFormat,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    #[arg(long)]
    pub stride: Option<usize>,
    /// CSV output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    pub nodes: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Failing coordinates to list.
    #[arg(long, default_value_t = 10)]
    pub worst: usize,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = mvfn_core::bench::DEFAULT_LENGTHS)]
    pub lengths: Vec<usize>,
    /// Token width P.
    #[arg(long, default_value_t = 12)]
    pub width: usize,
    #[arg(long, default_value_t = 3)]
    pub rounds: usize,
    /// CSV output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub struct Context {
    pub file: FileConfig,
    pub seed: u64,
}

fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64, Failure> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var("MVFN_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::validation(format!("MVFN_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::validation("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::runtime(format!("thread pool: {e}")))?;
    }
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let seed = resolve_seed(cli.seed, file.seed)?;
    let ctx = Context { file, seed };
    match cli.command {
        Command::Prepare(a) => commands::prepare(&ctx, a),
        Command::Graph(a) => commands::graph(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Predict(a) => commands::predict(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::BenchAttn(a) => commands::bench_attn(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[validation]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (tag, code) = match f.kind {
                FailureKind::Validation => ("validation", 1),
                FailureKind::Runtime => ("runtime", 2),
            };
            eprintln!("error[{tag}]: {}", f.message);
            ExitCode::from(code)
        }
    }
}
