//! `ssdl`: structured sparse coding and dictionary learning from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit statuses.
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_SOFT: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "ssdl", version, about = "Structured sparse coding and dictionary learning")]
#[command(args_override_self = true)]
pub struct Cli {
    /// JSON file whose keys are used as flags of the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Parallel workers for batch sparse coding (results do not depend on it).
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a group structure and write it as JSON.
    Groups(GroupsArgs),
    /// Apply the proximal operator of a group penalty to each column of a matrix.
    Prox(ProxArgs),
    /// Solve the penalized decomposition problem for signals in a matrix file.
    Solve(SolveArgs),
    /// Learn a dictionary.
    Train(TrainArgs),
    /// Render dictionary atoms as a PGM mosaic.
    Render(RenderArgs),
    /// Find the lambda giving a target mean residual ratio.
    Calibrate(CalibrateArgs),
    /// Sample and preprocess image patches.
    Patches(PatchesArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Sequence,
    Tree,
    Grid,
    Singletons,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Q {
    L2,
    Linf,
}

#[derive(Args, Debug)]
pub struct GroupsArgs {
    #[arg(long, value_enum)]
    pub kind: Kind,
    /// Number of variables (sequence, singletons).
    #[arg(long)]
    pub p: Option<usize>,
    /// Branching factor per depth for a complete tree, e.g. 10,2,2.
    #[arg(long, value_delimiter = ',')]
    pub branching: Vec<usize>,
    #[arg(long)]
    pub h: Option<usize>,
    #[arg(long)]
    pub w: Option<usize>,
    /// Neighborhood side length.
    #[arg(long)]
    pub e: Option<usize>,
    #[arg(long)]
    pub cyclic: bool,
    #[arg(long, value_enum, default_value = "l2")]
    pub q: Q,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProxArgs {
    /// Matrix file; each column is one input vector.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub groups: PathBuf,
    #[arg(long)]
    pub t: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodArg {
    Auto,
    Fista,
    Ista,
    Admm,
}

#[derive(Args, Debug, Clone)]
pub struct SolverArgs {
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long, value_enum, default_value = "auto")]
    pub method: MethodArg,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[arg(long)]
    pub dict: PathBuf,
    /// Matrix file of signals (one per column).
    #[arg(long)]
    pub signal: PathBuf,
    /// Solve only this column (1-based); default all.
    #[arg(long)]
    pub column: Option<usize>,
    /// Group structure JSON; defaults to the plain l1 penalty.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    #[arg(long)]
    pub lambda: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Coefficients, one column per solved signal.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON report; defaults to `<out>.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Print `iter=<k> obj=<v> r_primal=<v> r_dual=<v>` lines to standard error.
    #[arg(long)]
    pub trace: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Tree groups, l-infinity norms, alternating minimization.
    Hierarchical,
    /// Cyclic 3x3 grid groups, l2 norms, online mini-batch learning.
    Topographic,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Alternating,
    Online,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub preset: Preset,
    /// Training signals, one per column.
    #[arg(long)]
    pub data: PathBuf,
    /// Group structure JSON; defaults to the preset's structure.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Hierarchical preset: tree branching factors (default 10,2,2).
    #[arg(long, value_delimiter = ',')]
    pub branching: Vec<usize>,
    /// Topographic preset: number of atoms, a perfect square (default 400).
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Calibrate lambda so the mean residual ratio matches this value. The
    /// topographic preset calibrates to 0.4 unless --lambda is given.
    #[arg(long)]
    pub target_ratio: Option<f64>,
    #[arg(long)]
    pub calibration_sample: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub lr_t0: Option<f64>,
    /// Online mode: rewrite the checkpoint every this many steps.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Dictionary matrix; `<out>.json` holds the checkpoint metadata and
    /// `<out>.report.json` the training report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub dict: PathBuf,
    /// Atom height in pixels (default: square atoms).
    #[arg(long)]
    pub atom_h: Option<usize>,
    #[arg(long)]
    pub atom_w: Option<usize>,
    /// Grid rows (default: sqrt(p) for square p).
    #[arg(long)]
    pub grid_rows: Option<usize>,
    #[arg(long)]
    pub grid_cols: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub pad: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub sample: PathBuf,
    #[arg(long)]
    pub groups: Option<PathBuf>,
    #[arg(long, default_value_t = 0.4)]
    pub target: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// JSON file receiving the calibration trace.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preprocess {
    None,
    /// Remove each patch's mean and scale it to unit norm.
    Normalize,
    /// Remove each patch's mean, then PCA-whiten the set.
    Whiten,
}

#[derive(Args, Debug)]
pub struct PatchesArgs {
    /// Binary PGM source image.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub image: Option<PathBuf>,
    /// Use a synthetic dead-leaves image of this side length instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long)]
    pub count: usize,
    #[arg(long, value_enum, default_value = "none")]
    pub preprocess: Preprocess,
    #[arg(long, default_value_t = ssdl_core::data::DEFAULT_WHITENING_EPS)]
    pub whitening_eps: f64,
    /// Where to store the whitening transform (matrix plus `.json` sidecar).
    #[arg(long)]
    pub whitening_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.label(), e.message);
            ExitCode::from(e.code)
        }
    }
}
