//! Command-line front end over `qt-core`: dataset generation, training,
//! evaluation, ablation sweeps, and report assembly.
//!
//! Every run directory receives exactly one `manifest.txt` holding the fully
//! resolved configuration plus content hashes of the artifacts, and any
//! manifest can be fed back through `--config` to reproduce the run.
//!
//! Process exit codes: 0 on success, [`EXIT_CONFIG`] for configuration
//! errors, [`EXIT_DATA`] for data and file errors, [`EXIT_NUMERIC`] for
//! numeric failures.

pub mod commands;
pub mod manifest;
pub mod plot;
pub mod sweep;

use clap::{Args, Parser, Subcommand};
use qt_core::Error;
use std::path::PathBuf;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "qt",
    version,
    about = "Q-conditioned transformer policies for toy offline control tasks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an offline dataset and write it with a manifest.
    GenData(RunArgs),
    /// Train a policy and its critics on a freshly generated dataset.
    Train(RunArgs),
    /// Evaluate the checkpoint in an existing run directory.
    Eval(RunArgs),
    /// Sweep the component variants (cloning, critics, context, targets).
    AblateComponents(RunArgs),
    /// Sequence-only training versus Q-guided training on stitched data.
    AblateStitch(RunArgs),
    /// Dense versus delayed rewards, with a critic-greedy baseline.
    AblateSparse(RunArgs),
    /// Sweep the Q-regularization weight across reward modes.
    AblateEta(RunArgs),
    /// Sweep the context window length.
    AblateContext(RunArgs),
    /// Merge run directories into one CSV plus a chart.
    Report(ReportArgs),
}

/// Flags shared by every run-producing command. Precedence: CLI flag, then
/// config file, then built-in default.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// Config file of `key=value` lines (a manifest.txt also works).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Training seed. Dataset generation has its own `data_seed` key.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,

    /// Environment id: open | umaze | medium | large | chain-N.
    #[arg(long, value_name = "ID")]
    pub env: Option<String>,

    /// Q-regularization weight.
    #[arg(long, value_name = "F")]
    pub eta: Option<f64>,

    /// Context window length K.
    #[arg(long, value_name = "N")]
    pub context_k: Option<usize>,

    /// Total training steps.
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,

    /// Artifact directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,

    /// Split goal-reaching trajectories so no single one solves the task.
    #[arg(long)]
    pub stitch_split: bool,

    /// Reward mode: sparse | dense | delayed.
    #[arg(long, value_name = "MODE")]
    pub reward_mode: Option<String>,

    /// Drop the Q term from the policy loss (critics still train).
    #[arg(long)]
    pub no_train_q: bool,

    /// Ignore critics at inference; condition on the best return only.
    #[arg(long)]
    pub no_infer_q: bool,

    /// One-step TD critic targets instead of n-step returns.
    #[arg(long)]
    pub one_step: bool,
}

#[derive(Args, Clone, Debug)]
pub struct ReportArgs {
    /// Run directories to merge; each must hold a metrics.csv.
    #[arg(value_name = "DIR", required = true)]
    pub dirs: Vec<PathBuf>,

    /// Output directory for the merged CSV and chart.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> qt_core::Result<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train_cmd(&a),
        Command::Eval(a) => commands::eval_cmd(&a),
        Command::AblateComponents(a) => commands::ablate_components(&a),
        Command::AblateStitch(a) => commands::ablate_stitch(&a),
        Command::AblateSparse(a) => commands::ablate_sparse(&a),
        Command::AblateEta(a) => commands::ablate_eta(&a),
        Command::AblateContext(a) => commands::ablate_context(&a),
        Command::Report(a) => commands::report(&a),
    }
}

/// Maps each error family onto the documented exit code. Exhaustive on
/// purpose: a new error variant must pick its exit code here.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::UnknownEnv(_) | Error::BadLayout(_) => EXIT_CONFIG,

        Error::EmptyDataset
        | Error::NoGoalTrajectories
        | Error::BadMagic { .. }
        | Error::BadVersion { .. }
        | Error::Truncated { .. }
        | Error::ChecksumMismatch { .. }
        | Error::Corrupt(_)
        | Error::Io(_)
        | Error::File { .. } => EXIT_DATA,

        Error::Shape { .. }
        | Error::NonFinite { .. }
        | Error::NonScalarLoss { .. }
        | Error::EpisodeFinished
        | Error::TimestepOutOfRange { .. }
        | Error::AllPositionsMasked
        | Error::NonFiniteLoss { .. }
        | Error::GridTooCoarse(_)
        | Error::DegenerateAnchors { .. } => EXIT_NUMERIC,
    }
}
