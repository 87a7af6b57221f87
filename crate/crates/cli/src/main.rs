//! `higine`: build cell graphs, train the hierarchical model, run
//! cross-validation and baselines, and emit survival reports.

mod commands;
mod error;
mod inputs;
mod km;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "higine", version, about = "Hierarchical cell-graph survival prediction")]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

/// Run configuration shared by the data-bearing commands. Flags override
/// the file, which overrides built-in defaults.
#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cohort configuration (TOML); overrides the one named in --config.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Number of cross-validation folds.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum training epochs for every model.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Worker threads for folds.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

/// Ablation switches.
#[derive(Debug, Args, Clone, Copy)]
pub struct ArmArgs {
    /// Plain GIN convolutions without edge weights.
    #[arg(long)]
    pub no_edges: bool,
    /// Score subsample graphs directly, without the core-level model.
    #[arg(long)]
    pub no_hierarchy: bool,
    /// Append the binary stage to every core-graph node.
    #[arg(long)]
    pub fuse_stage: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a cohort and print a summary.
    Ingest {
        #[arg(long)]
        cohort: PathBuf,
        /// Also write the summary as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build subsample and core graphs and write them to a graph dump.
    BuildGraphs {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both levels on one fold of the cross-validation split.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        arm: ArmArgs,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score patients with the checkpoints of a fold directory.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        /// A `fold_<i>` directory written by train or cv.
        #[arg(long)]
        fold_dir: PathBuf,
        /// Score only the fold's held-out patients.
        #[arg(long)]
        test_only: bool,
        /// Output predictions CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified k-fold cross-validation.
    Cv {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        arm: ArmArgs,
        /// Run every ablation arm on the same folds (ignores the arm flags).
        #[arg(long)]
        ablation: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate a baseline method.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        /// One of label, stage, logreg, svc, flatgin.
        #[arg(long)]
        method: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Kaplan-Meier curves, log-rank test and hazard ratio for predicted groups.
    Km {
        #[arg(long)]
        predictions: PathBuf,
        /// Patients with prob_short at or above this form the short group.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also draw the curves as SVG.
        #[arg(long)]
        svg: bool,
    },
    /// Generate a synthetic cohort with planted spatial signal.
    Synth(commands::SynthArgs),
    /// Finite-difference check of the full model's gradients.
    GradCheck(commands::GradCheckArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest { cohort, out } => commands::ingest(&cohort, out.as_deref()),
        Command::BuildGraphs { run, out } => commands::build_graphs(&run, &out),
        Command::Train { run, arm, fold, out } => commands::train(&run, arm, fold, &out),
        Command::Predict { run, fold_dir, test_only, out } => commands::predict(&run, &fold_dir, test_only, &out),
        Command::Cv { run, arm, ablation, out } => commands::cv(&run, arm, ablation, &out),
        Command::Baseline { run, method, out } => commands::baseline(&run, &method, &out),
        Command::Km { predictions, threshold, out, svg } => km::run(&predictions, threshold, &out, svg),
        Command::Synth(args) => commands::synth(&args),
        Command::GradCheck(args) => commands::grad_check(&args),
    }
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
