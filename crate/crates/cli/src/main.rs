//! `eigenmine` command-line tool.
//!
//! Exit codes: 0 on success, 1 for bad input (unreadable or malformed files,
//! invalid flags), 2 when an internal invariant is violated.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{GridArgs, MiningArgs, SyntheticArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "eigenmine", version, about = "Viewpoint-aware class mining and recall evaluation for place recognition")]
struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, env = "EIGENMINE_THREADS", default_value_t = 0, global = true)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Assign images to grid cells and report per-cell and per-group counts.
    Partition(PartitionArgs),
    /// Mine lateral and frontal classes from an image manifest.
    Mine(MineArgs),
    /// Train the linear toy encoder on a synthetic city and export descriptors.
    TrainToy(TrainToyArgs),
    /// Recall@N of query descriptors against a database.
    Eval(EvalArgs),
    /// Cosine similarity matrix of one cell's class members, as CSV.
    SimMatrix(SimMatrixArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Flat JSON config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PartitionArgs {
    /// Image manifest (JSON lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Output JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args, Debug)]
pub struct MineArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Class manifest to write (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Mining report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    mining: MiningArgs,
}

#[derive(Args, Debug)]
pub struct TrainToyArgs {
    /// Directory for descriptors, manifests and the loss history.
    #[arg(long)]
    out_dir: PathBuf,
    /// Database images rendered per street for evaluation.
    #[arg(long, default_value_t = 10)]
    db_per_street: usize,
    /// Queries rendered per street for each query split.
    #[arg(long, default_value_t = 10)]
    queries_per_street: usize,
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    mining: MiningArgs,
    #[command(flatten)]
    synthetic: SyntheticArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    /// Positive when within `--radius` meters (needs image manifests).
    Distance,
    /// Positive when within `--max-frames` frames (needs frame files).
    Frames,
    /// Positive only for the listed database image (needs a pair file).
    Pairs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    database: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Distance)]
    mode: ModeArg,
    /// Image manifest with query positions.
    #[arg(long)]
    query_manifest: Option<PathBuf>,
    /// Image manifest with database positions.
    #[arg(long)]
    db_manifest: Option<PathBuf>,
    /// JSON lines `{"id": .., "frame": ..}` for queries.
    #[arg(long)]
    query_frames: Option<PathBuf>,
    /// JSON lines `{"id": .., "frame": ..}` for the database.
    #[arg(long)]
    db_frames: Option<PathBuf>,
    /// JSON lines `{"query": .., "db": ..}`.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    max_frames: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    recall_at: Vec<usize>,
    /// Include per-query rankings in the report.
    #[arg(long)]
    predictions: bool,
    /// Output JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
pub struct SimMatrixArgs {
    /// Class manifest produced by `mine`.
    #[arg(long)]
    classes: PathBuf,
    #[arg(long)]
    descriptors: PathBuf,
    /// Image manifest with the positions of the class members.
    #[arg(long)]
    manifest: PathBuf,
    /// Cell as `col,row`.
    #[arg(long, value_parser = parse_cell, allow_hyphen_values = true)]
    cell: eigenmine::CellIndex,
    /// Restrict to one class role; both roles when omitted.
    #[arg(long)]
    role: Option<eigenmine::Role>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    grid: GridArgs,
}

fn parse_cell(s: &str) -> Result<eigenmine::CellIndex, String> {
    let (col, row) = s.split_once(',').ok_or_else(|| format!("expected `col,row`, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<i64>().map_err(|e| format!("`{v}`: {e}"));
    Ok(eigenmine::CellIndex::new(parse(col)?, parse(row)?))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let internal = err
        .chain()
        .filter_map(|e| e.downcast_ref::<eigenmine::Error>())
        .any(|e| !e.is_input_error());
    if internal {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        log::warn!("thread pool already initialized: {e}");
    }
    let result = match cli.command {
        Command::Partition(a) => commands::partition(&a),
        Command::Mine(a) => commands::mine(&a),
        Command::TrainToy(a) => commands::train_toy(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::SimMatrix(a) => commands::sim_matrix(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
