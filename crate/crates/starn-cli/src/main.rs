//! `starn`: build synthetic accident data, assemble the road-segment
//! graph, train and evaluate the severity model, and verify its gradients.
//!
//! Every command reads one JSON config (see `--config`), applies flag
//! overrides on top, and derives all stage seeds from the single root
//! seed, so a config plus seed pins every numeric artifact byte for byte.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use starn::StarnError;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "starn", version, about = "Road-accident severity modeling pipeline")]
struct Cli {
    /// JSON run configuration; command-line flags override file values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Root seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory receiving artifacts (created if missing). [default: artifacts]
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Print the fully resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    emit_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic accident dataset: records CSV plus a
    /// ground-truth JSON describing the generating process.
    Synth {
        /// Output CSV path. [default: <out-dir>/records.csv]
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
        /// Grid rows for the synthetic road network.
        #[arg(long)]
        grid_rows: Option<usize>,
        /// Grid columns for the synthetic road network.
        #[arg(long)]
        grid_cols: Option<usize>,
    },
    /// Cluster records into road-segment nodes and assemble the weighted
    /// graph, enforcing spectral connectivity.
    BuildGraph {
        /// Input records CSV. [default: <out-dir>/records.csv]
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
        /// Output graph JSON. [default: <out-dir>/graph.json]
        #[arg(long, value_name = "FILE")]
        graph: Option<PathBuf>,
    },
    /// Train the severity model; writes checkpoint, history CSV, and
    /// validation metrics JSON.
    Train {
        /// Input records CSV. [default: <out-dir>/records.csv]
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
        /// Input graph JSON. [default: <out-dir>/graph.json]
        #[arg(long, value_name = "FILE")]
        graph: Option<PathBuf>,
        /// Architecture variant: full, no_gat, no_temporal, no_external,
        /// concat_fusion, or single_head.
        #[arg(long, value_name = "NAME")]
        ablation: Option<String>,
        /// Output checkpoint path. [default: <out-dir>/model.ckpt]
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Output per-epoch history CSV. [default: <out-dir>/history.csv]
        #[arg(long, value_name = "FILE")]
        history: Option<PathBuf>,
        /// Output validation metrics JSON. [default: <out-dir>/val_metrics.json]
        #[arg(long, value_name = "FILE")]
        metrics: Option<PathBuf>,
        /// Override the training epoch cap.
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Override the minibatch size.
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Score the held-out test split with a trained checkpoint; writes
    /// metrics JSON and a confusion-matrix CSV.
    Evaluate {
        /// Input records CSV. [default: <out-dir>/records.csv]
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
        /// Input graph JSON. [default: <out-dir>/graph.json]
        #[arg(long, value_name = "FILE")]
        graph: Option<PathBuf>,
        /// Input checkpoint. [default: <out-dir>/model.ckpt]
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Output metrics JSON. [default: <out-dir>/test_metrics.json]
        #[arg(long, value_name = "FILE")]
        metrics: Option<PathBuf>,
        /// Output confusion CSV. [default: <out-dir>/confusion.csv]
        #[arg(long, value_name = "FILE")]
        confusion: Option<PathBuf>,
    },
    /// Classify records with a trained checkpoint; each output row carries
    /// the predicted class and four confidence scores summing to one.
    Predict {
        /// Records CSV to score. [default: <out-dir>/records.csv]
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
        /// Input graph JSON. [default: <out-dir>/graph.json]
        #[arg(long, value_name = "FILE")]
        graph: Option<PathBuf>,
        /// Input checkpoint. [default: <out-dir>/model.ckpt]
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Output predictions CSV. [default: <out-dir>/predictions.csv]
        #[arg(long, value_name = "FILE")]
        predictions: Option<PathBuf>,
    },
    /// Check analytic gradients of every tape operation and the full model
    /// against central differences; exits nonzero on any failure.
    Gradcheck {
        /// Parameter coordinates sampled for the full-model check
        /// (0 = all). [default: 300]
        #[arg(long)]
        max_coords: Option<usize>,
        /// Deliberately corrupt the analytic gradients to prove the
        /// harness detects faults.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Time full-graph inference across synthetic network sizes and fit a
    /// linear scaling model.
    Bench {
        /// Comma-separated target node counts. [default: 100,200,400,800]
        #[arg(long, value_delimiter = ',', value_name = "N,N,...")]
        sizes: Option<Vec<usize>>,
        /// Timed repetitions per size. [default: 3]
        #[arg(long)]
        reps: Option<usize>,
        /// Output timing CSV. [default: <out-dir>/bench.csv]
        #[arg(long, value_name = "FILE")]
        bench_csv: Option<PathBuf>,
    },
}

fn resolved_config(cli: &Cli) -> starn::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    match &cli.command {
        Command::Synth {
            grid_rows,
            grid_cols,
            ..
        } => {
            if let Some(r) = grid_rows {
                cfg.synth.grid_rows = *r;
            }
            if let Some(c) = grid_cols {
                cfg.synth.grid_cols = *c;
            }
        }
        Command::Train {
            max_epochs,
            batch_size,
            ..
        } => {
            if let Some(e) = max_epochs {
                cfg.train.max_epochs = *e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = *b;
            }
        }
        _ => {}
    }
    cfg.resolve()
}

fn run(cli: &Cli) -> starn::Result<()> {
    let cfg = resolved_config(cli)?;
    if cli.emit_config {
        println!("{}", cfg.to_pretty_json()?);
        return Ok(());
    }
    match &cli.command {
        Command::Synth { csv, .. } => commands::synth(&cfg, csv),
        Command::BuildGraph { csv, graph } => commands::build_graph_cmd(&cfg, csv, graph),
        Command::Train {
            csv,
            graph,
            ablation,
            checkpoint,
            history,
            metrics,
            ..
        } => commands::train(&cfg, csv, graph, ablation, checkpoint, history, metrics),
        Command::Evaluate {
            csv,
            graph,
            checkpoint,
            metrics,
            confusion,
        } => commands::evaluate(&cfg, csv, graph, checkpoint, metrics, confusion),
        Command::Predict {
            csv,
            graph,
            checkpoint,
            predictions,
        } => commands::predict(&cfg, csv, graph, checkpoint, predictions),
        Command::Gradcheck {
            max_coords,
            corrupt_gradient,
        } => commands::gradcheck(&cfg, max_coords, *corrupt_gradient),
        Command::Bench {
            sizes,
            reps,
            bench_csv,
        } => commands::bench(&cfg, sizes, reps, bench_csv),
    }
}

/// Process exit codes: 0 success, 2 configuration, 3 data/input,
/// 4 numeric failure.
fn exit_code(e: &StarnError) -> u8 {
    match e {
        StarnError::Config(_) => 2,
        StarnError::Schema(_)
        | StarnError::Row { .. }
        | StarnError::EmptyDataset(_)
        | StarnError::Io(_)
        | StarnError::Csv(_)
        | StarnError::Json(_) => 3,
        StarnError::Numeric(_)
        | StarnError::Connectivity { .. }
        | StarnError::Graph(_)
        | StarnError::Shape { .. } => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
