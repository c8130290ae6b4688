//! Command-line front end: preprocessing, training, evaluation, inference and
//! experiment plans.

pub mod config;
pub mod experiment;
pub mod preprocess;
pub mod runner;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use vulgnn::dataset::DEFAULT_SHARD_SIZE;
use vulgnn::features::{DEFAULT_EDGE_WINDOW, DEFAULT_NODE_WINDOW};

pub use config::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "vulgnn", version, about = "Graph neural network vulnerability detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize raw graph samples into shards.
    Preprocess {
        /// A .jsonl file, a .json file, or a directory of them.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, env = "VULGNN_VOCAB")]
        vocab: PathBuf,
        #[arg(long, env = "VULGNN_MERGES")]
        merges: PathBuf,
        /// Node kind / edge relation registry (defaults to the bundled one).
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Drop samples that fail to parse instead of aborting.
        #[arg(long)]
        skip_bad: bool,
        /// Accept vocabularies whose size differs from 49,152.
        #[arg(long)]
        any_vocab_size: bool,
        #[arg(long, default_value_t = DEFAULT_NODE_WINDOW)]
        node_window: usize,
        #[arg(long, default_value_t = DEFAULT_EDGE_WINDOW)]
        edge_window: usize,
        #[arg(long, default_value_t = DEFAULT_SHARD_SIZE)]
        shard_size: usize,
    },
    /// Train with best-validation-F1 checkpoint selection.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one partition of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, val, test, or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Split file (defaults to splits.json beside the checkpoint).
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Metrics file (defaults to eval-<split>.json beside the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify raw samples, one JSON line per sample.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long, env = "VULGNN_VOCAB")]
        vocab: PathBuf,
        #[arg(long, env = "VULGNN_MERGES")]
        merges: PathBuf,
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Run every experiment of a plan file and write results.csv / results.json.
    Experiment {
        #[arg(long)]
        plan: PathBuf,
        /// Output directory (defaults to <plan stem>-results beside the plan).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs one command, writing its normal output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn std::io::Write) -> Result<()> {
    let io = |e: std::io::Error| CliError::Data(format!("stdout: {e}"));
    match cli.command {
        Command::Preprocess {
            input,
            vocab,
            merges,
            registry,
            out,
            workers,
            skip_bad,
            any_vocab_size,
            node_window,
            edge_window,
            shard_size,
        } => {
            let s = preprocess::run(&preprocess::PreprocessArgs {
                input,
                vocab,
                merges,
                registry,
                out,
                workers,
                skip_bad,
                any_vocab_size,
                node_window,
                edge_window,
                shard_size,
            })?;
            if s.up_to_date {
                writeln!(stdout, "up to date: {} samples", s.written).map_err(io)?;
            } else {
                writeln!(stdout, "wrote {} samples, skipped {}", s.written, s.skipped).map_err(io)?;
            }
        }
        Command::Train { config, data, out } => {
            let r = runner::cmd_train(&config, &data, &out)?;
            let m = &r.mean_test;
            writeln!(
                stdout,
                "mean over {} runs: accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} fpr {:.4}",
                m.runs, m.accuracy, m.precision, m.recall, m.f1, m.fpr
            )
            .map_err(io)?;
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            splits,
            out,
        } => {
            let m = runner::cmd_eval(&checkpoint, &data, &split, splits.as_deref(), out.as_deref())?;
            writeln!(stdout, "{}", serde_json::to_string_pretty(&m).expect("serializable")).map_err(io)?;
        }
        Command::Predict {
            checkpoint,
            sample,
            vocab,
            merges,
            registry,
        } => {
            let lines = runner::cmd_predict(&checkpoint, &sample, &vocab, &merges, registry.as_deref())?;
            for l in lines {
                if let runner::PredictLine::Failed { sample, error } = &l {
                    eprintln!("bad sample {sample}: {error}");
                }
                writeln!(stdout, "{}", serde_json::to_string(&l).expect("serializable")).map_err(io)?;
            }
        }
        Command::Experiment { plan, out } => {
            let out = out.unwrap_or_else(|| {
                let stem = plan.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                config::relative_to(&plan, &PathBuf::from(format!("{stem}-results")))
            });
            let rows = experiment::run_plan(&plan, &out)?;
            write!(stdout, "{}", experiment::to_csv(&rows)).map_err(io)?;
        }
    }
    Ok(())
}
