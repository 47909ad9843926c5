//! `rlvr`: toy data generation, balanced sampling, SFT and GRPO training,
//! streaming reward scoring, evaluation and curve extraction.
//!
//! Exit codes: 0 success, 2 usage or infeasible request, 3 bad input data.

mod commands;
mod fail;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fail::Failure;

#[derive(Parser)]
#[command(name = "rlvr", version, about = "SFT then GRPO on a toy multilabel findings task")]
struct Cli {
    /// Run config (TOML). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Sft,
    Grpo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RewardArg {
    Hard,
    Nuanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LabelsArg {
    Full14,
    Nih9,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy pool as JSONL.
    Gen {
        /// Output path [default: io.pool]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pool size [default: task.n]
        #[arg(long)]
        n: Option<usize>,
        /// [default: task.seed]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw disjoint, coverage-balanced SFT and RL splits from a pool.
    Sample {
        /// [default: io.pool]
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Directory for sft.jsonl, rl.jsonl and coverage.json [default: io.data_dir]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one stage and write a checkpoint plus a metrics CSV.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        /// Training split (defaults to sft.jsonl or rl.jsonl in the data dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory for this stage.
        #[arg(long)]
        out: Option<PathBuf>,
        /// SFT checkpoint that initialises GRPO and serves as its reference.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue a GRPO run from its last periodic checkpoint.
        #[arg(long)]
        resume: bool,
        /// Exit once this many GRPO steps are done, leaving a resumable
        /// checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Sample one completion per item from a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL items carrying payload.features, as written by gen or sample
        #[arg(long)]
        input: PathBuf,
        /// Output JSONL of {id, text}; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
        /// Argmax decoding instead of the configured sampler.
        #[arg(long)]
        greedy: bool,
    },
    /// Score {id, text, gold} lines, one output line per input line.
    Score {
        /// Input JSONL; stdin when omitted or "-".
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output JSONL; stdout when omitted or "-".
        #[arg(long)]
        output: Option<PathBuf>,
        /// [default: grpo.reward]
        #[arg(long, value_enum)]
        reward: Option<RewardArg>,
        /// Pool whose label prevalences weight false positives.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Multilabel report of predictions against gold labels, aligned by id.
    Eval {
        /// JSONL of {id, text} or {id, predicted: [labels]}
        #[arg(long)]
        predictions: PathBuf,
        /// JSONL of {id, labels} (or gold)
        #[arg(long)]
        gold: PathBuf,
        /// [default: eval.labels]
        #[arg(long, value_enum)]
        labels: Option<LabelsArg>,
        /// Report directory [default: <io.run_dir>/eval]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Raw and EMA-smoothed columns from a metrics CSV.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// Columns to extract; all raw columns when omitted.
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
        /// Smoothing factor in (0, 1) [default: 0.95]
        #[arg(long)]
        alpha: Option<f64>,
        /// Output CSV; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = files::load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Gen { out, n, seed } => commands::gen(cfg, out, n, seed),
        Command::Sample { pool, out } => commands::sample(cfg, pool, out),
        Command::Train { stage: Stage::Sft, data, out, .. } => commands::train_sft(cfg, data, out),
        Command::Train { stage: Stage::Grpo, data, out, init, resume, stop_after } => {
            commands::train_grpo(cfg, data, out, init, resume, stop_after)
        }
        Command::Predict { checkpoint, input, out, greedy } => commands::predict(cfg, &checkpoint, &input, out, greedy),
        Command::Score { input, output, reward, stats } => commands::score(cfg, input, output, reward, stats),
        Command::Eval { predictions, gold, labels, out } => commands::eval(cfg, &predictions, &gold, labels, out),
        Command::Report { metrics, columns, alpha, out } => commands::report(&metrics, &columns, alpha, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
