//! `steam-sentiment`: prepare review splits, train and evaluate the
//! attention classifier, predict, explain, and run the TF-IDF baseline.
//! Every command writes its outputs and a `manifest.json` into one run
//! directory.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sentiment_core::HeatmapFormat;

use config::{BaselineOpts, ModelOpts, PrepareOpts, TrainOpts};

#[derive(Debug, Parser)]
#[command(name = "steam-sentiment", version, about = "Sentiment classification of game reviews")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML file with settings; command-line flags take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Where outputs go. Defaults to a new directory under <DATA_DIR>/runs.
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Root for the default input file and run directories.
    #[arg(long, env = "STEAM_SENTIMENT_DATA_DIR", default_value = "data", value_name = "DIR")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load, sample, clean, deduplicate and split a raw review CSV.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Raw CSV. Defaults to <DATA_DIR>/reviews.csv.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        #[command(flatten)]
        opts: PrepareOpts,
    },
    /// Train the BiLSTM-attention model on prepared splits.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.csv and validation.csv.
        #[arg(long, value_name = "DIR")]
        splits: PathBuf,
        #[command(flatten)]
        model: ModelOpts,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Score a trained model on a split file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// A text,label split file such as test.csv.
        #[arg(long, value_name = "FILE")]
        split: PathBuf,
    },
    /// Classify raw review texts.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Review text; repeat for several.
        #[arg(long)]
        text: Vec<String>,
        /// File with one review per line.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
    },
    /// Render per-token attention for one review.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, conflicts_with = "input", required_unless_present = "input")]
        text: Option<String>,
        /// File whose whole content is the review.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// html or csv.
        #[arg(long, default_value = "html")]
        format: HeatmapFormat,
    },
    /// Stratified cross-validation of the TF-IDF logistic-regression baseline.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.csv, validation.csv and test.csv; all
        /// three are pooled.
        #[arg(long, value_name = "DIR")]
        splits: PathBuf,
        #[command(flatten)]
        opts: BaselineOpts,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare { common, input, opts } => commands::prepare(common, input, opts),
        Command::Train { common, splits, model, train } => commands::train(common, splits, model, train),
        Command::Evaluate { common, model, split } => commands::evaluate(common, model, split),
        Command::Predict { common, model, text, input } => commands::predict(common, model, text, input),
        Command::Explain { common, model, text, input, format } => commands::explain(common, model, text, input, format),
        Command::Baseline { common, splits, opts } => commands::baseline(common, splits, opts),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("steam-sentiment: {e}");
            e.exit_code()
        }
    }
}
