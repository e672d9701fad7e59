mod commands;
mod config;
mod workdir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Overrides;

/// Similar-example prompting for auxiliary knowledge, and a CRF tagger
/// trained on text plus that knowledge.
#[derive(Parser, Debug)]
#[command(name = "pgim", version)]
struct Cli {
    /// Directory holding every artifact of a run.
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    /// Flat TOML config file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a CoNLL file (plus optional caption sidecar) into a split.
    Ingest {
        #[arg(long)]
        conll: PathBuf,
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
        /// Id prefix; defaults to the split name.
        #[arg(long)]
        source: Option<String>,
        /// Repair BIO2 violations instead of rejecting them.
        #[arg(long)]
        repair: bool,
    },
    /// Precompute fusion vectors for a split.
    Embed {
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Show the exemplars selected for one sentence, or store all selections.
    Retrieve {
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        id: Option<String>,
        /// Print the assembled prompt instead of the selection.
        #[arg(long)]
        dry_run: bool,
    },
    /// Assemble prompts for a split, or print one with --dry-run.
    Promptgen {
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Query the LLM engine for every sentence of a split.
    Augment {
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train the CRF tagger.
    Train {
        #[arg(long, default_value = "train")]
        split: String,
        /// Development split used for model selection.
        #[arg(long)]
        dev: Option<String>,
    },
    /// Tag a split with a trained model.
    Predict {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score predictions against gold annotations.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: String,
        /// Score direct LLM answers from `augment --prompt-mode direct`.
        #[arg(long)]
        direct: bool,
    },
    /// Few-shot protocol: 3 subsamples × 3 seeds per size.
    Fewshot {
        #[arg(long, default_value = "train")]
        train: String,
        #[arg(long, default_value = "test")]
        test: String,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
    },
    /// Train on one split and evaluate on another.
    Crossdata {
        #[arg(long)]
        train: String,
        #[arg(long)]
        test: String,
    },
    /// Print the tables of stored run manifests.
    Report {
        /// Manifest files; defaults to every manifest in the work directory.
        manifests: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
