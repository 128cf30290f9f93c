//! `cmcd`: build corpora, train the detector, evaluate it and inspect its
//! attention maps.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "cmcd",
    version,
    about = "Text-enrolled keyword detection with cross-modal attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Debug, Args)]
struct Common {
    /// JSON config file; unknown keys are rejected.
    #[arg(long, env = "CMCD_CONFIG")]
    config: Option<PathBuf>,
    /// Base seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; overrides the config (default 1).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cut phrases from word-aligned recordings and assemble train pairs and eval episodes.
    BuildCorpus {
        #[command(flatten)]
        common: Common,
        /// Output corpus directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic tone-language corpus.
    SynthCorpus {
        #[command(flatten)]
        common: Common,
        /// Output corpus directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a corpus directory; writes a checkpoint and a metrics CSV.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint path (default <out>/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score the eval episodes of a corpus; writes report.json and det.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Report directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score one recording against a keyword and export the affinity matrix.
    InspectAffinity {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// 16-bit PCM WAV file.
        #[arg(long)]
        audio: PathBuf,
        /// Keyword text.
        #[arg(long)]
        text: String,
        /// Pronunciation dictionary in CMUdict format.
        #[arg(long)]
        dictionary: Option<PathBuf>,
        /// Output stem; `.csv` and `.pgm` are appended.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
