mod commands;
mod config;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polylm::corpus::CorpusError;
use polylm::metrics::MetricError;
use polylm::model::ModelError;
use polylm::numerics::NumericsError;
use polylm::senses::SenseError;
use polylm::training::TrainError;

/// A user-facing validation failure (exit code 1).
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser)]
#[command(name = "polylm", version, about = "Train and evaluate sense-embedding language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary and sense inventory from a corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Rewrite a POS-tagged corpus into lemma + inflection-marker tokens.
    Lemmatize {
        /// `surface<TAB>lemma<TAB>tag` lines, blank lines between documents.
        #[arg(long)]
        tagged: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a two-topic corpus with pseudoword evaluation data.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        sentences: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        holdout: f64,
        #[arg(long, default_value_t = 8)]
        senses: u32,
    },
    /// Train a model, writing checkpoints and a step log to a directory.
    Train(train::TrainArgs),
    /// Label WSI instances with induced senses.
    Wsi {
        /// Checkpoint file, or a training directory (latest checkpoint).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "single")]
        protocol: String,
        #[arg(long)]
        p_thresh: Option<f64>,
    },
    /// Score a labeling against gold labels.
    Eval {
        #[arg(long)]
        labeling: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "2010")]
        task_style: String,
        /// Emit `metric<TAB>word<TAB>value` lines instead of a table.
        #[arg(long)]
        tsv: bool,
    },
    /// Nearest sense embeddings to a word's senses.
    Neighbors {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        word: String,
        /// Only this sense index; all senses when omitted.
        #[arg(long)]
        sense: Option<usize>,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Export sense embeddings as text.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// File with one word per line restricting the export.
        #[arg(long)]
        words: Option<PathBuf>,
        /// Corpus used to find dead senses; writes `<out>.dead`.
        #[arg(long)]
        usage_corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        max_per_word: usize,
    },
    /// Run the built-in gradient, invariant and metric checks.
    Selfcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    check_threads_env()?;
    match cmd {
        Command::BuildVocab { corpus, out, config, overrides } => {
            commands::build_vocab(&corpus, &out, config.as_deref(), &overrides)
        }
        Command::Lemmatize { tagged, out } => commands::lemmatize(&tagged, &out),
        Command::Synth { out, sentences, seed, holdout, senses } => {
            commands::synth(&out, sentences, seed, holdout, senses)
        }
        Command::Train(args) => train::train(&args),
        Command::Wsi { checkpoint, dataset, out, protocol, p_thresh } => {
            commands::wsi(&checkpoint, &dataset, &out, &protocol, p_thresh)
        }
        Command::Eval { labeling, gold, task_style, tsv } => commands::eval(&labeling, &gold, &task_style, tsv),
        Command::Neighbors { checkpoint, word, sense, top } => commands::neighbors(&checkpoint, &word, sense, top),
        Command::Export { checkpoint, out, words, usage_corpus, max_per_word } => {
            commands::export(&checkpoint, &out, words.as_deref(), usage_corpus.as_deref(), max_per_word)
        }
        Command::Selfcheck { inject_fault } => commands::selfcheck(inject_fault.as_deref()),
    }
}

fn check_threads_env() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("POLYLM_THREADS") {
        if !v.parse::<usize>().is_ok_and(|n| n > 0) {
            return Err(Invalid(format!("POLYLM_THREADS must be a positive integer, got {v:?}")).into());
        }
    }
    Ok(())
}

/// 1 for bad input or configuration, 2 for runtime and numeric failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain().find_map(classify).unwrap_or(2)
}

fn classify(e: &(dyn std::error::Error + 'static)) -> Option<u8> {
    if e.is::<Invalid>() {
        return Some(1);
    }
    if let Some(e) = e.downcast_ref::<TrainError>() {
        return match e {
            TrainError::Config(_) | TrainError::Checkpoint(_) => Some(1),
            TrainError::Model(m) => classify(m),
            TrainError::Corpus(c) => classify(c),
            _ => Some(2),
        };
    }
    if let Some(e) = e.downcast_ref::<ModelError>() {
        return Some(if matches!(e, ModelError::Numerics(_)) { 2 } else { 1 });
    }
    if let Some(e) = e.downcast_ref::<CorpusError>() {
        return Some(if matches!(e, CorpusError::Io(_)) { 2 } else { 1 });
    }
    if let Some(e) = e.downcast_ref::<SenseError>() {
        return match e {
            SenseError::Io(_) => Some(2),
            SenseError::Model(m) => classify(m),
            SenseError::Corpus(c) => classify(c),
            _ => Some(1),
        };
    }
    if let Some(e) = e.downcast_ref::<MetricError>() {
        return Some(if matches!(e, MetricError::Io(_)) { 2 } else { 1 });
    }
    if e.is::<NumericsError>() || e.is::<std::io::Error>() {
        return Some(2);
    }
    None
}
