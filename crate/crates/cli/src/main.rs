//! Command-line harness: data generation, baseline training, adaptation,
//! translation, evaluation, and parameter reports.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "offset-nmt",
    version,
    about = "Personalized translation via sparse offset tensors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic domain-shift task: vocabularies and baseline/heldout/adapt/test corpora.
    GenData(GenDataArgs),
    /// Train a baseline model and save it as a checkpoint.
    TrainBaseline(TrainArgs),
    /// Adapt a baseline to user data and save the offsets.
    Adapt(AdaptArgs),
    /// Translate a source file with a baseline and optional offsets.
    Translate(TranslateArgs),
    /// Score translations or text.
    Evaluate(EvaluateArgs),
    /// Stored parameters (and optionally BLEU) for one or more offset files.
    ReportParams(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 120)]
    vocab_size: usize,
    #[arg(long, default_value_t = 4)]
    min_len: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    #[arg(long, default_value_t = 20_000)]
    baseline_size: usize,
    #[arg(long, default_value_t = 500)]
    heldout_size: usize,
    #[arg(long, default_value_t = 2000)]
    adapt_size: usize,
    #[arg(long, default_value_t = 500)]
    test_size: usize,
    /// Fraction of the vocabulary translated differently in the user domain.
    #[arg(long, default_value_t = 0.3)]
    shift: f64,
    /// Fraction of test segments that repeat earlier ones.
    #[arg(long, default_value_t = 0.3)]
    repeat: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Vocabulary files shared by the commands that read text.
#[derive(Args)]
struct VocabArgs {
    /// Directory holding `src.vocab` and `tgt.vocab`.
    #[arg(long)]
    vocab_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    vocab: VocabArgs,
    /// Corpus prefix; reads `<prefix>.src` and `<prefix>.tgt`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    enc_layers: usize,
    #[arg(long, default_value_t = 1)]
    dec_layers: usize,
    #[arg(long, default_value_t = 128)]
    filter: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 1000)]
    batch_tokens: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 0.1)]
    label_smoothing: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Batch,
    Incremental,
    Combined,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    vocab: VocabArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Batch)]
    mode: ModeArg,
    /// full, region:<name>, fixed, or lasso.
    #[arg(long, default_value = "full")]
    method: String,
    /// Adaptation corpus prefix (batch and combined modes).
    #[arg(long)]
    adapt: Option<PathBuf>,
    /// Test corpus prefix (incremental and combined modes).
    #[arg(long)]
    test: Option<PathBuf>,
    /// Development-domain offsets used to pick tensors for `--method fixed`.
    #[arg(long)]
    fixed_from: Option<PathBuf>,
    #[arg(long, default_value_t = 0.002)]
    fixed_threshold: f64,
    /// Restrict vocabulary-indexed offsets to observed rows.
    #[arg(long)]
    sparse_vocab: bool,
    #[arg(long, default_value_t = 1e-6)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-4)]
    theta: f64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_tokens: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    max_updates: Option<usize>,
    #[arg(long)]
    ppl_stop: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Offset file to write.
    #[arg(long)]
    out: PathBuf,
    /// Where incremental translations are written, one per line.
    #[arg(long)]
    translations: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    vocab: VocabArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    offsets: Option<PathBuf>,
    /// Source text, one segment per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Bleu,
    Rr,
    Ppl,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, value_enum)]
    metric: MetricArg,
    /// Hypothesis file (bleu).
    #[arg(long)]
    hyp: Option<PathBuf>,
    /// Reference file (bleu), or the text to measure (rr).
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    window: usize,
    /// Vocabulary directory (ppl).
    #[arg(long)]
    vocab_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    offsets: Option<PathBuf>,
    /// Corpus prefix (ppl).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `label=path` pairs; repeat for several methods.
    #[arg(long = "offsets", value_name = "LABEL=PATH")]
    offsets: Vec<String>,
    /// Optional test corpus prefix for BLEU columns.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    vocab_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::TrainBaseline(a) => commands::train(a),
        Command::Adapt(a) => commands::adapt(a),
        Command::Translate(a) => commands::translate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::ReportParams(a) => commands::report(a),
    }
}
