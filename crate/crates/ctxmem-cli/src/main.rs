//! Command-line surface: train, translate, evaluate, ablate.
//!
//! Exit codes partition failures: 1 for configuration problems (bad flags,
//! bad config keys, settings incompatible with a checkpoint), 2 for data
//! problems (unreadable or malformed files), 3 for numeric aborts during
//! training or decoding.

mod commands;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser)]
#[command(name = "ctxmem", version, about = "Document-level NMT with a contextual memory network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from parallel document corpora
    Train(TrainArgs),
    /// Translate a document corpus with a trained checkpoint
    Translate(TranslateArgs),
    /// Score translations: BLEU, consistency, disambiguation, coherence
    Evaluate(EvaluateArgs),
    /// Sweep one setting over a grid and emit a TSV table
    Ablate(AblateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (key = value lines)
    #[arg(long)]
    config: String,
    /// Source-side training corpus (blank line = document boundary)
    #[arg(long)]
    source: String,
    /// Target-side training corpus, aligned with the source
    #[arg(long)]
    target: String,
    /// Output directory for checkpoints, BPE model and vocabulary
    #[arg(long)]
    out: String,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeFlag {
    Previous,
    Next,
    Random,
}

#[derive(Args)]
struct TranslateArgs {
    /// Checkpoint file; bpe.merges and vocab.txt must sit beside it
    #[arg(long)]
    checkpoint: String,
    /// Input documents, one sentence per line, blank line between documents
    #[arg(long)]
    input: String,
    /// Output file (standard output when omitted)
    #[arg(long)]
    output: Option<String>,
    /// Context selection at decoding time
    #[arg(long, value_enum)]
    context_mode: Option<ModeFlag>,
    /// Number of context sentences fed to the memory network
    #[arg(long)]
    memory_size: Option<usize>,
    /// Beam width (1 with alpha 0 is greedy)
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Length penalty exponent
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    /// Pin the context gate to a constant in [0, 1]
    #[arg(long)]
    gate_override: Option<f64>,
    /// Decoding length cap
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Worker threads over documents
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricFlag {
    Bleu,
    Consistency,
    Disambiguation,
    Coherence,
    All,
}

#[derive(Args)]
struct EvaluateArgs {
    /// System outputs in the corpus text format
    #[arg(long)]
    outputs: String,
    /// Reference translations, aligned with the outputs
    #[arg(long)]
    references: String,
    #[arg(long, value_enum, default_value_t = MetricFlag::Bleu)]
    metric: MetricFlag,
    /// Window side for the consistency metric
    #[arg(long, value_enum, default_value_t = ModeFlag::Previous)]
    window: ModeFlag,
    /// Window size for the consistency metric
    #[arg(long, default_value_t = 3)]
    m: usize,
    /// Ambiguous-word dictionary (word<TAB>cand1,cand2,...)
    #[arg(long)]
    dict: Option<String>,
    /// Stopword list, one token per line
    #[arg(long)]
    stopwords: Option<String>,
    /// Source sentences (required for disambiguation)
    #[arg(long)]
    source: Option<String>,
    /// Checkpoint providing embedding vectors (required for coherence)
    #[arg(long)]
    checkpoint: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    /// Setting to sweep: gate_constant, memory_size, context_mode,
    /// merge_strategy, rnn_core
    #[arg(long)]
    kind: String,
    /// Grid: comma list, integer range a..b, or float range a:b:step
    #[arg(long)]
    grid: String,
    /// One shared checkpoint, or one per grid point (comma separated)
    #[arg(long)]
    checkpoints: String,
    /// Source documents to translate
    #[arg(long)]
    source: String,
    /// Reference documents for BLEU
    #[arg(long)]
    references: String,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Stopword list; enables the consistency column
    #[arg(long)]
    stopwords: Option<String>,
    /// Ambiguous-word dictionary; enables the disambiguation column
    #[arg(long)]
    dict: Option<String>,
    /// Window side for the consistency column
    #[arg(long, value_enum, default_value_t = ModeFlag::Previous)]
    window: ModeFlag,
    /// Window size for the consistency column
    #[arg(long, default_value_t = 3)]
    window_m: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if e.kind() == ErrorKind::DisplayHelp || e.kind() == ErrorKind::DisplayVersion =>
        {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return EXIT_CONFIG;
        }
    };
    match cli.command {
        Command::Train(args) => commands::train(args),
        Command::Translate(args) => commands::translate(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Ablate(args) => commands::ablate(args),
    }
}
