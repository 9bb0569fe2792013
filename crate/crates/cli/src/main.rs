mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// A failure caused by bad input rather than I/O; exits with status 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

const EXIT_VALIDATION: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "ftlab", version, about = "Desk-scale LoRA fine-tuning and evaluation laboratory")]
pub struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML or JSON run configuration; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Omit wall-clock timestamps and timings from outputs.
    #[arg(long, global = true)]
    pub no_timestamps: bool,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Model checkpoint (.ftlm).
    #[arg(long)]
    pub model: PathBuf,
    /// Adapter checkpoint (.ftla) to apply on top of the model.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// adapters (base frozen) or full.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub dropout: Option<f32>,
    /// Stop once an epoch's mean loss drops below this.
    #[arg(long)]
    pub stop_below: Option<f64>,
    /// Write checkpoints every n epochs into the output directory.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Load a text corpus, split it and cut fixed-length token chunks.
    BuildCorpus {
        /// Directory of .txt articles.
        #[arg(long)]
        input: PathBuf,
        /// CSV of path,date for date-based splits.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Receives train.jsonl and test.jsonl.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        chunk_len: Option<usize>,
        #[arg(long, conflicts_with = "cutoff")]
        test_fraction: Option<f64>,
        /// YYYY-MM-DD; articles on or after it form the test set.
        #[arg(long)]
        cutoff: Option<String>,
    },
    /// Next-token training of adapters (or the whole model).
    TrainLm {
        /// Chunk file from build-corpus.
        #[arg(long, required_unless_present = "corpus", conflicts_with = "corpus")]
        chunks: Option<PathBuf>,
        /// Directory of .txt articles, chunked on the fly.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Base checkpoint; a fresh model is initialized from the seed when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Held-out chunks scored after training.
        #[arg(long)]
        eval_chunks: Option<PathBuf>,
        #[arg(long)]
        chunk_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Attach next-day return buckets to headlines.
    BuildLabels {
        /// CSV of headline,ticker,date.
        #[arg(long)]
        headlines: PathBuf,
        /// CSV of ticker,date,adj_close.
        #[arg(long, required_unless_present = "price_url", conflicts_with = "price_url")]
        prices: Option<PathBuf>,
        /// HTTP price service base URL.
        #[arg(long)]
        price_url: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV listing skipped headlines.
        #[arg(long)]
        skipped: Option<PathBuf>,
    },
    /// Train adapters and a regression head on labeled headlines.
    TrainCls {
        /// Labeled CSV from build-labels.
        #[arg(long)]
        data: PathBuf,
        /// Base checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Labeled CSV scored after training.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Continue a prompt.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        /// Sample at this temperature instead of greedy decoding.
        #[arg(long)]
        temperature: Option<f32>,
        /// Restrict sampling to the k likeliest tokens.
        #[arg(long, requires = "temperature")]
        top_k: Option<usize>,
    },
    /// Corpus perplexity.
    EvalPpl {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        chunks: PathBuf,
        /// JSON report path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// ROUGE-1/2/L of generated (or supplied) summaries.
    EvalRouge {
        /// JSONL of {id, input, query?, reference, candidate?}.
        #[arg(long)]
        items: PathBuf,
        #[arg(long, required_unless_present = "remote_url")]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        adapters: Option<PathBuf>,
        /// Chat-completion endpoint used instead of a local model.
        #[arg(long, conflicts_with = "model", requires = "remote_model")]
        remote_url: Option<String>,
        #[arg(long)]
        remote_model: Option<String>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Multiple-choice accuracy by answer log-likelihood.
    EvalMc {
        #[command(flatten)]
        model: ModelArgs,
        /// JSONL of {id, question, choices, gold}.
        #[arg(long)]
        items: PathBuf,
        /// none or per-token.
        #[arg(long, default_value = "none")]
        normalization: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Tally human preference votes.
    EvalHuman {
        /// CSV of evaluator_id,question_id,model_id (empty model = none helpful).
        #[arg(long)]
        votes: PathBuf,
        /// Comma-separated model ids.
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<String>,
        /// Comma-separated question ids; unknown ones are rejected.
        #[arg(long, value_delimiter = ',')]
        questions: Option<Vec<String>>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Convert Q&A items to chat-format JSON lines.
    BuildInstructions {
        /// CSV or JSONL with category,question,answer[,system].
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Default system prompt.
        #[arg(long)]
        system: Option<String>,
    },
    /// Check a chat-format JSON-lines file.
    ValidateInstructions {
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the same metrics on several backends side by side.
    Compare {
        /// id=model.ftlm[,adapters.ftla]; repeatable.
        #[arg(long)]
        local: Vec<String>,
        /// id=url,model; repeatable.
        #[arg(long)]
        remote: Vec<String>,
        #[arg(long)]
        chunks: Option<PathBuf>,
        #[arg(long)]
        summaries: Option<PathBuf>,
        #[arg(long)]
        mc: Option<PathBuf>,
        #[arg(long, default_value = "none")]
        normalization: String,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn is_io(err: &(dyn std::error::Error + 'static)) -> Option<bool> {
    use ftlab::checkpoint::CheckpointError;
    use ftlab::corpus::CorpusError;
    use ftlab::eval::EvalError;
    use ftlab::instructions::InstructionError;
    use ftlab::labels::LabelError;
    use ftlab::training::TrainError;
    if err.is::<Invalid>() {
        return Some(false);
    }
    if err.is::<std::io::Error>() {
        return Some(true);
    }
    use ftlab::model::ModelError;
    // Transparent wrappers hide the inner error from the source chain.
    let model_io = |m: &ModelError| matches!(m, ModelError::Checkpoint(CheckpointError::Io { .. }));
    if let Some(e) = err.downcast_ref::<ModelError>() {
        return Some(model_io(e));
    }
    if let Some(e) = err.downcast_ref::<CheckpointError>() {
        return Some(matches!(e, CheckpointError::Io { .. }));
    }
    if let Some(e) = err.downcast_ref::<CorpusError>() {
        return Some(matches!(e, CorpusError::Io { .. } | CorpusError::MissingDirectory(_)));
    }
    if let Some(e) = err.downcast_ref::<LabelError>() {
        return Some(matches!(e, LabelError::Io { .. } | LabelError::PriceSource { .. }));
    }
    if let Some(e) = err.downcast_ref::<EvalError>() {
        return Some(match e {
            EvalError::Model(m) => model_io(m),
            e => matches!(e, EvalError::Io { .. } | EvalError::Remote { .. }),
        });
    }
    if let Some(e) = err.downcast_ref::<InstructionError>() {
        return Some(matches!(e, InstructionError::Io { .. }));
    }
    if let Some(e) = err.downcast_ref::<TrainError>() {
        return Some(match e {
            TrainError::Model(m) => model_io(m),
            e => matches!(e, TrainError::Io { .. }),
        });
    }
    None
}

/// 2 for I/O and remote failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    // The innermost classified cause wins: a checkpoint I/O error wrapped in
    // a model error is still I/O.
    let mut code = EXIT_VALIDATION;
    for cause in err.chain() {
        if let Some(io) = is_io(cause) {
            code = if io { EXIT_IO } else { EXIT_VALIDATION };
        }
    }
    code
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Several error types already print their source inline.
            let mut msg = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&text);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
