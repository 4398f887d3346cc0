//! The `jiang` command-line tool.

/// `println!` that reports a failed write instead of panicking.
macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        writeln!(std::io::stdout().lock(), $($arg)*)?
    }};
}

pub mod bench;
pub mod config;
pub mod plot;
mod run;
mod tok;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "jiang", version, about = "Tokenizer, corpus pipeline, training and evaluation for a small decoder LM")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train, extend and apply a byte-level BPE vocabulary.
    #[command(subcommand)]
    Tok(TokCommand),
    /// Filter, select and mix JSONL corpora.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Perplexity of a checkpoint on a text corpus.
    EvalPpl(EvalPplArgs),
    /// Multiple-choice accuracy of a checkpoint.
    EvalMc(EvalMcArgs),
    /// Continue a prompt.
    Generate(GenerateArgs),
    /// Memory estimates and timings of naive and tiled attention, as CSV.
    BenchAttention(BenchAttentionArgs),
    /// Draw a metrics CSV as an SVG line plot.
    Plot(PlotArgs),
}

#[derive(Debug, Subcommand)]
enum TokCommand {
    /// Learn merges from a text corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        merges: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Append whole-character tokens, optionally resizing a checkpoint to match.
    Extend {
        #[arg(long)]
        vocab: PathBuf,
        /// One character per line.
        #[arg(long, conflicts_with = "from_corpus", required_unless_present = "from_corpus")]
        chars: Option<PathBuf>,
        /// Take the most frequent Chinese characters of this corpus instead.
        #[arg(long)]
        from_corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 3500)]
        cap: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "checkpoint_out")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        checkpoint_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print token ids of TEXT.
    Encode {
        #[arg(long)]
        vocab: Option<PathBuf>,
        text: String,
    },
    /// Print the text of token IDS.
    Decode {
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(required = true, num_args = 1..)]
        ids: Vec<u32>,
    },
    /// Fraction of Chinese characters in a corpus that encode as one token.
    Coverage {
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Write the most frequent Chinese characters of a corpus, one per line.
    Chars {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 3500)]
        cap: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct SelectionArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quantile: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum PipelineCommand {
    /// Filter and select every *.jsonl file of a directory.
    Run {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Flat key=value filter rules.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        target_per_source: Option<usize>,
        #[command(flatten)]
        sel: SelectionArgs,
    },
    /// Per-document statistics and verdicts as JSONL.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Diversity-select documents of one JSONL file; prints ids.
    Select {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target: usize,
        #[command(flatten)]
        sel: SelectionArgs,
    },
    /// Draw documents from per-source JSONL files by mixture proportion.
    Mix {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// tag=proportion lines; defaults to the built-in table.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides paths.output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stop after this step, checkpointing it.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to paths.vocab of --config, then the byte-level vocabulary.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalPplArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Defaults to paths.eval_corpus, then paths.train_corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalMcArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Defaults to paths.eval_task.
    #[arg(long)]
    task: Option<PathBuf>,
    /// none or per_char; defaults to eval.normalization.
    #[arg(long)]
    normalization: Option<String>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long, value_parser = ["greedy", "temperature", "top-k"], default_value = "greedy")]
    strategy: String,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 40)]
    top_k: usize,
}

#[derive(Debug, Args)]
struct BenchAttentionArgs {
    /// Sequence lengths.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
    t: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    d_head: usize,
    #[arg(long, default_value_t = 64)]
    block_q: usize,
    #[arg(long, default_value_t = 64)]
    block_kv: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_timing: bool,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Runs the tool on `argv` (program name first). Returns 0 on success, 1
/// on a usage error and 2 on a runtime error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        // the reader went away, as with `| head`
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn execute(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Tok(c) => tok::execute(c),
        Command::Pipeline(c) => run::pipeline(c),
        Command::Train(a) => run::train(a),
        Command::EvalPpl(a) => run::eval_ppl(a),
        Command::EvalMc(a) => run::eval_mc(a),
        Command::Generate(a) => run::generate(a),
        Command::BenchAttention(a) => {
            let tiles = jiang_core::flash::TileConfig::new(a.block_q, a.block_kv)?;
            let csv = bench::bench_attention(&bench::BenchArgs {
                lengths: a.t,
                heads: a.heads,
                d_head: a.d_head,
                tiles,
                reps: a.reps,
                seed: config::resolve_seed(a.seed, None)?,
                no_timing: a.no_timing,
            })?;
            {
                use std::io::Write as _;
                std::io::stdout().lock().write_all(csv.as_bytes())?;
            }
            Ok(())
        }
        Command::Plot(a) => plot::plot_metrics(&a.metrics, &a.out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(dispatch(["jiang"]), 1);
        assert_eq!(dispatch(["jiang", "frobnicate"]), 1);
        assert_eq!(dispatch(["jiang", "tok", "train", "--corpus", "x", "--merges", "-3", "--out", "y"]), 1);
        assert_eq!(dispatch(["jiang", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_two() {
        assert_eq!(dispatch(["jiang", "tok", "coverage", "--corpus", "/nonexistent/corpus.txt"]), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
