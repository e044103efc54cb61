use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use setcomp_core::exec::Exec;
use setcomp_core::model::NormMode;
use setcomp_core::othello::CorpusSpec;
use setcomp_core::search::GroupKey;
use setcomp_core::theory::{DEFAULT_ENUMERATION_CAP, DEFAULT_RANK_TOL};

mod commands;
mod manifest;

use manifest::{masks_path, Invocation, Manifest};

/// Set complement laboratory: theory checks, training, random search and
/// Othello data.
#[derive(Parser, Debug)]
#[command(name = "setcomp", version, about)]
struct Cli {
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Certify the hardcoded solution: precision table, ranks, balance and decay.
    VerifyTheory(VerifyTheoryArgs),
    /// Run one training run from a JSON config.
    Train(TrainArgs),
    /// Run (or resume) a random hyperparameter search.
    Search(SearchArgs),
    /// Summarize search records by generalization gap.
    Summarize(SummarizeArgs),
    /// Generate a random Othello game corpus.
    OthelloGen(OthelloGenArgs),
    /// Score external Othello predictions against a mask file.
    OthelloEval(OthelloEvalArgs),
    /// Score external set complement predictions.
    EvalLogits(EvalLogitsArgs),
    /// Rerun a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct VerifyTheoryArgs {
    #[arg(long)]
    v: usize,
    /// Precision C of the hardcoded model.
    #[arg(long = "C", visible_alias = "precision")]
    c: f64,
    #[arg(long, default_value = "identity")]
    norm: NormMode,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Largest vocabulary checked exhaustively.
    #[arg(long, default_value_t = 8)]
    max_v: usize,
    /// Largest number of sequences enumerated at one length.
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
    enumeration_cap: u64,
    /// Fall back to sampling when a length exceeds the enumeration cap.
    #[arg(long)]
    allow_sampling: bool,
    #[arg(long, default_value_t = 0.0)]
    eq_tol: f64,
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    rank_tol: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = "SETCOMP_OUT_DIR")]
    out: PathBuf,
    /// Exit with status 1 if the run diverges.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; an existing sweep there is resumed.
    #[arg(long, env = "SETCOMP_OUT_DIR")]
    out: PathBuf,
    /// Grouping for the summary: comma-separated gap, multiplier, value_coefficient.
    #[arg(long, value_delimiter = ',', default_value = "gap")]
    group: Vec<GroupKey>,
}

#[derive(Args, Debug)]
struct SummarizeArgs {
    /// Sweep directory or records file.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "gap")]
    group: Vec<GroupKey>,
    /// CSV path; defaults to summary.csv next to the records.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OthelloGenArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 15)]
    min_len: usize,
    #[arg(long, default_value_t = 59)]
    max_len: usize,
    /// Corpus path.
    #[arg(long)]
    out: PathBuf,
    /// Also write per-prefix legal-move masks to `<out>.masks`.
    #[arg(long)]
    masks: bool,
    /// Redraw games in which a player had to pass.
    #[arg(long)]
    no_pass_games: bool,
}

#[derive(Args, Debug)]
struct OthelloEvalArgs {
    /// JSONL with one `{"logits": [60 values]}` per scored prefix.
    #[arg(long)]
    logits: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalLogitsArgs {
    /// JSONL with `{"tokens": [...], "logits": [...]}` per line.
    #[arg(long)]
    logits: PathBuf,
    #[arg(long)]
    v: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Redirect the primary output (directory or file).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A check ran and failed: exit status 1.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let f = std::fs::File::open(path).map_err(|e| anyhow::Error::new(e).context(format!("opening {}", path.display())))?;
    serde_json::from_reader(std::io::BufReader::new(f))
        .map_err(|e| anyhow::Error::new(setcomp_core::Error::Config(format!("{}: {e}", path.display()))))
}

fn resolve(command: Command) -> Result<Invocation> {
    Ok(match command {
        Command::VerifyTheory(a) => Invocation::VerifyTheory {
            v: a.v,
            precision: a.c,
            norm: a.norm,
            max_v: a.max_v,
            enumeration_cap: a.enumeration_cap,
            allow_sampling: a.allow_sampling,
            eq_tol: a.eq_tol,
            rank_tol: a.rank_tol,
            out: a.out,
        },
        Command::Train(a) => Invocation::Train { config: read_json(&a.config)?, out: a.out, strict: a.strict },
        Command::Search(a) => Invocation::Search { config: read_json(&a.config)?, out: a.out, group: a.group },
        Command::Summarize(a) => {
            let records = if a.input.is_dir() { a.input.join(setcomp_core::search::RECORDS_FILE) } else { a.input };
            let out = a.out.unwrap_or_else(|| records.with_file_name(setcomp_core::search::SUMMARY_FILE));
            Invocation::Summarize { input: records, group: a.group, out }
        }
        Command::OthelloGen(a) => Invocation::OthelloGen {
            spec: CorpusSpec {
                count: a.count,
                seed: a.seed,
                min_len: a.min_len,
                max_len: a.max_len,
                no_pass_games: a.no_pass_games,
            },
            masks: a.masks.then(|| masks_path(&a.out)),
            out: a.out,
        },
        Command::OthelloEval(a) => Invocation::OthelloEval { logits: a.logits, masks: a.masks, out: a.out },
        Command::EvalLogits(a) => Invocation::EvalLogits { logits: a.logits, v: a.v, out: a.out },
        Command::Replay(a) => {
            let m = Manifest::read(&a.manifest)?;
            if m.tool != env!("CARGO_PKG_NAME") {
                bail!(setcomp_core::Error::Config(format!("manifest written by {:?}", m.tool)));
            }
            match a.out {
                Some(out) => m.invocation.with_out(out),
                None => m.invocation,
            }
        }
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use setcomp_core::Error as E;
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 1;
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    match err.downcast_ref::<E>() {
        Some(E::Io(_) | E::Json(_) | E::Format(_)) => 3,
        Some(_) => 2,
        None => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = match cli.jobs {
        Some(1) => Exec::Sequential,
        Some(n) => {
            std::env::set_var("RAYON_NUM_THREADS", n.max(1).to_string());
            Exec::Parallel
        }
        None => Exec::default(),
    };
    let result = resolve(cli.command).and_then(|inv| commands::run(inv, exec));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
