mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};

use settings::Overrides;

#[derive(Parser)]
#[command(
    name = "sqlgov",
    version,
    about = "Fragment-based SQL rewriting, repair, modification and equivalence checking"
)]
struct Cli {
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    json: bool,

    /// Config file (default: ./sqlgov.toml when present).
    #[arg(long, global = true, env = "SQLGOV_CONFIG")]
    config: Option<PathBuf>,

    /// Knowledge-base directory. Without one, the built-in seed is used in memory.
    #[arg(long, visible_alias = "store", global = true, env = "SQLGOV_KB_DIR")]
    kb: Option<PathBuf>,

    /// LLM provider name.
    #[arg(long, global = true, env = "SQLGOV_PROVIDER")]
    provider: Option<String>,

    /// Playbook for the scripted provider.
    #[arg(long, global = true, env = "SQLGOV_PLAYBOOK")]
    playbook: Option<PathBuf>,

    /// Fixed clock (RFC 3339), for reproducible runs.
    #[arg(long, global = true, env = "SQLGOV_NOW")]
    now: Option<DateTime<Utc>>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the fragment tree of a query.
    Fragment {
        /// SQL file, or `-` for stdin.
        sql: PathBuf,
    },
    /// Optimise a query.
    Rewrite {
        sql: PathBuf,
        /// Check the rewrite for equivalence with the original.
        #[arg(long)]
        verify: bool,
    },
    /// Check two queries for semantic equivalence.
    Verify(VerifyArgs),
    /// Apply a natural-language change request to a query.
    Modify(ModifyArgs),
    /// Repair a query that failed with a syntax error.
    FixSyntax(FixArgs),
    /// Inspect and maintain the knowledge base.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Compare execution times before and after rewriting.
    Bench(BenchArgs),
    /// Pick the tool for an issue.
    Route(RouteArgs),
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long, required_unless_present = "pairs", requires = "right")]
    left: Option<PathBuf>,
    #[arg(long, requires = "left")]
    right: Option<PathBuf>,
    /// JSONL of `{"id"?, "left", "right"}` SQL pairs.
    #[arg(long, conflicts_with = "left")]
    pairs: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Pathway {
    Instruction,
    Masking,
}

#[derive(Args)]
pub struct ModifyArgs {
    sql: PathBuf,
    #[arg(long)]
    request: String,
    /// File with the text surrounding the query.
    #[arg(long)]
    context: Option<PathBuf>,
    /// Catalog JSON.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Past queries: JSONL of records with a `sql` field, or one query per line.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Category definitions (default: built in).
    #[arg(long)]
    categories: Option<PathBuf>,
    #[arg(long, value_enum)]
    pathway: Option<Pathway>,
}

#[derive(Args)]
pub struct FixArgs {
    sql: PathBuf,
    /// DBMS error log.
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    max_rounds: usize,
}

#[derive(Subcommand)]
pub enum KbCommand {
    /// Write the built-in seed to the store.
    Init {
        /// Overwrite an existing store.
        #[arg(long)]
        force: bool,
    },
    /// List entries.
    List {
        #[arg(long, value_enum, default_value = "rules")]
        kind: EntryKind,
        #[arg(long)]
        tool: Option<String>,
    },
    /// Add an entry.
    Add {
        #[command(subcommand)]
        entry: AddEntry,
    },
    /// Per-tool counts and review status.
    Stats,
    /// Generate candidate rules from execution records.
    Learn {
        /// JSONL execution records.
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "REWRITER")]
        tool: String,
        /// Accept every generated rule immediately.
        #[arg(long)]
        auto_accept: bool,
    },
    /// Apply expert decisions to a pending batch.
    Verify {
        /// JSON `{"batch": id, "decisions": {"RULE": "ACCEPT" | "REJECT"}}`, or a list of them.
        #[arg(long)]
        decisions: PathBuf,
    },
    /// Merge near-duplicate rules.
    Dedup {
        #[arg(long)]
        tool: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum EntryKind {
    Rules,
    Cases,
    Strategies,
    Pending,
}

#[derive(Subcommand)]
pub enum AddEntry {
    Rule {
        #[arg(long)]
        tool: String,
        #[arg(long)]
        index: String,
        #[arg(long)]
        description: String,
        /// Store as verified instead of candidate.
        #[arg(long)]
        verified: bool,
    },
    Case {
        #[arg(long)]
        tool: String,
        #[arg(long)]
        index: String,
        #[arg(long)]
        details: String,
        /// SQL file the case is keyed on.
        #[arg(long)]
        sql: PathBuf,
        /// Rule labels.
        #[arg(long = "tag")]
        tags: Vec<String>,
    },
    Strategy {
        #[arg(long)]
        index: String,
        /// Example error log; its masked key becomes the pattern.
        #[arg(long)]
        sample_log: String,
        #[arg(long)]
        guidance: String,
        #[arg(long)]
        needs_schema: bool,
        #[arg(long)]
        localized: bool,
    },
}

#[derive(Args)]
pub struct BenchArgs {
    /// JSONL of `{"query_id", "original", "rewritten"}`.
    #[arg(long)]
    pairs: PathBuf,
    /// Executor fixtures (JSONL).
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long, default_value_t = sqlgov::harness::DEFAULT_TRIALS)]
    trials: usize,
    /// Run pairs concurrently; simulated executors only.
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Hint {
    Efficiency,
    Semantic,
}

#[derive(Args)]
pub struct RouteArgs {
    /// Issue as JSON (`{"sql", "request"?, "error_log"?, "hint"?}`), or `-`.
    #[arg(long, conflicts_with_all = ["sql", "request", "log", "hint"])]
    issue: Option<PathBuf>,
    #[arg(long, required_unless_present = "issue")]
    sql: Option<PathBuf>,
    #[arg(long)]
    request: Option<String>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, value_enum)]
    hint: Option<Hint>,
    /// Also run the chosen tool.
    #[arg(long)]
    run: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides {
        config: cli.config,
        kb_dir: cli.kb,
        provider: cli.provider,
        playbook: cli.playbook,
        now: cli.now,
    };
    let out = commands::Output { json: cli.json };
    match commands::run(cli.command, overrides, &out) {
        Ok(outcome) => outcome.code(),
        Err(e) => {
            out.error(&e);
            ExitCode::from(2)
        }
    }
}
