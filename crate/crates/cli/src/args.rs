use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "resim", version, about = "Two-stage binary function search")]
pub struct Cli {
    /// Worker threads for embedding, scoring and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// More diagnostics on stderr; repeat for more.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus and write it back in canonical form.
    Ingest(IngestArgs),
    /// Normalize every function of a corpus into tokens.
    Normalize(NormalizeArgs),
    /// Build or query a vector index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Retrieve, re-rank and print the top-k for each query.
    Query(QueryArgs),
    /// Like `query`, merging the windows of several indexes.
    EnsembleQuery(QueryArgs),
    /// Mine (anchor, positive, hard negative) triplets.
    MineTriplets(MineArgs),
    /// Train the linear scorer on mined triplets.
    TrainScorer(TrainArgs),
    /// Score a saved run.
    Eval(EvalArgs),
    /// Evaluate the pipeline at several window sizes.
    Sweep(SweepArgs),
    /// Time embedding, retrieval and re-ranking at several window sizes.
    Bench(BenchArgs),
    /// Generate a seeded synthetic corpus and query set.
    Synth(SynthArgs),
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Embed a corpus and write the index file.
    Build(IndexBuildArgs),
    /// Print the window of one indexed function.
    Query(IndexQueryArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NormArgs {
    /// Immediates above this magnitude become `IMM`.
    #[arg(long, default_value_t = resim::normalize::DEFAULT_IMM_THRESHOLD)]
    pub imm_threshold: u64,

    /// File of libc names kept as call targets, one per line.
    #[arg(long)]
    pub libc_names: Option<PathBuf>,

    /// Token budget of an encoded (query, candidate) pair.
    #[arg(long, default_value_t = resim::normalize::DEFAULT_MAX_PAIR_TOKENS)]
    pub max_pair_tokens: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct QuerySelection {
    /// Query function id; repeatable.
    #[arg(long = "query-id")]
    pub query_ids: Vec<String>,

    /// Query set file (JSONL of `{query_id, group?}`).
    #[arg(long)]
    pub queries: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SearchArgs {
    /// Window size handed to the re-ranker.
    #[arg(short = 'w', long = "window", default_value_t = 200)]
    pub w: usize,

    /// Length of the final list.
    #[arg(short, long, default_value_t = 10)]
    pub k: usize,

    /// Drop the query itself from its window.
    #[arg(long)]
    pub exclude_self: bool,

    #[arg(long, default_value_t = resim::rerank::DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScorerArgs {
    /// lexical | linear:<model.json> | oracle | external:<host:port|stdio:cmd>
    #[arg(long, default_value = "lexical")]
    pub scorer: String,

    /// Per-batch deadline for an external scorer, in seconds.
    #[arg(long, default_value_t = 30.0)]
    pub scorer_timeout: f64,

    /// Re-normalize candidates for every query instead of once up front.
    #[arg(long)]
    pub no_token_cache: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long = "in")]
    pub input: PathBuf,

    #[arg(long)]
    pub out: PathBuf,

    /// Also check that every query of this set is in the corpus.
    #[arg(long)]
    pub queries: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NormalizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,

    #[arg(long)]
    pub out: PathBuf,

    #[command(flatten)]
    pub norm: NormArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IndexBuildArgs {
    #[arg(long)]
    pub corpus: PathBuf,

    /// Built-in embedder, e.g. `bow-hash;dim=128;seed=0`.
    #[arg(long, default_value = "bow-hash;dim=128;seed=0", conflicts_with = "sidecar")]
    pub embedder: String,

    /// Precomputed embeddings (JSONL of `{id, vector}`) instead of a built-in.
    #[arg(long, requires_all = ["name", "dim"])]
    pub sidecar: Option<PathBuf>,

    /// Embedder name recorded for a sidecar.
    #[arg(long)]
    pub name: Option<String>,

    /// Dimension of the sidecar vectors.
    #[arg(long)]
    pub dim: Option<usize>,

    #[arg(long)]
    pub out: PathBuf,

    #[command(flatten)]
    pub norm: NormArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IndexQueryArgs {
    #[arg(long)]
    pub index: PathBuf,

    #[arg(long = "query-id")]
    pub query_id: String,

    #[arg(short = 'w', long = "window", default_value_t = 10)]
    pub w: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct QueryArgs {
    #[arg(long)]
    pub corpus: PathBuf,

    /// Index file; repeatable.
    #[arg(long = "index", required = true)]
    pub indexes: Vec<PathBuf>,

    /// Further indexes whose windows are merged with the first.
    #[arg(long, num_args = 1..)]
    pub ensemble: Vec<PathBuf>,

    #[command(flatten)]
    pub select: QuerySelection,

    #[command(flatten)]
    pub search: SearchArgs,

    #[command(flatten)]
    pub scorer: ScorerArgs,

    #[command(flatten)]
    pub norm: NormArgs,

    /// Write results here (JSONL) instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Write the per-query timing breakdown to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MineArgs {
    #[arg(long)]
    pub corpus: PathBuf,

    /// Anchor set (same format as a query set).
    #[arg(long)]
    pub anchors: PathBuf,

    /// Index whose neighbourhoods supply negatives; repeatable.
    #[arg(long = "index", required = true)]
    pub indexes: Vec<PathBuf>,

    #[arg(long, default_value_t = 1)]
    pub negatives_per_embedder: usize,

    #[arg(long, default_value_t = resim::corpus::DEFAULT_MINING_DEPTH)]
    pub mining_depth: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,

    #[arg(long)]
    pub triplets: PathBuf,

    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,

    #[arg(long = "lr", default_value_t = 0.01)]
    pub learning_rate: f64,

    #[arg(long, default_value_t = 1)]
    pub epochs: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Visit triplets in file order.
    #[arg(long)]
    pub no_shuffle: bool,

    #[command(flatten)]
    pub norm: NormArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupBy {
    /// The query set's group label.
    Label,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    /// Saved `query` output (JSONL).
    #[arg(long)]
    pub run: PathBuf,

    #[arg(long, value_delimiter = ',', default_value = "5,10,15,20,25,30")]
    pub ks: Vec<usize>,

    /// Report of an earlier `eval` over the same queries.
    #[arg(long)]
    pub baseline: Option<PathBuf>,

    #[arg(long, value_enum)]
    pub group_by: Option<GroupBy>,

    /// Score the first window in embedding order, ignoring the re-ranker.
    #[arg(long)]
    pub embedding_only: bool,

    /// Print a plain-text table instead of JSON.
    #[arg(long)]
    pub table: bool,

    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub corpus: PathBuf,

    #[arg(long)]
    pub index: PathBuf,

    /// Window sizes, ascending.
    #[arg(short = 'w', long = "windows", value_delimiter = ',', default_value = "30,50,100,200")]
    pub ws: Vec<usize>,

    #[arg(short, long, default_value_t = 10)]
    pub k: usize,

    #[arg(long, value_delimiter = ',', default_value = "5,10,15,20,25,30")]
    pub ks: Vec<usize>,

    #[command(flatten)]
    pub select: QuerySelection,

    #[command(flatten)]
    pub scorer: ScorerArgs,

    #[command(flatten)]
    pub norm: NormArgs,

    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Write mean timings per window size to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub corpus: PathBuf,

    #[arg(long)]
    pub index: PathBuf,

    #[arg(short = 'w', long = "windows", value_delimiter = ',', default_value = "30,50,100,200")]
    pub ws: Vec<usize>,

    #[arg(short, long, default_value_t = 10)]
    pub k: usize,

    /// Use at most this many queries.
    #[arg(long, default_value_t = 50)]
    pub limit: usize,

    #[command(flatten)]
    pub select: QuerySelection,

    #[command(flatten)]
    pub scorer: ScorerArgs,

    #[command(flatten)]
    pub norm: NormArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5000)]
    pub classes: usize,

    #[arg(long, default_value_t = 5)]
    pub variants: usize,

    #[arg(long, default_value_t = 0.3)]
    pub mutation_rate: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, default_value_t = 24)]
    pub min_instructions: usize,

    #[arg(long, default_value_t = 72)]
    pub max_instructions: usize,

    /// Corpus file to write.
    #[arg(long)]
    pub out: PathBuf,

    /// Query set file to write (one query per class).
    #[arg(long)]
    pub queries_out: PathBuf,
}
