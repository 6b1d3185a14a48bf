//! `tilesearch`: ingest tiles, build the index, query, evaluate and serve.
//!
//! Exit codes: 0 success, 1 fatal error, 2 partial success (some tiles failed
//! during ingest).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use tilesearch::ann::Metric;

#[derive(Parser, Debug)]
#[command(
    name = "tilesearch",
    version,
    about = "Reverse image search over satellite map tiles"
)]
struct Cli {
    /// JSON file supplying defaults for any flag; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// More logging on stderr (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Crawl a tile grid, featurize every tile and append it to a store.
    Ingest(IngestArgs),
    /// Build an index over every embedding in a store.
    Build(BuildArgs),
    /// Run one search and print the ranked tile URLs.
    Query(QueryArgs),
    /// Measure recall@k and latency against exact search.
    Eval(EvalArgs),
    /// Serve the HTTP search API.
    Serve(ServeArgs),
    /// Run a deterministic local tile server for testing ingest.
    MockServer(MockServerArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub layer: Option<String>,
    /// Comma-separated YYYY-MM-DD dates.
    #[arg(long, value_delimiter = ',')]
    pub dates: Option<Vec<chrono::NaiveDate>>,
    /// Tile matrix (zoom level).
    #[arg(long)]
    pub level: Option<u32>,
    /// Inclusive row range START-END; defaults to the whole grid.
    #[arg(long)]
    pub rows: Option<String>,
    /// Inclusive column range START-END; defaults to the whole grid.
    #[arg(long)]
    pub cols: Option<String>,
    /// URL template with {layer}, {date}, {matrix}, {row} and {col}.
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Tiles fetched concurrently.
    #[arg(long)]
    pub max_parallel: Option<usize>,
    /// Minimum spacing between tile requests, in milliseconds.
    #[arg(long)]
    pub min_delay_ms: Option<u64>,
    /// Use an external embedding provider at this base URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Output width of the external provider.
    #[arg(long, requires = "endpoint")]
    pub dimension: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub leaf: Option<usize>,
    #[arg(long)]
    pub metric: Option<Metric>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// JPEG or PNG file to search with.
    #[arg(long, conflicts_with = "id", required_unless_present = "id")]
    pub image: Option<PathBuf>,
    /// Search with the embedding of this stored item.
    #[arg(long)]
    pub id: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Leave the queried item itself out of the results.
    #[arg(long, requires = "id")]
    pub exclude_self: bool,
    /// Candidates to collect before exact re-ranking.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Print the full response as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Store to check against the index before evaluating.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Number of stored items used as queries.
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
    /// Seed for sampling the query items.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Listen address, e.g. 127.0.0.1:8080 (port 0 picks a free port).
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub cors_origin: Option<String>,
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MockServerArgs {
    #[arg(long, default_value = "127.0.0.1:0")]
    pub bind: String,
    /// JSON file with `seed`, `failures` and `latency_ms`.
    #[arg(long)]
    pub mock_config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => tracing::Level::ERROR,
        (false, 0) => tracing::Level::WARN,
        (false, 1) => tracing::Level::INFO,
        (false, _) => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .with_target(false)
        .init();
}

#[tokio::main]
async fn main() -> ExitCode {
    // clap exits with 2 on usage errors, which is reserved for partial
    // success here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    init_logging(cli.verbose, cli.quiet);
    let file = match config::FileConfig::load(cli.config.as_deref()) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let outcome = match cli.command {
        Command::Ingest(args) => commands::ingest(args, &file).await,
        Command::Build(args) => commands::build(args, &file),
        Command::Query(args) => commands::query(args, &file).await,
        Command::Eval(args) => commands::eval(args, &file),
        Command::Serve(args) => commands::serve(args, &file).await,
        Command::MockServer(args) => commands::mock_server(args).await,
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
