use std::io::Write;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use tilesearch::ann::{self, AnnForest, ForestParams};
use tilesearch::featurizer::ProviderDescriptor;
use tilesearch::ingest::mock::{MockConfig, MockTileServer};
use tilesearch::ingest::{self, CrawlSpec, IngestError};
use tilesearch::service::{self, EngineOptions, SearchEngine, SearchRequest, ServiceConfig};
use tilesearch::store::EmbeddingStore;
use tilesearch::{Error, DEFAULT_DIMENSION};

use crate::config::{parse_range, pick, require, FileConfig};
use crate::{BuildArgs, EvalArgs, IngestArgs, MockServerArgs, QueryArgs, ServeArgs};

/// Process exit status for runs that did not hit a fatal error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Partial = 2,
}

pub async fn ingest(args: IngestArgs, file: &FileConfig) -> anyhow::Result<Status> {
    let layer = require(args.layer, &file.layer, "layer")?;
    let dates = require(args.dates, &file.dates, "dates")?;
    let level = require(args.level, &file.level, "level")?;
    let template = require(args.template, &file.url_template, "template")?;
    let store_path = require(args.store, &file.store_path, "store")?;

    let (grid_rows, grid_cols) = ingest::grid_bounds(level.min(30));
    let full = |n: u64| (0, (n - 1).min(u64::from(u32::MAX)) as u32);
    let rows = match pick(args.rows, &file.rows) {
        Some(r) => parse_range(&r).context("--rows")?,
        None => full(grid_rows),
    };
    let cols = match pick(args.cols, &file.cols) {
        Some(c) => parse_range(&c).context("--cols")?,
        None => full(grid_cols),
    };
    let provider = match (args.endpoint, &file.provider) {
        (Some(endpoint), _) => {
            ProviderDescriptor::external(endpoint, args.dimension.unwrap_or(DEFAULT_DIMENSION))
        }
        (None, Some(p)) => p.clone(),
        (None, None) => ProviderDescriptor::default(),
    };

    let mut spec = CrawlSpec::new(layer, dates, level, rows, cols, template.clone());
    spec.provider = provider;
    if let Some(n) = pick(args.max_parallel, &file.max_parallel) {
        spec.max_parallel = n;
    }
    spec.min_delay = pick(args.min_delay_ms, &file.min_delay_ms).map(Duration::from_millis);
    spec.validate().context("invalid crawl")?;

    let mut store = EmbeddingStore::open_or_create(&store_path, spec.provider.dimension, &template)
        .with_context(|| format!("cannot open store {}", store_path.display()))?;
    tracing::info!(tiles = spec.coordinate_count(), store = %store_path.display(), "crawling");
    let report = match ingest::crawl(&spec, &mut store).await {
        Ok(report) => report,
        Err(IngestError::Invalid(e)) => return Err(e).context("invalid crawl"),
        Err(IngestError::Aborted { report, source }) => {
            print_json(&report)?;
            return Err(source).context("crawl aborted");
        }
    };
    print_json(&report)?;
    for f in &report.failures {
        tracing::warn!(url = %f.url, error = %f.error, "tile failed");
    }
    Ok(if report.failed == 0 {
        Status::Ok
    } else {
        Status::Partial
    })
}

pub fn build(args: BuildArgs, file: &FileConfig) -> anyhow::Result<Status> {
    let store_path = require(args.store, &file.store_path, "store")?;
    let index_path = require(args.index, &file.index_path, "index")?;
    let store = EmbeddingStore::open_read_only(&store_path)
        .with_context(|| format!("cannot open store {}", store_path.display()))?;
    let defaults = ForestParams::default();
    let params = ForestParams {
        dimension: store.dimension(),
        metric: pick(args.metric, &file.metric).unwrap_or(defaults.metric),
        n_trees: pick(args.trees, &file.trees).unwrap_or(defaults.n_trees),
        leaf_capacity: pick(args.leaf, &file.leaf).unwrap_or(defaults.leaf_capacity),
        seed: pick(args.seed, &file.seed).unwrap_or(defaults.seed),
    };
    if store.is_empty() {
        tracing::warn!(store = %store_path.display(), "store is empty; writing an empty index");
    }
    let started = Instant::now();
    let forest = AnnForest::build(store.export_embeddings(), params)?;
    let seconds = started.elapsed().as_secs_f64();
    ann::save_forest(&forest, &index_path)
        .with_context(|| format!("cannot write index {}", index_path.display()))?;
    println!(
        "items={} trees={} build_seconds={seconds:.3} index={}",
        forest.len(),
        forest.n_trees(),
        index_path.display()
    );
    Ok(Status::Ok)
}

pub async fn query(args: QueryArgs, file: &FileConfig) -> anyhow::Result<Status> {
    let index_path = require(args.index, &file.index_path, "index")?;
    let store_path = require(args.store, &file.store_path, "store")?;
    let k = pick(args.k, &file.k).unwrap_or(service::DEFAULT_K);
    let engine = SearchEngine::load(
        &index_path,
        &store_path,
        file.provider.clone(),
        EngineOptions {
            search_budget: pick(args.budget, &file.search_budget),
            url_template: file.url_template.clone(),
        },
    )?;
    let request = match (args.image, args.id) {
        (Some(path), _) => {
            let bytes = std::fs::read(&path)
                .with_context(|| format!("cannot read image {}", path.display()))?;
            SearchRequest::by_image(bytes, k)
        }
        (None, Some(id)) => {
            let embedding = engine.store().embedding(id)?;
            let mut req = SearchRequest::by_embedding(embedding.into_vec(), k);
            if args.exclude_self {
                req.exclude_ids.push(id);
            }
            req
        }
        (None, None) => bail!("one of --image or --id is required"),
    };
    let response = engine.search(&request).await?;
    if args.json {
        print_json(&response)?;
    } else {
        let mut out = std::io::stdout().lock();
        for (rank, hit) in response.results.iter().enumerate() {
            writeln!(out, "{} {} {}", rank + 1, hit.distance, hit.url)?;
        }
    }
    Ok(Status::Ok)
}

pub fn eval(args: EvalArgs, file: &FileConfig) -> anyhow::Result<Status> {
    let index_path = require(args.index, &file.index_path, "index")?;
    let forest = ann::load_forest(&index_path)
        .with_context(|| format!("cannot load index {}", index_path.display()))?;
    if let Some(store_path) = pick(args.store, &file.store_path) {
        let store = EmbeddingStore::open_read_only(&store_path)
            .with_context(|| format!("cannot open store {}", store_path.display()))?;
        if store.len() != forest.len() || store.dimension() != forest.dimension() {
            bail!(
                "index ({} items, dimension {}) does not match store ({} items, dimension {})",
                forest.len(),
                forest.dimension(),
                store.len(),
                store.dimension()
            );
        }
    }
    let n_queries = pick(args.queries, &file.queries).unwrap_or(100);
    let k = pick(args.k, &file.k).unwrap_or(10);
    let budget = pick(args.budget, &file.search_budget);
    let seed = pick(args.seed, &file.seed).unwrap_or(0);
    let report = ann::evaluate(&forest, n_queries, k, budget, seed)?;
    if args.json {
        print_json(&report)?;
    } else {
        println!(
            "queries={} k={} budget={} recall@{}={:.4} min_recall={:.4} p50_ms={:.3} p95_ms={:.3} max_ms={:.3}",
            report.queries,
            report.k,
            report.search_budget,
            report.k,
            report.mean_recall,
            report.min_recall,
            report.p50_ms,
            report.p95_ms,
            report.max_ms
        );
    }
    Ok(Status::Ok)
}

pub async fn serve(args: ServeArgs, file: &FileConfig) -> anyhow::Result<Status> {
    let mut config = ServiceConfig::new(
        require(args.index, &file.index_path, "index")?,
        require(args.store, &file.store_path, "store")?,
    );
    config.provider = file.provider.clone();
    config.url_template = file.url_template.clone();
    if let Some(bind) = pick(args.bind, &file.bind) {
        config.bind = bind;
    }
    config.cors_origin = pick(args.cors_origin, &file.cors_origin);
    config.search_budget = pick(args.budget, &file.search_budget);
    config.validate()?;

    let reload_config = config.clone();
    service::serve(&config, shutdown_signal(), move |addr, state| {
        announce(addr);
        tokio::spawn(reload_on_hangup(state, reload_config));
    })
    .await?;
    tracing::info!("shut down");
    Ok(Status::Ok)
}

pub async fn mock_server(args: MockServerArgs) -> anyhow::Result<Status> {
    let mut config = match &args.mock_config {
        Some(path) => MockConfig::from_file(path)?,
        None => MockConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let addr: SocketAddr = args
        .bind
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("bind: `{}`: {e}", args.bind)))?;
    let server = MockTileServer::start(config, addr).await?;
    println!("{}", server.url_template());
    std::io::stdout().flush()?;
    shutdown_signal().await;
    server.shutdown().await;
    Ok(Status::Ok)
}

fn announce(addr: SocketAddr) {
    println!("listening on http://{addr}");
    let _ = std::io::stdout().flush();
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = terminate => {}
    }
}

/// Reloads the index and store on SIGHUP; a failed reload keeps serving the
/// previous snapshot.
async fn reload_on_hangup(state: std::sync::Arc<service::AppState>, config: ServiceConfig) {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let Ok(mut hangup) = signal(SignalKind::hangup()) else {
            return;
        };
        while hangup.recv().await.is_some() {
            match state.reload(&config) {
                Ok(()) => tracing::info!("reloaded index and store"),
                Err(e) => {
                    tracing::error!(error = %e, "reload failed; keeping the previous snapshot")
                }
            }
        }
    }
    #[cfg(not(unix))]
    let _ = (state, config);
}
