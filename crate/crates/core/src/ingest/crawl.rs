use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use super::grid_bounds;
use crate::featurizer::{Featurizer, ImageFormat, ProviderDescriptor};
use crate::retry::{self, Attempt, RetryPolicy};
use crate::store::{fill_template, validate_template, EmbeddingStore, TileKey};
use crate::{Embedding, Error};

/// What to crawl. Ranges are inclusive.
#[derive(Clone, Debug)]
pub struct CrawlSpec {
    pub layer: String,
    pub dates: Vec<NaiveDate>,
    pub tile_matrix: u32,
    pub row_range: (u32, u32),
    pub col_range: (u32, u32),
    pub url_template: String,
    pub max_parallel: usize,
    pub provider: ProviderDescriptor,
    pub retry: RetryPolicy,
    /// Minimum spacing between consecutive tile requests.
    pub min_delay: Option<Duration>,
}

impl CrawlSpec {
    pub fn new(
        layer: impl Into<String>,
        dates: Vec<NaiveDate>,
        tile_matrix: u32,
        row_range: (u32, u32),
        col_range: (u32, u32),
        url_template: impl Into<String>,
    ) -> Self {
        CrawlSpec {
            layer: layer.into(),
            dates,
            tile_matrix,
            row_range,
            col_range,
            url_template: url_template.into(),
            max_parallel: 4,
            provider: ProviderDescriptor::default(),
            retry: RetryPolicy::default(),
            min_delay: None,
        }
    }

    /// Number of (date, row, col) coordinates covered.
    pub fn coordinate_count(&self) -> usize {
        let rows = (self.row_range.1 - self.row_range.0) as usize + 1;
        let cols = (self.col_range.1 - self.col_range.0) as usize + 1;
        self.dates.len() * rows * cols
    }

    pub fn validate(&self) -> Result<(), Error> {
        // Layer names are spliced into URL paths verbatim.
        let layer_ok = !self.layer.is_empty()
            && self
                .layer
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'));
        if !layer_ok {
            return Err(Error::invalid(format!(
                "layer {:?} must be non-empty and use only letters, digits, '_', '-' or '.'",
                self.layer
            )));
        }
        if self.dates.is_empty() {
            return Err(Error::invalid("crawl needs at least one date"));
        }
        let mut sorted = self.dates.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.dates.len() {
            return Err(Error::invalid("crawl dates contain duplicates"));
        }
        if self.tile_matrix > 30 {
            return Err(Error::invalid(format!(
                "tile matrix {} is out of range",
                self.tile_matrix
            )));
        }
        let (rows, cols) = grid_bounds(self.tile_matrix);
        for (name, (lo, hi), limit) in
            [("row", self.row_range, rows), ("col", self.col_range, cols)]
        {
            if lo > hi {
                return Err(Error::invalid(format!("{name} range {lo}..={hi} is empty")));
            }
            if u64::from(hi) >= limit {
                return Err(Error::invalid(format!(
                    "{name} {hi} is outside the level-{} grid ({limit} {name}s)",
                    self.tile_matrix
                )));
            }
        }
        if self.max_parallel == 0 {
            return Err(Error::invalid("max_parallel must be positive"));
        }
        validate_template(&self.url_template)?;
        self.provider.validate()
    }

    fn keys(&self) -> Vec<TileKey> {
        let mut out = Vec::with_capacity(self.coordinate_count());
        for &date in &self.dates {
            for row in self.row_range.0..=self.row_range.1 {
                for col in self.col_range.0..=self.col_range.1 {
                    out.push(TileKey::new(
                        self.layer.clone(),
                        date,
                        self.tile_matrix,
                        row,
                        col,
                    ));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileFailure {
    pub url: String,
    pub date: NaiveDate,
    pub row: u32,
    pub col: u32,
    pub error: String,
}

/// Per-crawl accounting; `fetched + skipped_duplicates + failed` always
/// equals the number of coordinates in the spec (or, for an aborted crawl,
/// the number processed before the abort).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CrawlReport {
    pub fetched: usize,
    pub skipped_duplicates: usize,
    pub failed: usize,
    pub failures: Vec<TileFailure>,
    pub elapsed: f64,
}

impl CrawlReport {
    pub fn total(&self) -> usize {
        self.fetched + self.skipped_duplicates + self.failed
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("invalid crawl: {0}")]
    Invalid(#[source] Error),
    #[error("crawl aborted after {} tiles: {source}", report.total())]
    Aborted {
        report: CrawlReport,
        #[source]
        source: Error,
    },
}

/// Fetches, featurizes and stores every tile in `spec` that the store does
/// not already hold. Individual tile failures are recorded in the report; only
/// a store write failure aborts the crawl.
pub async fn crawl(
    spec: &CrawlSpec,
    store: &mut EmbeddingStore,
) -> Result<CrawlReport, IngestError> {
    let started = Instant::now();
    spec.validate().map_err(IngestError::Invalid)?;
    if spec.provider.dimension != store.dimension() {
        return Err(IngestError::Invalid(Error::invalid(format!(
            "provider produces {} dimensions, store holds {}",
            spec.provider.dimension,
            store.dimension()
        ))));
    }
    let featurizer =
        Featurizer::with_retry(spec.provider.clone(), spec.retry).map_err(IngestError::Invalid)?;
    let stamp = spec.provider.stamp();
    if let Some(existing) = &store.manifest().featurizer {
        if *existing != stamp {
            return Err(IngestError::Invalid(Error::invalid(format!(
                "store was built with featurizer {existing:?}, crawl uses {stamp:?}"
            ))));
        }
    } else {
        store
            .set_featurizer(stamp)
            .map_err(|source| IngestError::Aborted {
                report: CrawlReport::default(),
                source,
            })?;
    }

    let mut report = CrawlReport::default();
    let pending: Vec<TileKey> = spec
        .keys()
        .into_iter()
        .filter(|k| {
            let dup = store.contains(k);
            report.skipped_duplicates += usize::from(dup);
            !dup
        })
        .collect();

    let client = reqwest::Client::new();
    let gate = Arc::new(Mutex::new(None::<Instant>));
    let fetcher = Fetcher {
        client: &client,
        featurizer: &featurizer,
        retry: &spec.retry,
        min_delay: spec.min_delay,
        gate: &gate,
    };
    let fetcher = &fetcher;

    // `buffered` keeps at most `max_parallel` tiles in flight and yields them
    // in coordinate order, so item ids do not depend on completion order.
    let mut results = stream::iter(pending)
        .map(|key| async move {
            let url = fill_template(&spec.url_template, &key).expect("template validated");
            let outcome = fetcher.tile(&url).await;
            (key, url, outcome)
        })
        .buffered(spec.max_parallel);

    while let Some((key, url, outcome)) = results.next().await {
        match outcome {
            Ok(embedding) => match store.insert(key.clone(), &embedding) {
                Ok(_) => report.fetched += 1,
                Err(Error::DuplicateRecord(_)) => report.skipped_duplicates += 1,
                Err(source) => {
                    report.elapsed = started.elapsed().as_secs_f64();
                    return Err(IngestError::Aborted { report, source });
                }
            },
            Err(e) => {
                tracing::warn!(%url, error = %e, "tile failed");
                report.failed += 1;
                report.failures.push(TileFailure {
                    url,
                    date: key.date,
                    row: key.row,
                    col: key.col,
                    error: e.to_string(),
                });
            }
        }
    }
    report.elapsed = started.elapsed().as_secs_f64();
    tracing::info!(
        fetched = report.fetched,
        skipped = report.skipped_duplicates,
        failed = report.failed,
        elapsed = report.elapsed,
        "crawl finished"
    );
    Ok(report)
}

struct Fetcher<'a> {
    client: &'a reqwest::Client,
    featurizer: &'a Featurizer,
    retry: &'a RetryPolicy,
    min_delay: Option<Duration>,
    gate: &'a Arc<Mutex<Option<Instant>>>,
}

impl Fetcher<'_> {
    async fn tile(&self, url: &str) -> Result<Embedding, Error> {
        let (bytes, declared) = self.fetch(url).await?;
        let format = declared
            .or_else(|| ImageFormat::detect(&bytes))
            .ok_or_else(|| Error::InvalidImage(format!("{url}: unrecognized image format")))?;
        self.featurizer.embed_bytes(&bytes, format).await
    }

    async fn pace(&self) {
        let Some(delay) = self.min_delay else { return };
        let mut last = self.gate.lock().await;
        if let Some(prev) = *last {
            let ready = prev + delay;
            let now = Instant::now();
            if ready > now {
                tokio::time::sleep(ready - now).await;
            }
        }
        *last = Some(Instant::now());
    }

    /// GET with retries on transport errors and 5xx. 404 and other client
    /// errors fail immediately.
    async fn fetch(&self, url: &str) -> Result<(Vec<u8>, Option<ImageFormat>), Error> {
        retry::run(self.retry, || async {
            self.pace().await;
            let sent = self
                .client
                .get(url)
                .timeout(self.retry.timeout)
                .send()
                .await;
            let response = match sent {
                Err(e) => return Attempt::Retry(Error::TileUnavailable(format!("{url}: {e}"))),
                Ok(r) => r,
            };
            let status = response.status();
            if status.is_server_error() {
                return Attempt::Retry(Error::TileUnavailable(format!("{url}: HTTP {status}")));
            }
            if !status.is_success() {
                return Attempt::Fail(Error::TileUnavailable(format!("{url}: HTTP {status}")));
            }
            let declared = response
                .headers()
                .get(reqwest::header::CONTENT_TYPE)
                .and_then(|v| v.to_str().ok())
                .and_then(ImageFormat::from_mime);
            match response.bytes().await {
                Ok(b) => Attempt::Done((b.to_vec(), declared)),
                Err(e) => Attempt::Retry(Error::TileUnavailable(format!("{url}: {e}"))),
            }
        })
        .await
    }
}
