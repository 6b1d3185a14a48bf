use std::time::{Duration, Instant};

use chrono::NaiveDate;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, RngSeed};
use tilesearch::ingest::mock::{MockConfig, MockFailure, MockTileServer};
use tilesearch::ingest::{crawl, grid_bounds, CrawlSpec};
use tilesearch::retry::RetryPolicy;
use tilesearch::store::{EmbeddingStore, TileKey, EMBEDDINGS_FILE, MANIFEST_FILE, RECORDS_FILE};

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        retries: 3,
        base_backoff: Duration::from_millis(2),
        timeout: Duration::from_secs(10),
    }
}

fn date(day: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, day).unwrap()
}

async fn server(config: MockConfig) -> MockTileServer {
    MockTileServer::start(config, "127.0.0.1:0".parse().unwrap())
        .await
        .unwrap()
}

fn spec(server: &MockTileServer, level: u32, rows: (u32, u32), cols: (u32, u32)) -> CrawlSpec {
    let mut s = CrawlSpec::new(
        "MODIS_Terra",
        vec![date(1)],
        level,
        rows,
        cols,
        server.url_template(),
    );
    s.retry = fast_retry();
    s
}

fn failing(row: u32, col: u32, status: u16) -> MockConfig {
    MockConfig {
        failures: vec![MockFailure { row, col, status }],
        ..MockConfig::default()
    }
}

fn snapshot(dir: &std::path::Path) -> Vec<Vec<u8>> {
    [EMBEDDINGS_FILE, RECORDS_FILE]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect()
}

#[tokio::test]
async fn two_by_two_crawl_then_rerun_is_idempotent() {
    let server = server(MockConfig::default()).await;
    let dir = tempfile::tempdir().unwrap();
    let mut store = EmbeddingStore::create(dir.path(), 128, &server.url_template()).unwrap();
    let s = spec(&server, 3, (2, 3), (4, 5));

    let first = crawl(&s, &mut store).await.unwrap();
    assert_eq!(
        (first.fetched, first.skipped_duplicates, first.failed),
        (4, 0, 0)
    );
    assert_eq!(store.len(), 4);
    let before = snapshot(dir.path());

    let second = crawl(&s, &mut store).await.unwrap();
    assert_eq!(
        (second.fetched, second.skipped_duplicates, second.failed),
        (0, 4, 0)
    );
    assert_eq!(store.len(), 4);
    assert_eq!(snapshot(dir.path()), before);
    assert_eq!(server.total_requests(), 4, "the rerun fetched nothing");
}

#[tokio::test]
async fn ids_follow_coordinate_order_regardless_of_completion_order() {
    let server = server(MockConfig {
        latency_ms: 15,
        ..MockConfig::default()
    })
    .await;
    let dir = tempfile::tempdir().unwrap();
    let mut store = EmbeddingStore::create(dir.path(), 128, &server.url_template()).unwrap();
    let mut s = spec(&server, 3, (0, 2), (0, 2));
    s.dates = vec![date(2), date(1)];
    s.max_parallel = 8;
    crawl(&s, &mut store).await.unwrap();
    let mut expected = Vec::new();
    for d in [date(2), date(1)] {
        for row in 0..=2 {
            for col in 0..=2 {
                expected.push(TileKey::new("MODIS_Terra", d, 3, row, col));
            }
        }
    }
    let got: Vec<TileKey> = store.records().iter().map(|r| r.key()).collect();
    assert_eq!(got, expected);
}

#[tokio::test]
async fn a_missing_tile_is_isolated_and_not_retried() {
    let server = server(failing(1, 1, 404)).await;
    let dir = tempfile::tempdir().unwrap();
    let mut store = EmbeddingStore::create(dir.path(), 128, &server.url_template()).unwrap();
    let report = crawl(&spec(&server, 3, (0, 2), (0, 2)), &mut store)
        .await
        .unwrap();
    assert_eq!((report.fetched, report.failed), (8, 1));
    assert_eq!(report.failures.len(), 1);
    assert_eq!((report.failures[0].row, report.failures[0].col), (1, 1));
    assert!(
        report.failures[0].url.ends_with("/3/1/1.png"),
        "{}",
        report.failures[0].url
    );
    assert_eq!(server.requests_for(1, 1), 1);
    assert_eq!(store.len(), 8);
}

#[tokio::test]
async fn server_errors_exhaust_the_retry_budget() {
    let server = server(failing(0, 1, 500)).await;
    let dir = tempfile::tempdir().unwrap();
    let mut store = EmbeddingStore::create(dir.path(), 128, &server.url_template()).unwrap();
    let report = crawl(&spec(&server, 2, (0, 1), (0, 1)), &mut store)
        .await
        .unwrap();
    assert_eq!((report.fetched, report.failed), (3, 1));
    assert_eq!(
        server.requests_for(0, 1),
        4,
        "one attempt plus three retries"
    );
    // A later crawl retries the failed tile (and only that one).
    let report = crawl(&spec(&server, 2, (0, 1), (0, 1)), &mut store)
        .await
        .unwrap();
    assert_eq!(
        (report.fetched, report.skipped_duplicates, report.failed),
        (0, 3, 1)
    );
}

#[tokio::test]
async fn in_flight_fetches_never_exceed_max_parallel() {
    for max_parallel in [1, 3] {
        let server = server(MockConfig {
            latency_ms: 20,
            ..MockConfig::default()
        })
        .await;
        let dir = tempfile::tempdir().unwrap();
        let mut store = EmbeddingStore::create(dir.path(), 128, &server.url_template()).unwrap();
        let mut s = spec(&server, 3, (0, 3), (0, 3));
        s.max_parallel = max_parallel;
        crawl(&s, &mut store).await.unwrap();
        assert!(
            server.max_in_flight() <= max_parallel,
            "{} > {max_parallel}",
            server.max_in_flight()
        );
        if max_parallel > 1 {
            assert!(server.max_in_flight() > 1, "fetches never overlapped");
        }
    }
}

#[tokio::test]
async fn min_delay_spaces_requests() {
    let server = server(MockConfig::default()).await;
    let dir = tempfile::tempdir().unwrap();
    let mut store = EmbeddingStore::create(dir.path(), 128, &server.url_template()).unwrap();
    let mut s = spec(&server, 2, (0, 1), (0, 2));
    s.min_delay = Some(Duration::from_millis(30));
    let started = Instant::now();
    crawl(&s, &mut store).await.unwrap();
    assert!(started.elapsed() >= Duration::from_millis(5 * 30));
}

#[tokio::test]
async fn full_level_four_grid() {
    let (rows, cols) = grid_bounds(4);
    assert_eq!((rows, cols), (16, 32));
    let full = |s: &MockTileServer| spec(s, 4, (0, rows as u32 - 1), (0, cols as u32 - 1));

    let clean = server(MockConfig::default()).await;
    let dir = tempfile::tempdir().unwrap();
    let mut store = EmbeddingStore::create(dir.path(), 128, &clean.url_template()).unwrap();
    let mut s = full(&clean);
    s.max_parallel = 8;
    let first = crawl(&s, &mut store).await.unwrap();
    assert_eq!((first.fetched, first.failed, store.len()), (512, 0, 512));
    let rerun = crawl(&s, &mut store).await.unwrap();
    assert_eq!((rerun.fetched, rerun.skipped_duplicates), (0, 512));
    let size = std::fs::metadata(dir.path().join(EMBEDDINGS_FILE))
        .unwrap()
        .len();
    assert_eq!(size, 512 * 128 * 4);

    let broken = server(failing(7, 19, 404)).await;
    let dir = tempfile::tempdir().unwrap();
    let mut store = EmbeddingStore::create(dir.path(), 128, &broken.url_template()).unwrap();
    let mut s = full(&broken);
    s.max_parallel = 8;
    let report = crawl(&s, &mut store).await.unwrap();
    assert_eq!((report.fetched, report.failed, store.len()), (511, 1, 511));
}

#[tokio::test]
async fn store_records_the_featurizer() {
    let server = server(MockConfig::default()).await;
    let dir = tempfile::tempdir().unwrap();
    let mut store = EmbeddingStore::create(dir.path(), 128, &server.url_template()).unwrap();
    crawl(&spec(&server, 1, (0, 0), (0, 0)), &mut store)
        .await
        .unwrap();
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["featurizer"]["kind"], "reference");
    assert!(
        manifest["featurizer"]["projection_sha256"]
            .as_str()
            .unwrap()
            .len()
            == 64
    );

    // A crawl with a different featurizer must not mix embedding spaces.
    let mut other = spec(&server, 1, (0, 0), (1, 1));
    other.provider = tilesearch::featurizer::ProviderDescriptor::reference(12345);
    assert!(crawl(&other, &mut store).await.is_err());
}

#[tokio::test]
async fn invalid_specs_are_rejected_before_fetching() {
    let server = server(MockConfig::default()).await;
    let dir = tempfile::tempdir().unwrap();
    let mut store = EmbeddingStore::create(dir.path(), 128, &server.url_template()).unwrap();
    let out_of_grid = spec(&server, 2, (0, 4), (0, 0));
    let mut no_dates = spec(&server, 2, (0, 0), (0, 0));
    no_dates.dates.clear();
    let mut dup_dates = spec(&server, 2, (0, 0), (0, 0));
    dup_dates.dates = vec![date(1), date(1)];
    let mut bad_dim = spec(&server, 2, (0, 0), (0, 0));
    bad_dim.provider =
        tilesearch::featurizer::ProviderDescriptor::external("http://127.0.0.1:9", 64);
    for s in [out_of_grid, no_dates, dup_dates, bad_dim] {
        assert!(crawl(&s, &mut store).await.is_err());
    }
    assert_eq!(server.total_requests(), 0);
}

#[tokio::test]
async fn mock_tiles_are_byte_identical_across_requests() {
    let server = server(MockConfig {
        seed: 9,
        ..MockConfig::default()
    })
    .await;
    let url = server
        .url_template()
        .replace("{layer}", "L")
        .replace("{date}", "2020-01-01")
        .replace("{matrix}", "4")
        .replace("{row}", "3")
        .replace("{col}", "7");
    let a = reqwest::get(&url).await.unwrap().bytes().await.unwrap();
    let b = reqwest::get(&url).await.unwrap().bytes().await.unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

fn config(cases: u32) -> Config {
    Config {
        cases,
        rng_algorithm: RngAlgorithm::ChaCha,
        rng_seed: RngSeed::Fixed(0x1a6e57),
        failure_persistence: None,
        ..Config::default()
    }
}

proptest! {
    #![proptest_config(config(12))]

    /// fetched + skipped + failed always equals the coordinate count, on the
    /// first run and on a rerun over an overlapping region.
    #[test]
    fn report_accounts_for_every_coordinate(
        r0 in 0u32..4, rh in 0u32..3, c0 in 0u32..6, ch in 0u32..3,
        fails in prop::collection::vec((0u32..8, 0u32..16, prop::sample::select(vec![404u16, 500, 503])), 0..4),
        n_dates in 1u32..3,
        shift in 0u32..2,
    ) {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async {
            let config = MockConfig {
                failures: fails.iter().map(|&(row, col, status)| MockFailure { row, col, status }).collect(),
                ..MockConfig::default()
            };
            let server = server(config).await;
            let dir = tempfile::tempdir().unwrap();
            let mut store = EmbeddingStore::create(dir.path(), 128, &server.url_template()).unwrap();
            let mut s = spec(&server, 3, (r0, r0 + rh), (c0, c0 + ch));
            s.retry.retries = 1;
            s.dates = (1..=n_dates).map(date).collect();
            let a = crawl(&s, &mut store).await.unwrap();
            prop_assert_eq!(a.total(), s.coordinate_count());
            prop_assert_eq!(a.failed, a.failures.len());
            prop_assert_eq!(store.len(), a.fetched);

            let mut t = spec(&server, 3, (r0 + shift, r0 + rh + shift), (c0, c0 + ch));
            t.retry.retries = 1;
            t.dates = s.dates.clone();
            let b = crawl(&t, &mut store).await.unwrap();
            prop_assert_eq!(b.total(), t.coordinate_count());
            prop_assert_eq!(store.len(), a.fetched + b.fetched);
            Ok(())
        })?;
    }
}
