mod support;

use std::path::Path;

use serde_json::{json, Value};
use support::{code, gaussian_items, run, stderr, stdout, write_store, Served};
use tilesearch::featurizer::ImageFormat;
use tilesearch::ingest::mock::{render_tile, MockConfig, MockFailure, MockTileServer};
use tilesearch::service::SearchResponse;

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

async fn mock(failures: Vec<MockFailure>) -> MockTileServer {
    let config = MockConfig {
        failures,
        ..MockConfig::default()
    };
    MockTileServer::start(config, "127.0.0.1:0".parse().unwrap())
        .await
        .unwrap()
}

fn ingest(template: &str, store: &Path, rows: &str, cols: &str) -> std::process::Output {
    run(&[
        "ingest",
        "--layer",
        "L",
        "--dates",
        "2020-01-01",
        "--level",
        "3",
        "--rows",
        rows,
        "--cols",
        cols,
        "--template",
        template,
        "--store",
        p(store),
    ])
}

#[tokio::test(flavor = "multi_thread")]
async fn ingest_reports_and_exit_codes() {
    let server = mock(vec![MockFailure {
        row: 1,
        col: 1,
        status: 404,
    }])
    .await;
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let template = server.url_template();

    let t = template.clone();
    let s = store.clone();
    let out = tokio::task::spawn_blocking(move || ingest(&t, &s, "2-3", "2-3"))
        .await
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(
        (report["fetched"].as_u64(), report["failed"].as_u64()),
        (Some(4), Some(0))
    );

    let (t, s) = (template.clone(), store.clone());
    let out = tokio::task::spawn_blocking(move || ingest(&t, &s, "2-3", "2-3"))
        .await
        .unwrap();
    assert_eq!(code(&out), 0);
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(
        (
            report["fetched"].as_u64(),
            report["skipped_duplicates"].as_u64()
        ),
        (Some(0), Some(4))
    );

    let (t, s) = (template.clone(), store.clone());
    let out = tokio::task::spawn_blocking(move || ingest(&t, &s, "0-1", "0-1"))
        .await
        .unwrap();
    assert_eq!(code(&out), 2, "partial failure");
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(
        (report["fetched"].as_u64(), report["failed"].as_u64()),
        (Some(3), Some(1))
    );
    assert!(report["failures"][0]["url"]
        .as_str()
        .unwrap()
        .ends_with("/3/1/1.png"));

    let t = template.clone();
    let out =
        tokio::task::spawn_blocking(move || ingest(&t, Path::new("/dev/null/store"), "0", "0"))
            .await
            .unwrap();
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("error"), "{}", stderr(&out));
}

#[test]
fn usage_errors_are_fatal_not_partial() {
    let out = run(&["build", "--trees", "many"]);
    assert_eq!(code(&out), 1);
    let out = run(&["build"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--store"), "{}", stderr(&out));
    assert_eq!(code(&run(&["--help"])), 0);
    let out = run(&[
        "query", "--index", "x", "--store", "y", "--id", "1", "--image", "z",
    ]);
    assert_eq!(code(&out), 1, "query sources are mutually exclusive");
}

#[test]
fn build_is_deterministic_and_handles_empty_stores() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    write_store(&store, &gaussian_items(4, 16, 1));
    let (a, b) = (dir.path().join("a.tsf"), dir.path().join("b.tsf"));
    for index in [&a, &b] {
        let out = run(&[
            "build",
            "--store",
            p(&store),
            "--index",
            p(index),
            "--seed",
            "7",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(
            stdout(&out).contains("items=4 trees=50"),
            "{}",
            stdout(&out)
        );
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(tilesearch::ann::load_forest(&a).unwrap().len(), 4);

    let empty = dir.path().join("empty");
    tilesearch::store::EmbeddingStore::create(
        &empty,
        128,
        "http://t/{layer}/{date}/{matrix}/{row}/{col}",
    )
    .unwrap();
    let index = dir.path().join("empty.tsf");
    let out = run(&["build", "--store", p(&empty), "--index", p(&index)]);
    assert_eq!(code(&out), 0);
    assert!(stderr(&out).contains("empty"), "{}", stderr(&out));
    assert!(tilesearch::ann::load_forest(&index).unwrap().is_empty());
}

fn built(dir: &Path, n: usize, dim: usize, seed: u64) -> (String, String) {
    let store = dir.join("store");
    write_store(&store, &gaussian_items(n, dim, seed));
    let index = dir.join("index.tsf");
    let out = run(&[
        "build",
        "--store",
        p(&store),
        "--index",
        p(&index),
        "--trees",
        "10",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    (p(&index).to_string(), p(&store).to_string())
}

#[test]
fn query_by_id_prints_ranked_urls() {
    let dir = tempfile::tempdir().unwrap();
    let (index, store) = built(dir.path(), 50, 8, 2);
    let out = run(&[
        "query", "--index", &index, "--store", &store, "--id", "5", "--k", "4",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "1 0 http://tiles.test/L/2020-01-01/8/0/5.png");
    let distances: Vec<f64> = lines
        .iter()
        .map(|l| l.split(' ').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(distances.windows(2).all(|w| w[0] <= w[1]));

    let out = run(&[
        "query",
        "--index",
        &index,
        "--store",
        &store,
        "--id",
        "5",
        "--k",
        "4",
        "--exclude-self",
    ]);
    let text = stdout(&out);
    assert!(!text.contains("/8/0/5.png"), "{text}");
    let first = text.lines().next().unwrap();
    assert_eq!(first.strip_prefix("1 "), lines[1].strip_prefix("2 "));

    let out = run(&[
        "query", "--index", &index, "--store", &store, "--id", "5", "--json",
    ]);
    let parsed: SearchResponse = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(parsed.results.len(), 20);
    assert_eq!(parsed.results[0].item_id, 5);

    let out = run(&["query", "--index", &index, "--store", &store, "--id", "50"]);
    assert_eq!(code(&out), 1);
    let out = run(&[
        "query",
        "--index",
        &index,
        "--store",
        &store,
        "--image",
        "/nonexistent.png",
    ]);
    assert_eq!(code(&out), 1);
    assert!(
        stderr(&out).contains("cannot read image"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn query_by_image_finds_the_crawled_tile() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let server = rt.block_on(mock(vec![]));
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let out = ingest(&server.url_template(), &store, "0-2", "0-2");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let index = dir.path().join("index.tsf");
    assert_eq!(
        code(&run(&["build", "--store", p(&store), "--index", p(&index)])),
        0
    );

    let snip = dir.path().join("snip.jpg");
    std::fs::write(
        &snip,
        render_tile(0, "L", "2020-01-01", 3, 1, 2, ImageFormat::Png),
    )
    .unwrap();
    let out = run(&[
        "query",
        "--index",
        p(&index),
        "--store",
        p(&store),
        "--image",
        p(&snip),
        "--k",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let first = stdout(&out).lines().next().unwrap().to_string();
    assert!(
        first.starts_with("1 0 ") && first.ends_with("/3/1/2.png"),
        "{first}"
    );

    std::fs::write(&snip, b"not an image").unwrap();
    let out = run(&[
        "query",
        "--index",
        p(&index),
        "--store",
        p(&store),
        "--image",
        p(&snip),
    ]);
    assert_eq!(code(&out), 1);
    drop(server);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let (index, store) = built(dir.path(), 40, 8, 3);
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        json!({"index_path": index, "store_path": store, "k": 3}).to_string(),
    )
    .unwrap();
    let out = run(&["query", "--config", p(&config), "--id", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 3);
    let out = run(&["query", "--config", p(&config), "--id", "1", "--k", "5"]);
    assert_eq!(stdout(&out).lines().count(), 5);

    std::fs::write(&config, r#"{"index_path": "x", "kk": 3}"#).unwrap();
    let out = run(&["query", "--config", p(&config), "--id", "1"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("kk"), "{}", stderr(&out));
}

#[test]
fn eval_with_full_budget_has_perfect_recall() {
    let dir = tempfile::tempdir().unwrap();
    let (index, store) = built(dir.path(), 300, 16, 4);
    let out = run(&[
        "eval",
        "--index",
        &index,
        "--store",
        &store,
        "--queries",
        "30",
        "--k",
        "10",
        "--budget",
        "300",
        "--json",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["mean_recall"].as_f64(), Some(1.0));
    assert_eq!(report["queries"].as_u64(), Some(30));
    assert!(report["p95_ms"].as_f64().unwrap() >= report["p50_ms"].as_f64().unwrap());

    let other = dir.path().join("other");
    write_store(&other, &gaussian_items(10, 16, 5));
    let out = run(&["eval", "--index", &index, "--store", p(&other)]);
    assert_eq!(code(&out), 1, "mismatched store is rejected");
}

#[test]
fn cli_query_and_service_agree_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (index, store) = built(dir.path(), 1000, 32, 6);
    let served = Served::start(&[
        "--index",
        &index,
        "--store",
        &store,
        "--bind",
        "127.0.0.1:0",
    ])
    .unwrap();
    let client = reqwest::blocking::Client::new();
    let opened = tilesearch::store::EmbeddingStore::open_read_only(&store).unwrap();
    for id in [0u64, 17, 500, 999] {
        let out = run(&[
            "query",
            "--index",
            &index,
            "--store",
            &store,
            "--id",
            &id.to_string(),
            "--k",
            "10",
            "--json",
        ]);
        let cli: SearchResponse = serde_json::from_str(&stdout(&out)).unwrap();
        let embedding = opened.embedding(id).unwrap();
        let svc: SearchResponse = client
            .post(served.url("/v1/search"))
            .json(&json!({"embedding": embedding.as_slice(), "k": 10}))
            .send()
            .unwrap()
            .json()
            .unwrap();
        assert_eq!(cli.results, svc.results, "item {id}");
        assert_eq!(cli.results.len(), 10);
    }
}

#[test]
fn serve_health_errors_and_shutdown() {
    let dir = tempfile::tempdir().unwrap();
    let (index, store) = built(dir.path(), 20, 8, 7);
    let mut served = Served::start(&[
        "--index",
        &index,
        "--store",
        &store,
        "--bind",
        "127.0.0.1:0",
    ])
    .unwrap();
    let health: Value = reqwest::blocking::get(served.url("/v1/health"))
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(health["index_items"], 20);
    assert_eq!(health["store_count"], 20);

    // A second server on the same port cannot bind.
    let addr = served.base_url.trim_start_matches("http://").to_string();
    let clash = Served::start(&["--index", &index, "--store", &store, "--bind", &addr]);
    assert!(clash.is_err());

    #[cfg(unix)]
    {
        let pid = served.child.id().to_string();
        assert!(std::process::Command::new("kill")
            .args(["-TERM", &pid])
            .status()
            .unwrap()
            .success());
        let status = served.child.wait().unwrap();
        assert_eq!(status.code(), Some(0), "clean shutdown on SIGTERM");
    }
}

#[test]
fn serve_rejects_bad_config_with_field_names() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("serve.json");
    std::fs::write(
        &config,
        r#"{"index_path": "i", "store_path": "s", "bind": "not-an-address"}"#,
    )
    .unwrap();
    let out = run(&["serve", "--config", p(&config)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("bind"), "{}", stderr(&out));

    std::fs::write(
        &config,
        r#"{"index_path": "i", "store_path": "s", "cors": "*"}"#,
    )
    .unwrap();
    let out = run(&["serve", "--config", p(&config)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("cors"), "{}", stderr(&out));

    let out = run(&[
        "serve",
        "--index",
        "/nonexistent.tsf",
        "--store",
        "/nonexistent",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn serve_over_an_empty_index_returns_empty_results() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    tilesearch::store::EmbeddingStore::create(
        &store,
        128,
        "http://t/{layer}/{date}/{matrix}/{row}/{col}",
    )
    .unwrap();
    let index = dir.path().join("index.tsf");
    assert_eq!(
        code(&run(&["build", "--store", p(&store), "--index", p(&index)])),
        0
    );
    let served = Served::start(&[
        "--index",
        p(&index),
        "--store",
        p(&store),
        "--bind",
        "127.0.0.1:0",
    ])
    .unwrap();
    let resp: Value = reqwest::blocking::Client::new()
        .post(served.url("/v1/search"))
        .json(&json!({"embedding": vec![0.3f32; 128]}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(resp["results"], json!([]));
}

#[test]
fn mock_server_subcommand_prints_its_template() {
    let mut child = std::process::Command::new(support::BIN)
        .args(["mock-server", "--seed", "3"])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    std::io::BufRead::read_line(
        &mut std::io::BufReader::new(child.stdout.take().unwrap()),
        &mut line,
    )
    .unwrap();
    let url = line
        .trim()
        .replace("{layer}", "L")
        .replace("{date}", "2020-01-01")
        .replace("{matrix}", "2")
        .replace("{row}", "0")
        .replace("{col}", "1");
    let body = reqwest::blocking::get(&url).unwrap().bytes().unwrap();
    assert_eq!(
        body.to_vec(),
        render_tile(3, "L", "2020-01-01", 2, 0, 1, ImageFormat::Png)
    );
    child.kill().unwrap();
    child.wait().unwrap();
}
