//! Deterministic WMTS tile server for offline tests and demos.
//!
//! Serves `GET /wmts/{layer}/default/{date}/{tms}/{matrix}/{row}/{col}.{png|jpg}`
//! with procedurally generated 256x256 tiles seeded per coordinate. Config
//! file (JSON):
//!
//! ```json
//! {"seed": 7, "failures": [{"row": 3, "col": 5, "status": 404}], "latency_ms": 0}
//! ```

use std::collections::HashMap;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::featurizer::{ImageFormat, TILE_SIZE};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockConfig {
    pub seed: u64,
    #[serde(default)]
    pub failures: Vec<MockFailure>,
    #[serde(default)]
    pub latency_ms: u64,
}

/// Every request for (`row`, `col`), on any layer or date, answers `status`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockFailure {
    pub row: u32,
    pub col: u32,
    pub status: u16,
}

impl MockConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

#[derive(Default)]
struct Stats {
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    total: AtomicUsize,
    hits: Mutex<HashMap<(u32, u32), usize>>,
}

struct MockState {
    config: MockConfig,
    stats: Stats,
}

struct InFlight<'a>(&'a Stats);

impl<'a> InFlight<'a> {
    fn enter(stats: &'a Stats) -> Self {
        let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
        InFlight(stats)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

/// A running mock server; shut down on [`MockTileServer::shutdown`] or drop.
pub struct MockTileServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl MockTileServer {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub async fn start(config: MockConfig, addr: SocketAddr) -> Result<Self> {
        let listener = TcpListener::bind(addr)
            .await
            .map_err(|source| Error::Bind {
                addr: addr.to_string(),
                source,
            })?;
        let addr = listener.local_addr().map_err(|source| Error::Bind {
            addr: addr.to_string(),
            source,
        })?;
        let state = Arc::new(MockState {
            config,
            stats: Stats::default(),
        });
        let app = Router::new()
            .route(
                "/wmts/{layer}/default/{date}/{tms}/{matrix}/{row}/{file}",
                get(serve_tile),
            )
            .with_state(state.clone());
        let (tx, rx) = oneshot::channel();
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        Ok(MockTileServer {
            addr,
            state,
            shutdown: Some(tx),
            task: Some(task),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// URL template matching this server's routes, PNG tiles.
    pub fn url_template(&self) -> String {
        format!(
            "http://{}/wmts/{{layer}}/default/{{date}}/250m/{{matrix}}/{{row}}/{{col}}.png",
            self.addr
        )
    }

    /// Highest number of simultaneously open requests seen so far.
    pub fn max_in_flight(&self) -> usize {
        self.state.stats.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn total_requests(&self) -> usize {
        self.state.stats.total.load(Ordering::SeqCst)
    }

    pub fn requests_for(&self, row: u32, col: u32) -> usize {
        let hits = self.state.stats.hits.lock().unwrap();
        hits.get(&(row, col)).copied().unwrap_or(0)
    }

    pub async fn shutdown(mut self) {
        self.stop();
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

impl Drop for MockTileServer {
    fn drop(&mut self) {
        self.stop();
    }
}

type TilePath = (String, String, String, u32, u32, String);

async fn serve_tile(
    State(state): State<Arc<MockState>>,
    UrlPath((layer, date, _tms, matrix, row, file)): UrlPath<TilePath>,
) -> Response {
    let stats = &state.stats;
    let _guard = InFlight::enter(stats);
    stats.total.fetch_add(1, Ordering::SeqCst);
    let Some((col, ext)) = file.split_once('.') else {
        return StatusCode::NOT_FOUND.into_response();
    };
    let Ok(col) = col.parse::<u32>() else {
        return StatusCode::NOT_FOUND.into_response();
    };
    *stats.hits.lock().unwrap().entry((row, col)).or_default() += 1;

    if state.config.latency_ms > 0 {
        tokio::time::sleep(Duration::from_millis(state.config.latency_ms)).await;
    }
    if let Some(f) = state
        .config
        .failures
        .iter()
        .find(|f| f.row == row && f.col == col)
    {
        let status = StatusCode::from_u16(f.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        return (status, "configured failure").into_response();
    }
    let format = match ext {
        "png" => ImageFormat::Png,
        "jpg" | "jpeg" => ImageFormat::Jpeg,
        _ => return StatusCode::NOT_FOUND.into_response(),
    };
    let seed = state.config.seed;
    let body = tokio::task::spawn_blocking(move || {
        render_tile(seed, &layer, &date, matrix, row, col, format)
    })
    .await
    .expect("tile renderer panicked");
    ([(header::CONTENT_TYPE, format.mime())], body).into_response()
}

/// Procedural tile for one coordinate: a colour field modulated by a plane
/// wave plus a few discs. Byte-identical for identical arguments.
pub fn render_tile(
    seed: u64,
    layer: &str,
    date: &str,
    matrix: u32,
    row: u32,
    col: u32,
    format: ImageFormat,
) -> Vec<u8> {
    let digest = Sha256::digest(format!("{seed}/{layer}/{date}/{matrix}/{row}/{col}"));
    let tile_seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
    let mut r = rng::stream(tile_seed, 0);
    let mut unit = || rng::unit_f64(&mut r);

    let base: [f64; 3] = [unit() * 255.0, unit() * 255.0, unit() * 255.0];
    let (fx, fy, phase) = (unit() * 0.08, unit() * 0.08, unit() * std::f64::consts::TAU);
    let amplitude = 20.0 + unit() * 60.0;
    let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let s = f64::from(TILE_SIZE);
            (
                unit() * s,
                unit() * s,
                10.0 + unit() * 60.0,
                [unit() * 255.0, unit() * 255.0, unit() * 255.0],
            )
        })
        .collect();

    let img = image::RgbImage::from_fn(TILE_SIZE, TILE_SIZE, |x, y| {
        let (xf, yf) = (f64::from(x), f64::from(y));
        let wave = amplitude * (fx * xf + fy * yf + phase).sin();
        let mut px = [base[0] + wave, base[1] + wave * 0.5, base[2] - wave];
        for (cx, cy, radius, colour) in &discs {
            if (xf - cx).powi(2) + (yf - cy).powi(2) < radius * radius {
                px = *colour;
            }
        }
        image::Rgb(px.map(|v| v.clamp(0.0, 255.0) as u8))
    });
    let mut out = Cursor::new(Vec::new());
    let format = match format {
        ImageFormat::Png => image::ImageFormat::Png,
        ImageFormat::Jpeg => image::ImageFormat::Jpeg,
    };
    img.write_to(&mut out, format).expect("encoding to memory");
    out.into_inner()
}
