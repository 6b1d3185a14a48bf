use std::future::Future;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use super::config::ServiceConfig;
use super::engine::{
    EngineOptions, Health, RankMode, SearchEngine, SearchRequest, SearchResponse, TileMeta,
};
use crate::{Error, Result};

/// Request bodies above this size are rejected before parsing.
const BODY_LIMIT: usize = 16 * 1024 * 1024;

/// Shared state: the current engine snapshot. Reloading swaps the `Arc`, so
/// in-flight requests finish on the snapshot they started with.
#[derive(Debug)]
pub struct AppState {
    engine: RwLock<Arc<SearchEngine>>,
}

impl AppState {
    pub fn new(engine: SearchEngine) -> Arc<Self> {
        Arc::new(AppState {
            engine: RwLock::new(Arc::new(engine)),
        })
    }

    pub fn engine(&self) -> Arc<SearchEngine> {
        self.engine
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .clone()
    }

    pub fn swap(&self, engine: SearchEngine) {
        *self.engine.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(engine);
    }

    /// Loads a fresh snapshot from `config`; the old one stays in place if
    /// loading fails.
    pub fn reload(&self, config: &ServiceConfig) -> Result<()> {
        self.swap(load_engine(config)?);
        Ok(())
    }
}

fn load_engine(config: &ServiceConfig) -> Result<SearchEngine> {
    SearchEngine::load(
        &config.index_path,
        &config.store_path,
        config.provider.clone(),
        EngineOptions {
            search_budget: config.search_budget,
            url_template: config.url_template.clone(),
        },
    )
}

struct ApiError {
    status: StatusCode,
    error: Error,
}

impl ApiError {
    fn query(error: Error) -> Self {
        let status = match &error {
            Error::InvalidArgument(_)
            | Error::InvalidImage(_)
            | Error::NotFound(_)
            | Error::DegenerateQuery(_) => StatusCode::BAD_REQUEST,
            Error::ProviderUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            Error::ProviderContractViolation(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError { status, error }
    }

    fn lookup(error: Error) -> Self {
        let status = match &error {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError { status, error }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            error: Error::InvalidArgument(message.into()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::warn!(status = %self.status, error = %self.error, "request failed");
        }
        let body = serde_json::json!({
            "error": self.error.code(),
            "message": self.error.to_string(),
        });
        (self.status, Json(body)).into_response()
    }
}

fn json_body(
    body: std::result::Result<Json<SearchRequest>, JsonRejection>,
) -> std::result::Result<SearchRequest, ApiError> {
    body.map(|Json(r)| r)
        .map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn search(
    State(state): State<Arc<AppState>>,
    request: Request,
) -> std::result::Result<Json<SearchResponse>, ApiError> {
    let is_multipart = request
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let req = if is_multipart {
        let multipart = Multipart::from_request(request, &())
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        multipart_request(multipart).await?
    } else {
        json_body(Json::from_request(request, &()).await)?
    };
    let engine = state.engine();
    engine.search(&req).await.map(Json).map_err(ApiError::query)
}

/// Multipart fields: `image` (file), and optional `k`, `exclude_ids`
/// (JSON array or comma-separated) and `rank_mode`.
async fn multipart_request(
    mut multipart: Multipart,
) -> std::result::Result<SearchRequest, ApiError> {
    let mut req = SearchRequest::default();
    let bad = |e: axum::extract::multipart::MultipartError| ApiError::bad_request(e.body_text());
    while let Some(field) = multipart.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "image" => req.image = Some(field.bytes().await.map_err(bad)?.to_vec()),
            "k" => {
                let text = field.text().await.map_err(bad)?;
                req.k = text
                    .trim()
                    .parse()
                    .map_err(|_| ApiError::bad_request(format!("k: not an integer: `{text}`")))?;
            }
            "exclude_ids" => {
                let text = field.text().await.map_err(bad)?;
                req.exclude_ids = parse_id_list(&text).ok_or_else(|| {
                    ApiError::bad_request(format!("exclude_ids: cannot parse `{text}`"))
                })?;
            }
            "rank_mode" => {
                let text = field.text().await.map_err(bad)?;
                req.rank_mode = serde_json::from_value::<RankMode>(serde_json::Value::String(
                    text.trim().into(),
                ))
                .map_err(|_| ApiError::bad_request(format!("rank_mode: unknown mode `{text}`")))?;
            }
            other => {
                return Err(ApiError::bad_request(format!(
                    "unknown multipart field `{other}`"
                )))
            }
        }
    }
    if req.image.is_none() {
        return Err(ApiError::bad_request(
            "multipart upload needs an `image` field",
        ));
    }
    Ok(req)
}

fn parse_id_list(text: &str) -> Option<Vec<u64>> {
    let text = text.trim();
    if text.starts_with('[') {
        return serde_json::from_str(text).ok();
    }
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().ok())
        .collect()
}

async fn refine(
    State(state): State<Arc<AppState>>,
    body: std::result::Result<Json<SearchRequest>, JsonRejection>,
) -> std::result::Result<Json<SearchResponse>, ApiError> {
    let req = json_body(body)?;
    let engine = state.engine();
    engine.refine(&req).await.map(Json).map_err(ApiError::query)
}

async fn tile(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> std::result::Result<Json<TileMeta>, ApiError> {
    let id: u64 = id.parse().map_err(|_| {
        ApiError::bad_request(format!("tile id must be an unsigned integer, got `{id}`"))
    })?;
    state
        .engine()
        .tile_meta(id)
        .map(Json)
        .map_err(ApiError::lookup)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(state.engine().health())
}

/// Builds the `/v1` router. `cors_origin` of `"*"` allows any origin.
pub fn router(state: Arc<AppState>, cors_origin: Option<&str>) -> Result<Router> {
    let mut app = Router::new()
        .route("/v1/search", post(search))
        .route("/v1/refine", post(refine))
        .route("/v1/tiles/{id}", get(tile))
        .route("/v1/health", get(health))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state);
    if let Some(origin) = cors_origin {
        let allow = if origin == "*" {
            AllowOrigin::any()
        } else {
            let value = HeaderValue::from_str(origin).map_err(|_| {
                Error::InvalidConfig(format!("cors_origin: invalid origin `{origin}`"))
            })?;
            AllowOrigin::exact(value)
        };
        app = app.layer(
            CorsLayer::new()
                .allow_origin(allow)
                .allow_methods([Method::GET, Method::POST])
                .allow_headers(Any),
        );
    }
    Ok(app)
}

/// A server running on a background task.
#[derive(Debug)]
pub struct ServiceHandle {
    addr: SocketAddr,
    state: Arc<AppState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    /// Stops accepting connections and waits for in-flight requests.
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

/// Binds `bind` (port 0 picks a free port) and serves `engine` in the
/// background.
pub async fn spawn(
    engine: SearchEngine,
    bind: &str,
    cors_origin: Option<&str>,
) -> Result<ServiceHandle> {
    let state = AppState::new(engine);
    let app = router(state.clone(), cors_origin)?;
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|source| Error::Bind {
            addr: bind.to_string(),
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| Error::Bind {
        addr: bind.to_string(),
        source,
    })?;
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = rx.await;
            })
            .await
    });
    Ok(ServiceHandle {
        addr,
        state,
        shutdown: Some(tx),
        task: Some(task),
    })
}

/// Loads the configured snapshot and serves it until `shutdown` resolves.
/// `on_ready` receives the bound address and the state (for reloads).
pub async fn serve<F>(
    config: &ServiceConfig,
    shutdown: F,
    on_ready: impl FnOnce(SocketAddr, Arc<AppState>),
) -> Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    config.validate()?;
    let handle = spawn(
        load_engine(config)?,
        &config.bind,
        config.cors_origin.as_deref(),
    )
    .await?;
    on_ready(handle.addr(), handle.state().clone());
    shutdown.await;
    handle.shutdown().await;
    Ok(())
}
