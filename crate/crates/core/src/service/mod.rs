//! Search service: the engine shared by the HTTP API and the CLI, plus the
//! axum router exposing it.
//!
//! | route                 | body                                   |
//! |-----------------------|----------------------------------------|
//! | `POST /v1/search`     | JSON [`SearchRequest`] or multipart     |
//! | `POST /v1/refine`     | JSON [`SearchRequest`] with `selected_ids` |
//! | `GET /v1/tiles/{id}`  | -                                      |
//! | `GET /v1/health`      | -                                      |

mod config;
mod engine;
mod http;

pub use config::{ServiceConfig, DEFAULT_BIND};
pub use engine::{
    aggregate_queries, EngineOptions, Health, RankMode, SearchEngine, SearchHit, SearchRequest,
    SearchResponse, Stage, TileMeta, DEFAULT_K, MAX_K,
};
pub use http::{router, serve, spawn, AppState, ServiceHandle};
