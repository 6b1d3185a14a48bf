//! In-process stand-in for an external embedding provider.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;

#[derive(Clone, Debug)]
pub enum Reply {
    /// `{"dimension": dim, "values": [fill; dim]}`.
    Fill {
        dim: usize,
        fill: f64,
    },
    /// Declares one dimension but sends another number of values.
    Mismatch {
        declared: usize,
        sent: usize,
    },
    /// Raw response body with status 200.
    Raw(String),
    Status(u16),
    /// Answers correctly after a delay.
    Slow {
        dim: usize,
        delay: Duration,
    },
    /// Values derived from the uploaded bytes, so different images map to
    /// different embeddings.
    Digest {
        dim: usize,
    },
}

#[derive(Default)]
struct Seen {
    content_types: Vec<String>,
    bodies: Vec<Vec<u8>>,
}

#[derive(Clone)]
struct ProviderState {
    reply: Arc<Mutex<Reply>>,
    hits: Arc<AtomicUsize>,
    seen: Arc<Mutex<Seen>>,
}

pub struct MockProvider {
    addr: SocketAddr,
    state: ProviderState,
    _shutdown: tokio::sync::oneshot::Sender<()>,
}

fn values_json(declared: usize, values: impl Iterator<Item = f64>) -> String {
    let vals: Vec<String> = values.map(|v| format!("{v:?}")).collect();
    format!(
        "{{\"dimension\": {declared}, \"values\": [{}]}}",
        vals.join(",")
    )
}

async fn embed(State(state): State<ProviderState>, headers: HeaderMap, body: Bytes) -> Response {
    state.hits.fetch_add(1, Ordering::SeqCst);
    {
        let mut seen = state.seen.lock().unwrap();
        seen.content_types.push(
            headers
                .get("content-type")
                .and_then(|v| v.to_str().ok())
                .unwrap_or("")
                .to_string(),
        );
        seen.bodies.push(body.to_vec());
    }
    let reply = state.reply.lock().unwrap().clone();
    match reply {
        Reply::Fill { dim, fill } => {
            values_json(dim, std::iter::repeat_n(fill, dim)).into_response()
        }
        Reply::Mismatch { declared, sent } => {
            values_json(declared, std::iter::repeat_n(0.5, sent)).into_response()
        }
        Reply::Raw(text) => text.into_response(),
        Reply::Status(code) => StatusCode::from_u16(code).unwrap().into_response(),
        Reply::Slow { dim, delay } => {
            tokio::time::sleep(delay).await;
            values_json(dim, std::iter::repeat_n(0.25, dim)).into_response()
        }
        Reply::Digest { dim } => {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for &b in body.iter() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
            let values = (0..dim).map(move |i| {
                let x =
                    h.rotate_left(i as u32 % 64) ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                (x % 2001) as f64 / 1000.0 - 1.0
            });
            values_json(dim, values).into_response()
        }
    }
}

impl MockProvider {
    pub async fn start(reply: Reply) -> Self {
        let state = ProviderState {
            reply: Arc::new(Mutex::new(reply)),
            hits: Arc::new(AtomicUsize::new(0)),
            seen: Arc::new(Mutex::new(Seen::default())),
        };
        let app = Router::new()
            .route("/embed", post(embed))
            .with_state(state.clone());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async move {
                    let _ = rx.await;
                })
                .await
                .unwrap();
        });
        MockProvider {
            addr,
            state,
            _shutdown: tx,
        }
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn hits(&self) -> usize {
        self.state.hits.load(Ordering::SeqCst)
    }

    pub fn set_reply(&self, reply: Reply) {
        *self.state.reply.lock().unwrap() = reply;
    }

    pub fn content_types(&self) -> Vec<String> {
        self.state.seen.lock().unwrap().content_types.clone()
    }

    pub fn bodies(&self) -> Vec<Vec<u8>> {
        self.state.seen.lock().unwrap().bodies.clone()
    }
}
