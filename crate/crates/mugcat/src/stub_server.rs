//! The stub backends served over HTTP, one port per stage.

use std::net::SocketAddr;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use mugcat_core::protocol::{Stage, WireReply};
use mugcat_core::stubs::{StubLatency, StubService};
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

pub(crate) fn reply(r: WireReply) -> Response {
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, "application/json")], r.body).into_response()
}

async fn handle(State(service): State<StubService>, method: Method, uri: Uri, body: Bytes) -> Response {
    let path = uri.path();
    let r = match method {
        Method::GET => service.handle_get(path).await,
        Method::POST => service.handle_post(path, &body).await,
        _ => WireReply::error(405, "method_not_allowed", format!("{method} not supported")),
    };
    reply(r)
}

pub fn stub_router(service: StubService) -> Router {
    Router::new().fallback(handle).with_state(service)
}

/// Running stub servers; dropping the handle does not stop them, call
/// [`StubServers::shutdown`].
pub struct StubServers {
    pub addrs: Vec<(Stage, SocketAddr)>,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl StubServers {
    pub fn addr(&self, stage: Stage) -> SocketAddr {
        self.addrs.iter().find(|(s, _)| *s == stage).expect("every stage is served").1
    }

    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        for t in self.tasks {
            let _ = t.await;
        }
    }

    /// Resolves once a shutdown has been requested and all servers exited.
    pub async fn wait(self) {
        for t in self.tasks {
            let _ = t.await;
        }
    }

    pub fn stopper(&self) -> watch::Sender<bool> {
        self.stop.clone()
    }
}

/// Binds every stage on consecutive ports from `port_base` in protocol
/// order (recognize, synthesize, caption, embed, image_features). Port 0
/// binds each stage to an ephemeral port instead.
pub async fn serve_stubs(host: &str, port_base: u16, latency: StubLatency) -> std::io::Result<StubServers> {
    let (stop, rx) = watch::channel(false);
    let mut addrs = Vec::new();
    let mut tasks = Vec::new();
    for (i, stage) in Stage::ALL.into_iter().enumerate() {
        let port = if port_base == 0 { 0 } else { port_base + i as u16 };
        let listener = TcpListener::bind((host, port)).await?;
        addrs.push((stage, listener.local_addr()?));
        let app = stub_router(StubService::new(stage).with_latency(latency));
        let mut rx = rx.clone();
        tasks.push(tokio::spawn(async move {
            let shutdown = async move {
                let _ = rx.wait_for(|s| *s).await;
            };
            if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
                tracing::error!("stub server for {stage} failed: {e}");
            }
        }));
    }
    Ok(StubServers { addrs, stop, tasks })
}
