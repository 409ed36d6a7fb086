//! REST + WebSocket gateway: sessions feed frames into conversations, turns
//! are exposed for review and human override, and every pipeline event is
//! logged per session with a sequence number.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mugcat_core::bench::BenchReport;
use mugcat_core::config::{validate, PipelineConfig, ValidatedConfig};
use mugcat_core::domain::{ConversationTurn, Frame};
use mugcat_core::ingest::{self, FrameSource, SourceMode};
use mugcat_core::pipeline::{Conversation, Engine, EventSink, PipelineEvent, TurnError};
use mugcat_core::protocol::{self, ProtocolError, Stage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;

const HANDSHAKE_DEADLINE: Duration = Duration::from_secs(10);
const DEFAULT_SESSION_FPS: f64 = 25.0;

/// One entry of a session's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub kind: String,
    pub payload: Value,
}

#[derive(Debug, Clone, Default)]
pub struct GatewayOptions {
    pub config: ValidatedConfig,
    /// Defer backend handshakes to first use.
    pub lazy: bool,
    pub transcript_dir: Option<PathBuf>,
    pub reports: Vec<BenchReport>,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("backend unreachable: {0}")]
    BackendUnreachable(#[from] ProtocolError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server error: {0}")]
    Serve(std::io::Error),
}

struct SessionInner {
    conversation: Conversation,
    config_version: u64,
    next_frame: u64,
}

struct Session {
    id: String,
    source: FrameSource,
    inner: tokio::sync::Mutex<SessionInner>,
    log: Mutex<Vec<SessionEvent>>,
    live: broadcast::Sender<SessionEvent>,
}

impl Session {
    fn record(&self, event: &PipelineEvent) -> SessionEvent {
        let value = serde_json::to_value(event).expect("events serialize");
        let mut log = self.log.lock().expect("event log");
        let ev = SessionEvent {
            seq: log.len() as u64 + 1,
            kind: event.kind().to_string(),
            payload: value.get("payload").cloned().unwrap_or(Value::Null),
        };
        log.push(ev.clone());
        let _ = self.live.send(ev.clone());
        ev
    }

    fn events_since(&self, since: u64) -> Vec<SessionEvent> {
        self.log.lock().expect("event log").iter().filter(|e| e.seq > since).cloned().collect()
    }
}

struct TurnRecord {
    session: Arc<Session>,
    turn: ConversationTurn,
}

/// Shared gateway state.
pub struct Gateway {
    engine: Arc<Engine>,
    config: RwLock<(u64, ValidatedConfig)>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    turns: RwLock<HashMap<u64, TurnRecord>>,
    reports: RwLock<Vec<BenchReport>>,
    transcript_dir: Option<PathBuf>,
    next_session: AtomicU64,
}

impl Gateway {
    pub async fn new(engine: Arc<Engine>, options: GatewayOptions) -> Result<Arc<Self>, GatewayError> {
        if !options.lazy {
            engine.handshake(HANDSHAKE_DEADLINE).await?;
        }
        Ok(Arc::new(Self {
            engine,
            config: RwLock::new((0, options.config)),
            sessions: RwLock::new(HashMap::new()),
            turns: RwLock::new(HashMap::new()),
            reports: RwLock::new(options.reports),
            transcript_dir: options.transcript_dir,
            next_session: AtomicU64::new(1),
        }))
    }

    pub fn router(self: &Arc<Self>) -> Router {
        Router::new()
            .route("/v1/health", get(health))
            .route("/v1/config", get(get_config).put(put_config))
            .route("/v1/sessions", post(create_session))
            .route("/v1/sessions/{id}/frames", post(post_frames))
            .route("/v1/sessions/{id}/flush", post(flush))
            .route("/v1/sessions/{id}/events", get(events))
            .route("/v1/sessions/{id}/live", get(live))
            .route("/v1/turns/{id}", get(get_turn))
            .route("/v1/turns/{id}/override", post(override_turn))
            .route("/v1/bench/reports", get(bench_reports).post(add_bench_report))
            .with_state(self.clone())
    }

    pub fn config(&self) -> ValidatedConfig {
        self.config.read().expect("config lock").1.clone()
    }

    async fn ensure_handshaken(&self) -> Result<(), ProtocolError> {
        let b = self.engine.backends();
        let missing = [Stage::Recognize, Stage::Synthesize, Stage::Caption, Stage::Embed]
            .into_iter()
            .filter(|&s| b.get(s).capabilities().is_none())
            .collect::<Vec<_>>();
        if missing.is_empty() {
            return Ok(());
        }
        b.handshake(&missing, HANDSHAKE_DEADLINE).await
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id}")))
    }

    /// Hands the latest global config to the conversation; it takes effect
    /// when the next turn starts.
    fn sync_config(&self, inner: &mut SessionInner) {
        let (version, config) = &*self.config.read().expect("config lock");
        if *version != inner.config_version {
            inner.conversation.set_config(config.clone());
            inner.config_version = *version;
        }
    }

    async fn dump_transcript(&self, session: &Session) {
        let Some(dir) = &self.transcript_dir else { return };
        let events = session.events_since(0);
        let path = dir.join(format!("{}.json", session.id));
        let body = serde_json::to_vec(&events).expect("events serialize");
        if let Err(e) = tokio::fs::write(&path, body).await {
            tracing::warn!("writing transcript {}: {e}", path.display());
        }
    }
}

/// Routes pipeline events into a session log and indexes finished turns.
struct SessionSink<'a> {
    gateway: &'a Gateway,
    session: &'a Arc<Session>,
}

impl EventSink for SessionSink<'_> {
    fn emit(&mut self, event: PipelineEvent) {
        if let PipelineEvent::SelectionMade { turn } = &event {
            self.gateway
                .turns
                .write()
                .expect("turns lock")
                .insert(turn.turn_id(), TurnRecord { session: self.session.clone(), turn: turn.clone() });
        }
        self.session.record(&event);
    }
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

impl From<TurnError> for ApiError {
    fn from(e: TurnError) -> Self {
        let (status, code) = match &e {
            TurnError::EmptyKeywords => (StatusCode::UNPROCESSABLE_ENTITY, "empty_keywords"),
            TurnError::StageFailed { .. } => (StatusCode::BAD_GATEWAY, "stage_failed"),
            TurnError::TurnTimeout { .. } => (StatusCode::GATEWAY_TIMEOUT, "turn_timeout"),
            TurnError::Invalid(_) => (StatusCode::INTERNAL_SERVER_ERROR, "invalid_turn"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<ProtocolError> for ApiError {
    fn from(e: ProtocolError) -> Self {
        Self::new(StatusCode::BAD_GATEWAY, "backend_unreachable", e.to_string())
    }
}

fn json_response<T: Serialize>(status: StatusCode, value: &T) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], protocol::encode(value)).into_response()
}

// ---------------------------------------------------------------------------
// Handlers
// ---------------------------------------------------------------------------

async fn health(State(gw): State<Arc<Gateway>>) -> Response {
    let b = gw.engine.backends();
    let mut stages = Vec::new();
    let mut all_ok = true;
    for stage in Stage::ALL {
        let client = b.get(stage);
        let caps = match client.capabilities() {
            Some(c) => Ok(c),
            None => client.handshake(Duration::from_secs(2)).await,
        };
        let entry = match caps {
            Ok(c) => json!({ "stage": stage, "endpoint": client.endpoint(), "ok": true, "name": c.name, "version": c.version }),
            Err(e) => {
                all_ok = false;
                json!({ "stage": stage, "endpoint": client.endpoint(), "ok": false, "error": e.to_string() })
            }
        };
        stages.push(entry);
    }
    let status = if all_ok { "ok" } else { "degraded" };
    json_response(StatusCode::OK, &json!({ "status": status, "stages": stages }))
}

async fn get_config(State(gw): State<Arc<Gateway>>) -> Response {
    json_response(StatusCode::OK, &gw.config())
}

async fn put_config(State(gw): State<Arc<Gateway>>, body: Bytes) -> Result<Response, ApiError> {
    let patch: PipelineConfig =
        protocol::decode(&body).map_err(|e| ApiError::unprocessable("invalid_config", e.to_string()))?;
    let mut guard = gw.config.write().expect("config lock");
    let merged = PipelineConfig::from(&guard.1).merged(&patch);
    let validated = validate(&merged).map_err(|e| ApiError::unprocessable("invalid_config", e.to_string()))?;
    *guard = (guard.0 + 1, validated.clone());
    Ok(json_response(StatusCode::OK, &validated))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    #[serde(default)]
    source_id: Option<String>,
    #[serde(default)]
    fps: Option<f64>,
}

async fn create_session(State(gw): State<Arc<Gateway>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = if body.iter().all(u8::is_ascii_whitespace) {
        CreateSession::default()
    } else {
        protocol::decode(&body).map_err(|e| ApiError::unprocessable("bad_request", e.to_string()))?
    };
    let n = gw.next_session.fetch_add(1, Ordering::SeqCst);
    let id = format!("s{n}");
    let source_id = req.source_id.unwrap_or_else(|| id.clone());
    let source = FrameSource::new(source_id, SourceMode::Live, req.fps.unwrap_or(DEFAULT_SESSION_FPS))
        .map_err(|e| ApiError::unprocessable("bad_request", e.to_string()))?;
    let (version, config) = gw.config.read().expect("config lock").clone();
    let conversation = Conversation::new(gw.engine.clone(), config, source.clone())
        .map_err(|e| ApiError::unprocessable("invalid_config", e.to_string()))?;
    let session = Arc::new(Session {
        id: id.clone(),
        source: source.clone(),
        inner: tokio::sync::Mutex::new(SessionInner { conversation, config_version: version, next_frame: 0 }),
        log: Mutex::new(Vec::new()),
        live: broadcast::channel(256).0,
    });
    gw.sessions.write().expect("sessions lock").insert(id.clone(), session);
    Ok(json_response(
        StatusCode::CREATED,
        &json!({ "session_id": id, "source_id": source.source_id, "fps": source.fps }),
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameBatch {
    frames: Vec<Frame>,
    #[serde(default)]
    debug_label_hint: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct FramesQuery {
    #[serde(default)]
    hint: Option<String>,
}

/// Binary `.mclip` chunks are renumbered to continue the session's frame
/// sequence; JSON batches keep the indices the client sent.
async fn post_frames(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<String>,
    Query(q): Query<FramesQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let session = gw.session(&id)?;
    gw.ensure_handshaken().await?;
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let mut inner = session.inner.lock().await;
    let (frames, hint) = if is_json {
        let batch: FrameBatch =
            protocol::decode(&body).map_err(|e| ApiError::unprocessable("bad_frames", e.to_string()))?;
        (batch.frames, batch.debug_label_hint.or(q.hint))
    } else {
        let clip = ingest::decode_mclip(&body, &session.source.source_id)
            .map_err(|e| ApiError::unprocessable("bad_frames", e.to_string()))?;
        let start = inner.next_frame;
        let frames = clip
            .frames()
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let idx = start + i as u64;
                f.renumbered(idx, ingest::timestamp_for(idx, session.source.fps))
            })
            .collect();
        (frames, q.hint)
    };
    let count = frames.len();
    if let Some(last) = frames.last() {
        inner.next_frame = inner.next_frame.max(last.index() + 1);
    }
    gw.sync_config(&mut inner);
    let mut sink = SessionSink { gateway: &gw, session: &session };
    inner
        .conversation
        .push_frames(frames, hint, &mut sink)
        .await
        .map_err(|e| ApiError::unprocessable("bad_frames", e.to_string()))?;
    let body = json!({
        "accepted_frames": count,
        "pending_frames": inner.conversation.pending_frames(),
        "keywords": inner.conversation.keywords(),
    });
    drop(inner);
    gw.dump_transcript(&session).await;
    Ok(json_response(StatusCode::ACCEPTED, &body))
}

async fn flush(State(gw): State<Arc<Gateway>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = gw.session(&id)?;
    gw.ensure_handshaken().await?;
    let mut inner = session.inner.lock().await;
    gw.sync_config(&mut inner);
    let mut sink = SessionSink { gateway: &gw, session: &session };
    let result = inner.conversation.flush(&mut sink).await;
    drop(inner);
    gw.dump_transcript(&session).await;
    Ok(json_response(StatusCode::OK, &result?))
}

#[derive(Debug, Default, Deserialize)]
struct SinceQuery {
    #[serde(default)]
    since: u64,
}

async fn events(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<String>,
    Query(q): Query<SinceQuery>,
) -> Result<Response, ApiError> {
    let session = gw.session(&id)?;
    Ok(json_response(StatusCode::OK, &session.events_since(q.since)))
}

async fn live(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<String>,
    Query(q): Query<SinceQuery>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let session = gw.session(&id)?;
    Ok(ws.on_upgrade(move |socket| stream_events(socket, session, q.since)))
}

/// Replays the backlog after `since`, then forwards live events; seq
/// numbers never repeat on one socket.
async fn stream_events(mut socket: WebSocket, session: Arc<Session>, since: u64) {
    let mut rx = session.live.subscribe();
    let mut last = since;
    for ev in session.events_since(since) {
        last = ev.seq;
        if socket.send(Message::Text(String::from_utf8(protocol::encode(&ev)).expect("utf8").into())).await.is_err() {
            return;
        }
    }
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(ev) if ev.seq > last => {
                    last = ev.seq;
                    let text = String::from_utf8(protocol::encode(&ev)).expect("utf8");
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        return;
                    }
                }
                Ok(_) => {}
                // slow consumer: catch up from the log
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    for ev in session.events_since(last) {
                        last = ev.seq;
                        let text = String::from_utf8(protocol::encode(&ev)).expect("utf8");
                        if socket.send(Message::Text(text.into())).await.is_err() {
                            return;
                        }
                    }
                }
                Err(broadcast::error::RecvError::Closed) => return,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

async fn get_turn(State(gw): State<Arc<Gateway>>, Path(id): Path<u64>) -> Result<Response, ApiError> {
    let turns = gw.turns.read().expect("turns lock");
    let rec = turns
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_turn", format!("no turn {id}")))?;
    Ok(json_response(StatusCode::OK, &rec.turn))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OverrideBody {
    index: usize,
}

async fn override_turn(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<u64>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: OverrideBody =
        protocol::decode(&body).map_err(|e| ApiError::unprocessable("bad_request", e.to_string()))?;
    let (turn, session) = {
        let mut turns = gw.turns.write().expect("turns lock");
        let rec = turns
            .get_mut(&id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_turn", format!("no turn {id}")))?;
        let turn = rec
            .turn
            .clone()
            .with_override(req.index)
            .map_err(|e| ApiError::unprocessable("index_out_of_range", e.to_string()))?;
        rec.turn = turn.clone();
        (turn, rec.session.clone())
    };
    session.record(&PipelineEvent::TurnOverridden { turn: turn.clone() });
    gw.dump_transcript(&session).await;
    Ok(json_response(StatusCode::OK, &turn))
}

async fn bench_reports(State(gw): State<Arc<Gateway>>) -> Response {
    let reports = gw.reports.read().expect("reports lock").clone();
    json_response(StatusCode::OK, &reports)
}

async fn add_bench_report(State(gw): State<Arc<Gateway>>, body: Bytes) -> Result<Response, ApiError> {
    let report: BenchReport =
        protocol::decode(&body).map_err(|e| ApiError::unprocessable("bad_report", e.to_string()))?;
    gw.reports.write().expect("reports lock").push(report.clone());
    Ok(json_response(StatusCode::CREATED, &report))
}

/// Serves until `shutdown` resolves; requests in flight (including running
/// turns) complete before this returns.
pub async fn serve(
    listener: tokio::net::TcpListener,
    gateway: Arc<Gateway>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), GatewayError> {
    axum::serve(listener, gateway.router()).with_graceful_shutdown(shutdown).await.map_err(GatewayError::Serve)
}
